//! Evaluation: Dice similarity coefficient, 95th-percentile Hausdorff
//! distance over mask boundaries, prompt placement (distance-transform
//! interior point or uniform random), and per-class / per-volume reporting.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::LabeledSlice;
use crate::error::{Error, Result};
use crate::model::{Model, PointPrompt};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// Exact Euclidean distance transform (Felzenszwalb & Huttenlocher)
// ---------------------------------------------------------------------------

const INF: f64 = f64::INFINITY;

/// 1-D squared-distance lower envelope with sample spacing `step`.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = -INF;
    z[1] = INF;
    let coord = |i: usize| i as f64 * step;
    for q in 1..n {
        if f[q] == INF && f[v[k]] == INF {
            // parabola at q cannot beat an infinite envelope anywhere finite
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = if f[q] == INF {
                INF
            } else if f[p] == INF {
                -INF
            } else {
                ((f[q] + coord(q).powi(2)) - (f[p] + coord(p).powi(2)))
                    / (2.0 * coord(q) - 2.0 * coord(p))
            };
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            v[k] = q;
        } else {
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = INF;
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < coord(q) {
            k += 1;
        }
        let p = v[k];
        out[q] = if f[p] == INF {
            INF
        } else {
            (coord(q) - coord(p)).powi(2) + f[p]
        };
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed,
/// with anisotropic pixel spacing `(row_step, col_step)`. Pixels with no
/// seed anywhere are infinity.
pub fn squared_edt(seeds: &Array2<bool>, spacing: (f64, f64)) -> Array2<f64> {
    let (h, w) = seeds.dim();
    let mut d = Array2::from_shape_fn((h, w), |(r, c)| if seeds[[r, c]] { 0.0 } else { INF });
    let mut buf_in = vec![0.0f64; h.max(w)];
    let mut buf_out = vec![0.0f64; h.max(w)];
    // columns
    for c in 0..w {
        for r in 0..h {
            buf_in[r] = d[[r, c]];
        }
        edt_1d(&buf_in[..h], spacing.0, &mut buf_out[..h]);
        for r in 0..h {
            d[[r, c]] = buf_out[r];
        }
    }
    // rows
    for r in 0..h {
        for c in 0..w {
            buf_in[c] = d[[r, c]];
        }
        edt_1d(&buf_in[..w], spacing.1, &mut buf_out[..w]);
        for c in 0..w {
            d[[r, c]] = buf_out[c];
        }
    }
    d
}

// ---------------------------------------------------------------------------
// Masks, boundaries, metrics
// ---------------------------------------------------------------------------

/// Foreground pixels whose 4-neighborhood touches background; pixels on the
/// image border count (outside the image is background).
pub fn boundary_pixels(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] {
                continue;
            }
            let edge = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            let interiorless = edge
                || !mask[[r - 1, c]]
                || !mask[[r + 1, c]]
                || !mask[[r, c - 1]]
                || !mask[[r, c + 1]];
            if interiorless {
                out.push((r, c));
            }
        }
    }
    out
}

/// Dice similarity coefficient; two empty masks agree perfectly (1.0).
pub fn dsc(pred: &Array2<bool>, gt: &Array2<bool>) -> f64 {
    assert_eq!(pred.dim(), gt.dim(), "mask shapes must match");
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (a, b) in pred.iter().zip(gt.iter()) {
        p += usize::from(*a);
        g += usize::from(*b);
        inter += usize::from(*a && *b);
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Linear-interpolation percentile of an unsorted sample, q in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        let frac = rank - lo as f64;
        v[lo] * (1.0 - frac) + v[hi] * frac
    }
}

/// 95th-percentile Hausdorff distance between mask boundaries, pooling the
/// nearest-neighbor distances of both directions before taking the
/// percentile. Both masks empty yields `Some(0.0)`; exactly one empty is
/// undefined and yields `None` (excluded from aggregate means).
pub fn hd95(pred: &Array2<bool>, gt: &Array2<bool>, spacing: (f64, f64)) -> Option<f64> {
    assert_eq!(pred.dim(), gt.dim(), "mask shapes must match");
    let pb = boundary_pixels(pred);
    let gb = boundary_pixels(gt);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return Some(0.0),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let seed_map = |pts: &[(usize, usize)]| {
        let mut s = Array2::from_elem(pred.dim(), false);
        for &(r, c) in pts {
            s[[r, c]] = true;
        }
        s
    };
    let d_to_gt = squared_edt(&seed_map(&gb), spacing);
    let d_to_pred = squared_edt(&seed_map(&pb), spacing);
    let mut pooled = Vec::with_capacity(pb.len() + gb.len());
    for &(r, c) in &pb {
        pooled.push(d_to_gt[[r, c]].sqrt());
    }
    for &(r, c) in &gb {
        pooled.push(d_to_pred[[r, c]].sqrt());
    }
    Some(percentile(&pooled, 95.0))
}

/// The foreground pixel deepest inside the mask: argmax of the distance to
/// the nearest background pixel, counting everything outside the image as
/// background. Ties break to the lexicographically smallest (row, col).
/// `None` for an empty mask.
pub fn interior_point(mask: &Array2<bool>) -> Option<(usize, usize)> {
    let (h, w) = mask.dim();
    if !mask.iter().any(|&v| v) {
        return None;
    }
    // pad with a one-pixel background ring so the border counts as background
    let mut seeds = Array2::from_elem((h + 2, w + 2), true);
    for r in 0..h {
        for c in 0..w {
            seeds[[r + 1, c + 1]] = !mask[[r, c]];
        }
    }
    // unit spacing keeps squared distances integer-valued, so the argmax
    // comparison below is exact
    let d = squared_edt(&seeds, (1.0, 1.0));
    let mut best = (0usize, 0usize);
    let mut best_d = -1.0f64;
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] && d[[r + 1, c + 1]] > best_d {
                best_d = d[[r + 1, c + 1]];
                best = (r, c);
            }
        }
    }
    Some(best)
}

/// Uniformly random foreground pixel; `None` for an empty mask.
pub fn random_point<R: Rng>(mask: &Array2<bool>, rng: &mut R) -> Option<(usize, usize)> {
    let pixels: Vec<(usize, usize)> = mask
        .indexed_iter()
        .filter(|(_, &v)| v)
        .map(|(ix, _)| ix)
        .collect();
    if pixels.is_empty() {
        None
    } else {
        Some(pixels[rng.gen_range(0..pixels.len())])
    }
}

// ---------------------------------------------------------------------------
// Evaluation harness
// ---------------------------------------------------------------------------

/// How the evaluation point prompt is placed within each ground-truth mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PromptStrategy {
    Interior,
    Random { seed: u64 },
}

/// Anything that turns (image, point prompt) into a binary mask.
pub trait MaskPredictor<T: Scalar> {
    fn predict(&self, image: &Array2<T>, prompt: &PointPrompt) -> Result<Array2<u8>>;
}

impl<T: Scalar> MaskPredictor<T> for Model<T> {
    fn predict(&self, image: &Array2<T>, prompt: &PointPrompt) -> Result<Array2<u8>> {
        self.predict_mask(image, prompt)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseResult {
    pub volume_id: u32,
    pub slice_index: u32,
    pub class_id: u8,
    pub prompt_row: usize,
    pub prompt_col: usize,
    pub dsc: f64,
    /// `None` when HD95 is undefined (exactly one empty boundary).
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub num_cases: usize,
    pub mean_dsc: f64,
    pub mean_hd95: Option<f64>,
    pub hd95_excluded: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub volume_id: u32,
    pub num_cases: usize,
    pub mean_dsc: f64,
    pub mean_hd95: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: PromptStrategy,
    pub num_cases: usize,
    pub mean_dsc: f64,
    pub mean_hd95: Option<f64>,
    pub hd95_excluded: usize,
    pub per_class: Vec<ClassMetrics>,
    pub per_volume: Vec<VolumeMetrics>,
    pub cases: Vec<CaseResult>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Run one case per (slice, present class): place the prompt inside the
/// ground-truth mask, predict, and score DSC and HD95 in physical units.
pub fn evaluate<T: Scalar, P: MaskPredictor<T>>(
    predictor: &P,
    slices: &[LabeledSlice<T>],
    strategy: PromptStrategy,
) -> Result<MetricsReport> {
    let mut rng = match strategy {
        PromptStrategy::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        PromptStrategy::Interior => None,
    };
    let mut cases = Vec::new();
    for slice in slices {
        for class_id in slice.classes_present() {
            let gt = slice.label.mapv(|v| v == class_id);
            let point = match (&strategy, rng.as_mut()) {
                (PromptStrategy::Interior, _) => interior_point(&gt),
                (PromptStrategy::Random { .. }, Some(rng)) => random_point(&gt, rng),
                _ => unreachable!(),
            }
            .expect("classes_present implies non-empty mask");
            let prompt = PointPrompt {
                row: point.0,
                col: point.1,
                class_id,
            };
            let pred_u8 = predictor.predict(&slice.image, &prompt)?;
            let pred = pred_u8.mapv(|v| v != 0);
            cases.push(CaseResult {
                volume_id: slice.meta.volume_id,
                slice_index: slice.meta.slice_index,
                class_id,
                prompt_row: prompt.row,
                prompt_col: prompt.col,
                dsc: dsc(&pred, &gt),
                hd95: hd95(&pred, &gt, slice.meta.spacing),
            });
        }
    }
    if cases.is_empty() {
        return Err(Error::InvalidInput(
            "evaluation set has no slices with foreground".into(),
        ));
    }

    let agg = |subset: &[&CaseResult]| {
        let mean_dsc = mean(subset.iter().map(|c| c.dsc)).unwrap();
        let mean_hd95 = mean(subset.iter().filter_map(|c| c.hd95));
        let excluded = subset.iter().filter(|c| c.hd95.is_none()).count();
        (mean_dsc, mean_hd95, excluded)
    };

    let all: Vec<&CaseResult> = cases.iter().collect();
    let (mean_dsc, mean_hd95, hd95_excluded) = agg(&all);

    let mut by_class: BTreeMap<u8, Vec<&CaseResult>> = BTreeMap::new();
    let mut by_volume: BTreeMap<u32, Vec<&CaseResult>> = BTreeMap::new();
    for c in &cases {
        by_class.entry(c.class_id).or_default().push(c);
        by_volume.entry(c.volume_id).or_default().push(c);
    }
    let per_class = by_class
        .iter()
        .map(|(&class_id, subset)| {
            let (d, h, e) = agg(subset);
            ClassMetrics {
                class_id,
                num_cases: subset.len(),
                mean_dsc: d,
                mean_hd95: h,
                hd95_excluded: e,
            }
        })
        .collect();
    let per_volume = by_volume
        .iter()
        .map(|(&volume_id, subset)| {
            let (d, h, _) = agg(subset);
            VolumeMetrics {
                volume_id,
                num_cases: subset.len(),
                mean_dsc: d,
                mean_hd95: h,
            }
        })
        .collect();

    Ok(MetricsReport {
        strategy,
        num_cases: cases.len(),
        mean_dsc,
        mean_hd95,
        hd95_excluded,
        per_class,
        per_volume,
        cases,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "n/a".to_string(),
    }
}

/// Write `metrics.txt` (aligned summary), `metrics.csv` (per-case rows with
/// full-precision floats), and `metrics.json` under `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut txt = String::new();
    txt.push_str(&format!(
        "cases: {}  mean_dsc: {:.4}  mean_hd95: {}  hd95_excluded: {}\n\n",
        report.num_cases,
        report.mean_dsc,
        report
            .mean_hd95
            .map_or("n/a".to_string(), |v| format!("{v:.4}")),
        report.hd95_excluded
    ));
    txt.push_str(&format!(
        "{:>8} {:>8} {:>10} {:>10} {:>9}\n",
        "class", "cases", "mean_dsc", "mean_hd95", "excluded"
    ));
    for c in &report.per_class {
        txt.push_str(&format!(
            "{:>8} {:>8} {:>10.4} {:>10} {:>9}\n",
            c.class_id,
            c.num_cases,
            c.mean_dsc,
            c.mean_hd95.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            c.hd95_excluded
        ));
    }
    txt.push('\n');
    txt.push_str(&format!(
        "{:>8} {:>8} {:>10} {:>10}\n",
        "volume", "cases", "mean_dsc", "mean_hd95"
    ));
    for v in &report.per_volume {
        txt.push_str(&format!(
            "{:>8} {:>8} {:>10.4} {:>10}\n",
            v.volume_id,
            v.num_cases,
            v.mean_dsc,
            v.mean_hd95.map_or("n/a".to_string(), |x| format!("{x:.4}"))
        ));
    }
    std::fs::write(dir.join("metrics.txt"), txt)?;

    let mut csv = std::fs::File::create(dir.join("metrics.csv"))?;
    writeln!(
        csv,
        "volume_id,slice_index,class_id,prompt_row,prompt_col,dsc,hd95"
    )?;
    for c in &report.cases {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            c.volume_id,
            c.slice_index,
            c.class_id,
            c.prompt_row,
            c.prompt_col,
            c.dsc,
            fmt_opt(c.hd95)
        )?;
    }

    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}
