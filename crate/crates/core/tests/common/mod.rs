//! Brute-force oracles for the integration suites. Pure, deterministic, and
//! independent of the library's metric and adapter code paths.

#![allow(dead_code)]

use ndarray::{Array1, Array2};

/// (W + scaling * B A) x, materialized densely.
pub fn dense_lora_forward(
    w: &Array2<f64>,
    a: &Array2<f64>,
    b: &Array2<f64>,
    scaling: f64,
    x: &Array1<f64>,
) -> Array1<f64> {
    assert_eq!(w.ncols(), x.len(), "shape mismatch");
    assert_eq!(a.ncols(), w.ncols(), "shape mismatch");
    assert_eq!(b.nrows(), w.nrows(), "shape mismatch");
    assert_eq!(b.ncols(), a.nrows(), "shape mismatch");
    let w_hat = w + &(b.dot(a) * scaling);
    w_hat.dot(x)
}

/// Dice similarity from first principles; both-empty convention is 1.0.
pub fn brute_dsc(pred: &Array2<bool>, gt: &Array2<bool>) -> f64 {
    let p: usize = pred.iter().map(|&v| usize::from(v)).sum();
    let g: usize = gt.iter().map(|&v| usize::from(v)).sum();
    let inter: usize = pred
        .iter()
        .zip(gt.iter())
        .map(|(&a, &b)| usize::from(a && b))
        .sum();
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Boundary by definition: foreground pixels with a 4-neighbor that is
/// background or out of image bounds.
pub fn brute_boundary(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] {
                continue;
            }
            let neighbors = [
                (r as i64 - 1, c as i64),
                (r as i64 + 1, c as i64),
                (r as i64, c as i64 - 1),
                (r as i64, c as i64 + 1),
            ];
            let touches_bg = neighbors.iter().any(|&(nr, nc)| {
                nr < 0
                    || nc < 0
                    || nr >= h as i64
                    || nc >= w as i64
                    || !mask[[nr as usize, nc as usize]]
            });
            if touches_bg {
                out.push((r, c));
            }
        }
    }
    out
}

/// All-pairs pooled bidirectional nearest distances between two boundary
/// point sets, then the q-th percentile with linear interpolation.
pub fn brute_hd_percentile(
    a_pts: &[(usize, usize)],
    b_pts: &[(usize, usize)],
    q: f64,
    spacing: (f64, f64),
) -> f64 {
    assert!(!a_pts.is_empty() && !b_pts.is_empty());
    let nearest = |p: (usize, usize), set: &[(usize, usize)]| {
        set.iter()
            .map(|&(r, c)| {
                let dr = (p.0 as f64 - r as f64) * spacing.0;
                let dc = (p.1 as f64 - c as f64) * spacing.1;
                (dr * dr + dc * dc).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mut pooled: Vec<f64> = a_pts.iter().map(|&p| nearest(p, b_pts)).collect();
    pooled.extend(b_pts.iter().map(|&p| nearest(p, a_pts)));
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = q / 100.0 * (pooled.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        pooled[lo]
    } else {
        let frac = rank - lo as f64;
        pooled[lo] * (1.0 - frac) + pooled[hi] * frac
    }
}

/// HD95 with the library's empty-mask conventions, entirely from the
/// brute-force pieces above.
pub fn brute_hd95(pred: &Array2<bool>, gt: &Array2<bool>, spacing: (f64, f64)) -> Option<f64> {
    let a = brute_boundary(pred);
    let b = brute_boundary(gt);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Some(0.0),
        (true, false) | (false, true) => None,
        _ => Some(brute_hd_percentile(&a, &b, 95.0, spacing)),
    }
}

/// Most-interior pixel by full scan: maximize the exact integer squared
/// distance to the nearest background pixel, counting everything outside the
/// image as background. Ties break to the smallest (row, col).
pub fn brute_distance_argmax(mask: &Array2<bool>) -> Option<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut best: Option<((usize, usize), i64)> = None;
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] {
                continue;
            }
            let mut d = i64::MAX;
            for br in -1..=(h as i64) {
                for bc in -1..=(w as i64) {
                    let inside = (0..h as i64).contains(&br) && (0..w as i64).contains(&bc);
                    let is_bg = if inside {
                        !mask[[br as usize, bc as usize]]
                    } else {
                        true
                    };
                    if is_bg {
                        let dr = r as i64 - br;
                        let dc = c as i64 - bc;
                        d = d.min(dr * dr + dc * dc);
                    }
                }
            }
            if best.map_or(true, |(_, bd)| d > bd) {
                best = Some(((r, c), d));
            }
        }
    }
    best.map(|(p, _)| p)
}
