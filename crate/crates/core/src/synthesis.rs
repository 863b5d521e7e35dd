//! Exemplar-guided data synthesis: cut transformed exemplar foregrounds and
//! paste them onto transformed background slices, single-class or
//! category-wise, to build a fixed-size synthesized training dataset.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{
    save_manifest, DatasetManifest, LabeledSlice, SliceMeta, MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::transforms::{apply_transform, sample_transform, TransformRanges, TransformSpec};

const JITTER_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisMode {
    /// Whole foreground moves as one cutout under one transform.
    SingleClass,
    /// Each class is cut out, independently transformed, and merged.
    CategoryWise,
}

/// Configuration for [`build_dataset`]; mirrors the `synthesize` CLI config JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub num_samples: usize,
    #[serde(default)]
    pub ranges: TransformRanges,
    /// Max paste-position jitter in pixels (uniform per axis).
    pub position_jitter: i64,
    pub mode: SynthesisMode,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            num_samples: 100,
            ranges: TransformRanges::default(),
            position_jitter: 10,
            mode: SynthesisMode::SingleClass,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be > 0".into()));
        }
        if self.position_jitter < 0 {
            return Err(Error::Config("position_jitter must be >= 0".into()));
        }
        self.ranges.validate()
    }
}

/// A transformed organ cutout ready to paste.
#[derive(Debug, Clone)]
pub struct OrganCutout<T: Scalar> {
    pub image: Array2<T>,
    /// Transformed label map; nonzero pixels form the paste mask.
    pub label: Array2<u8>,
    /// Class id for single-class cutouts; 0 for whole-foreground cutouts.
    pub class_id: u8,
    /// Paste offset (row, col) applied to every mask pixel.
    pub offset: (i64, i64),
}

fn mask_centroid(mask: &Array2<bool>) -> Option<(f64, f64)> {
    let mut n = 0usize;
    let (mut sr, mut sc) = (0.0, 0.0);
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            n += 1;
            sr += r as f64;
            sc += c as f64;
        }
    }
    if n == 0 {
        None
    } else {
        Some((sr / n as f64, sc / n as f64))
    }
}

/// Cut class `class_id` (or all foreground when `None`) out of an exemplar,
/// transform it, and anchor it back at the original centroid plus jitter.
///
/// The foreground test runs on the transformed mask, not on image intensity.
fn make_cutout<T: Scalar, R: Rng>(
    exemplar: &LabeledSlice<T>,
    class_id: Option<u8>,
    spec: &TransformSpec<T>,
    position_jitter: i64,
    rng: &mut R,
) -> Result<OrganCutout<T>> {
    let (h, w) = exemplar.image.dim();
    let selected = |v: u8| match class_id {
        Some(k) => v == k,
        None => v != 0,
    };
    let mut cut_image = Array2::<T>::zeros((h, w));
    let mut cut_label = Array2::<u8>::zeros((h, w));
    for ((r, c), &v) in exemplar.label.indexed_iter() {
        if selected(v) {
            cut_image[[r, c]] = exemplar.image[[r, c]];
            cut_label[[r, c]] = v;
        }
    }
    let orig_centroid = mask_centroid(&cut_label.mapv(|v| v != 0)).ok_or_else(|| {
        Error::InvalidInput(format!(
            "exemplar has no foreground for class {class_id:?}"
        ))
    })?;
    let cut = LabeledSlice {
        image: cut_image,
        label: cut_label,
        meta: exemplar.meta.clone(),
    };
    let transformed = apply_transform(&cut, spec);
    let mask = transformed.label.mapv(|v| v != 0);
    let new_centroid = mask_centroid(&mask).ok_or_else(|| {
        Error::InvalidInput("transformed foreground shrank to nothing".into())
    })?;
    let anchor = (
        (orig_centroid.0 - new_centroid.0).round() as i64,
        (orig_centroid.1 - new_centroid.1).round() as i64,
    );
    // Resample jitter until at least one foreground pixel lands in frame.
    for _ in 0..=JITTER_RETRIES {
        let jitter = if position_jitter == 0 {
            (0, 0)
        } else {
            (
                rng.gen_range(-position_jitter..=position_jitter),
                rng.gen_range(-position_jitter..=position_jitter),
            )
        };
        let offset = (anchor.0 + jitter.0, anchor.1 + jitter.1);
        let visible = mask.indexed_iter().any(|((r, c), &m)| {
            m && {
                let rr = r as i64 + offset.0;
                let cc = c as i64 + offset.1;
                rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64
            }
        });
        if visible {
            return Ok(OrganCutout {
                image: transformed.image,
                label: transformed.label,
                class_id: class_id.unwrap_or(0),
                offset,
            });
        }
        if position_jitter == 0 {
            break;
        }
    }
    Err(Error::InvalidInput(
        "transformed foreground falls outside the frame after jitter retries".into(),
    ))
}

/// Single-class synthesis: transformed masked exemplar over transformed background.
pub fn synthesize_single<T: Scalar, R: Rng>(
    exemplar: &LabeledSlice<T>,
    background: &LabeledSlice<T>,
    spec_fg: &TransformSpec<T>,
    spec_bg: &TransformSpec<T>,
    position_jitter: i64,
    rng: &mut R,
) -> Result<LabeledSlice<T>> {
    check_background(background)?;
    let cut = whole_foreground_cutout(exemplar, spec_fg, position_jitter, rng)?;
    Ok(paste_cutouts(background, spec_bg, vec![cut]))
}

/// Category-wise synthesis: each present class cut out, independently
/// transformed, and merged; overlaps resolve with the lower class id on top.
pub fn synthesize_multi<T: Scalar, R: Rng>(
    exemplar: &LabeledSlice<T>,
    background: &LabeledSlice<T>,
    specs: &[TransformSpec<T>],
    spec_bg: &TransformSpec<T>,
    position_jitter: i64,
    rng: &mut R,
) -> Result<LabeledSlice<T>> {
    check_background(background)?;
    let classes = exemplar.classes_present();
    if classes.is_empty() {
        return Err(Error::InvalidInput("exemplar has no foreground".into()));
    }
    if specs.len() != classes.len() {
        return Err(Error::InvalidInput(format!(
            "need one spec per present class: {} classes, {} specs",
            classes.len(),
            specs.len()
        )));
    }
    let mut cutouts = Vec::with_capacity(classes.len());
    for (&k, spec) in classes.iter().zip(specs.iter()) {
        cutouts.push(make_cutout(exemplar, Some(k), spec, position_jitter, rng)?);
    }
    // paste order: descending class id, so lower ids overwrite (z-order on top)
    cutouts.sort_by(|a, b| b.class_id.cmp(&a.class_id));
    Ok(paste_cutouts(background, spec_bg, cutouts))
}

fn check_background<T: Scalar>(background: &LabeledSlice<T>) -> Result<()> {
    if background.foreground_pixels() != 0 {
        return Err(Error::InvalidInput(
            "background slice must have zero foreground".into(),
        ));
    }
    Ok(())
}

/// Cut the entire foreground as one piece, keeping per-pixel class ids.
fn whole_foreground_cutout<T: Scalar, R: Rng>(
    exemplar: &LabeledSlice<T>,
    spec: &TransformSpec<T>,
    position_jitter: i64,
    rng: &mut R,
) -> Result<OrganCutout<T>> {
    make_cutout(exemplar, None, spec, position_jitter, rng)
}

fn paste_cutouts<T: Scalar>(
    background: &LabeledSlice<T>,
    spec_bg: &TransformSpec<T>,
    cutouts: Vec<OrganCutout<T>>,
) -> LabeledSlice<T> {
    let transformed_bg = apply_transform(background, spec_bg);
    let (h, w) = transformed_bg.image.dim();
    let mut image = transformed_bg.image;
    let mut label = Array2::<u8>::zeros((h, w));
    for cut in &cutouts {
        for ((r, c), &v) in cut.label.indexed_iter() {
            if v == 0 {
                continue;
            }
            let rr = r as i64 + cut.offset.0;
            let cc = c as i64 + cut.offset.1;
            if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                image[[rr as usize, cc as usize]] = cut.image[[r, c]];
                label[[rr as usize, cc as usize]] = v;
            }
        }
    }
    LabeledSlice {
        image,
        label,
        meta: SliceMeta {
            spacing: background.meta.spacing,
            ..SliceMeta::default()
        },
    }
}

/// Exactly the training slices with zero foreground pixels.
pub fn collect_backgrounds<T: Scalar>(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
) -> Result<Vec<LabeledSlice<T>>> {
    let mut out = Vec::new();
    for record in &manifest.records {
        if !record.has_foreground {
            out.push(crate::data_io::load_record_slice(
                manifest_dir,
                manifest,
                record,
            )?);
        }
    }
    if out.is_empty() {
        return Err(Error::Selection(
            "no background slices (zero foreground) in manifest".into(),
        ));
    }
    Ok(out)
}

/// Build exactly `config.num_samples` synthesized slices under `out_dir` and
/// write the resulting manifest. Deterministic per `config.seed`: each sample
/// runs on its own derived RNG stream.
pub fn build_dataset<T: Scalar>(
    exemplars: &[LabeledSlice<T>],
    backgrounds: &[LabeledSlice<T>],
    config: &SynthesisConfig,
    class_count: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    if exemplars.is_empty() {
        return Err(Error::Config("no exemplars supplied".into()));
    }
    if backgrounds.is_empty() {
        return Err(Error::Config("no background slices supplied".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut records = Vec::with_capacity(config.num_samples);
    for i in 0..config.num_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(
            config
                .seed
                .wrapping_add((i as u64).wrapping_mul(0x9E3779B97F4A7C15)),
        );
        let exemplar = &exemplars[rng.gen_range(0..exemplars.len())];
        let background = &backgrounds[rng.gen_range(0..backgrounds.len())];
        let spec_bg = sample_transform(&config.ranges, &mut rng);
        let mut slice = match config.mode {
            SynthesisMode::SingleClass => {
                let spec_fg = sample_transform(&config.ranges, &mut rng);
                synthesize_single(
                    exemplar,
                    background,
                    &spec_fg,
                    &spec_bg,
                    config.position_jitter,
                    &mut rng,
                )?
            }
            SynthesisMode::CategoryWise => {
                let n_classes = exemplar.classes_present().len();
                let specs: Vec<TransformSpec<T>> = (0..n_classes)
                    .map(|_| sample_transform(&config.ranges, &mut rng))
                    .collect();
                synthesize_multi(
                    exemplar,
                    background,
                    &specs,
                    &spec_bg,
                    config.position_jitter,
                    &mut rng,
                )?
            }
        };
        slice.meta.volume_id = 0;
        slice.meta.slice_index = i as u32;
        let name = format!("synth{i:05}.bin");
        records.push(crate::data_io::write_slice_record(
            &slice,
            out_dir,
            &name,
            class_count,
        )?);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        class_count,
        normalization: "minmax".to_string(),
        split: "train".to_string(),
        pixel_spacing: backgrounds[0].meta.spacing,
        records,
    };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_phantom_dataset, load_record_slice, PhantomConfig};
    use crate::transforms::TransformSpec;
    use ndarray::Array2;

    fn slice_from(label: Array2<u8>, base: f64) -> LabeledSlice<f64> {
        let image = label.mapv(|v| if v != 0 { 0.9 } else { base });
        LabeledSlice {
            image,
            label,
            meta: SliceMeta::default(),
        }
    }

    fn exemplar_two_blobs() -> LabeledSlice<f64> {
        let mut label = Array2::<u8>::zeros((32, 32));
        for r in 6..11 {
            for c in 6..11 {
                label[[r, c]] = 1;
            }
        }
        for r in 20..26 {
            for c in 18..24 {
                label[[r, c]] = 2;
            }
        }
        slice_from(label, 0.3)
    }

    fn background(size: usize) -> LabeledSlice<f64> {
        let mut image = Array2::<f64>::zeros((size, size));
        for ((r, c), v) in image.indexed_iter_mut() {
            *v = 0.2 + 0.001 * (r as f64) + 0.0005 * (c as f64);
        }
        LabeledSlice {
            image,
            label: Array2::zeros((size, size)),
            meta: SliceMeta::default(),
        }
    }

    #[test]
    fn identity_single_pastes_in_place() {
        let ex = exemplar_two_blobs();
        let bg = background(32);
        let id = TransformSpec::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = synthesize_single(&ex, &bg, &id, &id, 0, &mut rng).unwrap();
        assert_eq!(out.label, ex.label);
        for ((r, c), &v) in out.label.indexed_iter() {
            if v != 0 {
                assert_eq!(out.image[[r, c]], ex.image[[r, c]]);
            } else {
                assert_eq!(out.image[[r, c]], bg.image[[r, c]]);
            }
        }
    }

    #[test]
    fn synthesized_classes_subset_of_exemplar() {
        let ex = exemplar_two_blobs();
        let bg = background(32);
        let ranges = TransformRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let fg = sample_transform(&ranges, &mut rng);
            let bgspec = sample_transform(&ranges, &mut rng);
            let out = synthesize_single(&ex, &bg, &fg, &bgspec, 5, &mut rng).unwrap();
            for &v in out.label.iter() {
                assert!(v == 0 || v == 1 || v == 2);
            }
        }
    }

    #[test]
    fn foreground_area_tracks_scale_factor() {
        let ex = exemplar_two_blobs();
        let bg = background(32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base_area = ex.foreground_pixels() as f64;
        for &s in &[0.8f64, 1.2] {
            let mut total = 0.0;
            let n = 100;
            for _ in 0..n {
                let fg = TransformSpec {
                    scale_factor: s,
                    ..TransformSpec::identity()
                };
                let out = synthesize_single(
                    &ex,
                    &bg,
                    &fg,
                    &TransformSpec::identity(),
                    2,
                    &mut rng,
                )
                .unwrap();
                total += out.foreground_pixels() as f64;
            }
            let ratio = (total / n as f64) / base_area;
            let expect = s * s;
            assert!(
                (ratio - expect).abs() < 0.2 * expect,
                "scale {s}: area ratio {ratio} vs {expect}"
            );
        }
    }

    #[test]
    fn multi_identity_matches_exemplar_labels() {
        let ex = exemplar_two_blobs();
        let bg = background(32);
        let id = TransformSpec::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out =
            synthesize_multi(&ex, &bg, &[id.clone(), id.clone()], &id, 0, &mut rng).unwrap();
        for ((r, c), &v) in ex.label.indexed_iter() {
            if v != 0 {
                assert_eq!(out.label[[r, c]], v);
            }
        }
    }

    #[test]
    fn multi_reduces_to_single_for_one_class() {
        let mut label = Array2::<u8>::zeros((32, 32));
        for r in 10..16 {
            for c in 12..20 {
                label[[r, c]] = 1;
            }
        }
        let ex = slice_from(label, 0.25);
        let bg = background(32);
        let ranges = TransformRanges::default();
        for seed in 0..5u64 {
            let mut rng_a = ChaCha8Rng::seed_from_u64(seed);
            let fg = sample_transform::<f64, _>(&ranges, &mut rng_a);
            let bgspec = sample_transform(&ranges, &mut rng_a);
            let mut rng_s = rng_a.clone();
            let mut rng_m = rng_a.clone();
            let a = synthesize_single(&ex, &bg, &fg, &bgspec, 5, &mut rng_s).unwrap();
            let b = synthesize_multi(&ex, &bg, &[fg.clone()], &bgspec, 5, &mut rng_m).unwrap();
            assert_eq!(a.label, b.label, "seed {seed}");
            assert_eq!(a.image, b.image, "seed {seed}");
        }
    }

    #[test]
    fn multi_centroids_stay_near_original() {
        let ex = exemplar_two_blobs();
        let bg = background(32);
        let spec = TransformSpec {
            rotation_deg: 10.0,
            ..TransformSpec::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let jitter = 3i64;
        let out = synthesize_multi(
            &ex,
            &bg,
            &[spec.clone(), spec.clone()],
            &TransformSpec::identity(),
            jitter,
            &mut rng,
        )
        .unwrap();
        for k in 1..=2u8 {
            let orig = mask_centroid(&ex.label.mapv(|v| v == k)).unwrap();
            let new = mask_centroid(&out.label.mapv(|v| v == k)).unwrap();
            // jitter + rotation discretization + overlap clipping bound
            let tol = jitter as f64 + 3.0;
            assert!(
                (orig.0 - new.0).abs() <= tol && (orig.1 - new.1).abs() <= tol,
                "class {k}: centroid {orig:?} -> {new:?}"
            );
        }
    }

    #[test]
    fn background_with_foreground_rejected() {
        let ex = exemplar_two_blobs();
        let id = TransformSpec::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = synthesize_single(&ex, &ex, &id, &id, 0, &mut rng);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn collect_backgrounds_matches_enumeration() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            num_volumes: 4,
            slices_per_volume: 6,
            foreground_fraction: 0.6,
            ..Default::default()
        };
        let m = generate_phantom_dataset::<f64>(&cfg, 21, dir.path()).unwrap();
        let bgs = collect_backgrounds::<f64>(&m, dir.path()).unwrap();
        let mut brute = 0;
        for r in &m.records {
            let s = load_record_slice::<f64>(dir.path(), &m, r).unwrap();
            if s.label.iter().all(|&v| v == 0) {
                brute += 1;
            }
        }
        assert_eq!(bgs.len(), brute);
        assert!(bgs.iter().all(|s| s.foreground_pixels() == 0));
    }

    #[test]
    fn build_dataset_exact_size_and_determinism() {
        let ex = vec![exemplar_two_blobs()];
        let bgs = vec![background(32)];
        let cfg = SynthesisConfig {
            num_samples: 17,
            position_jitter: 4,
            mode: SynthesisMode::CategoryWise,
            seed: 5,
            ..Default::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = build_dataset(&ex, &bgs, &cfg, 2, d1.path()).unwrap();
        let m2 = build_dataset(&ex, &bgs, &cfg, 2, d2.path()).unwrap();
        assert_eq!(m1.records.len(), 17);
        assert_eq!(m1.records, m2.records);
        for r in &m1.records {
            let a = std::fs::read(d1.path().join(&r.path)).unwrap();
            let b = std::fs::read(d2.path().join(&r.path)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn label_consistency_and_background_purity() {
        let ex = exemplar_two_blobs();
        let bg = background(32);
        let ranges = TransformRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let specs = [
                sample_transform::<f64, _>(&ranges, &mut rng),
                sample_transform(&ranges, &mut rng),
            ];
            let bgspec = sample_transform(&ranges, &mut rng);
            let out = synthesize_multi(&ex, &bg, &specs, &bgspec, 5, &mut rng).unwrap();
            let tbg = apply_transform(&bg, &bgspec);
            for ((r, c), &v) in out.label.indexed_iter() {
                if v == 0 {
                    assert_eq!(
                        out.image[[r, c]],
                        tbg.image[[r, c]],
                        "background pixel ({r},{c}) was touched"
                    );
                }
            }
        }
    }
}
