//! Dataset ingestion: labeled slices, intensity normalization, manifests,
//! and the phantom dataset generator used as the canonical desk-scale fixture.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3};
use rand_chacha::ChaCha8Rng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SLICE_MAGIC: &[u8; 4] = b"ESEG";
pub const MANIFEST_VERSION: u32 = 1;

/// Per-slice metadata carried alongside the pixel data.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMeta {
    pub volume_id: u32,
    pub slice_index: u32,
    /// (row, col) pixel spacing in mm; defaults to 1.0 x 1.0 isotropic.
    pub spacing: (f64, f64),
}

impl Default for SliceMeta {
    fn default() -> Self {
        SliceMeta {
            volume_id: 0,
            slice_index: 0,
            spacing: (1.0, 1.0),
        }
    }
}

/// A 2-D image paired with an integer label map; the unit of all processing.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSlice<T: Scalar> {
    pub image: Array2<T>,
    pub label: Array2<u8>,
    pub meta: SliceMeta,
}

impl<T: Scalar> LabeledSlice<T> {
    pub fn new(image: Array2<T>, label: Array2<u8>, meta: SliceMeta) -> Result<Self> {
        if image.dim() != label.dim() {
            return Err(Error::InvalidInput(format!(
                "image shape {:?} != label shape {:?}",
                image.dim(),
                label.dim()
            )));
        }
        Ok(LabeledSlice { image, label, meta })
    }

    /// Number of nonzero label pixels.
    pub fn foreground_pixels(&self) -> usize {
        self.label.iter().filter(|&&v| v != 0).count()
    }

    /// Distinct nonzero class ids present, ascending.
    pub fn classes_present(&self) -> Vec<u8> {
        let set: BTreeSet<u8> = self.label.iter().copied().filter(|&v| v != 0).collect();
        set.into_iter().collect()
    }

    /// Pixel counts for classes 1..=k.
    pub fn class_pixel_counts(&self, class_count: usize) -> Vec<u64> {
        let mut counts = vec![0u64; class_count];
        for &v in self.label.iter() {
            if v != 0 && (v as usize) <= class_count {
                counts[v as usize - 1] += 1;
            }
        }
        counts
    }
}

/// One manifest record; `path` is relative to the manifest file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub path: String,
    pub volume_id: u32,
    pub slice_index: u32,
    pub has_foreground: bool,
    pub class_pixel_counts: Vec<u64>,
}

impl SliceRecord {
    pub fn foreground_pixels(&self) -> u64 {
        self.class_pixel_counts.iter().sum()
    }

    pub fn distinct_classes(&self) -> usize {
        self.class_pixel_counts.iter().filter(|&&c| c > 0).count()
    }
}

/// JSON manifest describing a dataset of slice files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub class_count: usize,
    /// Normalization recipe id, e.g. "minmax" or "clip_minmax(-125,275)".
    pub normalization: String,
    /// Split tag: "train", "test", or "all".
    pub split: String,
    /// (row, col) pixel spacing in mm for every slice in the dataset.
    pub pixel_spacing: (f64, f64),
    pub records: Vec<SliceRecord>,
}

impl DatasetManifest {
    pub fn volume_ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.records.iter().map(|r| r.volume_id).collect();
        set.into_iter().collect()
    }
}

// ---------------------------------------------------------------------------
// Intensity normalization
// ---------------------------------------------------------------------------

/// Min-max normalization of a volume into [0, 1].
///
/// A constant volume maps to all zeros (background semantics).
pub fn normalize_minmax<T: Scalar>(volume: &ArrayView3<'_, T>) -> Result<Array3<T>> {
    if volume.is_empty() {
        return Err(Error::InvalidInput("empty volume".into()));
    }
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &v in volume.iter() {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    if hi == lo {
        return Ok(Array3::zeros(volume.dim()));
    }
    let range = hi - lo;
    Ok(volume.mapv(|v| (v - lo) / range))
}

/// Clip to [lo, hi], then min-max normalize using the clamped extremes present.
pub fn normalize_clip_minmax<T: Scalar>(
    volume: &ArrayView3<'_, T>,
    lo: T,
    hi: T,
) -> Result<Array3<T>> {
    if lo >= hi {
        return Err(Error::Config(format!(
            "clip bounds require lo < hi, got lo={lo} hi={hi}"
        )));
    }
    if volume.is_empty() {
        return Err(Error::InvalidInput("empty volume".into()));
    }
    let clipped = volume.mapv(|v| v.max(lo).min(hi));
    normalize_minmax(&clipped.view())
}

// ---------------------------------------------------------------------------
// Slice file format
// ---------------------------------------------------------------------------
//
// Little-endian binary layout:
//   magic   4 bytes  "ESEG"
//   dtype   u8       1 = f32, 2 = f64 (image element type)
//   height  u32
//   width   u32
//   image   H*W elements, row-major, little-endian
//   label   H*W bytes (class ids)

pub fn save_slice<T: Scalar>(slice: &LabeledSlice<T>, path: &Path) -> Result<()> {
    let (h, w) = slice.image.dim();
    let mut buf: Vec<u8> = Vec::with_capacity(13 + h * w * (std::mem::size_of::<T>() + 1));
    buf.extend_from_slice(SLICE_MAGIC);
    buf.push(T::DTYPE_CODE);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in slice.image.iter() {
        match T::DTYPE_CODE {
            1 => buf.extend_from_slice(&(v.to_f32().unwrap()).to_le_bytes()),
            2 => buf.extend_from_slice(&(v.to_f64_c()).to_le_bytes()),
            _ => unreachable!(),
        }
    }
    for &v in slice.label.iter() {
        buf.push(v);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_slice<T: Scalar>(path: &Path) -> Result<LabeledSlice<T>> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    if data.len() < 13 || &data[0..4] != SLICE_MAGIC {
        return Err(Error::Parse(format!("{}: not a slice file", path.display())));
    }
    let dtype = data[4];
    if dtype != T::DTYPE_CODE {
        return Err(Error::Parse(format!(
            "{}: dtype code {} does not match requested scalar (code {})",
            path.display(),
            dtype,
            T::DTYPE_CODE
        )));
    }
    let h = u32::from_le_bytes(data[5..9].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(data[9..13].try_into().unwrap()) as usize;
    let elem = std::mem::size_of::<T>();
    let expected = 13 + h * w * elem + h * w;
    if data.len() != expected {
        return Err(Error::Parse(format!(
            "{}: expected {} bytes for {}x{} slice, found {}",
            path.display(),
            expected,
            h,
            w,
            data.len()
        )));
    }
    let mut img = Vec::with_capacity(h * w);
    let mut off = 13;
    for _ in 0..h * w {
        let v = match dtype {
            1 => T::from_f64_c(f32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as f64),
            2 => T::from_f64_c(f64::from_le_bytes(data[off..off + 8].try_into().unwrap())),
            _ => unreachable!(),
        };
        img.push(v);
        off += elem;
    }
    let label: Vec<u8> = data[off..off + h * w].to_vec();
    let image = Array2::from_shape_vec((h, w), img).unwrap();
    let label = Array2::from_shape_vec((h, w), label).unwrap();
    Ok(LabeledSlice {
        image,
        label,
        meta: SliceMeta::default(),
    })
}

/// Load a manifest record's slice, attaching manifest metadata.
pub fn load_record_slice<T: Scalar>(
    manifest_dir: &Path,
    manifest: &DatasetManifest,
    record: &SliceRecord,
) -> Result<LabeledSlice<T>> {
    let mut s = load_slice::<T>(&manifest_dir.join(&record.path))?;
    s.meta = SliceMeta {
        volume_id: record.volume_id,
        slice_index: record.slice_index,
        spacing: manifest.pixel_spacing,
    };
    Ok(s)
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
    Ok(manifest)
}

/// Check every record: file exists, loads, and per-class pixel counts match
/// the stored label array.
pub fn validate_manifest<T: Scalar>(manifest: &DatasetManifest, manifest_dir: &Path) -> Result<()> {
    for record in &manifest.records {
        let path = manifest_dir.join(&record.path);
        if !path.exists() {
            return Err(Error::Parse(format!(
                "record vol={} slice={}: missing file {}",
                record.volume_id,
                record.slice_index,
                path.display()
            )));
        }
        let slice = load_slice::<T>(&path)?;
        let counts = slice.class_pixel_counts(manifest.class_count);
        if counts != record.class_pixel_counts {
            return Err(Error::Parse(format!(
                "record {}: class pixel counts {:?} disagree with label file {:?}",
                record.path, record.class_pixel_counts, counts
            )));
        }
        if record.has_foreground != (slice.foreground_pixels() > 0) {
            return Err(Error::Parse(format!(
                "record {}: has_foreground flag disagrees with label file",
                record.path
            )));
        }
        for &v in slice.label.iter() {
            if v as usize > manifest.class_count {
                return Err(Error::Parse(format!(
                    "record {}: label value {} exceeds class count {}",
                    record.path, v, manifest.class_count
                )));
            }
        }
    }
    Ok(())
}

/// Build a record for a slice and write it under `dir/<name>`.
pub fn write_slice_record<T: Scalar>(
    slice: &LabeledSlice<T>,
    dir: &Path,
    name: &str,
    class_count: usize,
) -> Result<SliceRecord> {
    save_slice(slice, &dir.join(name))?;
    Ok(SliceRecord {
        path: name.to_string(),
        volume_id: slice.meta.volume_id,
        slice_index: slice.meta.slice_index,
        has_foreground: slice.foreground_pixels() > 0,
        class_pixel_counts: slice.class_pixel_counts(class_count),
    })
}

// ---------------------------------------------------------------------------
// Phantom dataset generation
// ---------------------------------------------------------------------------

/// Parameters for the synthetic phantom dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub class_count: usize,
    pub num_volumes: usize,
    pub slices_per_volume: usize,
    /// Fraction of slices that carry foreground shapes; the rest are
    /// pure-background canvases for synthesis.
    pub foreground_fraction: f64,
    /// Ellipse semi-axis range in pixels.
    pub radius_range: (f64, f64),
    /// Intensity added over the background texture for class k shapes.
    pub intensity_offset: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            image_size: 64,
            class_count: 1,
            num_volumes: 10,
            slices_per_volume: 8,
            foreground_fraction: 0.7,
            radius_range: (5.0, 10.0),
            intensity_offset: 0.35,
        }
    }
}

impl PhantomConfig {
    fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config("phantom image_size must be >= 32".into()));
        }
        if self.class_count == 0 || self.class_count > 8 {
            return Err(Error::Config("phantom class_count must be in 1..=8".into()));
        }
        if self.num_volumes == 0 || self.slices_per_volume == 0 {
            return Err(Error::Config(
                "phantom volume and slice counts must be >= 1".into(),
            ));
        }
        if self.radius_range.0 <= 0.0 || self.radius_range.1 < self.radius_range.0 {
            return Err(Error::Config("phantom radius range invalid".into()));
        }
        // Each shape must fit with a margin; with K classes they are laid out
        // around the image so the constraint scales with sqrt(K).
        let needed = self.radius_range.1 * 2.0 * (self.class_count as f64).sqrt() + 4.0;
        if needed > self.image_size as f64 {
            return Err(Error::Config(format!(
                "phantom layout infeasible: {} classes of radius {} cannot fit in {}px",
                self.class_count, self.radius_range.1, self.image_size
            )));
        }
        Ok(())
    }
}

/// Smooth value-noise background texture in roughly [0.1, 0.5].
fn background_texture<T: Scalar>(size: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let coarse = 8usize;
    let grid: Array2<f64> = {
        let mut g = Array2::zeros((coarse + 1, coarse + 1));
        for v in g.iter_mut() {
            *v = rng.gen::<f64>();
        }
        g
    };
    let mut out = Array2::zeros((size, size));
    let step = size as f64 / coarse as f64;
    for r in 0..size {
        for c in 0..size {
            let gr = r as f64 / step;
            let gc = c as f64 / step;
            let r0 = gr.floor() as usize;
            let c0 = gc.floor() as usize;
            let fr = gr - r0 as f64;
            let fc = gc - c0 as f64;
            let v = grid[[r0, c0]] * (1.0 - fr) * (1.0 - fc)
                + grid[[r0 + 1, c0]] * fr * (1.0 - fc)
                + grid[[r0, c0 + 1]] * (1.0 - fr) * fc
                + grid[[r0 + 1, c0 + 1]] * fr * fc;
            out[[r, c]] = T::from_f64_c(0.1 + 0.4 * v);
        }
    }
    out
}

/// Render a rotated ellipse of class `k`: label set exactly where the ellipse
/// inequality holds, image raised by the class intensity offset on the same pixels.
fn render_ellipse<T: Scalar>(
    slice: &mut LabeledSlice<T>,
    center: (f64, f64),
    radii: (f64, f64),
    angle: f64,
    class: u8,
    offset: f64,
) {
    let (h, w) = slice.image.dim();
    let (sin, cos) = angle.sin_cos();
    for r in 0..h {
        for c in 0..w {
            let dr = r as f64 - center.0;
            let dc = c as f64 - center.1;
            let u = dc * cos + dr * sin;
            let v = -dc * sin + dr * cos;
            if (u / radii.1).powi(2) + (v / radii.0).powi(2) <= 1.0 {
                slice.label[[r, c]] = class;
                let raised = slice.image[[r, c]].to_f64_c() + offset + 0.04 * (class as f64 - 1.0);
                slice.image[[r, c]] = T::from_f64_c(raised.min(1.0));
            }
        }
    }
}

/// Generate a phantom dataset under `out_dir`, returning its manifest
/// (also written to `out_dir/manifest.json`). Deterministic per seed.
pub fn generate_phantom_dataset<T: Scalar>(
    config: &PhantomConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut records = Vec::new();
    let size = config.image_size;
    let margin = config.radius_range.1 + 2.0;
    for vol in 0..config.num_volumes {
        for idx in 0..config.slices_per_volume {
            // Independent per-slice stream so generation order is immaterial.
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (vol as u64).wrapping_mul(0x9E3779B97F4A7C15)
                    ^ (idx as u64).wrapping_mul(0xD1B54A32D192ED03),
            );
            let mut slice = LabeledSlice {
                image: background_texture::<T>(size, &mut rng),
                label: Array2::zeros((size, size)),
                meta: SliceMeta {
                    volume_id: vol as u32,
                    slice_index: idx as u32,
                    spacing: (1.0, 1.0),
                },
            };
            let has_fg = rng.gen::<f64>() < config.foreground_fraction;
            if has_fg {
                // Higher classes render later and win overlaps, so labels
                // stay pixel-exact with what is visible.
                for k in 1..=config.class_count {
                    let radii = (
                        rng.gen_range(config.radius_range.0..=config.radius_range.1),
                        rng.gen_range(config.radius_range.0..=config.radius_range.1),
                    );
                    let center = (
                        rng.gen_range(margin..(size as f64 - margin)),
                        rng.gen_range(margin..(size as f64 - margin)),
                    );
                    let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                    render_ellipse(
                        &mut slice,
                        center,
                        radii,
                        angle,
                        k as u8,
                        config.intensity_offset,
                    );
                }
            }
            let name = format!("vol{vol:03}_slice{idx:03}.bin");
            records.push(write_slice_record(&slice, out_dir, &name, config.class_count)?);
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        class_count: config.class_count,
        normalization: "minmax".to_string(),
        split: "all".to_string(),
        pixel_spacing: (1.0, 1.0),
        records,
    };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Dataset splitting
// ---------------------------------------------------------------------------

/// Split a manifest by volume into train/test. Deterministic per seed;
/// volume sets are disjoint and cover the input.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let volumes = manifest.volume_ids();
    if volumes.len() < 2 {
        return Err(Error::InvalidInput(
            "split requires at least 2 volumes".into(),
        ));
    }
    let mut order = volumes.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates over the sorted id list, so manifest record order is immaterial.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((order.len() as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(1, order.len() - 1);
    let train_set: BTreeSet<u32> = order[..n_train].iter().copied().collect();
    let mk = |keep_train: bool, split: &str| DatasetManifest {
        version: manifest.version,
        class_count: manifest.class_count,
        normalization: manifest.normalization.clone(),
        split: split.to_string(),
        pixel_spacing: manifest.pixel_spacing,
        records: manifest
            .records
            .iter()
            .filter(|r| train_set.contains(&r.volume_id) == keep_train)
            .cloned()
            .collect(),
    };
    Ok((mk(true, "train"), mk(false, "test")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn minmax_affine_map() {
        let v = Array3::from_shape_vec((1, 2, 2), vec![0.0f64, 5.0, 10.0, 10.0]).unwrap();
        let out = normalize_minmax(&v.view()).unwrap();
        assert_eq!(
            out,
            Array3::from_shape_vec((1, 2, 2), vec![0.0, 0.5, 1.0, 1.0]).unwrap()
        );
    }

    #[test]
    fn minmax_constant_maps_to_zero() {
        let v = Array3::from_elem((1, 2, 2), 3.0f64);
        let out = normalize_minmax(&v.view()).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn minmax_random_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Array3::from_shape_fn((1, 8, 8), |_| rng.gen_range(-10.0..10.0f64));
        let out = normalize_minmax(&v.view()).unwrap();
        let lo = out.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo - 0.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        // idempotence
        let twice = normalize_minmax(&out.view()).unwrap();
        for (a, b) in twice.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn minmax_empty_rejected() {
        let v = Array3::<f64>::zeros((0, 0, 0));
        assert!(matches!(
            normalize_minmax(&v.view()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn clip_minmax_hand_case() {
        let v = Array3::from_shape_vec((1, 1, 3), vec![-200.0f64, 0.0, 300.0]).unwrap();
        let out = normalize_clip_minmax(&v.view(), -125.0, 275.0).unwrap();
        let expect = [0.0, 125.0 / 400.0, 1.0];
        for (a, e) in out.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        // -500 clamps to the low bound
        let v2 = Array3::from_shape_vec((1, 1, 2), vec![-500.0f64, 275.0]).unwrap();
        let out2 = normalize_clip_minmax(&v2.view(), -125.0, 275.0).unwrap();
        assert_eq!(out2[[0, 0, 0]], 0.0);
    }

    #[test]
    fn clip_minmax_inside_range_is_plain_minmax() {
        let v = Array3::from_shape_vec((1, 2, 2), vec![0.0f64, 10.0, 20.0, 30.0]).unwrap();
        let a = normalize_clip_minmax(&v.view(), -125.0, 275.0).unwrap();
        let b = normalize_minmax(&v.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clip_minmax_bad_bounds() {
        let v = Array3::from_elem((1, 1, 1), 0.0f64);
        assert!(matches!(
            normalize_clip_minmax(&v.view(), 5.0, 5.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn slice_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let slice = LabeledSlice {
            image: array![[0.125f32, 0.5], [0.75, 1.0]],
            label: array![[0u8, 1], [2, 0]],
            meta: SliceMeta::default(),
        };
        let p = dir.path().join("s.bin");
        save_slice(&slice, &p).unwrap();
        let back = load_slice::<f32>(&p).unwrap();
        assert_eq!(back.image, slice.image);
        assert_eq!(back.label, slice.label);
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            num_volumes: 2,
            slices_per_volume: 3,
            ..Default::default()
        };
        let m = generate_phantom_dataset::<f32>(&cfg, 7, dir.path()).unwrap();
        let p = dir.path().join("m2.json");
        save_manifest(&m, &p).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(back, m);
        validate_manifest::<f32>(&back, dir.path()).unwrap();

        // missing file fails validation
        let mut broken = back.clone();
        broken.records[0].path = "nope.bin".to_string();
        assert!(validate_manifest::<f32>(&broken, dir.path()).is_err());

        // miscounted classes fail validation
        let mut miscount = back.clone();
        miscount.records[0].class_pixel_counts[0] += 1;
        miscount.records[0].has_foreground = true;
        assert!(validate_manifest::<f32>(&miscount, dir.path()).is_err());
    }

    #[test]
    fn phantom_deterministic_per_seed() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            num_volumes: 2,
            slices_per_volume: 2,
            ..Default::default()
        };
        let m1 = generate_phantom_dataset::<f32>(&cfg, 7, d1.path()).unwrap();
        let m2 = generate_phantom_dataset::<f32>(&cfg, 7, d2.path()).unwrap();
        assert_eq!(m1.records, m2.records);
        for r in &m1.records {
            let a = fs::read(d1.path().join(&r.path)).unwrap();
            let b = fs::read(d2.path().join(&r.path)).unwrap();
            assert_eq!(a, b, "slice bytes differ for {}", r.path);
        }
    }

    #[test]
    fn phantom_labels_in_range_and_classes_populated() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            image_size: 64,
            class_count: 8,
            num_volumes: 3,
            slices_per_volume: 4,
            radius_range: (4.0, 7.0),
            ..Default::default()
        };
        let m = generate_phantom_dataset::<f32>(&cfg, 11, dir.path()).unwrap();
        let mut class3 = 0u64;
        for r in &m.records {
            let s = load_slice::<f32>(&dir.path().join(&r.path)).unwrap();
            assert!(s.label.iter().all(|&v| v <= 8));
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            class3 += r.class_pixel_counts[2];
        }
        assert!(class3 > 0, "class 3 never rendered");
    }

    #[test]
    fn phantom_infeasible_layout_rejected() {
        let cfg = PhantomConfig {
            image_size: 32,
            class_count: 8,
            radius_range: (10.0, 16.0),
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_phantom_dataset::<f32>(&cfg, 1, dir.path()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_counts_and_disjointness() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            num_volumes: 10,
            slices_per_volume: 2,
            ..Default::default()
        };
        let m = generate_phantom_dataset::<f32>(&cfg, 3, dir.path()).unwrap();
        let (tr, te) = split_dataset(&m, 0.8, 42).unwrap();
        assert_eq!(tr.volume_ids().len(), 8);
        assert_eq!(te.volume_ids().len(), 2);
        let (tr2, te2) = split_dataset(&m, 0.8, 42).unwrap();
        assert_eq!(tr.records, tr2.records);
        assert_eq!(te.records, te2.records);
        let tr_set: BTreeSet<_> = tr.records.iter().map(|r| r.path.clone()).collect();
        let te_set: BTreeSet<_> = te.records.iter().map(|r| r.path.clone()).collect();
        assert!(tr_set.is_disjoint(&te_set));
        assert_eq!(tr_set.len() + te_set.len(), m.records.len());
    }

    #[test]
    fn split_needs_two_volumes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            num_volumes: 1,
            slices_per_volume: 2,
            ..Default::default()
        };
        let m = generate_phantom_dataset::<f32>(&cfg, 3, dir.path()).unwrap();
        assert!(split_dataset(&m, 0.8, 1).is_err());
    }
}
