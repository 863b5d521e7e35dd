//! Geometric and intensity transforms applied jointly to image and label.
//!
//! Geometric ops (scale, flip, rotation) use a single center-anchored affine
//! resample: bilinear for the image, nearest-neighbor for the label so class
//! ids are preserved exactly. Blur and intensity ops touch the image only,
//! which is then re-clamped to [0, 1].

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::LabeledSlice;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A fully materialized transform sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec<T: Scalar> {
    pub blur_sigma: T,
    pub intensity_gain: T,
    pub intensity_bias: T,
    pub scale_factor: T,
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotation_deg: T,
}

impl<T: Scalar> TransformSpec<T> {
    pub fn identity() -> Self {
        TransformSpec {
            blur_sigma: T::zero(),
            intensity_gain: T::one(),
            intensity_bias: T::zero(),
            scale_factor: T::one(),
            flip_h: false,
            flip_v: false,
            rotation_deg: T::zero(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.blur_sigma == T::zero()
            && self.intensity_gain == T::one()
            && self.intensity_bias == T::zero()
            && self.scale_factor == T::one()
            && !self.flip_h
            && !self.flip_v
            && self.rotation_deg == T::zero()
    }
}

/// Sampling ranges for [`TransformSpec`]; all fields drawn independently and
/// uniformly, flips as fair coin flips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRanges {
    pub blur_sigma: (f64, f64),
    pub intensity_gain: (f64, f64),
    pub intensity_bias: (f64, f64),
    pub scale_factor: (f64, f64),
    pub rotation_deg: (f64, f64),
    pub flip_prob: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        TransformRanges {
            blur_sigma: (0.0, 1.5),
            intensity_gain: (0.8, 1.2),
            intensity_bias: (-0.1, 0.1),
            scale_factor: (0.8, 1.2),
            rotation_deg: (-30.0, 30.0),
            flip_prob: 0.5,
        }
    }
}

impl TransformRanges {
    /// Collapse every range to the identity transform (useful in tests).
    pub fn identity() -> Self {
        TransformRanges {
            blur_sigma: (0.0, 0.0),
            intensity_gain: (1.0, 1.0),
            intensity_bias: (0.0, 0.0),
            scale_factor: (1.0, 1.0),
            rotation_deg: (0.0, 0.0),
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("blur_sigma", self.blur_sigma),
            ("intensity_gain", self.intensity_gain),
            ("intensity_bias", self.intensity_bias),
            ("scale_factor", self.scale_factor),
            ("rotation_deg", self.rotation_deg),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("bad {name} range [{lo}, {hi}]")));
            }
        }
        if self.blur_sigma.0 < 0.0 {
            return Err(Error::Config("blur_sigma must be >= 0".into()));
        }
        if self.scale_factor.0 <= 0.0 {
            return Err(Error::Config("scale_factor must be > 0".into()));
        }
        if self.intensity_gain.0 <= 0.0 {
            return Err(Error::Config("intensity_gain must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must be in [0,1]".into()));
        }
        if self.rotation_deg.0 < -180.0 || self.rotation_deg.1 >= 180.0 + 1e-9 {
            return Err(Error::Config("rotation_deg must lie in [-180, 180)".into()));
        }
        Ok(())
    }
}

fn draw<T: Scalar, R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> T {
    if lo == hi {
        T::from_f64_c(lo)
    } else {
        T::from_f64_c(rng.gen_range(lo..hi))
    }
}

/// Draw a [`TransformSpec`] from configured ranges.
pub fn sample_transform<T: Scalar, R: Rng>(ranges: &TransformRanges, rng: &mut R) -> TransformSpec<T> {
    TransformSpec {
        blur_sigma: draw(rng, ranges.blur_sigma),
        intensity_gain: draw(rng, ranges.intensity_gain),
        intensity_bias: draw(rng, ranges.intensity_bias),
        scale_factor: draw(rng, ranges.scale_factor),
        flip_h: rng.gen::<f64>() < ranges.flip_prob,
        flip_v: rng.gen::<f64>() < ranges.flip_prob,
        rotation_deg: draw(rng, ranges.rotation_deg),
    }
}

/// Bilinear sample with zero padding outside the frame.
fn sample_bilinear<T: Scalar>(img: &Array2<T>, r: f64, c: f64) -> T {
    let (h, w) = img.dim();
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let mut acc = 0.0f64;
    for (dr, wr) in [(0i64, 1.0 - fr), (1, fr)] {
        if wr == 0.0 {
            continue;
        }
        for (dc, wc) in [(0i64, 1.0 - fc), (1, fc)] {
            if wc == 0.0 {
                continue;
            }
            let rr = r0 as i64 + dr;
            let cc = c0 as i64 + dc;
            if rr >= 0 && (rr as usize) < h && cc >= 0 && (cc as usize) < w {
                acc += wr * wc * img[[rr as usize, cc as usize]].to_f64_c();
            }
        }
    }
    T::from_f64_c(acc)
}

/// Nearest-neighbor sample with zero padding outside the frame.
fn sample_nearest(label: &Array2<u8>, r: f64, c: f64) -> u8 {
    let (h, w) = label.dim();
    let rr = r.round() as i64;
    let cc = c.round() as i64;
    if rr >= 0 && (rr as usize) < h && cc >= 0 && (cc as usize) < w {
        label[[rr as usize, cc as usize]]
    } else {
        0
    }
}

/// Separable Gaussian blur with edge replication; kernel radius = ceil(3 sigma).
fn gaussian_blur<T: Scalar>(img: &Array2<T>, sigma: f64) -> Array2<T> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    let (h, w) = img.dim();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = Array2::<T>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let cc = clamp(c as i64 + ki as i64 - radius, w);
                acc += kv * img[[r, cc]].to_f64_c();
            }
            tmp[[r, c]] = T::from_f64_c(acc);
        }
    }
    let mut out = Array2::<T>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let rr = clamp(r as i64 + ki as i64 - radius, h);
                acc += kv * tmp[[rr, c]].to_f64_c();
            }
            out[[r, c]] = T::from_f64_c(acc);
        }
    }
    out
}

/// Apply a [`TransformSpec`] to a slice.
///
/// Geometric convention: content rotates counterclockwise on screen by
/// `rotation_deg` about the image center (rows grow downward); `flip_h`
/// mirrors columns, `flip_v` mirrors rows; scaling is about the center.
pub fn apply_transform<T: Scalar>(slice: &LabeledSlice<T>, spec: &TransformSpec<T>) -> LabeledSlice<T> {
    let (h, w) = slice.image.dim();
    let mut image;
    let mut label;
    let geometric_identity = spec.scale_factor == T::one()
        && spec.rotation_deg == T::zero()
        && !spec.flip_h
        && !spec.flip_v;
    if geometric_identity {
        image = slice.image.clone();
        label = slice.label.clone();
    } else {
        // Inverse mapping: for each output pixel, find the source coordinate.
        let theta = spec.rotation_deg.to_f64_c().to_radians();
        let (sin, cos) = theta.sin_cos();
        let s = spec.scale_factor.to_f64_c();
        let rc = (h as f64 - 1.0) / 2.0;
        let cc = (w as f64 - 1.0) / 2.0;
        image = Array2::zeros((h, w));
        label = Array2::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let mut dr = r as f64 - rc;
                let mut dc = c as f64 - cc;
                // invert flips
                if spec.flip_v {
                    dr = -dr;
                }
                if spec.flip_h {
                    dc = -dc;
                }
                // invert rotation (forward: c' = c cos + r sin; r' = -c sin + r cos)
                let src_c = dc * cos - dr * sin;
                let src_r = dc * sin + dr * cos;
                // invert scale
                let src_r = src_r / s + rc;
                let src_c = src_c / s + cc;
                image[[r, c]] = sample_bilinear(&slice.image, src_r, src_c);
                label[[r, c]] = sample_nearest(&slice.label, src_r, src_c);
            }
        }
    }
    let sigma = spec.blur_sigma.to_f64_c();
    if sigma > 0.0 {
        image = gaussian_blur(&image, sigma);
    }
    if spec.intensity_gain != T::one() || spec.intensity_bias != T::zero() {
        image.mapv_inplace(|v| v * spec.intensity_gain + spec.intensity_bias);
    }
    image.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
    LabeledSlice {
        image,
        label,
        meta: slice.meta.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::SliceMeta;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_slice() -> LabeledSlice<f64> {
        let mut image = Array2::zeros((10, 10));
        let mut label = Array2::zeros((10, 10));
        for r in 0..10 {
            for c in 0..10 {
                image[[r, c]] = (r * 10 + c) as f64 / 100.0;
            }
        }
        label[[2, 5]] = 1;
        LabeledSlice {
            image,
            label,
            meta: SliceMeta::default(),
        }
    }

    #[test]
    fn identity_ranges_yield_identity_spec() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec: TransformSpec<f64> = sample_transform(&TransformRanges::identity(), &mut rng);
        assert!(spec.is_identity());
    }

    #[test]
    fn sampling_deterministic_per_seed() {
        let ranges = TransformRanges::default();
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let sa: TransformSpec<f64> = sample_transform(&ranges, &mut a);
            let sb: TransformSpec<f64> = sample_transform(&ranges, &mut b);
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn sampling_stays_in_range() {
        let ranges = TransformRanges {
            rotation_deg: (-30.0, 30.0),
            ..TransformRanges::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let s: TransformSpec<f64> = sample_transform(&ranges, &mut rng);
            assert!((-30.0..30.0).contains(&s.rotation_deg));
            assert!((0.8..1.2).contains(&s.scale_factor) || s.scale_factor == 0.8);
            assert!(s.blur_sigma >= 0.0 && s.blur_sigma < 1.5);
        }
    }

    #[test]
    fn identity_spec_is_exact_noop() {
        let s = toy_slice();
        let out = apply_transform(&s, &TransformSpec::identity());
        assert_eq!(out.image, s.image);
        assert_eq!(out.label, s.label);
    }

    #[test]
    fn flip_h_is_involution() {
        let s = toy_slice();
        let spec = TransformSpec {
            flip_h: true,
            ..TransformSpec::identity()
        };
        let once = apply_transform(&s, &spec);
        assert_ne!(once.image, s.image);
        let twice = apply_transform(&once, &spec);
        assert_eq!(twice.image, s.image);
        assert_eq!(twice.label, s.label);
    }

    #[test]
    fn rotation_90_moves_labeled_pixel() {
        // Forward map about center (4.5, 4.5), theta = 90deg CCW on screen:
        //   c' = cc + (c-cc) cos + (r-rc) sin = 4.5 + (r - 4.5)
        //   r' = rc - (c-cc) sin + (r-rc) cos = 4.5 - (c - 4.5)
        // so (2, 5) lands at (4, 2).
        let s = toy_slice();
        let spec = TransformSpec {
            rotation_deg: 90.0,
            ..TransformSpec::identity()
        };
        let out = apply_transform(&s, &spec);
        assert_eq!(out.label[[4, 2]], 1);
        assert_eq!(out.label.iter().filter(|&&v| v != 0).count(), 1);
    }

    #[test]
    fn labels_keep_exact_class_ids() {
        let mut s = toy_slice();
        s.label[[6, 3]] = 5;
        let spec = TransformSpec {
            scale_factor: 1.13,
            rotation_deg: 17.0,
            flip_v: true,
            ..TransformSpec::identity()
        };
        let out = apply_transform(&s, &spec);
        for &v in out.label.iter() {
            assert!(v == 0 || v == 1 || v == 5);
        }
    }

    #[test]
    fn intensity_reclamps_to_unit_interval() {
        let s = toy_slice();
        let spec = TransformSpec {
            intensity_gain: 3.0,
            intensity_bias: -0.2,
            ..TransformSpec::identity()
        };
        let out = apply_transform(&s, &spec);
        assert!(out.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn blur_preserves_constant_image() {
        let mut s = toy_slice();
        s.image.fill(0.4);
        let spec = TransformSpec {
            blur_sigma: 1.2,
            ..TransformSpec::identity()
        };
        let out = apply_transform(&s, &spec);
        for &v in out.image.iter() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }
}
