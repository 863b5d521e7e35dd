//! Exemplar selection: pick the small labeled set that seeds synthesis.
//!
//! Two strategies: a random fraction of foreground-bearing slices
//! (single-target datasets) and a most-distinct-classes-per-volume pick
//! (multi-organ datasets).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{DatasetManifest, SliceRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    RandomFraction,
    MostOrgans,
}

/// Reference to one selected exemplar slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarEntry {
    pub path: String,
    pub volume_id: u32,
    pub slice_index: u32,
}

/// The selected exemplar set, serializable for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub strategy: SelectionStrategy,
    pub seed: u64,
    pub entries: Vec<ExemplarEntry>,
}

impl ExemplarSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExemplarSet> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))
    }
}

fn entry_of(r: &SliceRecord) -> ExemplarEntry {
    ExemplarEntry {
        path: r.path.clone(),
        volume_id: r.volume_id,
        slice_index: r.slice_index,
    }
}

/// Semantic sort so selection never depends on manifest record order.
fn sorted_records(manifest: &DatasetManifest) -> Vec<&SliceRecord> {
    let mut recs: Vec<&SliceRecord> = manifest.records.iter().collect();
    recs.sort_by_key(|r| (r.volume_id, r.slice_index));
    recs
}

/// Round half away from zero; `round(fraction * pool)` sets the sample size.
fn round_half_away(x: f64) -> usize {
    x.round() as usize
}

/// Uniformly sample `round(fraction * |pool|)` slices without replacement from
/// the pool of slices with at least `min_fg_pixels` foreground pixels.
pub fn select_random_fraction(
    manifest: &DatasetManifest,
    fraction: f64,
    min_fg_pixels: u64,
    seed: u64,
) -> Result<ExemplarSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "fraction must be in (0,1], got {fraction}"
        )));
    }
    let pool: Vec<&SliceRecord> = sorted_records(manifest)
        .into_iter()
        .filter(|r| r.foreground_pixels() >= min_fg_pixels)
        .collect();
    if pool.is_empty() {
        return Err(Error::Selection(format!(
            "no slices with >= {min_fg_pixels} foreground pixels"
        )));
    }
    let n = round_half_away(fraction * pool.len() as f64);
    if n == 0 {
        return Err(Error::Selection(format!(
            "fraction {fraction} of pool {} rounds to zero exemplars",
            pool.len()
        )));
    }
    // Partial Fisher-Yates: the first n positions are a uniform sample.
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n.min(pool.len() - 1) {
        let j = rng.gen_range(i..pool.len());
        idx.swap(i, j);
    }
    let mut chosen: Vec<usize> = idx[..n].to_vec();
    chosen.sort_unstable();
    Ok(ExemplarSet {
        strategy: SelectionStrategy::RandomFraction,
        seed,
        entries: chosen.into_iter().map(|i| entry_of(pool[i])).collect(),
    })
}

/// From `total / per_volume_quota` volumes chosen uniformly at random, take the
/// quota of slices per volume with the most distinct nonzero classes.
/// Ties break toward higher foreground pixel total, then lower slice index.
pub fn select_most_organs(
    manifest: &DatasetManifest,
    total: usize,
    per_volume_quota: usize,
    seed: u64,
) -> Result<ExemplarSet> {
    if per_volume_quota == 0 || total == 0 || total % per_volume_quota != 0 {
        return Err(Error::InvalidInput(format!(
            "total ({total}) must be a positive multiple of per_volume_quota ({per_volume_quota})"
        )));
    }
    let num_volumes = total / per_volume_quota;
    let mut by_volume: BTreeMap<u32, Vec<&SliceRecord>> = BTreeMap::new();
    for r in sorted_records(manifest) {
        by_volume.entry(r.volume_id).or_default().push(r);
    }
    if num_volumes > by_volume.len() {
        return Err(Error::Selection(format!(
            "need {num_volumes} volumes, manifest has {}",
            by_volume.len()
        )));
    }
    let volume_ids: Vec<u32> = by_volume.keys().copied().collect();
    let chosen_volumes: Vec<u32> = if num_volumes == volume_ids.len() {
        volume_ids
    } else {
        let mut idx: Vec<usize> = (0..volume_ids.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..num_volumes {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        let mut picked: Vec<u32> = idx[..num_volumes].iter().map(|&i| volume_ids[i]).collect();
        picked.sort_unstable();
        picked
    };
    let mut entries = Vec::with_capacity(total);
    for vol in chosen_volumes {
        let slices = &by_volume[&vol];
        if per_volume_quota > slices.len() {
            return Err(Error::Selection(format!(
                "volume {vol} has {} slices, quota is {per_volume_quota}",
                slices.len()
            )));
        }
        let mut ranked: Vec<&&SliceRecord> = slices.iter().collect();
        ranked.sort_by(|a, b| {
            b.distinct_classes()
                .cmp(&a.distinct_classes())
                .then(b.foreground_pixels().cmp(&a.foreground_pixels()))
                .then(a.slice_index.cmp(&b.slice_index))
        });
        for r in ranked.into_iter().take(per_volume_quota) {
            if r.foreground_pixels() == 0 {
                return Err(Error::Selection(format!(
                    "volume {vol} quota reaches slices without foreground"
                )));
            }
            entries.push(entry_of(r));
        }
    }
    Ok(ExemplarSet {
        strategy: SelectionStrategy::MostOrgans,
        seed,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::MANIFEST_VERSION;

    fn record(vol: u32, idx: u32, counts: Vec<u64>) -> SliceRecord {
        SliceRecord {
            path: format!("vol{vol:03}_slice{idx:03}.bin"),
            volume_id: vol,
            slice_index: idx,
            has_foreground: counts.iter().sum::<u64>() > 0,
            class_pixel_counts: counts,
        }
    }

    fn manifest(records: Vec<SliceRecord>, k: usize) -> DatasetManifest {
        DatasetManifest {
            version: MANIFEST_VERSION,
            class_count: k,
            normalization: "minmax".into(),
            split: "train".into(),
            pixel_spacing: (1.0, 1.0),
            records,
        }
    }

    #[test]
    fn random_fraction_count_matches_rounding() {
        // 14662 eligible at fraction 0.01 rounds to 147
        assert_eq!(round_half_away(0.01 * 14662.0), 147);
        let recs: Vec<SliceRecord> = (0..200)
            .map(|i| record(i / 20, i % 20, vec![15 + i as u64]))
            .collect();
        let m = manifest(recs, 1);
        let set = select_random_fraction(&m, 0.05, 10, 3).unwrap();
        assert_eq!(set.entries.len(), 10);
    }

    #[test]
    fn random_fraction_full_pool_identity() {
        let recs: Vec<SliceRecord> = (0..30).map(|i| record(0, i, vec![12])).collect();
        let m = manifest(recs, 1);
        let set = select_random_fraction(&m, 1.0, 10, 9).unwrap();
        assert_eq!(set.entries.len(), 30);
    }

    #[test]
    fn random_fraction_respects_threshold_and_determinism() {
        let recs: Vec<SliceRecord> = (0..100)
            .map(|i| record(i / 10, i % 10, vec![if i % 3 == 0 { 5 } else { 20 }]))
            .collect();
        let m = manifest(recs.clone(), 1);
        let a = select_random_fraction(&m, 0.2, 10, 5).unwrap();
        let b = select_random_fraction(&m, 0.2, 10, 5).unwrap();
        assert_eq!(a, b);
        // every pick is above threshold
        for e in &a.entries {
            let r = recs
                .iter()
                .find(|r| r.path == e.path)
                .expect("entry in manifest");
            assert!(r.foreground_pixels() >= 10);
        }
        // pool of 66 slices (i % 3 != 0), 20% rounds to 13
        assert_eq!(a.entries.len(), round_half_away(0.2 * 66.0));
    }

    #[test]
    fn random_fraction_empty_pool_errors() {
        let recs: Vec<SliceRecord> = (0..10).map(|i| record(0, i, vec![0])).collect();
        let m = manifest(recs, 1);
        assert!(matches!(
            select_random_fraction(&m, 0.5, 10, 1),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn most_organs_one_per_volume() {
        let mut recs = Vec::new();
        for vol in 0..18u32 {
            for idx in 0..5u32 {
                // slice `vol % 5` in each volume has 3 classes, the rest 1
                let counts = if idx == vol % 5 {
                    vec![10, 10, 10]
                } else {
                    vec![30, 0, 0]
                };
                recs.push(record(vol, idx, counts));
            }
        }
        let m = manifest(recs, 3);
        let set = select_most_organs(&m, 18, 1, 0).unwrap();
        assert_eq!(set.entries.len(), 18);
        for e in &set.entries {
            assert_eq!(e.slice_index, e.volume_id % 5);
        }
    }

    #[test]
    fn most_organs_subset_of_volumes() {
        let mut recs = Vec::new();
        for vol in 0..18u32 {
            for idx in 0..4u32 {
                recs.push(record(vol, idx, vec![10, idx as u64]));
            }
        }
        let m = manifest(recs, 2);
        let set = select_most_organs(&m, 9, 1, 5).unwrap();
        assert_eq!(set.entries.len(), 9);
        let vols: std::collections::BTreeSet<u32> =
            set.entries.iter().map(|e| e.volume_id).collect();
        assert_eq!(vols.len(), 9);
        // deterministic
        let again = select_most_organs(&m, 9, 1, 5).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn most_organs_tiebreak_and_order_invariance() {
        // two slices with 2 distinct classes; idx 3 has more foreground
        let recs = vec![
            record(0, 0, vec![5, 5]),
            record(0, 3, vec![50, 50]),
            record(0, 7, vec![100, 0]),
        ];
        let m = manifest(recs.clone(), 2);
        let set = select_most_organs(&m, 1, 1, 0).unwrap();
        assert_eq!(set.entries[0].slice_index, 3);
        // reversed record order gives the same answer
        let mut rev = recs;
        rev.reverse();
        let m2 = manifest(rev, 2);
        assert_eq!(select_most_organs(&m2, 1, 1, 0).unwrap(), set);
    }

    #[test]
    fn most_organs_quota_exceeds_slices() {
        let recs = vec![record(0, 0, vec![5]), record(1, 0, vec![5])];
        let m = manifest(recs, 1);
        assert!(matches!(
            select_most_organs(&m, 4, 2, 0),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn exemplar_set_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let set = ExemplarSet {
            strategy: SelectionStrategy::MostOrgans,
            seed: 5,
            entries: vec![ExemplarEntry {
                path: "a.bin".into(),
                volume_id: 1,
                slice_index: 2,
            }],
        };
        let p = dir.path().join("ex.json");
        set.save(&p).unwrap();
        assert_eq!(ExemplarSet::load(&p).unwrap(), set);
    }
}
