//! Experiment orchestration: one JSON config drives the full pipeline
//! (split, exemplar selection, synthesis, fine-tuning, evaluation) with
//! per-stage seeds derived from a single global seed, plus run comparison.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_io::{load_manifest, load_record_slice, split_dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, write_report, MetricsReport, PromptStrategy};
use crate::exemplar_selection::{
    select_most_organs, select_random_fraction, ExemplarSet,
};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::synthesis::{build_dataset, collect_backgrounds, SynthesisConfig};
use crate::training::{train, TrainConfig};
use crate::data_io::LabeledSlice;

/// Stage seed: the first 8 bytes (little-endian) of
/// `SHA-256(global_seed_le || stage_name)`. Stages stay decoupled — changing
/// one stage's draws never perturbs another's.
pub fn stage_seed(global_seed: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum SelectionSpec {
    RandomFraction {
        fraction: f64,
        #[serde(default = "default_min_fg")]
        min_fg_pixels: u64,
    },
    MostOrgans {
        total: usize,
        per_volume_quota: usize,
    },
}

fn default_train_fraction() -> f64 {
    0.7
}

fn default_min_fg() -> u64 {
    1
}

/// One end-to-end run. Seeds inside `synthesis` and `train` are ignored and
/// replaced by stage seeds derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Dataset root containing `manifest.json`.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Train/test volume split applied when the manifest split is "all".
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub selection: SelectionSpec,
    /// `None` trains directly on the selected exemplars (no synthesis).
    pub synthesis: Option<SynthesisConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_eval_strategy")]
    pub eval_strategy: PromptStrategy,
    /// Also evaluate a freshly initialized (untrained) model as a baseline.
    #[serde(default)]
    pub eval_untrained: bool,
}

fn default_eval_strategy() -> PromptStrategy {
    PromptStrategy::Interior
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad experiment config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("experiment name must not be empty".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        if let Some(s) = &self.synthesis {
            s.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization, hex-encoded; stamped
    /// into run outputs so reruns can be matched to their configuration.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub num_exemplars: usize,
    pub num_training_slices: usize,
    pub num_test_slices: usize,
    pub steps_run: usize,
    pub final_loss: f64,
    pub mean_dsc: f64,
    pub mean_hd95: Option<f64>,
    pub untrained_mean_dsc: Option<f64>,
    pub out_dir: PathBuf,
}

fn load_slices<T: Scalar>(
    manifest: &DatasetManifest,
    dir: &Path,
    records: impl Iterator<Item = usize>,
) -> Result<Vec<LabeledSlice<T>>> {
    records
        .map(|i| load_record_slice(dir, manifest, &manifest.records[i]))
        .collect()
}

fn select(manifest: &DatasetManifest, spec: &SelectionSpec, seed: u64) -> Result<ExemplarSet> {
    match spec {
        SelectionSpec::RandomFraction {
            fraction,
            min_fg_pixels,
        } => select_random_fraction(manifest, *fraction, *min_fg_pixels, seed),
        SelectionSpec::MostOrgans {
            total,
            per_volume_quota,
        } => select_most_organs(manifest, *total, *per_volume_quota, seed),
    }
}

/// Execute the full pipeline described by `cfg`. All artifacts land under
/// `cfg.out_dir`: `exemplars.json`, `synth/`, `train/`, `eval/`, and
/// `run.json` with the summary and config hash.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    // -- data -----------------------------------------------------------
    let manifest =
        load_manifest(&cfg.data_dir.join("manifest.json")).map_err(|e| e.in_stage("data"))?;
    let (train_manifest, test_manifest) = if manifest.split == "all" {
        split_dataset(&manifest, cfg.train_fraction, stage_seed(cfg.seed, "split"))
            .map_err(|e| e.in_stage("data"))?
    } else {
        return Err(
            Error::Config("experiment data_dir must hold an unsplit (\"all\") manifest".into())
                .in_stage("data"),
        );
    };

    // -- exemplar selection ----------------------------------------------
    let exemplar_set = select(&train_manifest, &cfg.selection, stage_seed(cfg.seed, "select"))
        .map_err(|e| e.in_stage("select"))?;
    exemplar_set
        .save(&cfg.out_dir.join("exemplars.json"))
        .map_err(|e| e.in_stage("select"))?;
    let chosen: Vec<usize> = train_manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            exemplar_set
                .entries
                .iter()
                .any(|e| e.volume_id == r.volume_id && e.slice_index == r.slice_index)
        })
        .map(|(i, _)| i)
        .collect();
    let exemplars: Vec<LabeledSlice<T>> =
        load_slices(&train_manifest, &cfg.data_dir, chosen.into_iter())
            .map_err(|e| e.in_stage("select"))?;

    // -- synthesis (or exemplar passthrough) ------------------------------
    let training_slices: Vec<LabeledSlice<T>> = match &cfg.synthesis {
        Some(synth_cfg) => {
            let synth_cfg = SynthesisConfig {
                seed: stage_seed(cfg.seed, "synthesize"),
                ..synth_cfg.clone()
            };
            let backgrounds = collect_backgrounds::<T>(&train_manifest, &cfg.data_dir)
                .map_err(|e| e.in_stage("synthesize"))?;
            let synth_dir = cfg.out_dir.join("synth");
            let synth_manifest = build_dataset(
                &exemplars,
                &backgrounds,
                &synth_cfg,
                manifest.class_count,
                &synth_dir,
            )
            .map_err(|e| e.in_stage("synthesize"))?;
            load_slices(
                &synth_manifest,
                &synth_dir,
                0..synth_manifest.records.len(),
            )
            .map_err(|e| e.in_stage("synthesize"))?
        }
        None => exemplars.clone(),
    };

    // -- training ----------------------------------------------------------
    let mut model =
        Model::<T>::new(cfg.model.clone(), stage_seed(cfg.seed, "model")).map_err(|e| e.in_stage("train"))?;
    let untrained = if cfg.eval_untrained {
        Some(Model::<T>::new(cfg.model.clone(), stage_seed(cfg.seed, "model"))?)
    } else {
        None
    };
    let train_cfg = TrainConfig {
        seed: stage_seed(cfg.seed, "train"),
        ..cfg.train.clone()
    };
    let train_dir = cfg.out_dir.join("train");
    let train_report = train(&mut model, &training_slices, &train_cfg, Some(&train_dir))?;

    // -- evaluation ----------------------------------------------------------
    let eval_strategy = match cfg.eval_strategy {
        PromptStrategy::Random { .. } => PromptStrategy::Random {
            seed: stage_seed(cfg.seed, "eval"),
        },
        s => s,
    };
    let test_slices: Vec<LabeledSlice<T>> = load_slices(
        &test_manifest,
        &cfg.data_dir,
        0..test_manifest.records.len(),
    )
    .map_err(|e| e.in_stage("eval"))?;
    let report =
        evaluate(&model, &test_slices, eval_strategy).map_err(|e| e.in_stage("eval"))?;
    write_report(&report, &cfg.out_dir.join("eval")).map_err(|e| e.in_stage("eval"))?;
    let untrained_mean_dsc = match untrained {
        Some(m) => {
            let r = evaluate(&m, &test_slices, eval_strategy).map_err(|e| e.in_stage("eval"))?;
            write_report(&r, &cfg.out_dir.join("eval_untrained"))
                .map_err(|e| e.in_stage("eval"))?;
            Some(r.mean_dsc)
        }
        None => None,
    };

    let summary = RunSummary {
        name: cfg.name.clone(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        num_exemplars: exemplars.len(),
        num_training_slices: training_slices.len(),
        num_test_slices: test_slices.len(),
        steps_run: train_report.steps_run,
        final_loss: train_report.final_loss,
        mean_dsc: report.mean_dsc,
        mean_hd95: report.mean_hd95,
        untrained_mean_dsc,
        out_dir: cfg.out_dir.clone(),
    };
    std::fs::write(
        cfg.out_dir.join("run.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Load a finished run's summary and evaluation report.
pub fn load_run(dir: &Path) -> Result<(RunSummary, MetricsReport)> {
    let summary: RunSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run.json"))?)?;
    let report: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(dir.join("eval/metrics.json"))?)?;
    Ok((summary, report))
}

/// Side-by-side comparison of finished runs: DSC/HD95 per run with deltas
/// against the first (baseline) run.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<String> {
    if dirs.len() < 2 {
        return Err(Error::InvalidInput("compare needs at least 2 run dirs".into()));
    }
    let runs: Vec<(RunSummary, MetricsReport)> =
        dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let base_dsc = runs[0].0.mean_dsc;
    let base_hd = runs[0].0.mean_hd95;
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>9} {:>9} {:>10} {:>10}\n",
        "run", "mean_dsc", "d_dsc", "mean_hd95", "d_hd95"
    ));
    for (summary, _) in &runs {
        let d_dsc = summary.mean_dsc - base_dsc;
        let hd = summary
            .mean_hd95
            .map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let d_hd = match (summary.mean_hd95, base_hd) {
            (Some(a), Some(b)) => format!("{:+.4}", a - b),
            _ => "n/a".to_string(),
        };
        out.push_str(&format!(
            "{:<24} {:>9.4} {:>+9.4} {:>10} {:>10}\n",
            summary.name, summary.mean_dsc, d_dsc, hd, d_hd
        ));
    }
    Ok(out)
}
