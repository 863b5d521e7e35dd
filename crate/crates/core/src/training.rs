//! Fine-tuning loop: combined cross-entropy + soft-Dice loss, linear-warmup
//! exponential-decay learning-rate schedule, and AdamW restricted to the
//! trainable parameter groups (adapters, prompt embedding, decoder head).

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data_io::LabeledSlice;
use crate::error::{Error, Result};
use crate::model::{patch_order_indices, Model, PointPrompt};
use crate::scalar::Scalar;

pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub decay_rate: f64,
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 disables intermediate checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 2000,
            batch_size: 8,
            base_lr: 1e-3,
            warmup_steps: 250,
            decay_rate: 0.999,
            lambda_ce: 1.0,
            lambda_dice: 0.8,
            weight_decay: 0.01,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_steps and batch_size must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(0.0 < self.decay_rate && self.decay_rate <= 1.0) {
            return Err(Error::Config("decay_rate must be in (0, 1]".into()));
        }
        if self.lambda_ce < 0.0 || self.lambda_dice < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate at a zero-based step: linear warmup to `base_lr`, then
/// exponential decay `base_lr * decay_rate^(step - warmup_steps)`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        cfg.base_lr * (step + 1) as f64 / cfg.warmup_steps as f64
    } else {
        cfg.base_lr * cfg.decay_rate.powi((step - cfg.warmup_steps) as i32)
    }
}

/// Uniformly pick a present foreground class, then a uniform pixel of that
/// class. `None` when the label has no foreground.
pub fn sample_training_prompt<R: Rng>(label: &Array2<u8>, rng: &mut R) -> Option<PointPrompt> {
    let mut classes: Vec<u8> = label.iter().copied().filter(|&v| v != 0).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return None;
    }
    let class_id = classes[rng.gen_range(0..classes.len())];
    let pixels: Vec<(usize, usize)> = label
        .indexed_iter()
        .filter(|(_, &v)| v == class_id)
        .map(|((r, c), _)| (r, c))
        .collect();
    let (row, col) = pixels[rng.gen_range(0..pixels.len())];
    Some(PointPrompt { row, col, class_id })
}

/// Binary target in patch order for one prompt class.
pub fn patch_order_targets(label: &Array2<u8>, class_id: u8, patch: usize) -> Vec<usize> {
    let (h, _) = label.dim();
    let flat: Vec<u8> = label.iter().copied().collect();
    patch_order_indices(h, patch)
        .into_iter()
        .map(|i| usize::from(flat[i] == class_id))
        .collect()
}

/// Soft Dice loss over the foreground-channel softmax probability:
/// `1 - (2 * sum(p*t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn dice_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[usize],
) -> NodeId {
    let n = targets.len();
    let probs = g.softmax_rows(logits);
    let p_fg = g.slice_cols(probs, 1, 2);
    let t = g.constant(
        ArrayD::from_shape_vec(
            IxDyn(&[n, 1]),
            targets.iter().map(|&v| T::from_f64_c(v as f64)).collect(),
        )
        .unwrap(),
    );
    let eps = T::from_f64_c(DICE_EPS);
    let inter = g.mul(p_fg, t);
    let inter = g.sum_all(inter);
    let num = g.scale(inter, T::from_f64_c(2.0));
    let num = g.add_const(num, eps);
    let p_sum = g.sum_all(p_fg);
    let t_sum = g.sum_all(t);
    let den = g.add(p_sum, t_sum);
    let den = g.add_const(den, eps);
    let ratio = g.div(num, den);
    let neg = g.neg(ratio);
    g.add_const(neg, T::from_f64_c(1.0))
}

/// `lambda_ce * CE + lambda_dice * Dice`; also returns the two component
/// nodes for logging.
pub fn combined_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[usize],
    lambda_ce: f64,
    lambda_dice: f64,
) -> Result<(NodeId, NodeId, NodeId)> {
    let ce = g.cross_entropy_mean(logits, targets.to_vec())?;
    let dice = dice_loss_node(g, logits, targets);
    let wce = g.scale(ce, T::from_f64_c(lambda_ce));
    let wdice = g.scale(dice, T::from_f64_c(lambda_dice));
    Ok((g.add(wce, wdice), ce, dice))
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

pub struct AdamW<T: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
    m: Vec<Option<ArrayD<T>>>,
    v: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    /// One update over `(param id, gradient)` pairs. Weight decay is
    /// decoupled: `w -= lr * wd * w` in addition to the Adam step.
    pub fn apply(
        &mut self,
        store: &mut crate::lora::ParamStore<T>,
        grads: &[(usize, ArrayD<T>)],
        lr: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, grad) in grads {
            let m = self.m[*id].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self.v[*id].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let b1 = T::from_f64_c(self.beta1);
            let b2 = T::from_f64_c(self.beta2);
            let one = T::one();
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            let w = store
                .get_mut_trainable(*id)
                .expect("optimizer must only touch trainable parameters");
            let lr_t = T::from_f64_c(lr);
            let eps = T::from_f64_c(self.eps);
            let bc1 = T::from_f64_c(bc1);
            let bc2 = T::from_f64_c(bc2);
            let wd = T::from_f64_c(self.weight_decay);
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *w = *w - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_loss: f64,
    pub mean_last_50_loss: f64,
    pub log_path: Option<PathBuf>,
}

/// Fine-tune the trainable groups of `model` on in-memory labeled slices.
///
/// Writes a JSONL step log and periodic checkpoints under `out_dir` when
/// given. Aborts with a stage error if the loss becomes non-finite, after
/// restoring the last checkpointed weights when one exists.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    slices: &[LabeledSlice<T>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let usable: Vec<&LabeledSlice<T>> = slices.iter().filter(|s| s.foreground_pixels() > 0).collect();
    if usable.is_empty() {
        return Err(Error::InvalidInput(
            "training set has no slices with foreground".into(),
        ));
    }
    let frozen_before = model.store.frozen_checksum();
    let trainable_ids = model.store.trainable_ids();
    let mut opt = AdamW::new(model.store.len(), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let patch = model.config.patch_size;

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join("train_log.jsonl"))?)
        }
        None => None,
    };
    let mut recent: Vec<f64> = Vec::new();
    let mut last_loss = f64::NAN;
    let mut last_checkpoint_step = None;

    for step in 0..cfg.max_steps {
        let lr = lr_at(cfg, step);
        let mut grad_acc: Vec<Option<ArrayD<T>>> = vec![None; model.store.len()];
        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut dice_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let slice = usable[rng.gen_range(0..usable.len())];
            let prompt = sample_training_prompt(&slice.label, &mut rng)
                .expect("usable slices have foreground");
            let targets = patch_order_targets(&slice.label, prompt.class_id, patch);
            let mut fwd = model.forward(&slice.image, &prompt, true)?;
            let (loss, ce, dice) = combined_loss_node(
                &mut fwd.graph,
                fwd.logits,
                &targets,
                cfg.lambda_ce,
                cfg.lambda_dice,
            )?;
            loss_sum += fwd.graph.scalar_value(loss).to_f64_c();
            ce_sum += fwd.graph.scalar_value(ce).to_f64_c();
            dice_sum += fwd.graph.scalar_value(dice).to_f64_c();
            fwd.graph.backward(loss);
            for (pid, node) in &fwd.leaves {
                if let Some(grad) = fwd.graph.grad(*node) {
                    match &mut grad_acc[*pid] {
                        Some(acc) => *acc = &*acc + grad,
                        slot => *slot = Some(grad.clone()),
                    }
                }
            }
        }
        let inv_batch = 1.0 / cfg.batch_size as f64;
        let mean_loss = loss_sum * inv_batch;
        if !mean_loss.is_finite() {
            if let (Some(dir), Some(ckpt_step)) = (out_dir, last_checkpoint_step) {
                let restored = Model::<T>::load(&dir.join("checkpoint"))?;
                model.store = restored.store;
                return Err(Error::Stage {
                    stage: "train".into(),
                    source: Box::new(Error::Numeric(format!(
                        "non-finite loss at step {step}; restored checkpoint from step {ckpt_step}"
                    ))),
                });
            }
            return Err(Error::Stage {
                stage: "train".into(),
                source: Box::new(Error::Numeric(format!("non-finite loss at step {step}"))),
            });
        }
        let grads: Vec<(usize, ArrayD<T>)> = trainable_ids
            .iter()
            .filter_map(|&pid| {
                grad_acc[pid]
                    .take()
                    .map(|g| (pid, g.mapv(|v| v * T::from_f64_c(inv_batch))))
            })
            .collect();
        opt.apply(&mut model.store, &grads, lr);

        last_loss = mean_loss;
        recent.push(mean_loss);
        if recent.len() > 50 {
            recent.remove(0);
        }
        if let Some(f) = log_file.as_mut() {
            let entry = TrainLogEntry {
                step,
                lr,
                loss: mean_loss,
                ce: ce_sum * inv_batch,
                dice: dice_sum * inv_batch,
            };
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                model.save(&dir.join("checkpoint"))?;
                last_checkpoint_step = Some(step);
            }
        }
    }

    debug_assert_eq!(
        model.store.frozen_checksum(),
        frozen_before,
        "frozen base weights must not change during training"
    );
    if model.store.frozen_checksum() != frozen_before {
        return Err(Error::Numeric("frozen base weights changed".into()));
    }
    if let Some(dir) = out_dir {
        model.save(&dir.join("checkpoint"))?;
    }
    Ok(TrainReport {
        steps_run: cfg.max_steps,
        final_loss: last_loss,
        mean_last_50_loss: recent.iter().sum::<f64>() / recent.len() as f64,
        log_path: out_dir.map(|d| d.join("train_log.jsonl")),
    })
}
