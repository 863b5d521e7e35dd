//! A compact point-promptable segmenter: ViT image encoder,
//! Fourier point-prompt encoder, and a lightweight transformer mask decoder
//! emitting two classes (background + prompted target).
//!
//! All base weights are frozen; LoRA adapters on query/value projections,
//! the positive-point embedding, and the decoder output head train.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::lora::{
    count_params, load_group, save_group, Init, LoraConfig, ParamCountReport, ParamGroup,
    ParamSpec, ParamStore, ProjectionRole,
};
use crate::scalar::Scalar;

/// A pixel coordinate plus target-class id driving the mask decoder.
/// Polarity is always positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub row: usize,
    pub col: usize,
    pub class_id: u8,
}

/// Two-channel mask logits (background, target) at input resolution.
#[derive(Debug, Clone)]
pub struct MaskLogits<T: Scalar> {
    pub logits: Array3<T>,
}

impl<T: Scalar> MaskLogits<T> {
    pub fn new(logits: Array3<T>) -> Result<Self> {
        if logits.dim().0 != 2 {
            return Err(Error::InvalidInput("mask logits must have 2 channels".into()));
        }
        Ok(MaskLogits { logits })
    }

    /// Per-pixel argmax of the two channels: the target-class binary mask.
    pub fn argmax_mask(&self) -> Array2<u8> {
        let (_, h, w) = self.logits.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            u8::from(self.logits[[1, r, c]] > self.logits[[0, r, c]])
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub decoder_depth: usize,
    /// Learned positional embedding on patch tokens; disabled only in
    /// permutation-equivariance test configurations.
    #[serde(default = "default_true")]
    pub use_pos_embed: bool,
    /// Std of the random Fourier coordinate-encoding matrix.
    #[serde(default = "default_fourier_scale")]
    pub fourier_scale: f64,
    #[serde(default)]
    pub lora: LoraConfig,
}

fn default_true() -> bool {
    true
}

fn default_fourier_scale() -> f64 {
    4.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        // desk-scale default
        ModelConfig {
            input_size: 128,
            patch_size: 8,
            embed_dim: 96,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            decoder_depth: 2,
            use_pos_embed: true,
            fourier_scale: default_fourier_scale(),
            lora: LoraConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for finite-difference gradient checks.
    pub fn toy_32() -> Self {
        ModelConfig {
            input_size: 32,
            patch_size: 8,
            embed_dim: 16,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            decoder_depth: 1,
            use_pos_embed: true,
            fourier_scale: default_fourier_scale(),
            lora: LoraConfig {
                rank: 2,
                ..LoraConfig::default()
            },
        }
    }

    /// ViT-B-like dimensions, used only for parameter-count reporting.
    pub fn base_like() -> Self {
        ModelConfig {
            input_size: 1024,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            decoder_depth: 2,
            use_pos_embed: true,
            fourier_scale: default_fourier_scale(),
            lora: LoraConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of patch_size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::Config("embed_dim must be even".into()));
        }
        if self.depth == 0 || self.decoder_depth == 0 {
            return Err(Error::Config("depth and decoder_depth must be >= 1".into()));
        }
        self.lora.check_rank(self.embed_dim, self.embed_dim)?;
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

fn block_specs(prefix: &str, cfg: &ModelConfig, adapt: bool, specs: &mut Vec<ParamSpec>) {
    let d = cfg.embed_dim;
    let hidden = d * cfg.mlp_ratio;
    let r = cfg.lora.rank;
    let frozen = |name: String, shape: Vec<usize>, init: Init| ParamSpec {
        name,
        shape,
        group: ParamGroup::FrozenBase,
        trainable: false,
        init,
    };
    let w_std = Init::Gaussian(0.02);
    for ln in ["ln1", "ln2"] {
        specs.push(frozen(format!("{prefix}.{ln}.gamma"), vec![d], Init::Ones));
        specs.push(frozen(format!("{prefix}.{ln}.beta"), vec![d], Init::Zeros));
    }
    for proj in ["wq", "wk", "wv", "wo"] {
        specs.push(frozen(format!("{prefix}.attn.{proj}"), vec![d, d], w_std));
        specs.push(frozen(
            format!("{prefix}.attn.{}", proj.replace('w', "b")),
            vec![d],
            Init::Zeros,
        ));
    }
    if adapt {
        for role in [ProjectionRole::Query, ProjectionRole::Value] {
            if !cfg.lora.adapts(role) {
                continue;
            }
            let tag = match role {
                ProjectionRole::Query => "q",
                ProjectionRole::Value => "v",
            };
            specs.push(ParamSpec {
                name: format!("{prefix}.attn.{tag}.lora_a"),
                shape: vec![r, d],
                group: ParamGroup::LoraAdapter,
                trainable: true,
                init: Init::Gaussian(cfg.lora.init_std),
            });
            specs.push(ParamSpec {
                name: format!("{prefix}.attn.{tag}.lora_b"),
                shape: vec![d, r],
                group: ParamGroup::LoraAdapter,
                trainable: true,
                init: Init::Zeros,
            });
        }
    }
    specs.push(frozen(format!("{prefix}.mlp.w1"), vec![hidden, d], w_std));
    specs.push(frozen(format!("{prefix}.mlp.b1"), vec![hidden], Init::Zeros));
    specs.push(frozen(format!("{prefix}.mlp.w2"), vec![d, hidden], w_std));
    specs.push(frozen(format!("{prefix}.mlp.b2"), vec![d], Init::Zeros));
}

/// The full parameter layout for a configuration; counting and allocation
/// both derive from this.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let p2 = cfg.patch_size * cfg.patch_size;
    let mut specs = Vec::new();
    let frozen = |name: &str, shape: Vec<usize>, init: Init| ParamSpec {
        name: name.to_string(),
        shape,
        group: ParamGroup::FrozenBase,
        trainable: false,
        init,
    };
    specs.push(frozen("patch_embed.w", vec![d, p2], Init::Gaussian(0.02)));
    specs.push(frozen("patch_embed.b", vec![d], Init::Zeros));
    if cfg.use_pos_embed {
        specs.push(frozen(
            "pos_embed",
            vec![cfg.num_tokens(), d],
            Init::Gaussian(0.02),
        ));
    }
    for i in 0..cfg.depth {
        block_specs(&format!("enc{i}"), cfg, cfg.lora.apply_to_encoder, &mut specs);
    }
    specs.push(frozen("enc.ln_f.gamma", vec![d], Init::Ones));
    specs.push(frozen("enc.ln_f.beta", vec![d], Init::Zeros));
    specs.push(frozen(
        "prompt.fourier",
        vec![d / 2, 2],
        Init::Gaussian(cfg.fourier_scale),
    ));
    specs.push(ParamSpec {
        name: "prompt.point_embed".to_string(),
        shape: vec![1, d],
        group: ParamGroup::PromptEmbedding,
        trainable: true,
        init: Init::Gaussian(0.02),
    });
    for i in 0..cfg.decoder_depth {
        block_specs(&format!("dec{i}"), cfg, cfg.lora.apply_to_decoder, &mut specs);
    }
    specs.push(frozen("dec.ln_f.gamma", vec![d], Init::Ones));
    specs.push(frozen("dec.ln_f.beta", vec![d], Init::Zeros));
    specs.push(ParamSpec {
        name: "head.w".to_string(),
        shape: vec![p2 * 2, d],
        group: ParamGroup::DecoderHead,
        trainable: true,
        init: Init::Gaussian(0.02),
    });
    specs.push(ParamSpec {
        name: "head.b".to_string(),
        shape: vec![p2 * 2],
        group: ParamGroup::DecoderHead,
        trainable: true,
        init: Init::Zeros,
    });
    specs
}

/// Parameter accounting for a configuration without allocating weights.
pub fn param_count_report(cfg: &ModelConfig) -> ParamCountReport {
    count_params(&param_specs(cfg))
}

// ---------------------------------------------------------------------------
// Pixel ordering
// ---------------------------------------------------------------------------

/// Flat image index for each position in patch order (token-major,
/// row-major within each patch). Loss targets and mask scatter share this.
pub fn patch_order_indices(input_size: usize, patch: usize) -> Vec<usize> {
    let gs = input_size / patch;
    let mut idx = Vec::with_capacity(input_size * input_size);
    for pr in 0..gs {
        for pc in 0..gs {
            for i in 0..patch {
                for j in 0..patch {
                    idx.push((pr * patch + i) * input_size + (pc * patch + j));
                }
            }
        }
    }
    idx
}

fn patchify<T: Scalar>(image: &Array2<T>, patch: usize) -> Array2<T> {
    let (h, w) = image.dim();
    let gs = h / patch;
    let mut out = Array2::zeros((gs * gs, patch * patch));
    for pr in 0..gs {
        for pc in 0..gs {
            let t = pr * gs + pc;
            for i in 0..patch {
                for j in 0..patch {
                    out[[t, i * patch + j]] = image[[pr * patch + i, pc * patch + j]];
                }
            }
        }
    }
    let _ = w;
    out
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

/// Handle to a built forward graph: the graph, the pixel-logit node
/// (rows in patch order, two columns), and the leaf node of every parameter.
pub struct Forward<T: Scalar> {
    pub graph: Graph<T>,
    pub logits: NodeId,
    /// (store parameter id, leaf node) for each parameter.
    pub leaves: Vec<(usize, NodeId)>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::init(param_specs(&config), &mut rng);
        Ok(Model { config, store })
    }

    fn check_image(&self, image: &Array2<T>) -> Result<()> {
        let s = self.config.input_size;
        if image.dim() != (s, s) {
            return Err(Error::InvalidInput(format!(
                "image shape {:?} != model input {}x{}",
                image.dim(),
                s,
                s
            )));
        }
        Ok(())
    }

    fn check_prompt(&self, prompt: &PointPrompt) -> Result<()> {
        let s = self.config.input_size;
        if prompt.row >= s || prompt.col >= s {
            return Err(Error::InvalidInput(format!(
                "prompt ({}, {}) outside {}x{} image",
                prompt.row, prompt.col, s, s
            )));
        }
        Ok(())
    }

    /// Deterministic Fourier features of a prompt coordinate:
    /// [sin(2 pi f), cos(2 pi f)] with f = F . (y, x), F the frozen matrix.
    fn fourier_features(&self, prompt: &PointPrompt) -> Array1<T> {
        let s = (self.config.input_size - 1).max(1) as f64;
        let y = prompt.row as f64 / s;
        let x = prompt.col as f64 / s;
        let fourier = self.store.get_by_name("prompt.fourier");
        let half = self.config.embed_dim / 2;
        let mut out = Array1::zeros(self.config.embed_dim);
        for i in 0..half {
            let f = fourier[[i, 0]].to_f64_c() * y + fourier[[i, 1]].to_f64_c() * x;
            let ang = 2.0 * std::f64::consts::PI * f;
            out[i] = T::from_f64_c(ang.sin());
            out[half + i] = T::from_f64_c(ang.cos());
        }
        out
    }

    fn leaf_map(&self, graph: &mut Graph<T>, with_grad: bool) -> Vec<(usize, NodeId)> {
        (0..self.store.len())
            .map(|i| {
                let trainable = self.store.specs()[i].trainable && with_grad;
                (i, graph.leaf(self.store.get(i).clone(), trainable))
            })
            .collect()
    }

    fn node(&self, leaves: &[(usize, NodeId)], name: &str) -> NodeId {
        leaves[self.store.id(name)].1
    }

    /// x . W^T + b, with an optional LoRA bypass.
    fn linear(
        &self,
        g: &mut Graph<T>,
        leaves: &[(usize, NodeId)],
        x: NodeId,
        w: &str,
        b: &str,
        lora: Option<(&str, &str)>,
    ) -> NodeId {
        let wt = {
            let wn = self.node(leaves, w);
            g.transpose(wn)
        };
        let mut y = g.matmul(x, wt);
        if let Some((an, bn)) = lora {
            let at = {
                let a = self.node(leaves, an);
                g.transpose(a)
            };
            let bt = {
                let b = self.node(leaves, bn);
                g.transpose(b)
            };
            let xa = g.matmul(x, at);
            let bypass = g.matmul(xa, bt);
            let scaled = g.scale(bypass, T::from_f64_c(self.config.lora.scaling));
            y = g.add(y, scaled);
        }
        let bias = self.node(leaves, b);
        g.add_row(y, bias)
    }

    fn transformer_block(
        &self,
        g: &mut Graph<T>,
        leaves: &[(usize, NodeId)],
        x: NodeId,
        prefix: &str,
        adapted: bool,
    ) -> NodeId {
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let heads = cfg.num_heads;
        let dh = d / heads;
        let eps = T::from_f64_c(1e-6);
        let ln = |g: &mut Graph<T>, x: NodeId, tag: &str| {
            let gamma = self.node(leaves, &format!("{prefix}.{tag}.gamma"));
            let beta = self.node(leaves, &format!("{prefix}.{tag}.beta"));
            g.layer_norm(x, gamma, beta, eps)
        };
        let h1 = ln(g, x, "ln1");
        let lora_for = |role: &str| -> Option<(String, String)> {
            if !adapted {
                return None;
            }
            let wanted = match role {
                "q" => ProjectionRole::Query,
                _ => ProjectionRole::Value,
            };
            if cfg.lora.adapts(wanted) {
                Some((
                    format!("{prefix}.attn.{role}.lora_a"),
                    format!("{prefix}.attn.{role}.lora_b"),
                ))
            } else {
                None
            }
        };
        let ql = lora_for("q");
        let q = self.linear(
            g,
            leaves,
            h1,
            &format!("{prefix}.attn.wq"),
            &format!("{prefix}.attn.bq"),
            ql.as_ref().map(|(a, b)| (a.as_str(), b.as_str())),
        );
        let k = self.linear(
            g,
            leaves,
            h1,
            &format!("{prefix}.attn.wk"),
            &format!("{prefix}.attn.bk"),
            None,
        );
        let vl = lora_for("v");
        let v = self.linear(
            g,
            leaves,
            h1,
            &format!("{prefix}.attn.wv"),
            &format!("{prefix}.attn.bv"),
            vl.as_ref().map(|(a, b)| (a.as_str(), b.as_str())),
        );
        let scale = T::from_f64_c(1.0 / (dh as f64).sqrt());
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, c0, c1);
            let kh = g.slice_cols(k, c0, c1);
            let vh = g.slice_cols(v, c0, c1);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            head_outs.push(g.matmul(attn, vh));
        }
        let cat = g.concat_cols(&head_outs);
        let proj = self.linear(
            g,
            leaves,
            cat,
            &format!("{prefix}.attn.wo"),
            &format!("{prefix}.attn.bo"),
            None,
        );
        let x = g.add(x, proj);
        let h2 = ln(g, x, "ln2");
        let up = self.linear(
            g,
            leaves,
            h2,
            &format!("{prefix}.mlp.w1"),
            &format!("{prefix}.mlp.b1"),
            None,
        );
        let act = g.gelu(up);
        let down = self.linear(
            g,
            leaves,
            act,
            &format!("{prefix}.mlp.w2"),
            &format!("{prefix}.mlp.b2"),
            None,
        );
        g.add(x, down)
    }

    fn build_encoder(
        &self,
        g: &mut Graph<T>,
        leaves: &[(usize, NodeId)],
        image: &Array2<T>,
    ) -> NodeId {
        let cfg = &self.config;
        let patches = g.constant(patchify(image, cfg.patch_size).into_dyn());
        let mut x = self.linear(g, leaves, patches, "patch_embed.w", "patch_embed.b", None);
        if cfg.use_pos_embed {
            let pos = self.node(leaves, "pos_embed");
            x = g.add(x, pos);
        }
        for i in 0..cfg.depth {
            x = self.transformer_block(g, leaves, x, &format!("enc{i}"), cfg.lora.apply_to_encoder);
        }
        let gamma = self.node(leaves, "enc.ln_f.gamma");
        let beta = self.node(leaves, "enc.ln_f.beta");
        g.layer_norm(x, gamma, beta, T::from_f64_c(1e-6))
    }

    fn build_decoder(
        &self,
        g: &mut Graph<T>,
        leaves: &[(usize, NodeId)],
        image_emb: NodeId,
        prompt_token: NodeId,
    ) -> NodeId {
        let cfg = &self.config;
        let mut x = g.concat_rows(&[prompt_token, image_emb]);
        for i in 0..cfg.decoder_depth {
            x = self.transformer_block(g, leaves, x, &format!("dec{i}"), cfg.lora.apply_to_decoder);
        }
        let gamma = self.node(leaves, "dec.ln_f.gamma");
        let beta = self.node(leaves, "dec.ln_f.beta");
        let x = g.layer_norm(x, gamma, beta, T::from_f64_c(1e-6));
        let tokens = g.slice_rows(x, 1, cfg.num_tokens() + 1);
        let out = self.linear(g, leaves, tokens, "head.w", "head.b", None);
        // (N, p^2 * 2) rows interleave [pixel0_bg, pixel0_fg, pixel1_bg, ...]
        let p2 = cfg.patch_size * cfg.patch_size;
        g.reshape(out, &[cfg.num_tokens() * p2, 2])
    }

    fn build_prompt_token(
        &self,
        g: &mut Graph<T>,
        leaves: &[(usize, NodeId)],
        prompt: &PointPrompt,
    ) -> NodeId {
        let feats = self
            .fourier_features(prompt)
            .insert_axis(ndarray::Axis(0))
            .into_dyn();
        let coord = g.constant(feats);
        let point = self.node(leaves, "prompt.point_embed");
        g.add(coord, point)
    }

    /// End-to-end forward pass; pixel logits are in patch order.
    pub fn forward(&self, image: &Array2<T>, prompt: &PointPrompt, with_grad: bool) -> Result<Forward<T>> {
        self.check_image(image)?;
        self.check_prompt(prompt)?;
        let mut g = Graph::new();
        let leaves = self.leaf_map(&mut g, with_grad);
        let image_emb = self.build_encoder(&mut g, &leaves, image);
        let prompt_token = self.build_prompt_token(&mut g, &leaves, prompt);
        let logits = self.build_decoder(&mut g, &leaves, image_emb, prompt_token);
        Ok(Forward {
            graph: g,
            logits,
            leaves,
        })
    }

    /// Patch-token image embedding grid, (num_tokens x embed_dim).
    pub fn encode_image(&self, image: &Array2<T>) -> Result<Array2<T>> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let leaves = self.leaf_map(&mut g, false);
        let emb = self.build_encoder(&mut g, &leaves, image);
        Ok(g.value(emb)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap())
    }

    /// Prompt embedding: Fourier coordinate encoding plus the learned
    /// positive-point vector. Class id enters only through pixel choice.
    pub fn encode_point(&self, prompt: &PointPrompt) -> Result<Array1<T>> {
        self.check_prompt(prompt)?;
        let point = self.store.get_by_name("prompt.point_embed");
        let mut out = self.fourier_features(prompt);
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + point[[0, i]];
        }
        Ok(out)
    }

    /// Decode two-channel logits from precomputed embeddings.
    pub fn decode_masks(
        &self,
        image_embedding: &Array2<T>,
        prompt_embedding: &Array1<T>,
    ) -> Result<MaskLogits<T>> {
        let cfg = &self.config;
        if image_embedding.dim() != (cfg.num_tokens(), cfg.embed_dim) {
            return Err(Error::InvalidInput(format!(
                "image embedding {:?} does not match config grid ({} x {})",
                image_embedding.dim(),
                cfg.num_tokens(),
                cfg.embed_dim
            )));
        }
        if prompt_embedding.len() != cfg.embed_dim {
            return Err(Error::InvalidInput(format!(
                "prompt embedding length {} != embed_dim {}",
                prompt_embedding.len(),
                cfg.embed_dim
            )));
        }
        let mut g = Graph::new();
        let leaves = self.leaf_map(&mut g, false);
        let emb = g.constant(image_embedding.clone().into_dyn());
        let tok = g.constant(
            prompt_embedding
                .clone()
                .insert_axis(ndarray::Axis(0))
                .into_dyn(),
        );
        let logits = self.build_decoder(&mut g, &leaves, emb, tok);
        Ok(self.logits_to_image(g.value(logits))?)
    }

    /// Scatter patch-order pixel logits into a (2, H, W) image layout.
    pub fn logits_to_image(&self, pixel_logits: &ArrayD<T>) -> Result<MaskLogits<T>> {
        let s = self.config.input_size;
        let order = patch_order_indices(s, self.config.patch_size);
        let flat = pixel_logits
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        if flat.nrows() != s * s || flat.ncols() != 2 {
            return Err(Error::InvalidInput("pixel logits shape mismatch".into()));
        }
        let mut out = Array3::zeros((2, s, s));
        for (pos, &img_idx) in order.iter().enumerate() {
            let (r, c) = (img_idx / s, img_idx % s);
            out[[0, r, c]] = flat[[pos, 0]];
            out[[1, r, c]] = flat[[pos, 1]];
        }
        MaskLogits::new(out)
    }

    /// Full-resolution binary prediction for one prompt.
    pub fn predict_mask(&self, image: &Array2<T>, prompt: &PointPrompt) -> Result<Array2<u8>> {
        let fwd = self.forward(image, prompt, false)?;
        let logits = self.logits_to_image(fwd.graph.value(fwd.logits))?;
        Ok(logits.argmax_mask())
    }

    /// A copy with every adapted projection merged (W <- W + BA) and the
    /// adapters reset to zero; forward outputs are unchanged.
    pub fn merge_lora(&self) -> Model<T>
    where
        T: Scalar,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut merged = Model {
            config: self.config.clone(),
            store: ParamStore::init(param_specs(&self.config), &mut rng),
        };
        for i in 0..self.store.len() {
            merged.store.set(i, self.store.get(i).clone());
        }
        let scaling = T::from_f64_c(self.config.lora.scaling);
        let names: Vec<String> = self
            .store
            .specs()
            .iter()
            .filter(|s| s.name.ends_with(".lora_a"))
            .map(|s| s.name.trim_end_matches(".lora_a").to_string())
            .collect();
        for stem in names {
            let a = self
                .store
                .get_by_name(&format!("{stem}.lora_a"))
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let b = self
                .store
                .get_by_name(&format!("{stem}.lora_b"))
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            // "enc0.attn.q" -> base weight "enc0.attn.wq"
            let (block, role) = stem.rsplit_once('.').unwrap();
            let w_name = format!("{block}.w{role}");
            let w = self
                .store
                .get_by_name(&w_name)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let merged_w = &w + &b.dot(&a).mapv(|v| v * scaling);
            let wid = merged.store.id(&w_name);
            merged.store.set(wid, merged_w.into_dyn());
            let aid = merged.store.id(&format!("{stem}.lora_a"));
            let bid = merged.store.id(&format!("{stem}.lora_b"));
            let za = ArrayD::zeros(IxDyn(self.store.get(aid).shape()));
            let zb = ArrayD::zeros(IxDyn(self.store.get(bid).shape()));
            merged.store.set(aid, za);
            merged.store.set(bid, zb);
        }
        merged
    }

    // --- checkpointing ------------------------------------------------------

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("model.json"),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        save_group(&self.store, &[ParamGroup::FrozenBase], &dir.join("base.bin"))?;
        save_group(
            &self.store,
            &[ParamGroup::LoraAdapter],
            &dir.join("adapters.bin"),
        )?;
        save_group(
            &self.store,
            &[ParamGroup::PromptEmbedding, ParamGroup::DecoderHead],
            &dir.join("heads.bin"),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Model<T>> {
        let config: ModelConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::init(param_specs(&config), &mut rng);
        load_group(&mut store, &dir.join("base.bin"))?;
        load_group(&mut store, &dir.join("adapters.bin"))?;
        load_group(&mut store, &dir.join("heads.bin"))?;
        Ok(Model { config, store })
    }
}
