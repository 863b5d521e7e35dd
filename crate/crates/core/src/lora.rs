//! Low-rank bypass injection for frozen linear projections (W-hat = W + BA),
//! plus the parameter store that tracks frozen/trainable groups and the
//! tensor-dict checkpoint format.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which projection roles receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionRole {
    Query,
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Projection roles to adapt; key/output projections stay untouched.
    pub targets: Vec<ProjectionRole>,
    pub apply_to_encoder: bool,
    pub apply_to_decoder: bool,
    /// Std of the Gaussian initializing A (B starts at zero).
    pub init_std: f64,
    /// Output scaling on the bypass; 1.0 means plain W + BA.
    pub scaling: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            targets: vec![ProjectionRole::Query, ProjectionRole::Value],
            apply_to_encoder: true,
            apply_to_decoder: true,
            init_std: 0.02,
            scaling: 1.0,
        }
    }
}

impl LoraConfig {
    pub fn check_rank(&self, c_out: usize, c_in: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        if self.rank >= c_out.min(c_in) {
            return Err(Error::Config(format!(
                "LoRA rank {} must be < min(C_in, C_out) = {}",
                self.rank,
                c_out.min(c_in)
            )));
        }
        Ok(())
    }

    pub fn adapts(&self, role: ProjectionRole) -> bool {
        self.targets.contains(&role)
    }
}

/// The (A, B) low-rank bypass attached to one frozen projection matrix.
///
/// `base` is W (C_out x C_in); `a` is (r x C_in), `b` is (C_out x r).
/// B starts at zero so the adapted layer initially equals the base layer.
#[derive(Debug, Clone)]
pub struct LoraAdapter<T: Scalar> {
    pub base: Array2<T>,
    pub a: Array2<T>,
    pub b: Array2<T>,
    pub scaling: T,
    pub trainable: bool,
}

/// Freeze `base` and attach a fresh adapter: A ~ N(0, init_std^2), B = 0.
pub fn wrap_projection<T: Scalar, R: Rng>(
    base: Array2<T>,
    config: &LoraConfig,
    rng: &mut R,
) -> Result<LoraAdapter<T>> {
    let (c_out, c_in) = base.dim();
    config.check_rank(c_out, c_in)?;
    let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let a = Array2::from_shape_fn((config.rank, c_in), |_| T::from_f64_c(normal.sample(rng)));
    let b = Array2::zeros((c_out, config.rank));
    Ok(LoraAdapter {
        base,
        a,
        b,
        scaling: T::from_f64_c(config.scaling),
        trainable: true,
    })
}

impl<T: Scalar> LoraAdapter<T> {
    /// Adapted forward: W x + scaling * B (A x) for a batch of row vectors
    /// `x` (n x C_in); returns (n x C_out).
    pub fn adapted_forward(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.base.ncols() {
            return Err(Error::InvalidInput(format!(
                "input has {} features, projection expects {}",
                x.ncols(),
                self.base.ncols()
            )));
        }
        let main = x.dot(&self.base.t());
        let bypass = x.dot(&self.a.t()).dot(&self.b.t());
        Ok(main + bypass.mapv(|v| v * self.scaling))
    }

    /// Materialize W-hat = W + scaling * BA; the base stays untouched.
    pub fn merge(&self) -> Array2<T> {
        &self.base + &self.b.dot(&self.a).mapv(|v| v * self.scaling)
    }

    /// Trainable scalars contributed by this adapter.
    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    FrozenBase,
    LoraAdapter,
    PromptEmbedding,
    DecoderHead,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Gaussian(f64),
}

/// Declared shape/group/initialization of one named parameter. Counting and
/// reporting work from specs alone, without allocating (used for the
/// base-like accounting config).
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub trainable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Owns every model parameter with its trainable flag.
pub struct ParamStore<T: Scalar> {
    specs: Vec<ParamSpec>,
    values: Vec<ArrayD<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn init<R: Rng>(specs: Vec<ParamSpec>, rng: &mut R) -> Self {
        let mut values = Vec::with_capacity(specs.len());
        let mut index = HashMap::new();
        for (i, spec) in specs.iter().enumerate() {
            let value = match spec.init {
                Init::Zeros => ArrayD::zeros(IxDyn(&spec.shape)),
                Init::Ones => ArrayD::from_elem(IxDyn(&spec.shape), T::one()),
                Init::Gaussian(std) => {
                    let normal = Normal::new(0.0, std).expect("valid std");
                    ArrayD::from_shape_fn(IxDyn(&spec.shape), |_| {
                        T::from_f64_c(normal.sample(rng))
                    })
                }
            };
            values.push(value);
            index.insert(spec.name.clone(), i);
        }
        ParamStore {
            specs,
            values,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn id(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, i: usize) -> &ArrayD<T> {
        &self.values[i]
    }

    pub fn get_by_name(&self, name: &str) -> &ArrayD<T> {
        &self.values[self.id(name)]
    }

    pub fn set(&mut self, i: usize, value: ArrayD<T>) {
        assert_eq!(self.values[i].shape(), value.shape());
        self.values[i] = value;
    }

    /// Mutable access is restricted to trainable parameters; the frozen base
    /// is never handed out mutably.
    pub fn get_mut_trainable(&mut self, i: usize) -> Option<&mut ArrayD<T>> {
        if self.specs[i].trainable {
            Some(&mut self.values[i])
        } else {
            None
        }
    }

    pub fn trainable_ids(&self) -> Vec<usize> {
        (0..self.specs.len())
            .filter(|&i| self.specs[i].trainable)
            .collect()
    }

    /// Checksum over all frozen parameters (IEEE bit patterns), used to
    /// verify frozen-base immutability across training.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (spec, value) in self.specs.iter().zip(self.values.iter()) {
            if spec.trainable {
                continue;
            }
            for &v in value.iter() {
                let bits = v.to_f64_c().to_bits();
                h ^= bits;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Trainable/total scalar counts with per-group breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
    pub by_group: Vec<(String, usize, bool)>,
}

pub fn count_params(specs: &[ParamSpec]) -> ParamCountReport {
    let mut trainable = 0usize;
    let mut total = 0usize;
    let mut groups: Vec<(ParamGroup, usize, bool)> = Vec::new();
    for spec in specs {
        total += spec.len();
        if spec.trainable {
            trainable += spec.len();
        }
        match groups.iter_mut().find(|(g, _, _)| *g == spec.group) {
            Some((_, n, _)) => *n += spec.len(),
            None => groups.push((spec.group, spec.len(), spec.trainable)),
        }
    }
    ParamCountReport {
        trainable,
        total,
        fraction: trainable as f64 / total.max(1) as f64,
        by_group: groups
            .into_iter()
            .map(|(g, n, t)| (format!("{g:?}"), n, t))
            .collect(),
    }
}

/// Counts for an assembled store.
pub fn trainable_param_count<T: Scalar>(store: &ParamStore<T>) -> (usize, usize, f64) {
    let r = count_params(store.specs());
    (r.trainable, r.total, r.fraction)
}

// ---------------------------------------------------------------------------
// Tensor-dict checkpoint format
// ---------------------------------------------------------------------------
//
// Little-endian binary layout:
//   magic   4 bytes  "ETNS"
//   count   u32
//   entry*: name_len u16, name bytes, dtype u8 (1=f32, 2=f64),
//           ndim u8, dims u32 each, data row-major little-endian

pub const TENSOR_MAGIC: &[u8; 4] = b"ETNS";

pub fn save_tensors<T: Scalar>(entries: &[(String, ArrayD<T>)], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, arr) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(T::DTYPE_CODE);
        buf.push(arr.ndim() as u8);
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in arr.iter() {
            match T::DTYPE_CODE {
                1 => buf.extend_from_slice(&v.to_f32().unwrap().to_le_bytes()),
                2 => buf.extend_from_slice(&v.to_f64_c().to_le_bytes()),
                _ => unreachable!(),
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_tensors<T: Scalar>(path: &Path) -> Result<Vec<(String, ArrayD<T>)>> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    if data.len() < 8 || &data[0..4] != TENSOR_MAGIC {
        return Err(Error::Parse(format!(
            "{}: not a tensor file",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let mut off = 8usize;
    let mut out = Vec::with_capacity(count);
    let take = |off: &mut usize, n: usize| -> Result<std::ops::Range<usize>> {
        if *off + n > data.len() {
            return Err(Error::Parse("tensor file truncated".into()));
        }
        let r = *off..*off + n;
        *off += n;
        Ok(r)
    };
    for _ in 0..count {
        let r = take(&mut off, 2)?;
        let name_len = u16::from_le_bytes(data[r].try_into().unwrap()) as usize;
        let r = take(&mut off, name_len)?;
        let name = String::from_utf8(data[r].to_vec())
            .map_err(|_| Error::Parse("bad tensor name".into()))?;
        let r = take(&mut off, 2)?;
        let dtype = data[r.start];
        let ndim = data[r.start + 1] as usize;
        if dtype != T::DTYPE_CODE {
            return Err(Error::Parse(format!(
                "{name}: dtype code {dtype} != requested {}",
                T::DTYPE_CODE
            )));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let r = take(&mut off, 4)?;
            dims.push(u32::from_le_bytes(data[r].try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let elem = std::mem::size_of::<T>();
        let r = take(&mut off, n * elem)?;
        let bytes = &data[r];
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            let v = match dtype {
                1 => T::from_f64_c(
                    f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as f64,
                ),
                2 => T::from_f64_c(f64::from_le_bytes(
                    bytes[i * 8..i * 8 + 8].try_into().unwrap(),
                )),
                _ => unreachable!(),
            };
            vals.push(v);
        }
        out.push((
            name,
            ArrayD::from_shape_vec(IxDyn(&dims), vals).map_err(|e| Error::Parse(e.to_string()))?,
        ));
    }
    Ok(out)
}

/// Save one parameter group of a store to its own tensor file, so adapter
/// checkpoints stay tiny and separate from the frozen base.
pub fn save_group<T: Scalar>(store: &ParamStore<T>, groups: &[ParamGroup], path: &Path) -> Result<()> {
    let entries: Vec<(String, ArrayD<T>)> = store
        .specs()
        .iter()
        .enumerate()
        .filter(|(_, s)| groups.contains(&s.group))
        .map(|(i, s)| (s.name.clone(), store.get(i).clone()))
        .collect();
    save_tensors(&entries, path)
}

/// Load a tensor file back into matching store entries.
pub fn load_group<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    for (name, arr) in load_tensors::<T>(path)? {
        let id = *store
            .index
            .get(&name)
            .ok_or_else(|| Error::Parse(format!("checkpoint names unknown parameter {name}")))?;
        if store.values[id].shape() != arr.shape() {
            return Err(Error::Parse(format!(
                "checkpoint shape {:?} != model shape {:?} for {name}",
                arr.shape(),
                store.values[id].shape()
            )));
        }
        store.values[id] = arr;
    }
    Ok(())
}
