//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Graph`] is a flat tape: every operation appends a node holding its
//! value, so nodes are already in topological order and the backward pass is
//! a single reverse sweep. The op set is exactly what the segmenter needs;
//! matmuls dispatch to `matrixmultiply` through `ndarray::dot` for f32/f64.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    /// C = A . B with A (m,k), B (k,n)
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, T),
    AddConst(NodeId, T),
    /// rows of A (n,d) plus bias (d,)
    AddRow(NodeId, NodeId),
    Gelu(NodeId),
    /// softmax over the last axis of a 2-D array
    SoftmaxRows(NodeId),
    /// layer norm over the last axis: gamma/beta are (d,)
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    },
    Reshape(NodeId),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// mean cross-entropy over rows of logits (n, k) against class indices
    CrossEntropyMean(NodeId, std::sync::Arc<Vec<usize>>),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    // tanh approximation
    let c = T::from_f64_c((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_c(0.044715);
    let half = T::from_f64_c(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64_c((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_c(0.044715);
    let half = T::from_f64_c(0.5);
    let three = T::from_f64_c(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn propagates(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        *self.nodes[id.0]
            .value
            .iter()
            .next()
            .expect("scalar node is non-empty")
    }

    fn value2(&self, id: NodeId) -> Array2<T> {
        self.nodes[id.0]
            .value
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("2-D node")
    }

    fn value1(&self, id: NodeId) -> Array1<T> {
        self.nodes[id.0]
            .value
            .clone()
            .into_dimensionality::<Ix1>()
            .expect("1-D node")
    }

    // --- constructors -----------------------------------------------------

    pub fn leaf(&mut self, value: ArrayD<T>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value2(a);
        let vb = self.value2(b);
        let v = va.dot(&vb).into_dyn();
        let ng = self.propagates(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value2(a).t().to_owned().into_dyn();
        let ng = self.propagates(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.propagates(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.propagates(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.propagates(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let ng = self.propagates(&[a, b]);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let ng = self.propagates(&[a]);
        self.push(v, Op::Neg(a), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * s);
        let ng = self.propagates(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_const(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + s);
        let ng = self.propagates(&[a]);
        self.push(v, Op::AddConst(a, s), ng)
    }

    /// rows of `a` (n, d) plus a bias vector (d,)
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let va = self.value2(a);
        let vb = self.value1(bias);
        let v = (&va + &vb).into_dyn();
        let ng = self.propagates(&[a, bias]);
        self.push(v, Op::AddRow(a, bias), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(gelu_scalar);
        let ng = self.propagates(&[a]);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value2(a);
        let mut out = va.clone();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let ng = self.propagates(&[a]);
        self.push(out.into_dyn(), Op::SoftmaxRows(a), ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> NodeId {
        let vx = self.value2(x);
        let g = self.value1(gamma);
        let b = self.value1(beta);
        let d = vx.ncols();
        let dn = T::from_f64_c(d as f64);
        let mut out = Array2::<T>::zeros(vx.raw_dim());
        for (i, row) in vx.rows().into_iter().enumerate() {
            let mean = row.sum() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = (var + eps).sqrt().recip();
            for j in 0..d {
                out[[i, j]] = g[j] * (row[j] - mean) * inv + b[j];
            }
        }
        let ng = self.propagates(&[x, gamma, beta]);
        self.push(out.into_dyn(), Op::LayerNorm { x, gamma, beta, eps }, ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape size mismatch");
        let ng = self.propagates(&[a]);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        let va = self.value2(a);
        let v = va.slice(ndarray::s![.., c0..c1]).to_owned().into_dyn();
        let ng = self.propagates(&[a]);
        self.push(v, Op::SliceCols(a, c0, c1), ng)
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let va = self.value2(a);
        let v = va.slice(ndarray::s![r0..r1, ..]).to_owned().into_dyn();
        let ng = self.propagates(&[a]);
        self.push(v, Op::SliceRows(a, r0, r1), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<Array2<T>> = parts.iter().map(|&p| self.value2(p)).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(0), &view_refs)
            .expect("concat shape mismatch")
            .into_dyn();
        let ng = self.propagates(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Concatenate along columns via transpose + row concat.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let t: Vec<NodeId> = parts.iter().map(|&p| self.transpose(p)).collect();
        let cat = self.concat_rows(&t);
        self.transpose(cat)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.iter().cloned().sum::<T>();
        let ng = self.propagates(&[a]);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = T::from_f64_c(self.nodes[a.0].value.len() as f64);
        let s = self.nodes[a.0].value.iter().cloned().sum::<T>() / n;
        let ng = self.propagates(&[a]);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::MeanAll(a), ng)
    }

    /// Mean cross-entropy of row-wise logits (n, k) against target classes.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let v = self.value2(logits);
        let n = v.nrows();
        if targets.len() != n {
            return Err(Error::InvalidInput(format!(
                "cross entropy: {} targets for {} rows",
                targets.len(),
                n
            )));
        }
        let k = v.ncols();
        let mut total = T::zero();
        for (i, row) in v.rows().into_iter().enumerate() {
            if targets[i] >= k {
                return Err(Error::InvalidInput(format!(
                    "cross entropy: target {} out of {} classes",
                    targets[i], k
                )));
            }
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
            total = total + (lse - row[targets[i]]);
        }
        let val = total / T::from_f64_c(n as f64);
        let ng = self.propagates(&[logits]);
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[]), val),
            Op::CrossEntropyMean(logits, std::sync::Arc::new(targets)),
            ng,
        ))
    }

    // --- backward ----------------------------------------------------------

    fn accumulate(&mut self, id: NodeId, delta: ArrayD<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => *g = &*g + &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a scalar `root`, filling gradients of every node
    /// with `needs_grad`.
    pub fn backward(&mut self, root: NodeId) {
        assert!(
            self.nodes[root.0].value.len() == 1,
            "backward root must be scalar"
        );
        let one = ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), T::one());
        self.nodes[root.0].grad = Some(one);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let g = grad.into_dimensionality::<Ix2>().unwrap();
                    let va = self.value2(a);
                    let vb = self.value2(b);
                    if self.nodes[a.0].needs_grad {
                        self.accumulate(a, g.dot(&vb.t()).into_dyn());
                    }
                    if self.nodes[b.0].needs_grad {
                        self.accumulate(b, va.t().dot(&g).into_dyn());
                    }
                }
                Op::Transpose(a) => {
                    let g = grad.into_dimensionality::<Ix2>().unwrap();
                    self.accumulate(a, g.t().to_owned().into_dyn());
                }
                Op::Add(a, b) => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    let va = self.nodes[a.0].value.clone();
                    let vb = self.nodes[b.0].value.clone();
                    self.accumulate(a, &grad * &vb);
                    self.accumulate(b, &grad * &va);
                }
                Op::Div(a, b) => {
                    let va = self.nodes[a.0].value.clone();
                    let vb = self.nodes[b.0].value.clone();
                    self.accumulate(a, &grad / &vb);
                    let gb = &grad * &va.mapv(|x| -x) / &(&vb * &vb);
                    self.accumulate(b, gb);
                }
                Op::Neg(a) => self.accumulate(a, grad.mapv(|x| -x)),
                Op::Scale(a, s) => self.accumulate(a, grad.mapv(|x| x * s)),
                Op::AddConst(a, _) => self.accumulate(a, grad),
                Op::AddRow(a, bias) => {
                    let g = grad.clone().into_dimensionality::<Ix2>().unwrap();
                    self.accumulate(a, grad);
                    if self.nodes[bias.0].needs_grad {
                        self.accumulate(bias, g.sum_axis(Axis(0)).into_dyn());
                    }
                }
                Op::Gelu(a) => {
                    let dx = self.nodes[a.0].value.mapv(gelu_grad_scalar);
                    self.accumulate(a, &grad * &dx);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value2(NodeId(i));
                    let g = grad.into_dimensionality::<Ix2>().unwrap();
                    let mut dx = Array2::<T>::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot = y
                            .row(r)
                            .iter()
                            .zip(g.row(r).iter())
                            .map(|(&yy, &gg)| yy * gg)
                            .sum::<T>();
                        for c in 0..y.ncols() {
                            dx[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    self.accumulate(a, dx.into_dyn());
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let vx = self.value2(x);
                    let g = self.value1(gamma);
                    let gout = grad.into_dimensionality::<Ix2>().unwrap();
                    let d = vx.ncols();
                    let dn = T::from_f64_c(d as f64);
                    let mut dx = Array2::<T>::zeros(vx.raw_dim());
                    let mut dgamma = Array1::<T>::zeros(d);
                    let mut dbeta = Array1::<T>::zeros(d);
                    for r in 0..vx.nrows() {
                        let row = vx.row(r);
                        let mean = row.sum() / dn;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                        let inv = (var + eps).sqrt().recip();
                        let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let gy = gout.row(r);
                        let mut sum_gyg = T::zero();
                        let mut sum_gyg_xhat = T::zero();
                        for j in 0..d {
                            let gyg = gy[j] * g[j];
                            sum_gyg = sum_gyg + gyg;
                            sum_gyg_xhat = sum_gyg_xhat + gyg * xhat[j];
                            dgamma[j] = dgamma[j] + gy[j] * xhat[j];
                            dbeta[j] = dbeta[j] + gy[j];
                        }
                        let m1 = sum_gyg / dn;
                        let m2 = sum_gyg_xhat / dn;
                        for j in 0..d {
                            let gyg = gy[j] * g[j];
                            dx[[r, j]] = (gyg - m1 - xhat[j] * m2) * inv;
                        }
                    }
                    self.accumulate(x, dx.into_dyn());
                    if self.nodes[gamma.0].needs_grad {
                        self.accumulate(gamma, dgamma.into_dyn());
                    }
                    if self.nodes[beta.0].needs_grad {
                        self.accumulate(beta, dbeta.into_dyn());
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.raw_dim();
                    self.accumulate(a, grad.into_shape(shape).unwrap());
                }
                Op::SliceCols(a, c0, _c1) => {
                    let g = grad.into_dimensionality::<Ix2>().unwrap();
                    let mut da =
                        Array2::<T>::zeros(self.value2(a).raw_dim());
                    da.slice_mut(ndarray::s![.., c0..c0 + g.ncols()])
                        .assign(&g);
                    self.accumulate(a, da.into_dyn());
                }
                Op::SliceRows(a, r0, _r1) => {
                    let g = grad.into_dimensionality::<Ix2>().unwrap();
                    let mut da =
                        Array2::<T>::zeros(self.value2(a).raw_dim());
                    da.slice_mut(ndarray::s![r0..r0 + g.nrows(), ..])
                        .assign(&g);
                    self.accumulate(a, da.into_dyn());
                }
                Op::ConcatRows(parts) => {
                    let g = grad.into_dimensionality::<Ix2>().unwrap();
                    let mut r0 = 0usize;
                    for p in parts {
                        let rows = self.value2(p).nrows();
                        let gp = g.slice(ndarray::s![r0..r0 + rows, ..]).to_owned();
                        self.accumulate(p, gp.into_dyn());
                        r0 += rows;
                    }
                }
                Op::SumAll(a) => {
                    let s = *grad.iter().next().unwrap();
                    let da = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), s);
                    self.accumulate(a, da);
                }
                Op::MeanAll(a) => {
                    let n = T::from_f64_c(self.nodes[a.0].value.len() as f64);
                    let s = *grad.iter().next().unwrap() / n;
                    let da = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), s);
                    self.accumulate(a, da);
                }
                Op::CrossEntropyMean(logits, targets) => {
                    let s = *grad.iter().next().unwrap();
                    let v = self.value2(logits);
                    let n = v.nrows();
                    let nn = T::from_f64_c(n as f64);
                    let mut dl = Array2::<T>::zeros(v.raw_dim());
                    for (r, row) in v.rows().into_iter().enumerate() {
                        let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
                        let exps: Vec<T> = row.iter().map(|&x| (x - mx).exp()).collect();
                        let denom = exps.iter().cloned().sum::<T>();
                        for c in 0..v.ncols() {
                            let p = exps[c] / denom;
                            let onehot = if targets[r] == c { T::one() } else { T::zero() };
                            dl[[r, c]] = s * (p - onehot) / nn;
                        }
                    }
                    self.accumulate(logits, dl.into_dyn());
                }
            }
        }
    }
}
