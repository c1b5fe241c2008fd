//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are read
//! from a borrowed [`ParamStore`]; [`Graph::backward`] returns a
//! [`Gradients`] value that the caller folds back into the store with
//! [`ParamStore::accumulate`]. Nodes are appended in evaluation order, so the
//! tape is already topologically sorted.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::kernels::{self, Conv1dGeom, Conv1dSpec, Conv3dGeom, Conv3dSpec};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    MeanSpatial(Var),
    Conv1d {
        x: Var,
        w: Var,
        spec: Conv1dSpec,
    },
    Conv3d {
        x: Var,
        w: Var,
        spec: Conv3dSpec,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
        gap: f64,
    },
    AvgPool1d {
        x: Var,
        factor: usize,
    },
    Upsample1d {
        x: Var,
        factor: usize,
    },
    BatchNorm {
        x: Var,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    WeightNorm {
        v: Var,
        g: Var,
        norms: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        eps: f64,
        probs: Vec<f64>,
    },
    L1Loss(Var, Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    pub params: Vec<(ParamId, Tensor)>,
    pub buffers: Vec<(ParamId, Tensor)>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to an input leaf created with
    /// `requires_grad = true`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    pending_buffers: HashMap<ParamId, Tensor>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    /// A graph with no parameter store, in evaluation mode.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            pending_buffers: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Switches to training mode: dropout becomes active (drawing from a
    /// generator seeded with `seed`) and batch norm uses batch statistics.
    pub fn training(mut self, seed: u64) -> Self {
        self.training = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Distance to the nearest non-differentiable point recorded so far: the
    /// smallest `|x|` at a ReLU input or the smallest gap between the two
    /// largest entries of a pooling window. Infinite when there is none.
    /// Finite differences with a larger step straddle a kink.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Relu(a) => self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .fold(f64::INFINITY, |m, x| m.min(x.abs())),
                Op::MaxPool3d { gap, .. } => *gap,
                _ => f64::INFINITY,
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph built without a parameter store");
        let p = store.get(id);
        let needs = p.kind == ParamKind::Weight && !p.frozen;
        let v = self.push(p.value.clone(), Op::Param(id), needs);
        self.param_vars.insert(id, v);
        v
    }

    /// Current value of a buffer, including updates recorded earlier in this graph.
    pub fn buffer(&self, id: ParamId) -> Tensor {
        if let Some(t) = self.pending_buffers.get(&id) {
            return t.clone();
        }
        self.store
            .expect("graph built without a parameter store")
            .value(id)
            .clone()
    }

    pub fn set_buffer(&mut self, id: ParamId, t: Tensor) {
        self.pending_buffers.insert(id, t);
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul of {sa:?} by {sb:?}"));
        }
        let out = matmul_raw(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Matmul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a[m, n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, nb) = (self.shape(a).to_vec(), self.value(b).numel());
        if sa.len() != 2 || sa[1] != nb {
            return dim_err(format!("add_row of {sa:?} and {:?}", self.shape(b)));
        }
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(nb) {
            for (x, y) in row.iter_mut().zip(&bv) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::AddRow(a, b), ng))
    }

    /// `a[C, ...] + b[C]`, broadcasting over all trailing axes.
    pub fn add_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.shape(a)[0];
        if self.value(b).numel() != c {
            return dim_err(format!(
                "add_channel of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(a).clone();
        let inner = t.numel() / c;
        for (ch, chunk) in t.data_mut().chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|x| *x += bv[ch]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::AddChannel(a, b), ng))
    }

    /// `a[C, ...] * s[C]`, broadcasting over all trailing axes.
    pub fn mul_channel(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.shape(a)[0];
        if self.value(s).numel() != c {
            return dim_err(format!(
                "mul_channel of {:?} and {:?}",
                self.shape(a),
                self.shape(s)
            ));
        }
        let sv = self.value(s).data().to_vec();
        let mut t = self.value(a).clone();
        let inner = t.numel() / c;
        for (ch, chunk) in t.data_mut().chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|x| *x *= sv[ch]);
        }
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(t, Op::MulChannel(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    /// `1 - a`, element-wise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    // ---- activations ------------------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    // ---- shape manipulation -----------------------------------------------

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return dim_err(format!("transpose of {:?}", self.shape(a)));
        }
        let t = self.value(a).transpose();
        let ng = self.ng(a);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return dim_err(format!("concat of {base:?} and {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let blk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return dim_err(format!(
                "narrow [{start}, {}) on axis {axis} of {s:?}",
                start + len
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { x, axis, start }, ng))
    }

    /// Row `r` of a 2-D tensor as a `[1, n]` tensor.
    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.narrow(x, 0, r, 1)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(t, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(t, Op::MeanAll(a), ng)
    }

    /// Column means of a `[m, n]` tensor, as `[1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return dim_err(format!("mean_rows of {s:?}"));
        }
        let mut out = vec![0.0; s[1]];
        for row in self.value(a).data().chunks(s[1]) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= s[0] as f64);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![1, s[1]], out)?, Op::MeanRows(a), ng))
    }

    /// `[C, T, H, W] -> [C, T]` spatial average.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return dim_err(format!("mean_spatial of {s:?}"));
        }
        let plane = s[2] * s[3];
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![s[0], s[1]], out)?, Op::MeanSpatial(a), ng))
    }

    // ---- convolution and pooling ------------------------------------------

    /// 1-D convolution. `x: [C_in, L]`, `w: [C_out, C_in/groups, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: Conv1dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 {
            return dim_err(format!("conv1d of {sx:?} with kernel {sw:?}"));
        }
        if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
            return config_err("conv1d stride, dilation and groups must be positive");
        }
        let (c_in, l_in) = (sx[0], sx[1]);
        let (c_out, k) = (sw[0], sw[2]);
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 || sw[1] * spec.groups != c_in {
            return dim_err(format!(
                "conv1d of {sx:?} with kernel {sw:?} and {} groups",
                spec.groups
            ));
        }
        let l_out = spec.out_len(l_in, k).ok_or_else(|| {
            Error::Dimension(format!(
                "input length {l_in} shorter than effective kernel {}",
                (k - 1) * spec.dilation + 1
            ))
        })?;
        let geom = Conv1dGeom {
            c_in,
            c_out,
            k,
            l_in,
            l_out,
        };
        let out = kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), &geom, &spec);
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            Tensor::new(vec![c_out, l_out], out)?,
            Op::Conv1d { x, w, spec },
            ng,
        ))
    }

    /// 3-D convolution. `x: [C_in, T, H, W]`, `w: [C_out, C_in, kt, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, spec: Conv3dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 5 || sx[0] != sw[1] {
            return dim_err(format!("conv3d of {sx:?} with kernel {sw:?}"));
        }
        if spec.stride.contains(&0) {
            return config_err("conv3d stride must be positive");
        }
        let kernel = [sw[2], sw[3], sw[4]];
        let dims_in = [sx[1], sx[2], sx[3]];
        let dims_out = spec.out_dims(dims_in, kernel).ok_or_else(|| {
            Error::Dimension(format!(
                "conv3d input {sx:?} smaller than kernel {kernel:?}"
            ))
        })?;
        let geom = Conv3dGeom {
            c_in: sx[0],
            c_out: sw[0],
            kernel,
            dims_in,
            dims_out,
        };
        let out = kernels::conv3d_forward(self.value(x).data(), self.value(w).data(), &geom, &spec);
        let shape = vec![sw[0], dims_out[0], dims_out[1], dims_out[2]];
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv3d { x, w, spec }, ng))
    }

    pub fn max_pool3d(&mut self, x: Var, kernel: [usize; 3], spec: Conv3dSpec) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return dim_err(format!("max_pool3d of {s:?}"));
        }
        if spec.out_dims([s[1], s[2], s[3]], kernel).is_none() {
            return dim_err(format!("pool window {kernel:?} larger than input {s:?}"));
        }
        let (out, argmax, d, gap) = kernels::max_pool3d_forward(
            self.value(x).data(),
            s[0],
            [s[1], s[2], s[3]],
            kernel,
            &spec,
        );
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![s[0], d[0], d[1], d[2]], out)?,
            Op::MaxPool3d { x, argmax, gap },
            ng,
        ))
    }

    /// Non-overlapping average pooling over the last axis of `[C, L]`; a
    /// trailing partial window averages what it covers.
    pub fn avg_pool1d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || factor == 0 {
            return dim_err(format!("avg_pool1d of {s:?} by {factor}"));
        }
        let l_out = s[1].div_ceil(factor);
        let mut out = Vec::with_capacity(s[0] * l_out);
        for row in self.value(x).data().chunks(s[1]) {
            for w in row.chunks(factor) {
                out.push(w.iter().sum::<f64>() / w.len() as f64);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![s[0], l_out], out)?,
            Op::AvgPool1d { x, factor },
            ng,
        ))
    }

    /// Nearest-neighbour upsampling of `[C, L]` to `[C, L·factor]`.
    pub fn upsample1d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || factor == 0 {
            return dim_err(format!("upsample1d of {s:?} by {factor}"));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, factor))
            .collect();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1] * factor], out)?,
            Op::Upsample1d { x, factor },
            ng,
        ))
    }

    // ---- normalization ----------------------------------------------------

    /// Per-channel standardization of `x[C, ...]` over all trailing axes.
    ///
    /// With `stats = None` the batch mean and (biased) variance are used and
    /// returned; otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let s = self.shape(x).to_vec();
        let c = s[0];
        let inner = self.value(x).numel() / c;
        if let Some((m, v)) = stats {
            if m.len() != c || v.len() != c {
                return dim_err(format!(
                    "batch_norm statistics for {} channels, input {s:?}",
                    m.len()
                ));
            }
        }
        let mut means = Vec::with_capacity(c);
        let mut vars = Vec::with_capacity(c);
        let mut inv_std = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c * inner);
        for (ch, chunk) in self.value(x).data().chunks(inner).enumerate() {
            let (m, v) = match stats {
                Some((m, v)) => (m[ch], v[ch]),
                None => {
                    let m = chunk.iter().sum::<f64>() / inner as f64;
                    let v = chunk.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / inner as f64;
                    (m, v)
                }
            };
            let is = 1.0 / (v + eps).sqrt();
            out.extend(chunk.iter().map(|x| (x - m) * is));
            means.push(m);
            vars.push(v);
            inv_std.push(is);
        }
        let ng = self.ng(x);
        let var = self.push(
            Tensor::new(s, out)?,
            Op::BatchNorm {
                x,
                inv_std,
                batch_stats: stats.is_none(),
            },
            ng,
        );
        Ok((var, means, vars))
    }

    /// Weight-normalized kernel `w = g · v / ‖v‖` with one norm per output
    /// channel (first axis of `v`).
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let c = self.shape(v)[0];
        if self.value(g).numel() != c {
            return dim_err(format!(
                "weight_norm gain {:?} for kernel {:?}",
                self.shape(g),
                self.shape(v)
            ));
        }
        let inner = self.value(v).numel() / c;
        let gv = self.value(g).data().to_vec();
        let mut norms = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c * inner);
        for (ch, row) in self.value(v).data().chunks(inner).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            out.extend(row.iter().map(|x| gv[ch] * x / n));
            norms.push(n);
        }
        let shape = self.shape(v).to_vec();
        let ng = self.ng(v) || self.ng(g);
        Ok(self.push(Tensor::new(shape, out)?, Op::WeightNorm { v, g, norms }, ng))
    }

    // ---- regularization ---------------------------------------------------

    fn check_prob(p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return config_err(format!("probability {p} outside [0, 1]"));
        }
        Ok(())
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        Self::check_prob(p)?;
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        Ok(self.apply_mask(x, mask))
    }

    /// Drops whole channels (first axis) of `x[C, ...]`; identity outside training.
    pub fn spatial_dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        Self::check_prob(p)?;
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let c = self.shape(x)[0];
        let inner = self.value(x).numel() / c;
        let keep = 1.0 - p;
        let mut mask = Vec::with_capacity(c * inner);
        for _ in 0..c {
            let m = if self.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            };
            mask.extend(std::iter::repeat_n(m, inner));
        }
        Ok(self.apply_mask(x, mask))
    }

    fn apply_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Dropout { x, mask }, ng)
    }

    // ---- probabilities and losses -----------------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return dim_err(format!("softmax_rows of {s:?}"));
        }
        let data = softmax_rows_raw(self.value(x).data(), s[1]);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(s, data)?, Op::SoftmaxRows(x), ng))
    }

    /// Mean label-smoothed cross-entropy over rows of `logits[L, V]`. Rows
    /// whose target is `None` are ignored. The smoothed target puts
    /// `1 - eps + eps/V` on the label and `eps/V` elsewhere.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        eps: f64,
    ) -> Result<Var> {
        Self::check_prob(eps)?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return dim_err(format!(
                "cross_entropy of {s:?} with {} targets",
                targets.len()
            ));
        }
        let v = s[1];
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return dim_err(format!("target {bad} outside {v} classes"));
        }
        let probs = softmax_rows_raw(self.value(logits).data(), v);
        let logits_data = self.value(logits).data();
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &logits_data[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            let mut loss = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let q = eps / v as f64 + if j == t { 1.0 - eps } else { 0.0 };
                loss -= q * (z - lse);
            }
            total += loss;
            count += 1;
        }
        let value = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                eps,
                probs,
            },
            ng,
        ))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1_loss")?;
        let n = self.value(a).numel() as f64;
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(total / n), Op::L1Loss(a, b), ng))
    }

    /// Rows of `table[V, E]` selected by `ids`, as `[ids.len(), E]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() || ids.iter().any(|&i| i >= s[0]) {
            return dim_err(format!("gather of {ids:?} from {s:?}"));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * s[1]);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), s[1]], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Calling it more than once on
    /// the same graph yields the same gradients each time; accumulating them
    /// into a store twice therefore doubles the stored gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                op => self.propagate(op, &node.value, g, &mut grads),
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        let mut buffers: Vec<_> = self
            .pending_buffers
            .iter()
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        buffers.sort_by_key(|(id, _)| *id);
        out.buffers = buffers;
        Ok(out)
    }

    /// Buffer updates recorded by a forward pass that is not followed by a
    /// backward pass.
    pub fn buffer_updates(&self) -> Gradients {
        let mut buffers: Vec<_> = self
            .pending_buffers
            .iter()
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        buffers.sort_by_key(|(id, _)| *id);
        Gradients {
            buffers,
            ..Gradients::default()
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape")
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Matmul(a, b) => {
                if self.ng(*a) {
                    let bt = self.value(*b).transpose();
                    self.acc(grads, *a, matmul_raw(&g, &bt));
                }
                if self.ng(*b) {
                    let at = self.value(*a).transpose();
                    self.acc(grads, *b, matmul_raw(&at, &g));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.scale(-1.0));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let d = g.data().iter().zip(vb).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, self.like(*a, d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(va).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, self.like(*b, d));
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*b) {
                    let n = self.value(*b).numel();
                    let mut d = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, x) in d.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *b, self.like(*b, d));
                }
                self.acc(grads, *a, g);
            }
            Op::AddChannel(a, b) => {
                if self.ng(*b) {
                    let c = self.value(*b).numel();
                    let inner = g.numel() / c;
                    let d = g.data().chunks(inner).map(|ch| ch.iter().sum()).collect();
                    self.acc(grads, *b, self.like(*b, d));
                }
                self.acc(grads, *a, g);
            }
            Op::MulChannel(a, s) => {
                let c = self.value(*s).numel();
                let inner = g.numel() / c;
                let sv = self.value(*s).data();
                if self.ng(*s) {
                    let av = self.value(*a).data();
                    let d = g
                        .data()
                        .chunks(inner)
                        .zip(av.chunks(inner))
                        .map(|(gc, ac)| gc.iter().zip(ac).map(|(x, y)| x * y).sum())
                        .collect();
                    self.acc(grads, *s, self.like(*s, d));
                }
                if self.ng(*a) {
                    let mut d = g.into_data();
                    for (ch, chunk) in d.chunks_mut(inner).enumerate() {
                        chunk.iter_mut().for_each(|x| *x *= sv[ch]);
                    }
                    self.acc(grads, *a, self.like(*a, d));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => self.acc(grads, *a, g),
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                    .collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(x, y)| x * y * (1.0 - y))
                    .collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(x, y)| x * (1.0 - y * y))
                    .collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let t = g.reshape(self.shape(*a)).expect("reshape gradient");
                self.acc(grads, *a, t);
            }
            Op::Concat { inputs, axis } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.ng(v) {
                        let mut d = Vec::with_capacity(self.value(v).numel());
                        for o in 0..outer {
                            let base = (o * s[*axis] + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.acc(grads, v, self.like(v, d));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let mut d = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, self.like(*a, vec![g.item(); n]));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, self.like(*a, vec![g.item() / n as f64; n]));
            }
            Op::MeanRows(a) => {
                let s = self.shape(*a);
                let scale = 1.0 / s[0] as f64;
                let row: Vec<f64> = g.data().iter().map(|x| x * scale).collect();
                let d = row.iter().copied().cycle().take(s[0] * s[1]).collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::MeanSpatial(a) => {
                let s = self.shape(*a);
                let plane = s[2] * s[3];
                let d = g
                    .data()
                    .iter()
                    .flat_map(|&x| std::iter::repeat_n(x / plane as f64, plane))
                    .collect();
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Conv1d { x, w, spec } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let geom = Conv1dGeom {
                    c_in: sx[0],
                    c_out: sw[0],
                    k: sw[2],
                    l_in: sx[1],
                    l_out: out.shape()[1],
                };
                let (dx, dw) = kernels::conv1d_backward(
                    g.data(),
                    self.value(*x).data(),
                    self.value(*w).data(),
                    &geom,
                    spec,
                );
                self.acc(grads, *x, self.like(*x, dx));
                self.acc(grads, *w, self.like(*w, dw));
            }
            Op::Conv3d { x, w, spec } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let geom = Conv3dGeom {
                    c_in: sx[0],
                    c_out: sw[0],
                    kernel: [sw[2], sw[3], sw[4]],
                    dims_in: [sx[1], sx[2], sx[3]],
                    dims_out: [out.shape()[1], out.shape()[2], out.shape()[3]],
                };
                let need_dx = self.ng(*x);
                let (dx, dw) = kernels::conv3d_backward(
                    g.data(),
                    self.value(*x).data(),
                    self.value(*w).data(),
                    &geom,
                    spec,
                    need_dx,
                );
                if need_dx {
                    self.acc(grads, *x, self.like(*x, dx));
                }
                self.acc(grads, *w, self.like(*w, dw));
            }
            Op::MaxPool3d { x, argmax, .. } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (gi, &ai) in g.data().iter().zip(argmax) {
                    d[ai] += gi;
                }
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::AvgPool1d { x, factor } => {
                let s = self.shape(*x);
                let l_out = out.shape()[1];
                let mut d = vec![0.0; s[0] * s[1]];
                for c in 0..s[0] {
                    for t in 0..l_out {
                        let lo = t * factor;
                        let hi = (lo + factor).min(s[1]);
                        let share = g.data()[c * l_out + t] / (hi - lo) as f64;
                        d[c * s[1] + lo..c * s[1] + hi]
                            .iter_mut()
                            .for_each(|v| *v += share);
                    }
                }
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Upsample1d { x, factor } => {
                let d = g.data().chunks(*factor).map(|c| c.iter().sum()).collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::BatchNorm {
                x,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let inner = g.numel() / c;
                let n = inner as f64;
                let mut d = Vec::with_capacity(g.numel());
                for ch in 0..c {
                    let gc = &g.data()[ch * inner..(ch + 1) * inner];
                    let is = inv_std[ch];
                    if *batch_stats {
                        let xh = &out.data()[ch * inner..(ch + 1) * inner];
                        let sum_g: f64 = gc.iter().sum();
                        let sum_gx: f64 = gc.iter().zip(xh).map(|(a, b)| a * b).sum();
                        d.extend(
                            gc.iter()
                                .zip(xh)
                                .map(|(gi, xi)| is / n * (n * gi - sum_g - xi * sum_gx)),
                        );
                    } else {
                        d.extend(gc.iter().map(|gi| gi * is));
                    }
                }
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::WeightNorm { v, g: gain, norms } => {
                let c = norms.len();
                let inner = g.numel() / c;
                let vv = self.value(*v).data();
                let gv = self.value(*gain).data();
                let mut dv = Vec::with_capacity(vv.len());
                let mut dg = Vec::with_capacity(c);
                for ch in 0..c {
                    let row = &vv[ch * inner..(ch + 1) * inner];
                    let gr = &g.data()[ch * inner..(ch + 1) * inner];
                    let nrm = norms[ch];
                    let u_dot: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / nrm;
                    dg.push(u_dot);
                    let coef = gv[ch] / nrm;
                    dv.extend(
                        row.iter()
                            .zip(gr)
                            .map(|(vi, gi)| coef * (gi - vi / nrm * u_dot)),
                    );
                }
                self.acc(grads, *v, self.like(*v, dv));
                self.acc(grads, *gain, self.like(*gain, dg));
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::SoftmaxRows(x) => {
                let n = out.shape()[1];
                let mut d = Vec::with_capacity(g.numel());
                for (gr, yr) in g.data().chunks(n).zip(out.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                eps,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let count = targets.iter().filter(|t| t.is_some()).count();
                let mut d = vec![0.0; probs.len()];
                if count > 0 {
                    let scale = g.item() / count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            let q = eps / v as f64 + if j == t { 1.0 - eps } else { 0.0 };
                            d[r * v + j] = scale * (probs[r * v + j] - q);
                        }
                    }
                }
                self.acc(grads, *logits, self.like(*logits, d));
            }
            Op::L1Loss(a, b) => {
                let n = self.value(*a).numel() as f64;
                let s = g.item() / n;
                let d: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| {
                        if x > y {
                            s
                        } else if x < y {
                            -s
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.ng(*b) {
                    self.acc(grads, *b, self.like(*b, d.iter().map(|x| -x).collect()));
                }
                self.acc(grads, *a, self.like(*a, d));
            }
            Op::Gather { table, ids } => {
                let e = out.shape()[1];
                let mut d = vec![0.0; self.value(*table).numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..e {
                        d[i * e + j] += g.data()[r * e + j];
                    }
                }
                self.acc(grads, *table, self.like(*table, d));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

fn softmax_rows_raw(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let start = out.len();
        out.extend(row.iter().map(|z| (z - m).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|p| *p /= s);
    }
    out
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = g.constant(t2(&[vec![2.0, 3.0], vec![4.0, 5.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);

        let a = g.constant(t2(&[vec![1.0, 2.0]]));
        let b = g.constant(t2(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] by [2, 3]"), "{err}");
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0, -2.0, 3.0]), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0, -2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_in_store() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::from_vec(vec![2.0])).unwrap();
        let grads = {
            let mut g = Graph::with_params(&store);
            let wv = g.param(w);
            let sq = g.mul(wv, wv).unwrap();
            let loss = g.sum(sq);
            let g1 = g.backward(loss).unwrap();
            let g2 = g.backward(loss).unwrap();
            (g1, g2)
        };
        store.accumulate(&grads.0);
        store.accumulate(&grads.1);
        assert_eq!(store.get(w).grad.data(), &[8.0]);
    }

    #[test]
    fn sigmoid_and_losses() {
        assert_eq!(sigmoid(0.0), 0.5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.3, -1.0]));
        let l = g.l1_loss(x, x).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn probabilities_are_validated() {
        let mut g = Graph::new().training(1);
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.dropout(x, 1.5), Err(Error::Config(_))));
        assert!(matches!(
            g.cross_entropy(x, &[Some(0), None], -0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[3, 4]));
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn concat_then_narrow_recovers_operands() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let b = g.constant(Tensor::new(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap());
        let c = g.concat(&[a, b], 0).unwrap();
        let a2 = g.narrow(c, 0, 0, 2).unwrap();
        let b2 = g.narrow(c, 0, 2, 1).unwrap();
        assert_eq!(g.value(a), g.value(a2));
        assert_eq!(g.value(b), g.value(b2));
    }
}
