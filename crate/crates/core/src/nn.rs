//! Parameterized layers on top of [`Graph`].
//!
//! Layers only hold [`ParamId`]s; values live in the [`ParamStore`]. They
//! are created through a [`Builder`], which prefixes every name with the
//! path of the enclosing module (`ae/video/tcn1/conv1/v`, ...).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{Conv1dSpec, Conv3dSpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.trim_end_matches('/').to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{name}", self.prefix)
        }
    }

    pub fn weight(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let p = self.path(name);
        self.store.register(p, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let p = self.path(name);
        self.store.register_buffer(p, value)
    }

    pub fn xavier(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Result<ParamId> {
        let t = Tensor::xavier(shape, fan_in, fan_out, self.rng);
        self.weight(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.weight(name, Tensor::zeros(shape))
    }

    pub fn store(&mut self) -> &mut ParamStore {
        self.store
    }
}

/// Convenience for tests and examples: a fresh store plus seeded generator.
pub fn seeded(seed: u64) -> (ParamStore, ChaCha8Rng) {
    (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
}

/// Affine map on rows: `y = x·W + b` for `x[L, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            w: b.xavier("w", &[in_dim, out_dim], in_dim, out_dim)?,
            b: b.zeros("b", &[out_dim])?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// 1-D convolution over `[C, L]` with a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv1dSpec,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(
        b: &mut Builder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv1dSpec,
    ) -> Result<Self> {
        Self::build(b, in_ch, out_ch, kernel, spec, true)
    }

    pub fn without_bias(
        b: &mut Builder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv1dSpec,
    ) -> Result<Self> {
        Self::build(b, in_ch, out_ch, kernel, spec, false)
    }

    fn build(
        b: &mut Builder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv1dSpec,
        bias: bool,
    ) -> Result<Self> {
        if kernel == 0 || spec.groups == 0 || in_ch % spec.groups != 0 || out_ch % spec.groups != 0
        {
            return config_err(format!(
                "conv1d {in_ch}->{out_ch} kernel {kernel} with {} groups",
                spec.groups
            ));
        }
        let cin_g = in_ch / spec.groups;
        let w = b.xavier(
            "w",
            &[out_ch, cin_g, kernel],
            cin_g * kernel,
            out_ch / spec.groups * kernel,
        )?;
        let bias = if bias {
            Some(b.zeros("b", &[out_ch])?)
        } else {
            None
        };
        Ok(Self {
            w,
            b: bias,
            spec,
            in_ch,
            out_ch,
            kernel,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.conv1d(x, w, self.spec)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_channel(y, b)
            }
            None => Ok(y),
        }
    }
}

/// 3-D convolution over `[C, T, H, W]`, no bias (always followed by batch norm here).
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub spec: Conv3dSpec,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
}

impl Conv3d {
    pub fn new(
        b: &mut Builder,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
    ) -> Result<Self> {
        let k: usize = kernel.iter().product();
        let w = b.xavier(
            "w",
            &[out_ch, in_ch, kernel[0], kernel[1], kernel[2]],
            in_ch * k,
            out_ch * k,
        )?;
        Ok(Self {
            w,
            spec,
            in_ch,
            out_ch,
            kernel,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        g.conv3d(x, w, self.spec)
    }
}

/// Batch normalization over the channel axis with learned scale and shift
/// and running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.weight("gamma", Tensor::ones(&[channels]))?,
            beta: b.zeros("beta", &[channels])?,
            running_mean: b.buffer("running_mean", Tensor::zeros(&[channels]))?,
            running_var: b.buffer("running_var", Tensor::ones(&[channels]))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Same as [`BatchNorm::new`] with the scale initialized to zero, so a
    /// residual branch ending in this layer starts as the zero map.
    pub fn zero_init(b: &mut Builder, channels: usize) -> Result<Self> {
        let bn = Self::new(b, channels)?;
        b.store().value_mut(bn.gamma).data_mut().fill(0.0);
        Ok(bn)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let normalized = if g.is_training() {
            let (y, mean, var) = g.batch_norm(x, None, self.eps)?;
            let inner = g.value(x).numel() / mean.len();
            let unbias = if inner > 1 {
                inner as f64 / (inner - 1) as f64
            } else {
                1.0
            };
            let m = self.momentum;
            let rm = g.buffer(self.running_mean);
            let rv = g.buffer(self.running_var);
            let new_m: Vec<f64> = rm
                .data()
                .iter()
                .zip(&mean)
                .map(|(r, b)| (1.0 - m) * r + m * b)
                .collect();
            let new_v: Vec<f64> = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
                .collect();
            g.set_buffer(self.running_mean, Tensor::from_vec(new_m));
            g.set_buffer(self.running_var, Tensor::from_vec(new_v));
            y
        } else {
            let rm = g.buffer(self.running_mean);
            let rv = g.buffer(self.running_var);
            g.batch_norm(x, Some((rm.data(), rv.data())), self.eps)?.0
        };
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_channel(normalized, gamma)?;
        g.add_channel(y, beta)
    }

    /// Several inputs `[C, L_i, ...]` sharing one set of training-mode
    /// statistics: they are joined along axis 1, normalized and split again.
    /// In evaluation mode each input is normalized on its own.
    pub fn forward_many(&self, g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.len() <= 1 || !g.is_training() {
            return xs.iter().map(|&x| self.forward(g, x)).collect();
        }
        let lens: Vec<usize> = xs
            .iter()
            .map(|&x| g.shape(x).get(1).copied().unwrap_or(0))
            .collect();
        let joined = g.concat(xs, 1)?;
        let y = self.forward(g, joined)?;
        let mut out = Vec::with_capacity(xs.len());
        let mut start = 0;
        for len in lens {
            out.push(g.narrow(y, 1, start, len)?);
            start += len;
        }
        Ok(out)
    }
}

/// Token embedding table `[vocab, dim]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new(b: &mut Builder, vocab: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: b.xavier("table", &[vocab, dim], vocab, dim)?,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_prefixes_names() {
        let (mut store, mut rng) = seeded(0);
        let mut b = Builder::new(&mut store, &mut rng, "net");
        let lin = Linear::new(&mut b.sub("fc1"), 3, 2).unwrap();
        assert_eq!(store.get(lin.w).name, "net/fc1/w");
        assert_eq!(store.value(lin.w).shape(), &[3, 2]);
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_training() {
        let (mut store, mut rng) = seeded(0);
        let bn = BatchNorm::new(&mut Builder::new(&mut store, &mut rng, "bn"), 1).unwrap();
        let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let grads = {
            let mut g = Graph::with_params(&store).training(0);
            let xv = g.constant(x.clone());
            let y = bn.forward(&mut g, xv).unwrap();
            assert!(g.value(y).mean().abs() < 1e-12);
            g.buffer_updates()
        };
        store.accumulate(&grads);
        assert!((store.value(bn.running_mean).item() - 0.25).abs() < 1e-12);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x);
        bn.forward(&mut g, xv).unwrap();
        assert!(g.buffer_updates().buffers.is_empty());
    }
}
