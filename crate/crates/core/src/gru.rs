//! GRU with an element-wise attention gate on its input.
//!
//! ```text
//! a_t  = σ(x_t W_xa + h_{t-1} W_ha + b_a)          (same width as x_t)
//! x̃_t  = a_t ⊙ x_t
//! r_t  = σ(x̃_t W_xr + h_{t-1} W_hr + b_r)
//! z_t  = σ(x̃_t W_xz + h_{t-1} W_hz + b_z)
//! h'_t = tanh(x̃_t W_xh + (r_t ⊙ h_{t-1}) W_hh + b_h)
//! h_t  = z_t ⊙ h_{t-1} + (1 − z_t) ⊙ h'_t
//! ```
//!
//! Rows are time steps: inputs are `[L, D]`, states `[1, N]`. Every layer
//! has its own gate, shared by all of its units.

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Builder;
use crate::params::ParamId;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct EleAttGruCell {
    pub w_xa: ParamId,
    pub w_ha: ParamId,
    pub b_a: ParamId,
    pub w_xr: ParamId,
    pub w_hr: ParamId,
    pub b_r: ParamId,
    pub w_xz: ParamId,
    pub w_hz: ParamId,
    pub b_z: ParamId,
    pub w_xh: ParamId,
    pub w_hh: ParamId,
    pub b_h: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Per-graph handles to a cell's parameters, with the input- and
/// state-side matrices fused so each step needs few products.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    w_xa: Var,
    b_a: Var,
    /// `[W_xr | W_xz | W_xh]`, `[D, 3N]`.
    w_x: Var,
    /// `[W_ha | W_hr | W_hz]`, `[N, D + 2N]`.
    w_h: Var,
    w_hh: Var,
    b_rz: Var,
    b_h: Var,
    d: usize,
    n: usize,
}

impl EleAttGruCell {
    pub fn new(b: &mut Builder, input_dim: usize, hidden: usize) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return config_err(format!("EleAtt-GRU cell {input_dim} -> {hidden}"));
        }
        let (d, n) = (input_dim, hidden);
        Ok(Self {
            w_xa: b.xavier("w_xa", &[d, d], d, d)?,
            w_ha: b.xavier("w_ha", &[n, d], n, d)?,
            b_a: b.zeros("b_a", &[d])?,
            w_xr: b.xavier("w_xr", &[d, n], d, n)?,
            w_hr: b.xavier("w_hr", &[n, n], n, n)?,
            b_r: b.zeros("b_r", &[n])?,
            w_xz: b.xavier("w_xz", &[d, n], d, n)?,
            w_hz: b.xavier("w_hz", &[n, n], n, n)?,
            b_z: b.zeros("b_z", &[n])?,
            w_xh: b.xavier("w_xh", &[d, n], d, n)?,
            w_hh: b.xavier("w_hh", &[n, n], n, n)?,
            b_h: b.zeros("b_h", &[n])?,
            input_dim,
            hidden,
        })
    }

    pub fn params(&self) -> [ParamId; 12] {
        [
            self.w_xa, self.w_ha, self.b_a, self.w_xr, self.w_hr, self.b_r, self.w_xz, self.w_hz,
            self.b_z, self.w_xh, self.w_hh, self.b_h,
        ]
    }

    pub fn prepare(&self, g: &mut Graph) -> Result<CellVars> {
        let p = |g: &mut Graph, id| g.param(id);
        let w_xa = p(g, self.w_xa);
        let b_a = p(g, self.b_a);
        let (w_xr, w_xz, w_xh) = (p(g, self.w_xr), p(g, self.w_xz), p(g, self.w_xh));
        let (w_ha, w_hr, w_hz) = (p(g, self.w_ha), p(g, self.w_hr), p(g, self.w_hz));
        let w_x = g.concat(&[w_xr, w_xz, w_xh], 1)?;
        let w_h = g.concat(&[w_ha, w_hr, w_hz], 1)?;
        let (b_r, b_z) = (p(g, self.b_r), p(g, self.b_z));
        let b_rz = g.concat(&[b_r, b_z], 0)?;
        Ok(CellVars {
            w_xa,
            b_a,
            w_x,
            w_h,
            w_hh: p(g, self.w_hh),
            b_rz,
            b_h: p(g, self.b_h),
            d: self.input_dim,
            n: self.hidden,
        })
    }

    /// A zero `[1, N]` state.
    pub fn zero_state(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(&[1, self.hidden]))
    }

    /// One step. `x: [1, D]`, `h: [1, N]`. `xa`, when given, is the
    /// precomputed `x W_xa`.
    pub fn step(
        &self,
        g: &mut Graph,
        cv: &CellVars,
        x: Var,
        h: Var,
        xa: Option<Var>,
    ) -> Result<Var> {
        if g.shape(x) != [1, cv.d] || g.shape(h) != [1, cv.n] {
            return Err(Error::Contract(format!(
                "cell {}->{} stepped with x {:?} and h {:?}",
                cv.d,
                cv.n,
                g.shape(x),
                g.shape(h)
            )));
        }
        let (d, n) = (cv.d, cv.n);
        let xa = match xa {
            Some(v) => v,
            None => g.matmul(x, cv.w_xa)?,
        };
        let gh = g.matmul(h, cv.w_h)?;
        let gh_a = g.narrow(gh, 1, 0, d)?;
        let a = g.add(xa, gh_a)?;
        let a = g.add_row(a, cv.b_a)?;
        let a = g.sigmoid(a);
        let xt = g.mul(a, x)?;
        let gx = g.matmul(xt, cv.w_x)?;
        let gx_rz = g.narrow(gx, 1, 0, 2 * n)?;
        let gh_rz = g.narrow(gh, 1, d, 2 * n)?;
        let rz = g.add(gx_rz, gh_rz)?;
        let rz = g.add_row(rz, cv.b_rz)?;
        let rz = g.sigmoid(rz);
        let r = g.narrow(rz, 1, 0, n)?;
        let z = g.narrow(rz, 1, n, n)?;
        let rh = g.mul(r, h)?;
        let hh = g.matmul(rh, cv.w_hh)?;
        let gx_h = g.narrow(gx, 1, 2 * n, n)?;
        let cand = g.add(gx_h, hh)?;
        let cand = g.add_row(cand, cv.b_h)?;
        let cand = g.tanh(cand);
        let keep = g.mul(z, h)?;
        let one_minus_z = g.one_minus(z);
        let take = g.mul(one_minus_z, cand)?;
        g.add(keep, take)
    }

    /// Single step with fresh parameter handles.
    pub fn cell_step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let cv = self.prepare(g)?;
        self.step(g, &cv, x, h, None)
    }

    /// Left-to-right unroll over `xs: [L, D]` from `h0` (zero when `None`).
    pub fn run_layer(&self, g: &mut Graph, xs: Var, h0: Option<Var>) -> Result<Var> {
        let s = g.shape(xs).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::Contract(format!(
                "run_layer needs [L >= 1, D], got {s:?}"
            )));
        }
        if s[1] != self.input_dim {
            return Err(Error::Contract(format!(
                "run_layer input width {} for a cell of width {}",
                s[1], self.input_dim
            )));
        }
        let cv = self.prepare(g)?;
        let xa_all = g.matmul(xs, cv.w_xa)?;
        let mut h = match h0 {
            Some(h) => h,
            None => self.zero_state(g),
        };
        let mut outs = Vec::with_capacity(s[0]);
        for t in 0..s[0] {
            let x = g.row(xs, t)?;
            let xa = g.row(xa_all, t)?;
            h = self.step(g, &cv, x, h, Some(xa))?;
            outs.push(h);
        }
        g.concat(&outs, 0)
    }
}

/// Stacked EleAtt-GRU layers; the output of each layer is the input of the next.
#[derive(Clone, Debug)]
pub struct GruStack {
    pub layers: Vec<EleAttGruCell>,
}

impl GruStack {
    pub fn new(b: &mut Builder, n_layers: usize, input_dim: usize, units: usize) -> Result<Self> {
        if n_layers < 1 {
            return config_err("a recurrent stack needs at least one layer");
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut d = input_dim;
        for i in 0..n_layers {
            layers.push(EleAttGruCell::new(&mut b.sub(&format!("l{i}")), d, units)?);
            d = units;
        }
        Ok(Self { layers })
    }

    pub fn units(&self) -> usize {
        self.layers.last().map(|c| c.hidden).unwrap_or(0)
    }

    pub fn forward(&self, g: &mut Graph, xs: Var) -> Result<Var> {
        let mut h = xs;
        for cell in &self.layers {
            h = cell.run_layer(g, h, None)?;
        }
        Ok(h)
    }
}

/// Two-layer encoder (or `layers` deep).
pub fn build_encoder(
    b: &mut Builder,
    layers: usize,
    input_dim: usize,
    units: usize,
) -> Result<GruStack> {
    GruStack::new(b, layers, input_dim, units)
}

/// Single-layer decoder cell, stepped one token at a time.
pub fn build_decoder(b: &mut Builder, input_dim: usize, units: usize) -> Result<EleAttGruCell> {
    EleAttGruCell::new(b, input_dim, units)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded;

    #[test]
    fn all_zero_cell_stays_at_zero() {
        let (mut store, mut rng) = seeded(0);
        let cell = EleAttGruCell::new(&mut Builder::new(&mut store, &mut rng, "c"), 3, 2).unwrap();
        for id in cell.params() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let h = g.constant(Tensor::zeros(&[1, 2]));
        let h1 = cell.cell_step(&mut g, x, h).unwrap();
        assert_eq!(g.value(h1).data(), &[0.0, 0.0]);
    }

    #[test]
    fn wrong_widths_are_contract_errors() {
        let (mut store, mut rng) = seeded(0);
        let cell = EleAttGruCell::new(&mut Builder::new(&mut store, &mut rng, "c"), 3, 2).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let h = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            cell.cell_step(&mut g, x, h),
            Err(Error::Contract(_))
        ));
        let empty_ok = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            cell.run_layer(&mut g, empty_ok, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_layer_stack_is_rejected() {
        let (mut store, mut rng) = seeded(0);
        let r = GruStack::new(&mut Builder::new(&mut store, &mut rng, "s"), 0, 3, 2);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
