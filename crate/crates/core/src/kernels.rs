//! Raw loops behind the convolution and pooling ops. Shapes are validated by
//! the callers in `graph`; everything here assumes consistent extents.

/// How a 1-D convolution pads its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Symmetric zero padding of `(K-1)·d` split left/right; output length `ceil(L/stride)`.
    Same,
    /// Left padding only, so output `t` never reads input past `t`.
    Causal,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    /// Fractional stride: the input is upsampled by `stride` (output length `L·stride`).
    pub transposed: bool,
    pub groups: usize,
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
            transposed: false,
            groups: 1,
        }
    }
}

impl Conv1dSpec {
    pub fn causal(dilation: usize) -> Self {
        Self {
            dilation,
            padding: Padding::Causal,
            ..Self::default()
        }
    }

    pub fn strided(stride: usize) -> Self {
        Self {
            stride,
            ..Self::default()
        }
    }

    pub fn upsample(factor: usize) -> Self {
        Self {
            stride: factor,
            transposed: true,
            ..Self::default()
        }
    }

    pub fn depthwise(channels: usize) -> Self {
        Self {
            groups: channels,
            ..Self::default()
        }
    }

    fn left_pad(&self, k: usize) -> usize {
        let span = (k - 1) * self.dilation;
        match (self.padding, self.transposed) {
            (Padding::Same, _) => span / 2,
            (Padding::Causal, false) => span,
            (Padding::Causal, true) | (Padding::Valid, _) => 0,
        }
    }

    /// Output length for input length `l` and kernel width `k`, or `None`
    /// when the input is shorter than the effective kernel.
    pub fn out_len(&self, l: usize, k: usize) -> Option<usize> {
        let span = (k - 1) * self.dilation;
        let s = self.stride;
        match (self.padding, self.transposed) {
            (Padding::Valid, false) => (l > span).then(|| (l - span - 1) / s + 1),
            (_, false) => Some((l - 1) / s + 1),
            (Padding::Valid, true) => Some((l - 1) * s + span + 1),
            (_, true) => Some(l * s),
        }
    }
}

/// Range of `t` in `0..n` with `0 <= t*s + off < limit`.
#[inline]
fn valid_range(n: usize, limit: usize, s: usize, off: isize) -> std::ops::Range<usize> {
    let s_i = s as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) + s_i - 1) / s_i
    };
    let rem = limit as isize - off;
    let hi = if rem <= 0 { 0 } else { (rem + s_i - 1) / s_i };
    let hi = (hi.max(0) as usize).min(n);
    let lo = (lo as usize).min(hi);
    lo..hi
}

pub struct Conv1dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub l_in: usize,
    pub l_out: usize,
}

/// Forward 1-D convolution. `x: [c_in, l_in]`, `w: [c_out, c_in/groups, k]`.
pub fn conv1d_forward(x: &[f64], w: &[f64], g: &Conv1dGeom, spec: &Conv1dSpec) -> Vec<f64> {
    let mut out = vec![0.0; g.c_out * g.l_out];
    let cin_g = g.c_in / spec.groups;
    let cout_g = g.c_out / spec.groups;
    let pad = spec.left_pad(g.k) as isize;
    let s = spec.stride;
    for o in 0..g.c_out {
        let grp = o / cout_g;
        let orow = &mut out[o * g.l_out..(o + 1) * g.l_out];
        for c in 0..cin_g {
            let ci = grp * cin_g + c;
            let xrow = &x[ci * g.l_in..(ci + 1) * g.l_in];
            for kk in 0..g.k {
                let wv = w[(o * cin_g + c) * g.k + kk];
                if wv == 0.0 {
                    continue;
                }
                let off = (kk * spec.dilation) as isize - pad;
                if spec.transposed {
                    for t in valid_range(g.l_in, g.l_out, s, off) {
                        let j = (t as isize * s as isize + off) as usize;
                        orow[j] += wv * xrow[t];
                    }
                } else if s == 1 {
                    let r = valid_range(g.l_out, g.l_in, 1, off);
                    let (lo, hi) = (r.start, r.end);
                    if lo < hi {
                        let src = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (d, &v) in orow[lo..hi].iter_mut().zip(src) {
                            *d += wv * v;
                        }
                    }
                } else {
                    for t in valid_range(g.l_out, g.l_in, s, off) {
                        orow[t] += wv * xrow[(t as isize * s as isize + off) as usize];
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `conv1d_forward` with respect to input and weights.
pub fn conv1d_backward(
    dout: &[f64],
    x: &[f64],
    w: &[f64],
    g: &Conv1dGeom,
    spec: &Conv1dSpec,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let cin_g = g.c_in / spec.groups;
    let cout_g = g.c_out / spec.groups;
    let pad = spec.left_pad(g.k) as isize;
    let s = spec.stride;
    for o in 0..g.c_out {
        let grp = o / cout_g;
        let drow = &dout[o * g.l_out..(o + 1) * g.l_out];
        for c in 0..cin_g {
            let ci = grp * cin_g + c;
            let xrow = &x[ci * g.l_in..(ci + 1) * g.l_in];
            let dxrow = &mut dx[ci * g.l_in..(ci + 1) * g.l_in];
            for kk in 0..g.k {
                let widx = (o * cin_g + c) * g.k + kk;
                let wv = w[widx];
                let off = (kk * spec.dilation) as isize - pad;
                let mut acc = 0.0;
                if spec.transposed {
                    for t in valid_range(g.l_in, g.l_out, s, off) {
                        let j = (t as isize * s as isize + off) as usize;
                        acc += drow[j] * xrow[t];
                        dxrow[t] += wv * drow[j];
                    }
                } else {
                    for t in valid_range(g.l_out, g.l_in, s, off) {
                        let i = (t as isize * s as isize + off) as usize;
                        acc += drow[t] * xrow[i];
                        dxrow[i] += wv * drow[t];
                    }
                }
                dw[widx] += acc;
            }
        }
    }
    (dx, dw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    /// Stride 1 with padding that preserves every extent for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            stride: [1, 1, 1],
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn out_dims(&self, dims: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.padding[a];
            if padded < kernel[a] {
                return None;
            }
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

pub struct Conv3dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub dims_in: [usize; 3],
    pub dims_out: [usize; 3],
}

/// Forward 3-D convolution. `x: [c_in, T, H, W]`, `w: [c_out, c_in, kt, kh, kw]`.
pub fn conv3d_forward(x: &[f64], w: &[f64], g: &Conv3dGeom, spec: &Conv3dSpec) -> Vec<f64> {
    let [ti, hi, wi] = g.dims_in;
    let [to, ho, wo] = g.dims_out;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.padding;
    let in_plane = ti * hi * wi;
    let out_plane = to * ho * wo;
    let mut out = vec![0.0; g.c_out * out_plane];
    for o in 0..g.c_out {
        let ob = &mut out[o * out_plane..(o + 1) * out_plane];
        for c in 0..g.c_in {
            let xb = &x[c * in_plane..(c + 1) * in_plane];
            for a in 0..kt {
                let rt = valid_range(to, ti, st, a as isize - pt as isize);
                for b in 0..kh {
                    let rh = valid_range(ho, hi, sh, b as isize - ph as isize);
                    for e in 0..kw {
                        let wv = w[(((o * g.c_in + c) * kt + a) * kh + b) * kw + e];
                        if wv == 0.0 {
                            continue;
                        }
                        let offw = e as isize - pw as isize;
                        let rw = valid_range(wo, wi, sw, offw);
                        for t in rt.clone() {
                            let it = t * st + a - pt;
                            for h in rh.clone() {
                                let ih = h * sh + b - ph;
                                let orow = &mut ob[(t * ho + h) * wo..(t * ho + h + 1) * wo];
                                let xrow = &xb[(it * hi + ih) * wi..(it * hi + ih + 1) * wi];
                                if sw == 1 {
                                    for q in rw.clone() {
                                        orow[q] += wv * xrow[(q as isize + offw) as usize];
                                    }
                                } else {
                                    for q in rw.clone() {
                                        orow[q] +=
                                            wv * xrow[(q as isize * sw as isize + offw) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv3d_backward(
    dout: &[f64],
    x: &[f64],
    w: &[f64],
    g: &Conv3dGeom,
    spec: &Conv3dSpec,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>) {
    let [ti, hi, wi] = g.dims_in;
    let [to, ho, wo] = g.dims_out;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.padding;
    let in_plane = ti * hi * wi;
    let out_plane = to * ho * wo;
    let mut dx = if need_dx {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let mut dw = vec![0.0; w.len()];
    for o in 0..g.c_out {
        let db = &dout[o * out_plane..(o + 1) * out_plane];
        for c in 0..g.c_in {
            let xb = &x[c * in_plane..(c + 1) * in_plane];
            for a in 0..kt {
                let rt = valid_range(to, ti, st, a as isize - pt as isize);
                for b in 0..kh {
                    let rh = valid_range(ho, hi, sh, b as isize - ph as isize);
                    for e in 0..kw {
                        let widx = (((o * g.c_in + c) * kt + a) * kh + b) * kw + e;
                        let wv = w[widx];
                        let offw = e as isize - pw as isize;
                        let rw = valid_range(wo, wi, sw, offw);
                        let mut acc = 0.0;
                        for t in rt.clone() {
                            let it = t * st + a - pt;
                            for h in rh.clone() {
                                let ih = h * sh + b - ph;
                                let drow = &db[(t * ho + h) * wo..(t * ho + h + 1) * wo];
                                let xoff = (it * hi + ih) * wi;
                                for q in rw.clone() {
                                    let iw = (q as isize * sw as isize + offw) as usize;
                                    acc += drow[q] * xb[xoff + iw];
                                }
                                if need_dx {
                                    let dxrow =
                                        &mut dx[c * in_plane + xoff..c * in_plane + xoff + wi];
                                    for q in rw.clone() {
                                        let iw = (q as isize * sw as isize + offw) as usize;
                                        dxrow[iw] += wv * drow[q];
                                    }
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Max pooling over `[C, T, H, W]`; returns the pooled values and, per output,
/// the flat input index of the winning element.
pub fn max_pool3d_forward(
    x: &[f64],
    c: usize,
    dims_in: [usize; 3],
    kernel: [usize; 3],
    spec: &Conv3dSpec,
) -> (Vec<f64>, Vec<usize>, [usize; 3], f64) {
    let dims_out = spec
        .out_dims(dims_in, kernel)
        .expect("pool window larger than input");
    let [ti, hi, wi] = dims_in;
    let [to, ho, wo] = dims_out;
    let n_out = c * to * ho * wo;
    let mut out = vec![f64::NEG_INFINITY; n_out];
    let mut arg = vec![0usize; n_out];
    let mut gap = f64::INFINITY;
    for ch in 0..c {
        for t in 0..to {
            for h in 0..ho {
                for q in 0..wo {
                    let oi = ((ch * to + t) * ho + h) * wo + q;
                    let mut second = f64::NEG_INFINITY;
                    for a in 0..kernel[0] {
                        let it = (t * spec.stride[0] + a) as isize - spec.padding[0] as isize;
                        if it < 0 || it >= ti as isize {
                            continue;
                        }
                        for b in 0..kernel[1] {
                            let ih = (h * spec.stride[1] + b) as isize - spec.padding[1] as isize;
                            if ih < 0 || ih >= hi as isize {
                                continue;
                            }
                            for e in 0..kernel[2] {
                                let iw =
                                    (q * spec.stride[2] + e) as isize - spec.padding[2] as isize;
                                if iw < 0 || iw >= wi as isize {
                                    continue;
                                }
                                let ii =
                                    ((ch * ti + it as usize) * hi + ih as usize) * wi + iw as usize;
                                if x[ii] > out[oi] {
                                    second = out[oi];
                                    out[oi] = x[ii];
                                    arg[oi] = ii;
                                } else if x[ii] > second {
                                    second = x[ii];
                                }
                            }
                        }
                    }
                    gap = gap.min(out[oi] - second);
                }
            }
        }
    }
    (out, arg, dims_out, gap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_respects_bounds() {
        assert_eq!(valid_range(5, 5, 1, -2), 2..5);
        assert_eq!(valid_range(5, 5, 1, 2), 0..3);
        assert_eq!(valid_range(4, 8, 2, 1), 0..4);
        assert_eq!(valid_range(4, 7, 2, 1), 0..3);
        assert_eq!(valid_range(3, 2, 1, 5), 0..0);
    }

    #[test]
    fn output_lengths() {
        assert_eq!(Conv1dSpec::default().out_len(10, 5), Some(10));
        assert_eq!(Conv1dSpec::strided(2).out_len(10, 5), Some(5));
        assert_eq!(Conv1dSpec::upsample(2).out_len(10, 5), Some(20));
        let valid = Conv1dSpec {
            padding: Padding::Valid,
            ..Conv1dSpec::default()
        };
        assert_eq!(valid.out_len(3, 5), None);
        assert_eq!(valid.out_len(7, 5), Some(3));
    }
}
