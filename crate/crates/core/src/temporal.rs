//! Temporal-convolution residual units and the stream assemblers of the
//! enhancement network.
//!
//! Streams work on channel-first `[C, L]` sequences. A stream is described
//! by a [`StreamSpec`] whose rows mirror the usual layer tables (filters,
//! kernel, stride, output length); fractional strides are transposed
//! convolutions.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{Conv1dSpec, Padding};
use crate::nn::{BatchNorm, Builder, Conv1d};
use crate::params::ParamId;
use crate::tensor::Tensor;

pub const TCN_DROPOUT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Tcn,
    #[serde(rename = "resnet1d")]
    ResNet1d,
}

impl UnitKind {
    pub fn tag(self) -> &'static str {
        match self {
            UnitKind::Tcn => "tcn",
            UnitKind::ResNet1d => "resnet1d",
        }
    }
}

impl std::str::FromStr for UnitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tcn" => Ok(UnitKind::Tcn),
            "resnet1d" | "1drn" => Ok(UnitKind::ResNet1d),
            other => config_err(format!("unknown unit kind '{other}' (tcn | resnet1d)")),
        }
    }
}

/// Weight-normalized causal dilated convolution.
#[derive(Clone, Debug)]
struct WnConv {
    v: ParamId,
    g: ParamId,
    b: ParamId,
    spec: Conv1dSpec,
}

impl WnConv {
    fn new(b: &mut Builder, ch: usize, kernel: usize, dilation: usize) -> Result<Self> {
        let v = b.xavier("v", &[ch, ch, kernel], ch * kernel, ch * kernel)?;
        let norms: Vec<f64> = b
            .store()
            .value(v)
            .data()
            .chunks(ch * kernel)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Ok(Self {
            v,
            g: b.weight("g", Tensor::from_vec(norms))?,
            b: b.zeros("b", &[ch])?,
            spec: Conv1dSpec::causal(dilation),
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (v, gain, bias) = (g.param(self.v), g.param(self.g), g.param(self.b));
        let w = g.weight_norm(v, gain)?;
        let y = g.conv1d(x, w, self.spec)?;
        g.add_channel(y, bias)
    }
}

/// Two weight-normalized causal dilated convolutions, each followed by ReLU
/// and spatial dropout, with an identity skip around both.
#[derive(Clone, Debug)]
pub struct TcnBlock {
    conv1: WnConv,
    conv2: WnConv,
    pub channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub dropout: f64,
}

impl TcnBlock {
    pub fn new(b: &mut Builder, channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        if channels == 0 || kernel == 0 || dilation == 0 {
            return config_err(format!(
                "tcn block with {channels} channels, K={kernel}, d={dilation}"
            ));
        }
        Ok(Self {
            conv1: WnConv::new(&mut b.sub("conv1"), channels, kernel, dilation)?,
            conv2: WnConv::new(&mut b.sub("conv2"), channels, kernel, dilation)?,
            channels,
            kernel,
            dilation,
            dropout: TCN_DROPOUT,
        })
    }

    /// Kernel gains of both convolutions, for tests that need a zero branch.
    pub fn gains(&self) -> [ParamId; 2] {
        [self.conv1.g, self.conv2.g]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_channels(g, x, self.channels, "tcn block")?;
        let mut h = x;
        for conv in [&self.conv1, &self.conv2] {
            h = conv.forward(g, h)?;
            h = g.relu(h);
            h = g.spatial_dropout(h, self.dropout)?;
        }
        g.add(x, h)
    }

    /// Samples of history seen by one block: `2·(K−1)·d`.
    pub fn history(&self) -> usize {
        2 * (self.kernel - 1) * self.dilation
    }
}

/// Stride of a 1-D ResNet block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    None,
    /// Transposed convolution, ×2 (stride ½).
    Up,
    /// Stride 2.
    Down,
}

/// Convolution, batch norm and ReLU with the residual added after the ReLU.
/// Length-preserving blocks use a depthwise-separable convolution; the
/// upsampling block uses a full transposed convolution with a
/// nearest-neighbour skip and the downsampling block an average-pooled skip.
#[derive(Clone, Debug)]
pub struct ResNet1dBlock {
    depthwise: Option<Conv1d>,
    conv: Conv1d,
    bn: BatchNorm,
    pub channels: usize,
    pub resample: Resample,
}

impl ResNet1dBlock {
    pub fn new(
        b: &mut Builder,
        channels: usize,
        kernel: usize,
        resample: Resample,
    ) -> Result<Self> {
        if channels == 0 || kernel == 0 {
            return config_err(format!(
                "resnet1d block with {channels} channels, K={kernel}"
            ));
        }
        let (depthwise, conv) = match resample {
            Resample::Up => (
                None,
                Conv1d::without_bias(
                    &mut b.sub("conv"),
                    channels,
                    channels,
                    kernel,
                    Conv1dSpec::upsample(2),
                )?,
            ),
            Resample::None | Resample::Down => {
                let stride = if resample == Resample::Down { 2 } else { 1 };
                let dw = Conv1dSpec {
                    stride,
                    groups: channels,
                    ..Conv1dSpec::default()
                };
                (
                    Some(Conv1d::without_bias(
                        &mut b.sub("depthwise"),
                        channels,
                        channels,
                        kernel,
                        dw,
                    )?),
                    Conv1d::without_bias(
                        &mut b.sub("pointwise"),
                        channels,
                        channels,
                        1,
                        Conv1dSpec::default(),
                    )?,
                )
            }
        };
        Ok(Self {
            depthwise,
            conv,
            bn: BatchNorm::new(&mut b.sub("bn"), channels)?,
            channels,
            resample,
        })
    }

    pub fn batch_norm(&self) -> &BatchNorm {
        &self.bn
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.forward_many(g, &[x])?[0])
    }

    /// A batch of `[C, L_i]` inputs with shared batch-norm statistics.
    pub fn forward_many(&self, g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>> {
        let mut hs = Vec::with_capacity(xs.len());
        for &x in xs {
            check_channels(g, x, self.channels, "resnet1d block")?;
            let mut h = x;
            if let Some(dw) = &self.depthwise {
                h = dw.forward(g, h)?;
            }
            hs.push(self.conv.forward(g, h)?);
        }
        let hs = self.bn.forward_many(g, &hs)?;
        xs.iter()
            .zip(hs)
            .map(|(&x, h)| {
                let h = g.relu(h);
                let skip = match self.resample {
                    Resample::None => x,
                    Resample::Up => g.upsample1d(x, 2)?,
                    Resample::Down => g.avg_pool1d(x, 2)?,
                };
                g.add(skip, h)
            })
            .collect()
    }
}

fn check_channels(g: &Graph, x: Var, channels: usize, what: &str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[0] != channels {
        return config_err(format!("{what} expects [{channels}, L], got {s:?}"));
    }
    Ok(())
}

/// One row of a stream table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    /// Position-wise linear map (1×1 convolution) to `filters` channels.
    Fc { filters: usize },
    /// A 1-D ResNet block; `stride` is 1, 2, or 0.5 for transposed.
    Conv {
        filters: usize,
        kernel: usize,
        stride: f64,
    },
    /// `blocks` TCN blocks with dilations 1, 2, 4, ...
    Tcn {
        hidden: usize,
        kernel: usize,
        blocks: usize,
    },
    /// A plain transposed convolution with stride ½.
    Upsample { filters: usize, kernel: usize },
}

impl LayerSpec {
    fn resample(&self) -> Result<Resample> {
        match self {
            LayerSpec::Conv { stride, .. } => {
                if *stride == 1.0 {
                    Ok(Resample::None)
                } else if *stride == 2.0 {
                    Ok(Resample::Down)
                } else if *stride == 0.5 {
                    Ok(Resample::Up)
                } else {
                    config_err(format!("conv stride {stride} (need 1, 2 or 0.5)"))
                }
            }
            LayerSpec::Upsample { .. } => Ok(Resample::Up),
            _ => Ok(Resample::None),
        }
    }

    fn width(&self) -> usize {
        match self {
            LayerSpec::Fc { filters }
            | LayerSpec::Conv { filters, .. }
            | LayerSpec::Upsample { filters, .. } => *filters,
            LayerSpec::Tcn { hidden, .. } => *hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub unit: UnitKind,
    pub layers: Vec<LayerSpec>,
}

impl StreamSpec {
    /// fc0, two conv, up, three conv, up, two conv, fc.
    pub fn video_resnet(width: usize, out: usize) -> Self {
        let conv = |stride| LayerSpec::Conv {
            filters: width,
            kernel: 5,
            stride,
        };
        let mut layers = vec![LayerSpec::Fc { filters: width }];
        layers.extend([
            conv(1.0),
            conv(1.0),
            conv(0.5),
            conv(1.0),
            conv(1.0),
            conv(1.0),
            conv(0.5),
            conv(1.0),
            conv(1.0),
        ]);
        layers.push(LayerSpec::Fc { filters: out });
        Self {
            unit: UnitKind::ResNet1d,
            layers,
        }
    }

    /// fc0, five conv, fc.
    pub fn audio_resnet(width: usize, out: usize) -> Self {
        let mut layers = vec![LayerSpec::Fc { filters: width }];
        layers.extend((0..5).map(|_| LayerSpec::Conv {
            filters: width,
            kernel: 5,
            stride: 1.0,
        }));
        layers.push(LayerSpec::Fc { filters: out });
        Self {
            unit: UnitKind::ResNet1d,
            layers,
        }
    }

    /// fc0, three TCN blocks, fc.
    pub fn audio_tcn(hidden: usize, out: usize) -> Self {
        Self {
            unit: UnitKind::Tcn,
            layers: vec![
                LayerSpec::Fc { filters: hidden },
                LayerSpec::Tcn {
                    hidden,
                    kernel: 3,
                    blocks: 3,
                },
                LayerSpec::Fc { filters: out },
            ],
        }
    }

    /// fc0, TCN, up, TCN, up, fc.
    pub fn video_tcn(hidden: usize, out: usize) -> Self {
        let tcn = LayerSpec::Tcn {
            hidden,
            kernel: 3,
            blocks: 3,
        };
        let up = LayerSpec::Upsample {
            filters: hidden,
            kernel: 3,
        };
        Self {
            unit: UnitKind::Tcn,
            layers: vec![
                LayerSpec::Fc { filters: hidden },
                tcn.clone(),
                up.clone(),
                tcn,
                up,
                LayerSpec::Fc { filters: out },
            ],
        }
    }

    pub fn video(unit: UnitKind, width: usize, out: usize) -> Self {
        match unit {
            UnitKind::Tcn => Self::video_tcn(width, out),
            UnitKind::ResNet1d => Self::video_resnet(width, out),
        }
    }

    pub fn audio(unit: UnitKind, width: usize, out: usize) -> Self {
        match unit {
            UnitKind::Tcn => Self::audio_tcn(width, out),
            UnitKind::ResNet1d => Self::audio_resnet(width, out),
        }
    }

    /// Product of all temporal resampling factors (upsampling counts as 2,
    /// downsampling as ½).
    pub fn temporal_factor(&self) -> Result<f64> {
        let mut f = 1.0;
        for l in &self.layers {
            f *= match l.resample()? {
                Resample::None => 1.0,
                Resample::Up => 2.0,
                Resample::Down => 0.5,
            };
        }
        Ok(f)
    }

    pub fn upsampling_stages(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.resample(), Ok(Resample::Up)))
            .count()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map(|l| l.width()).unwrap_or(0)
    }

    /// The output-length column for an input of `t` steps.
    pub fn out_lengths(&self, t: usize) -> Result<Vec<usize>> {
        let mut len = t;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            len = match l.resample()? {
                Resample::None => len,
                Resample::Up => len * 2,
                Resample::Down => len.div_ceil(2),
            };
            out.push(len);
        }
        Ok(out)
    }

    /// Plain-text layer table (Layer, filters, K, S, Out).
    pub fn table(&self, t_label: &str) -> Result<String> {
        let mut s = format!(
            "{:<8} {:>8} {:>3} {:>5} {:>6}\n",
            "Layer", "filters", "K", "S", "Out"
        );
        let mut factor = 1.0f64;
        for (i, l) in self.layers.iter().enumerate() {
            factor *= match l.resample()? {
                Resample::None => 1.0,
                Resample::Up => 2.0,
                Resample::Down => 0.5,
            };
            let (name, k, stride) = match l {
                LayerSpec::Fc { .. } => ("fc", 1, "1".to_string()),
                LayerSpec::Conv { kernel, stride, .. } => (
                    "conv",
                    *kernel,
                    if *stride == 0.5 {
                        "1/2".into()
                    } else {
                        format!("{stride}")
                    },
                ),
                LayerSpec::Tcn { kernel, .. } => ("TCN", *kernel, "1".into()),
                LayerSpec::Upsample { kernel, .. } => ("conv", *kernel, "1/2".into()),
            };
            let out = if factor == 1.0 {
                t_label.to_string()
            } else if factor > 1.0 {
                format!("{}{t_label}", factor as usize)
            } else {
                format!("{t_label}/{}", (1.0 / factor) as usize)
            };
            s.push_str(&format!(
                "{:<8} {:>8} {:>3} {:>5} {:>6}\n",
                format!("{name}{i}"),
                l.width(),
                k,
                stride,
                out
            ));
        }
        Ok(s)
    }
}

#[derive(Clone, Debug)]
enum StreamLayer {
    Fc(Conv1d),
    Res(ResNet1dBlock),
    Tcn(Vec<TcnBlock>),
    Up(Conv1d),
}

/// An assembled stream.
#[derive(Clone, Debug)]
pub struct Stream {
    layers: Vec<StreamLayer>,
    pub spec: StreamSpec,
    pub in_width: usize,
}

impl Stream {
    pub fn new(b: &mut Builder, spec: &StreamSpec, in_width: usize) -> Result<Self> {
        if spec.layers.is_empty() {
            return config_err("stream has no layers");
        }
        let mut width = in_width;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let mut lb = b.sub(&format!("l{i}"));
            let layer = match l {
                LayerSpec::Fc { filters } => StreamLayer::Fc(Conv1d::new(
                    &mut lb,
                    width,
                    *filters,
                    1,
                    Conv1dSpec::default(),
                )?),
                LayerSpec::Conv {
                    filters, kernel, ..
                } => {
                    if *filters != width {
                        return config_err(format!(
                            "layer {i}: conv block of {filters} filters after a {width}-wide layer (insert an fc)"
                        ));
                    }
                    StreamLayer::Res(ResNet1dBlock::new(&mut lb, width, *kernel, l.resample()?)?)
                }
                LayerSpec::Tcn {
                    hidden,
                    kernel,
                    blocks,
                } => {
                    if *hidden != width {
                        return config_err(format!(
                            "layer {i}: TCN of {hidden} units after a {width}-wide layer (insert an fc)"
                        ));
                    }
                    if *blocks == 0 {
                        return config_err(format!("layer {i}: TCN with no blocks"));
                    }
                    let blocks = (0..*blocks)
                        .map(|j| {
                            TcnBlock::new(&mut lb.sub(&format!("b{j}")), width, *kernel, 1 << j)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    StreamLayer::Tcn(blocks)
                }
                LayerSpec::Upsample { filters, kernel } => {
                    let spec = Conv1dSpec {
                        padding: Padding::Causal,
                        ..Conv1dSpec::upsample(2)
                    };
                    StreamLayer::Up(Conv1d::new(&mut lb, width, *filters, *kernel, spec)?)
                }
            };
            width = l.width();
            layers.push(layer);
        }
        Ok(Self {
            layers,
            spec: spec.clone(),
            in_width,
        })
    }

    /// A video stream: exactly two upsampling stages totaling ×4.
    pub fn video(b: &mut Builder, spec: &StreamSpec, in_width: usize) -> Result<Self> {
        if spec.upsampling_stages() != 2 || spec.temporal_factor()? != 4.0 {
            return config_err(format!(
                "video stream must upsample ×4 in two stages, spec has {} stage(s) totaling ×{}",
                spec.upsampling_stages(),
                spec.temporal_factor()?
            ));
        }
        Self::new(b, spec, in_width)
    }

    /// An audio stream: length-preserving.
    pub fn audio(b: &mut Builder, spec: &StreamSpec, in_width: usize) -> Result<Self> {
        if spec.temporal_factor()? != 1.0 {
            return config_err("audio stream must preserve temporal length");
        }
        Self::new(b, spec, in_width)
    }

    pub fn out_width(&self) -> usize {
        self.spec.out_width()
    }

    pub fn tcn_blocks(&self) -> impl Iterator<Item = &TcnBlock> {
        self.layers.iter().flat_map(|l| match l {
            StreamLayer::Tcn(b) => b.as_slice(),
            _ => &[],
        })
    }

    /// `[C_in, L] -> [C_out, L·factor]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.forward_many(g, &[x])?[0])
    }

    /// A batch of `[C_in, L_i]` inputs; batch norms share statistics.
    pub fn forward_many(&self, g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>> {
        for &x in xs {
            let s = g.shape(x);
            if s.len() != 2 || s[0] != self.in_width {
                return Err(Error::Dimension(format!(
                    "stream expects [{}, L], got {s:?}",
                    self.in_width
                )));
            }
        }
        let mut hs = xs.to_vec();
        for l in &self.layers {
            hs = match l {
                StreamLayer::Fc(c) | StreamLayer::Up(c) => {
                    hs.iter().map(|&h| c.forward(g, h)).collect::<Result<_>>()?
                }
                StreamLayer::Res(r) => r.forward_many(g, &hs)?,
                StreamLayer::Tcn(blocks) => {
                    for b in blocks {
                        hs = hs.iter().map(|&h| b.forward(g, h)).collect::<Result<_>>()?;
                    }
                    hs
                }
            };
        }
        Ok(hs)
    }

    /// [`Stream::forward_many`] on row-major `[L_i, C_in]` inputs.
    pub fn forward_rows_many(&self, g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>> {
        let xts = xs
            .iter()
            .map(|&x| g.transpose(x))
            .collect::<Result<Vec<_>>>()?;
        let ys = self.forward_many(g, &xts)?;
        ys.into_iter().map(|y| g.transpose(y)).collect()
    }

    /// Row-major convenience: `[L, C_in] -> [L·factor, C_out]`.
    pub fn forward_rows(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xt = g.transpose(x)?;
        let y = self.forward(g, xt)?;
        g.transpose(y)
    }
}

/// Video features `[T, D]` to `[4T, C]`.
pub fn video_stream(g: &mut Graph, stream: &Stream, v: Var) -> Result<Var> {
    let t = g.shape(v)[0];
    let y = stream.forward_rows(g, v)?;
    if g.shape(y)[0] != 4 * t {
        return Err(Error::Alignment(format!(
            "video stream produced {} steps from {t}",
            g.shape(y)[0]
        )));
    }
    Ok(y)
}

/// Magnitudes `[4T, F]` to `[4T, C]`; `video_frames` is the paired clip length.
pub fn audio_stream(g: &mut Graph, stream: &Stream, m: Var, video_frames: usize) -> Result<Var> {
    let l = g.shape(m)[0];
    if l != 4 * video_frames {
        return Err(Error::Alignment(format!(
            "{l} audio frames paired with {video_frames} video frames"
        )));
    }
    stream.forward_rows(g, m)
}
