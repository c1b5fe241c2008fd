//! C3D stem plus pseudo-3D bottleneck trunk: `[T, 112, 112]` grayscale
//! clips to `[T, width]` per-frame features.
//!
//! Temporal extent is preserved everywhere (temporal kernels are
//! same-padded, temporal strides are 1). Spatial resolution goes
//! 112 → 56 (stem) → 28 (max-pool) → 28, 14, 7, 4 over the four stages.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Conv3dSpec;
use crate::nn::{BatchNorm, Builder, Conv3d, Linear};
use crate::tensor::Tensor;

pub const FRAME_SIZE: usize = 112;

/// Grayscale frames `[T, 112, 112]` with pixel values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
}

impl VideoClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 3 || s[1] != FRAME_SIZE || s[2] != FRAME_SIZE {
            return Err(Error::Format(format!(
                "clip frames must be [T, {FRAME_SIZE}, {FRAME_SIZE}], got {s:?}"
            )));
        }
        if let Some(x) = frames.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Format(format!("pixel value {x} outside [0, 1]")));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw tensor file: `u32` T, H, W (little-endian) then `T·H·W` `f32` pixels.
    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 4 * self.frames.numel());
        for &d in self.frames.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in self.frames.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load_raw(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        if bytes.len() < 12 {
            return Err(Error::Format("clip file shorter than its header".into()));
        }
        let dim = |i: usize| {
            u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize
        };
        let shape = vec![dim(0), dim(1), dim(2)];
        let n: usize = shape.iter().product();
        if bytes.len() != 12 + 4 * n {
            return Err(Error::Format(format!(
                "clip header says {shape:?} but payload is {} bytes",
                bytes.len() - 12
            )));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Self::new(Tensor::new(shape, data)?)
    }

    /// A directory of 112×112 PGM frames, read in file-name order.
    pub fn load_pgm_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Format(format!(
                "no .pgm frames in {}",
                dir.as_ref().display()
            )));
        }
        let mut data = Vec::with_capacity(paths.len() * FRAME_SIZE * FRAME_SIZE);
        for p in &paths {
            let img = image::open(p)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?
                .into_luma8();
            if img.width() as usize != FRAME_SIZE || img.height() as usize != FRAME_SIZE {
                return Err(Error::Format(format!(
                    "{} is {}x{}, expected {FRAME_SIZE}x{FRAME_SIZE}",
                    p.display(),
                    img.width(),
                    img.height()
                )));
            }
            data.extend(img.as_raw().iter().map(|&v| v as f64 / 255.0));
        }
        Self::new(Tensor::new(
            vec![paths.len(), FRAME_SIZE, FRAME_SIZE],
            data,
        )?)
    }

    pub fn save_pgm_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        fs::create_dir_all(dir.as_ref())?;
        let plane = FRAME_SIZE * FRAME_SIZE;
        for (t, frame) in self.frames.data().chunks(plane).enumerate() {
            let px: Vec<u8> = frame.iter().map(|x| (x * 255.0).round() as u8).collect();
            let img = image::GrayImage::from_raw(FRAME_SIZE as u32, FRAME_SIZE as u32, px)
                .expect("frame size");
            img.save_with_format(
                dir.as_ref().join(format!("{t:05}.pgm")),
                image::ImageFormat::Pnm,
            )
            .map_err(|e| Error::Format(format!("writing frame {t}: {e}")))?;
        }
        Ok(())
    }
}

/// Per-frame visual features `[T, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub feats: Tensor,
}

impl VisualFeatures {
    pub fn new(feats: Tensor) -> Result<Self> {
        if feats.ndim() != 2 {
            return Err(Error::Dimension(format!(
                "features must be [T, width], got {:?}",
                feats.shape()
            )));
        }
        Ok(Self { feats })
    }

    pub fn len(&self) -> usize {
        self.feats.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.feats.dim(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum P3dMode {
    A,
    B,
    C,
}

impl std::str::FromStr for P3dMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim_start_matches("P3D-").trim_start_matches("p3d-") {
            "A" | "a" => Ok(P3dMode::A),
            "B" | "b" => Ok(P3dMode::B),
            "C" | "c" => Ok(P3dMode::C),
            other => config_err(format!("unsupported P3D mode '{other}' (A | B | C)")),
        }
    }
}

/// Wiring of the factored pair: A = T(S(x)), B = S(x) + T(x),
/// C = S(x) + T(S(x)).
pub fn factored<S, T>(g: &mut Graph, x: Var, mode: P3dMode, spatial: S, temporal: T) -> Result<Var>
where
    S: Fn(&mut Graph, Var) -> Result<Var>,
    T: Fn(&mut Graph, Var) -> Result<Var>,
{
    let out = factored_many(
        g,
        &[x],
        mode,
        |g: &mut Graph, xs: &[Var]| xs.iter().map(|&x| spatial(g, x)).collect(),
        |g: &mut Graph, xs: &[Var]| xs.iter().map(|&x| temporal(g, x)).collect(),
    )?;
    Ok(out[0])
}

/// [`factored`] over a batch, with the spatial and temporal maps applied
/// to the whole batch at once.
pub fn factored_many<S, T>(
    g: &mut Graph,
    xs: &[Var],
    mode: P3dMode,
    spatial: S,
    temporal: T,
) -> Result<Vec<Var>>
where
    S: Fn(&mut Graph, &[Var]) -> Result<Vec<Var>>,
    T: Fn(&mut Graph, &[Var]) -> Result<Vec<Var>>,
{
    let add = |g: &mut Graph, a: Vec<Var>, b: Vec<Var>| -> Result<Vec<Var>> {
        a.into_iter().zip(b).map(|(a, b)| g.add(a, b)).collect()
    };
    match mode {
        P3dMode::A => {
            let s = spatial(g, xs)?;
            temporal(g, &s)
        }
        P3dMode::B => {
            let s = spatial(g, xs)?;
            let t = temporal(g, xs)?;
            add(g, s, t)
        }
        P3dMode::C => {
            let s = spatial(g, xs)?;
            let t = temporal(g, &s)?;
            add(g, s, t)
        }
    }
}

/// Bare factored convolution with `w_spatial: [C, C, 1, 3, 3]` and
/// `w_temporal: [C, C, 3, 1, 1]`, same-padded.
pub fn conv3d_factored(
    g: &mut Graph,
    x: Var,
    w_spatial: Var,
    w_temporal: Var,
    mode: P3dMode,
) -> Result<Var> {
    let (ss, st) = (g.shape(w_spatial).to_vec(), g.shape(w_temporal).to_vec());
    if ss.len() != 5 || ss[2..] != [1, 3, 3] || st.len() != 5 || st[2..] != [3, 1, 1] {
        return Err(Error::Dimension(format!(
            "factored kernels must be [.., 1, 3, 3] and [.., 3, 1, 1], got {ss:?} and {st:?}"
        )));
    }
    factored(
        g,
        x,
        mode,
        |g, v| g.conv3d(v, w_spatial, Conv3dSpec::same([1, 3, 3])),
        |g, v| g.conv3d(v, w_temporal, Conv3dSpec::same([3, 1, 1])),
    )
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv3d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new(
        b: &mut Builder,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
        zero_gamma: bool,
    ) -> Result<Self> {
        let conv = Conv3d::new(&mut b.sub("conv"), cin, cout, kernel, spec)?;
        let bn = if zero_gamma {
            BatchNorm::zero_init(&mut b.sub("bn"), cout)?
        } else {
            BatchNorm::new(&mut b.sub("bn"), cout)?
        };
        Ok(Self { conv, bn })
    }

    fn forward_many(&self, g: &mut Graph, xs: &[Var], relu: bool) -> Result<Vec<Var>> {
        let ys = xs
            .iter()
            .map(|&x| self.conv.forward(g, x))
            .collect::<Result<Vec<_>>>()?;
        let ys = self.bn.forward_many(g, &ys)?;
        Ok(if relu {
            ys.into_iter().map(|y| g.relu(y)).collect()
        } else {
            ys
        })
    }
}

/// Bottleneck: 1×1×1 reduce (carrying the spatial stride), factored
/// spatio-temporal pair, 1×1×1 expand, plus a skip (projected when the
/// width or resolution changes), then ReLU.
#[derive(Clone, Debug)]
pub struct P3dBlock {
    reduce: ConvBn,
    spatial: ConvBn,
    temporal: ConvBn,
    expand: ConvBn,
    project: Option<ConvBn>,
    pub mode: P3dMode,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl P3dBlock {
    pub fn new(
        b: &mut Builder,
        in_ch: usize,
        inner: usize,
        out_ch: usize,
        stride: usize,
        mode: P3dMode,
    ) -> Result<Self> {
        if inner == 0 || out_ch == 0 || !(stride == 1 || stride == 2) {
            return config_err(format!(
                "P3D block {in_ch}->{inner}->{out_ch} with stride {stride}"
            ));
        }
        let strided = Conv3dSpec {
            stride: [1, stride, stride],
            padding: [0, 0, 0],
        };
        let project = if in_ch != out_ch || stride != 1 {
            Some(ConvBn::new(
                &mut b.sub("project"),
                in_ch,
                out_ch,
                [1, 1, 1],
                strided,
                false,
            )?)
        } else {
            None
        };
        Ok(Self {
            reduce: ConvBn::new(
                &mut b.sub("reduce"),
                in_ch,
                inner,
                [1, 1, 1],
                strided,
                false,
            )?,
            spatial: ConvBn::new(
                &mut b.sub("spatial"),
                inner,
                inner,
                [1, 3, 3],
                Conv3dSpec::same([1, 3, 3]),
                false,
            )?,
            temporal: ConvBn::new(
                &mut b.sub("temporal"),
                inner,
                inner,
                [3, 1, 1],
                Conv3dSpec::same([3, 1, 1]),
                false,
            )?,
            expand: ConvBn::new(
                &mut b.sub("expand"),
                inner,
                out_ch,
                [1, 1, 1],
                Conv3dSpec::same([1, 1, 1]),
                true,
            )?,
            project,
            mode,
            in_ch,
            out_ch,
        })
    }

    /// Scale of the last batch norm of the residual branch.
    pub fn branch_gamma(&self) -> crate::params::ParamId {
        self.expand.bn.gamma
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.forward_many(g, &[x])?[0])
    }

    /// A batch of `[C, T_i, H, W]` inputs; batch norms share statistics.
    pub fn forward_many(&self, g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>> {
        for &x in xs {
            let s = g.shape(x);
            if s.len() != 4 || s[0] != self.in_ch {
                return config_err(format!(
                    "P3D block expects {} channels, got {s:?}",
                    self.in_ch
                ));
            }
        }
        let h = self.reduce.forward_many(g, xs, true)?;
        let h = factored_many(
            g,
            &h,
            self.mode,
            |g, v| self.spatial.forward_many(g, v, true),
            |g, v| self.temporal.forward_many(g, v, true),
        )?;
        let h = self.expand.forward_many(g, &h, false)?;
        let skip = match &self.project {
            Some(p) => p.forward_many(g, xs, false)?,
            None => xs.to_vec(),
        };
        skip.into_iter()
            .zip(h)
            .map(|(s, h)| {
                let y = g.add(s, h)?;
                Ok(g.relu(y))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct P3dConfig {
    /// Blocks in each of the four stages.
    pub blocks: [usize; 4],
    /// Multiplies every width (stem 64, stage outputs 64/128/256/512).
    pub width_mult: f64,
}

impl Default for P3dConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl P3dConfig {
    /// The 50-layer trunk (1 stem + 16 three-layer bottlenecks + head).
    pub fn full() -> Self {
        Self {
            blocks: [3, 4, 6, 3],
            width_mult: 1.0,
        }
    }

    pub fn desk() -> Self {
        Self {
            blocks: [1, 1, 1, 1],
            width_mult: 0.125,
        }
    }

    fn scaled(&self, w: usize) -> usize {
        ((w as f64 * self.width_mult).round() as usize).max(1)
    }

    pub fn stem_width(&self) -> usize {
        self.scaled(64)
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        [
            self.scaled(64),
            self.scaled(128),
            self.scaled(256),
            self.scaled(512),
        ]
    }

    pub fn out_width(&self) -> usize {
        self.stage_widths()[3]
    }

    /// Block modes in build order, cycling A, B, C.
    pub fn modes(&self) -> Vec<P3dMode> {
        let n: usize = self.blocks.iter().sum();
        (0..n)
            .map(|i| [P3dMode::A, P3dMode::B, P3dMode::C][i % 3])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return config_err(format!("width multiplier {}", self.width_mult));
        }
        if self.blocks.contains(&0) {
            return config_err(format!("every stage needs a block, got {:?}", self.blocks));
        }
        Ok(())
    }
}

/// Stem, trunk and spatial average pool.
#[derive(Clone, Debug)]
pub struct Frontend {
    stem: ConvBn,
    blocks: Vec<P3dBlock>,
    pub config: P3dConfig,
}

impl Frontend {
    pub fn new(b: &mut Builder, config: &P3dConfig) -> Result<Self> {
        config.validate()?;
        let stem_spec = Conv3dSpec {
            stride: [1, 2, 2],
            padding: [2, 3, 3],
        };
        let stem_w = config.stem_width();
        let stem = ConvBn::new(&mut b.sub("stem"), 1, stem_w, [5, 7, 7], stem_spec, false)?;
        let modes = config.modes();
        let mut blocks = Vec::new();
        let mut width = stem_w;
        for (stage, (&n, &out)) in config.blocks.iter().zip(&config.stage_widths()).enumerate() {
            for j in 0..n {
                let stride = if stage > 0 && j == 0 { 2 } else { 1 };
                let mode = modes[blocks.len()];
                let inner = (out / 4).max(1);
                blocks.push(P3dBlock::new(
                    &mut b.sub(&format!("s{stage}b{j}")),
                    width,
                    inner,
                    out,
                    stride,
                    mode,
                )?);
                width = out;
            }
        }
        Ok(Self {
            stem,
            blocks,
            config: config.clone(),
        })
    }

    pub fn blocks(&self) -> &[P3dBlock] {
        &self.blocks
    }

    pub fn out_width(&self) -> usize {
        self.config.out_width()
    }

    /// `[1, T, 112, 112]` to the stem/pool output `[C, T, 28, 28]`.
    pub fn stem_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.stem_many(g, &[x])?[0])
    }

    fn stem_many(&self, g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>> {
        let hs = self.stem.forward_many(g, xs, true)?;
        let pool = Conv3dSpec {
            stride: [1, 2, 2],
            padding: [0, 1, 1],
        };
        hs.into_iter()
            .map(|h| g.max_pool3d(h, [1, 3, 3], pool))
            .collect()
    }

    /// Features `[T, width]` for a clip given as a `[T, 112, 112]` variable.
    pub fn forward_var(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        Ok(self.forward_many(g, &[frames])?[0])
    }

    /// A batch of `[T_i, 112, 112]` clips to `[T_i, width]` features; in
    /// training mode batch norms share statistics across the batch.
    pub fn forward_many(&self, g: &mut Graph, clips: &[Var]) -> Result<Vec<Var>> {
        let mut xs = Vec::with_capacity(clips.len());
        for &frames in clips {
            let s = g.shape(frames).to_vec();
            if s.len() != 3 || s[1] != FRAME_SIZE || s[2] != FRAME_SIZE {
                return Err(Error::Format(format!(
                    "frames must be [T, 112, 112], got {s:?}"
                )));
            }
            xs.push(g.reshape(frames, &[1, s[0], s[1], s[2]])?);
        }
        let mut h = self.stem_many(g, &xs)?;
        for blk in &self.blocks {
            h = blk.forward_many(g, &h)?;
        }
        h.into_iter()
            .map(|h| {
                let pooled = g.mean_spatial(h)?;
                g.transpose(pooled)
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, clip: &VideoClip) -> Result<Var> {
        let x = g.constant(clip.frames().clone());
        self.forward_var(g, x)
    }
}

/// Runs a front-end in evaluation mode and returns the features.
pub fn frontend_forward(
    store: &crate::params::ParamStore,
    fe: &Frontend,
    clip: &VideoClip,
) -> Result<VisualFeatures> {
    let mut g = Graph::with_params(store);
    let y = fe.forward(&mut g, clip)?;
    VisualFeatures::new(g.value(y).clone())
}

/// Temporal mean-pool plus one dense layer over the front-end output.
#[derive(Clone, Debug)]
pub struct WordClassifier {
    pub frontend: Frontend,
    pub head: Linear,
    pub n_classes: usize,
}

impl WordClassifier {
    pub fn new(b: &mut Builder, config: &P3dConfig, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return config_err(format!(
                "word classifier needs at least 2 classes, got {n_classes}"
            ));
        }
        let frontend = Frontend::new(&mut b.sub("frontend"), config)?;
        let head = Linear::new(&mut b.sub("word_head"), frontend.out_width(), n_classes)?;
        Ok(Self {
            frontend,
            head,
            n_classes,
        })
    }

    /// Logits `[1, n_classes]`.
    pub fn word_classify(&self, g: &mut Graph, clip: &VideoClip) -> Result<Var> {
        Ok(self.word_classify_many(g, std::slice::from_ref(clip))?[0])
    }

    /// `[1, n_classes]` logits per clip, batch norms shared across the batch.
    pub fn word_classify_many(&self, g: &mut Graph, clips: &[VideoClip]) -> Result<Vec<Var>> {
        let xs: Vec<Var> = clips
            .iter()
            .map(|c| g.constant(c.frames().clone()))
            .collect();
        let fs = self.frontend.forward_many(g, &xs)?;
        fs.into_iter()
            .map(|f| {
                let pooled = g.mean_rows(f)?;
                self.head.forward(g, pooled)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded;

    #[test]
    fn mode_tags_parse() {
        assert_eq!("P3D-B".parse::<P3dMode>().unwrap(), P3dMode::B);
        assert!(matches!("D".parse::<P3dMode>(), Err(Error::Config(_))));
    }

    #[test]
    fn modes_cycle() {
        let m = P3dConfig::full().modes();
        assert_eq!(m.len(), 16);
        assert_eq!(&m[..4], &[P3dMode::A, P3dMode::B, P3dMode::C, P3dMode::A]);
    }

    #[test]
    fn clip_validation() {
        assert!(matches!(
            VideoClip::new(Tensor::zeros(&[2, 64, 64])),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            VideoClip::new(Tensor::full(&[1, 112, 112], 1.5)),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn raw_clip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Tensor::zeros(&[2, 112, 112]);
        t.set(&[1, 5, 7], 0.5);
        let clip = VideoClip::new(t).unwrap();
        clip.save_raw(dir.path().join("c.clip")).unwrap();
        assert_eq!(
            VideoClip::load_raw(dir.path().join("c.clip")).unwrap(),
            clip
        );
        clip.save_pgm_dir(dir.path().join("frames")).unwrap();
        let back = VideoClip::load_pgm_dir(dir.path().join("frames")).unwrap();
        assert!((back.frames().at(&[1, 5, 7]) - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn classifier_needs_two_classes() {
        let (mut store, mut rng) = seeded(0);
        let r = WordClassifier::new(
            &mut Builder::new(&mut store, &mut rng, "w"),
            &P3dConfig::desk(),
            1,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
