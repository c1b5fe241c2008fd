//! Multi-modality sequence-to-sequence character recognizer.
//!
//! Audio path: `[4T, F]` magnitudes, a 1×1 projection, a stride-2 1D-ResNet
//! block, one EleAtt-GRU encoder layer, a second stride-2 block and a second
//! encoder layer, ending at `[T, U]`. Video path: a two-layer EleAtt-GRU
//! encoder over `[T, D]` features.
//!
//! Each modality has its own decoder layer. At step `i` it reads the
//! previous token embedding and its own previous context, then attends over
//! its encoder outputs (`score_t = e_t W s_i`) to produce a new context. The
//! fusion decoder reads `[embedding; c_a; c_v]` and the output layer maps
//! `[s_f; c_a; c_v]` to 41 logits. A missing modality contributes zeros.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ae::{ae_forward, AeModel};
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::gru::{CellVars, EleAttGruCell, GruStack};
use crate::nn::{Builder, Conv1d, Embedding, Linear};
use crate::optim::Adam;
use crate::params::{ParamId, ParamStore};
use crate::signal::{MagnitudeSpectrogram, MEL_BINS};
use crate::temporal::{ResNet1dBlock, Resample};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SPACE: usize = 3;
pub const VOCAB_SIZE: usize = 41;

const LETTERS: usize = 4;
const DIGITS: usize = 30;
const APOSTROPHE: usize = 40;

/// The 41-symbol character inventory: four specials, `a`–`z`, `0`–`9`, `'`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Vocab;

impl Vocab {
    pub fn len(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Option<usize> {
        let c = c.to_ascii_lowercase();
        match c {
            ' ' => Some(SPACE),
            'a'..='z' => Some(LETTERS + (c as usize - 'a' as usize)),
            '0'..='9' => Some(DIGITS + (c as usize - '0' as usize)),
            '\'' => Some(APOSTROPHE),
            _ => None,
        }
    }

    /// Printable form; specials render as `[PAD]`, `[BOS]`, `[EOS]`.
    pub fn symbol(&self, id: usize) -> Option<String> {
        Some(match id {
            PAD => "[PAD]".into(),
            BOS => "[BOS]".into(),
            EOS => "[EOS]".into(),
            SPACE => " ".into(),
            LETTERS..DIGITS => char::from(b'a' + (id - LETTERS) as u8).to_string(),
            DIGITS..APOSTROPHE => char::from(b'0' + (id - DIGITS) as u8).to_string(),
            APOSTROPHE => "'".into(),
            _ => return None,
        })
    }

    /// Case-folds and collapses runs of whitespace to one `[SPACE]`.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            if !ids.is_empty() {
                ids.push(SPACE);
            }
            for c in word.chars() {
                ids.push(
                    self.id(c)
                        .ok_or_else(|| Error::Format(format!("'{c}' is not in the vocabulary")))?,
                );
            }
        }
        TokenSequence::new(ids)
    }

    /// Text of a token run; specials other than `[SPACE]` are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPACE)
            .filter_map(|&i| self.symbol(i))
            .collect()
    }
}

/// Character ids of one transcript, without `[BOS]`/`[EOS]` framing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    /// Rejects framing tokens and ids outside the vocabulary.
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i < SPACE || i >= VOCAB_SIZE) {
            return Err(Error::Format(format!(
                "token {bad} cannot appear inside a transcript"
            )));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn text(&self) -> String {
        Vocab.decode(&self.ids)
    }

    pub fn word_count(&self) -> usize {
        self.ids
            .split(|&i| i == SPACE)
            .filter(|w| !w.is_empty())
            .count()
    }

    /// The first `k` words.
    pub fn first_words(&self, k: usize) -> Self {
        let mut seen = 0;
        let mut end = self.ids.len();
        for (i, &id) in self.ids.iter().enumerate() {
            if id == SPACE {
                seen += 1;
                if seen == k {
                    end = i;
                    break;
                }
            }
        }
        if k == 0 {
            end = 0;
        }
        Self {
            ids: self.ids[..end].to_vec(),
        }
    }

    /// `[BOS, y_1, …, y_n]`.
    pub fn decoder_inputs(&self) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(self.ids.iter().copied())
            .collect()
    }

    /// `[y_1, …, y_n, EOS]`.
    pub fn decoder_targets(&self) -> Vec<usize> {
        self.ids
            .iter()
            .copied()
            .chain(std::iter::once(EOS))
            .collect()
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Which inputs reach the recognizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Noisy audio only.
    A,
    /// Video only.
    V,
    /// Noisy audio and video.
    AV,
    /// Enhanced audio only.
    VA,
    /// Enhanced audio and video.
    VAV,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AudioSource {
    Absent,
    Noisy,
    Enhanced,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::A, Mode::V, Mode::AV, Mode::VA, Mode::VAV];

    pub fn audio(self) -> AudioSource {
        match self {
            Mode::V => AudioSource::Absent,
            Mode::A | Mode::AV => AudioSource::Noisy,
            Mode::VA | Mode::VAV => AudioSource::Enhanced,
        }
    }

    /// Whether the recognizer itself sees the video features.
    pub fn video(self) -> bool {
        matches!(self, Mode::V | Mode::AV | Mode::VAV)
    }

    pub fn needs_enhancer(self) -> bool {
        self.audio() == AudioSource::Enhanced
    }

    pub fn tag(self) -> &'static str {
        match self {
            Mode::A => "A",
            Mode::V => "V",
            Mode::AV => "AV",
            Mode::VA => "VA",
            Mode::VAV => "VAV",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}' (A, V, AV, VA or VAV)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsrConfig {
    /// Recurrent units in every encoder and decoder layer.
    pub units: usize,
    pub embed_dim: usize,
    pub mel_bins: usize,
    /// Kernel width of the two downsampling blocks.
    pub kernel: usize,
    pub label_smoothing: f64,
}

impl MsrConfig {
    /// Published width: 128 units.
    pub fn full() -> Self {
        Self {
            units: 128,
            embed_dim: 64,
            mel_bins: MEL_BINS,
            kernel: 3,
            label_smoothing: 0.1,
        }
    }

    pub fn desk() -> Self {
        Self {
            units: 32,
            embed_dim: 16,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.embed_dim == 0 || self.mel_bins == 0 || self.kernel == 0 {
            return config_err("recognizer widths and kernel must be positive");
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return config_err(format!(
                "label smoothing {} outside [0, 1]",
                self.label_smoothing
            ));
        }
        Ok(())
    }
}

impl Default for MsrConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug)]
struct ModalityDecoder {
    cell: EleAttGruCell,
    attention: ParamId,
}

#[derive(Clone, Debug)]
pub struct MsrModel {
    audio_in: Conv1d,
    audio_down1: ResNet1dBlock,
    audio_enc1: EleAttGruCell,
    audio_down2: ResNet1dBlock,
    audio_enc2: EleAttGruCell,
    video_enc: GruStack,
    embed: Embedding,
    dec_a: ModalityDecoder,
    dec_v: ModalityDecoder,
    dec_f: EleAttGruCell,
    out: Linear,
    pub config: MsrConfig,
    pub visual_dim: usize,
}

/// Encoder outputs `E` and attention keys `E W` of one modality.
#[derive(Clone, Copy, Debug)]
struct Memory {
    values: Var,
    keys: Var,
}

struct Encoded {
    audio: Option<Memory>,
    video: Option<Memory>,
}

struct StepVars {
    dec_a: CellVars,
    dec_v: CellVars,
    dec_f: CellVars,
    table: Var,
}

struct DecoderState {
    s_a: Var,
    s_v: Var,
    s_f: Var,
    c_a: Var,
    c_v: Var,
}

impl MsrModel {
    pub fn new(b: &mut Builder, config: &MsrConfig, visual_dim: usize) -> Result<Self> {
        config.validate()?;
        if visual_dim == 0 {
            return config_err("visual feature width must be positive");
        }
        let (u, e, k) = (config.units, config.embed_dim, config.kernel);
        let dec = |b: &mut Builder, name: &str| -> Result<ModalityDecoder> {
            let mut sb = b.sub(name);
            Ok(ModalityDecoder {
                cell: EleAttGruCell::new(&mut sb.sub("gru"), e + u, u)?,
                attention: sb.xavier("attention", &[u, u], u, u)?,
            })
        };
        Ok(Self {
            audio_in: Conv1d::new(
                &mut b.sub("audio/fc0"),
                config.mel_bins,
                u,
                1,
                crate::kernels::Conv1dSpec::default(),
            )?,
            audio_down1: ResNet1dBlock::new(&mut b.sub("audio/down1"), u, k, Resample::Down)?,
            audio_enc1: EleAttGruCell::new(&mut b.sub("audio/enc1"), u, u)?,
            audio_down2: ResNet1dBlock::new(&mut b.sub("audio/down2"), u, k, Resample::Down)?,
            audio_enc2: EleAttGruCell::new(&mut b.sub("audio/enc2"), u, u)?,
            video_enc: GruStack::new(&mut b.sub("video/enc"), 2, visual_dim, u)?,
            embed: Embedding::new(&mut b.sub("embed"), VOCAB_SIZE, e)?,
            dec_a: dec(b, "dec_audio")?,
            dec_v: dec(b, "dec_video")?,
            dec_f: EleAttGruCell::new(&mut b.sub("dec_fusion"), e + 2 * u, u)?,
            out: Linear::new(&mut b.sub("out"), 3 * u, VOCAB_SIZE)?,
            config: config.clone(),
            visual_dim,
        })
    }

    /// Zeroes the output layer and puts `bias` on the `[EOS]` logit.
    pub fn force_output(&self, store: &mut ParamStore, eos_bias: f64) {
        store.value_mut(self.out.w).data_mut().fill(0.0);
        let b = store.value_mut(self.out.b).data_mut();
        b.fill(0.0);
        b[EOS] = eos_bias;
    }

    /// `[4T, F]` magnitudes to `[T, U]` encoder outputs.
    pub fn audio_path(&self, g: &mut Graph, m: Var) -> Result<Var> {
        Ok(self.audio_path_many(g, &[m])?[0])
    }

    /// [`MsrModel::audio_path`] over a batch; batch norms share statistics.
    pub fn audio_path_many(&self, g: &mut Graph, ms: &[Var]) -> Result<Vec<Var>> {
        let mut xs = Vec::with_capacity(ms.len());
        for &m in ms {
            let s = g.shape(m).to_vec();
            if s.len() != 2 || s[1] != self.config.mel_bins {
                return Err(Error::Dimension(format!(
                    "magnitudes {s:?}, recognizer expects {} bins",
                    self.config.mel_bins
                )));
            }
            if s[0] == 0 || s[0] % 4 != 0 {
                return Err(Error::Alignment(format!(
                    "{} audio frames is not a multiple of 4",
                    s[0]
                )));
            }
            let x = g.transpose(m)?;
            xs.push(self.audio_in.forward(g, x)?);
        }
        let xs = self.audio_down1.forward_many(g, &xs)?;
        let xs = xs
            .into_iter()
            .map(|x| {
                let x = g.transpose(x)?;
                let x = self.audio_enc1.run_layer(g, x, None)?;
                g.transpose(x)
            })
            .collect::<Result<Vec<_>>>()?;
        let xs = self.audio_down2.forward_many(g, &xs)?;
        xs.into_iter()
            .map(|x| {
                let x = g.transpose(x)?;
                self.audio_enc2.run_layer(g, x, None)
            })
            .collect()
    }

    /// `[T, D]` features to `[T, U]` encoder outputs.
    pub fn video_path(&self, g: &mut Graph, v: Var) -> Result<Var> {
        let s = g.shape(v).to_vec();
        if s.len() != 2 || s[1] != self.visual_dim || s[0] == 0 {
            return Err(Error::Dimension(format!(
                "visual features {s:?}, recognizer expects [T, {}]",
                self.visual_dim
            )));
        }
        self.video_enc.forward(g, v)
    }

    fn encode(&self, g: &mut Graph, audio: Option<Var>, video: Option<Var>) -> Result<Encoded> {
        self.check_inputs(g, audio, video)?;
        let audio = audio.map(|a| self.audio_path(g, a)).transpose()?;
        self.encode_from(g, audio, video)
    }

    fn check_inputs(&self, g: &Graph, audio: Option<Var>, video: Option<Var>) -> Result<()> {
        if audio.is_none() && video.is_none() {
            return Err(Error::Contract(
                "the recognizer needs at least one modality".into(),
            ));
        }
        if let (Some(a), Some(v)) = (audio, video) {
            let (la, lv) = (g.shape(a)[0], g.shape(v)[0]);
            if la != 4 * lv {
                return Err(Error::Alignment(format!(
                    "{la} audio frames with {lv} video frames"
                )));
            }
        }
        Ok(())
    }

    /// Attention memories from already-encoded audio and raw video features.
    fn encode_from(
        &self,
        g: &mut Graph,
        audio_enc: Option<Var>,
        video: Option<Var>,
    ) -> Result<Encoded> {
        let memory = |g: &mut Graph, values: Var, dec: &ModalityDecoder| -> Result<Memory> {
            let w = g.param(dec.attention);
            let keys = g.matmul(values, w)?;
            Ok(Memory { values, keys })
        };
        let audio = match audio_enc {
            Some(e) => Some(memory(g, e, &self.dec_a)?),
            None => None,
        };
        let video = match video {
            Some(v) => {
                let e = self.video_path(g, v)?;
                Some(memory(g, e, &self.dec_v)?)
            }
            None => None,
        };
        Ok(Encoded { audio, video })
    }

    fn step_vars(&self, g: &mut Graph) -> Result<StepVars> {
        Ok(StepVars {
            dec_a: self.dec_a.cell.prepare(g)?,
            dec_v: self.dec_v.cell.prepare(g)?,
            dec_f: self.dec_f.prepare(g)?,
            table: g.param(self.embed.table),
        })
    }

    fn initial_state(&self, g: &mut Graph) -> DecoderState {
        let u = self.config.units;
        let zero = g.constant(Tensor::zeros(&[1, u]));
        DecoderState {
            s_a: zero,
            s_v: zero,
            s_f: zero,
            c_a: zero,
            c_v: zero,
        }
    }

    /// Softmax attention of `s: [1, U]` over a memory, giving `[1, U]`.
    fn attend(g: &mut Graph, mem: Memory, s: Var) -> Result<Var> {
        let st = g.transpose(s)?;
        let scores = g.matmul(mem.keys, st)?;
        let scores = g.transpose(scores)?;
        let alpha = g.softmax_rows(scores)?;
        g.matmul(alpha, mem.values)
    }

    /// Consumes `token` and returns the `[1, 41]` logits of the next one.
    fn step(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        sv: &StepVars,
        st: &mut DecoderState,
        token: usize,
    ) -> Result<Var> {
        let emb = g.gather_rows(sv.table, &[token])?;
        if let Some(mem) = enc.audio {
            let x = g.concat(&[emb, st.c_a], 1)?;
            st.s_a = self.dec_a.cell.step(g, &sv.dec_a, x, st.s_a, None)?;
            st.c_a = Self::attend(g, mem, st.s_a)?;
        }
        if let Some(mem) = enc.video {
            let x = g.concat(&[emb, st.c_v], 1)?;
            st.s_v = self.dec_v.cell.step(g, &sv.dec_v, x, st.s_v, None)?;
            st.c_v = Self::attend(g, mem, st.s_v)?;
        }
        let x = g.concat(&[emb, st.c_a, st.c_v], 1)?;
        st.s_f = self.dec_f.step(g, &sv.dec_f, x, st.s_f, None)?;
        let h = g.concat(&[st.s_f, st.c_a, st.c_v], 1)?;
        self.out.forward(g, h)
    }

    /// Teacher-forced logits `[inputs.len(), 41]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        audio: Option<Var>,
        video: Option<Var>,
        inputs: &[usize],
    ) -> Result<Var> {
        let enc = self.encode(g, audio, video)?;
        self.teacher_forced(g, &enc, inputs)
    }

    fn teacher_forced(&self, g: &mut Graph, enc: &Encoded, inputs: &[usize]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Contract(
                "teacher forcing needs at least one input token".into(),
            ));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= VOCAB_SIZE) {
            return Err(Error::Dimension(format!(
                "input token {bad} outside the vocabulary"
            )));
        }
        let sv = self.step_vars(g)?;
        let mut st = self.initial_state(g);
        let mut rows = Vec::with_capacity(inputs.len());
        for &tok in inputs {
            rows.push(self.step(g, enc, &sv, &mut st, tok)?);
        }
        g.concat(&rows, 0)
    }

    /// Label-smoothed cross-entropy of teacher-forced logits; `[PAD]`
    /// targets are ignored.
    pub fn sequence_loss(
        &self,
        g: &mut Graph,
        audio: Option<Var>,
        video: Option<Var>,
        inputs: &[usize],
        targets: &[usize],
    ) -> Result<Var> {
        if inputs.len() != targets.len() {
            return Err(Error::Contract(format!(
                "{} decoder inputs for {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let logits = self.forward(g, audio, video, inputs)?;
        let t: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD).then_some(t)).collect();
        g.cross_entropy(logits, &t, self.config.label_smoothing)
    }

    /// Mean [`MsrModel::sequence_loss`] over a batch, with batch norms
    /// sharing statistics across the examples that carry audio.
    pub fn batch_loss(&self, g: &mut Graph, batch: &[MsrExample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Scheduling("empty recognition batch".into()));
        }
        let mut inputs = Vec::with_capacity(batch.len());
        for ex in batch {
            let a = ex.audio.as_ref().map(|t| g.constant(t.clone()));
            let v = ex.video.as_ref().map(|t| g.constant(t.clone()));
            self.check_inputs(g, a, v)?;
            inputs.push((a, v));
        }
        let with_audio: Vec<Var> = inputs.iter().filter_map(|p| p.0).collect();
        let mut encoded = self.audio_path_many(g, &with_audio)?.into_iter();
        let mut total: Option<Var> = None;
        for (ex, (a, v)) in batch.iter().zip(inputs) {
            let ea = a.map(|_| encoded.next().expect("one encoding per audio input"));
            let enc = self.encode_from(g, ea, v)?;
            let logits = self.teacher_forced(g, &enc, &ex.target.decoder_inputs())?;
            let t: Vec<Option<usize>> = ex
                .target
                .decoder_targets()
                .into_iter()
                .map(|t| (t != PAD).then_some(t))
                .collect();
            let loss = g.cross_entropy(logits, &t, self.config.label_smoothing)?;
            total = Some(match total {
                Some(s) => g.add(s, loss)?,
                None => loss,
            });
        }
        Ok(g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64))
    }

    /// Greedy decoding: feeds back the argmax until `[EOS]` or `max_len`
    /// emitted tokens.
    pub fn greedy(
        &self,
        g: &mut Graph,
        audio: Option<Var>,
        video: Option<Var>,
        max_len: usize,
    ) -> Result<TokenSequence> {
        let enc = self.encode(g, audio, video)?;
        let sv = self.step_vars(g)?;
        let mut st = self.initial_state(g);
        let mut tok = BOS;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let logits = self.step(g, &enc, &sv, &mut st, tok)?;
            tok = g.value(logits).argmax_rows()[0];
            if tok == EOS {
                break;
            }
            if tok >= SPACE {
                out.push(tok);
            }
        }
        TokenSequence::new(out)
    }
}

/// Evaluation-mode logits for one sample.
pub fn msr_forward(
    store: &ParamStore,
    model: &MsrModel,
    audio: Option<&MagnitudeSpectrogram>,
    video: Option<&Tensor>,
    inputs: &[usize],
) -> Result<Tensor> {
    let mut g = Graph::with_params(store);
    let a = audio.map(|m| g.constant(m.frames().clone()));
    let v = video.map(|t| g.constant(t.clone()));
    let logits = model.forward(&mut g, a, v, inputs)?;
    Ok(g.value(logits).clone())
}

pub fn greedy_decode(
    store: &ParamStore,
    model: &MsrModel,
    audio: Option<&MagnitudeSpectrogram>,
    video: Option<&Tensor>,
    max_len: usize,
) -> Result<TokenSequence> {
    let mut g = Graph::with_params(store);
    let a = audio.map(|m| g.constant(m.frames().clone()));
    let v = video.map(|t| g.constant(t.clone()));
    model.greedy(&mut g, a, v, max_len)
}

/// One recognition example. `word_ends[i]` is the video frame just past the
/// end of word `i`, when known; it enables cropping for the curriculum.
#[derive(Clone, Debug)]
pub struct MsrExample {
    pub audio: Option<Tensor>,
    pub video: Option<Tensor>,
    pub target: TokenSequence,
    pub word_ends: Option<Vec<usize>>,
}

impl MsrExample {
    /// The example limited to its first `k` words: unchanged when it is
    /// short enough, cropped when word boundaries are known, else `None`.
    pub fn limited_to(&self, k: usize) -> Option<MsrExample> {
        let n = self.target.word_count();
        if n <= k {
            return Some(self.clone());
        }
        let ends = self.word_ends.as_ref()?;
        if k == 0 || ends.len() != n {
            return None;
        }
        let end = ends[k - 1];
        let crop = |t: &Tensor, rows: usize| -> Option<Tensor> {
            let w = t.shape()[1];
            (rows <= t.shape()[0])
                .then(|| Tensor::new(vec![rows, w], t.data()[..rows * w].to_vec()).ok())?
        };
        Some(MsrExample {
            audio: match &self.audio {
                Some(a) => Some(crop(a, 4 * end)?),
                None => None,
            },
            video: match &self.video {
                Some(v) => Some(crop(v, end)?),
                None => None,
            },
            target: self.target.first_words(k),
            word_ends: Some(ends[..k].to_vec()),
        })
    }

    pub fn with_mode(&self, audio: bool, video: bool) -> MsrExample {
        MsrExample {
            audio: if audio { self.audio.clone() } else { None },
            video: if video { self.video.clone() } else { None },
            ..self.clone()
        }
    }
}

/// Word limit as a function of the training step: `start` words at first,
/// one more every `grow_every` steps, capped at `max_words` when set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Curriculum {
    pub start_words: usize,
    pub grow_every: usize,
    pub max_words: Option<usize>,
}

impl Curriculum {
    pub fn validate(&self) -> Result<()> {
        if self.start_words == 0 || self.grow_every == 0 {
            return config_err("curriculum needs start_words >= 1 and grow_every >= 1");
        }
        Ok(())
    }

    pub fn words_at(&self, step: usize) -> usize {
        let k = self.start_words + step / self.grow_every;
        match self.max_words {
            Some(m) => k.min(m),
            None => k,
        }
    }
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            start_words: 1,
            grow_every: 200,
            max_words: None,
        }
    }
}

/// Teacher-forced loss over the batch limited to `words` words, then one
/// Adam step. Returns the mean loss.
pub fn msr_train_step(
    store: &mut ParamStore,
    model: &MsrModel,
    opt: &mut Adam,
    batch: &[MsrExample],
    words: usize,
    seed: u64,
) -> Result<f64> {
    let limited: Vec<MsrExample> = batch.iter().filter_map(|ex| ex.limited_to(words)).collect();
    if limited.is_empty() {
        return Err(Error::Scheduling(format!(
            "no example of {} fits a {words}-word curriculum stage",
            batch.len()
        )));
    }
    let (value, grads) = {
        let mut g = Graph::with_params(store).training(seed);
        let loss = model.batch_loss(&mut g, &limited)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "recognition loss {value} (lr {})",
                opt.lr
            )));
        }
        (value, g.backward(loss)?)
    };
    store.accumulate(&grads);
    opt.step(store)?;
    store.zero_grad();
    Ok(value)
}

/// Inputs of one utterance before mode wiring.
#[derive(Clone, Debug)]
pub struct ModeInput<'a> {
    pub noisy: &'a MagnitudeSpectrogram,
    pub visual: &'a Tensor,
}

/// Transcript of one utterance under `mode`. Enhanced-audio modes run the
/// enhancer first, using the same video features.
pub fn run_mode(
    store: &ParamStore,
    mode: Mode,
    input: &ModeInput,
    enhancer: Option<&AeModel>,
    model: &MsrModel,
    max_len: usize,
) -> Result<String> {
    let enhanced;
    let audio = match mode.audio() {
        AudioSource::Absent => None,
        AudioSource::Noisy => Some(input.noisy),
        AudioSource::Enhanced => {
            let ae = enhancer
                .ok_or_else(|| Error::Config(format!("mode {mode} needs an enhancement model")))?;
            enhanced = ae_forward(store, ae, input.visual, input.noisy)?.1;
            Some(&enhanced)
        }
    };
    let video = mode.video().then_some(input.visual);
    Ok(greedy_decode(store, model, audio, video, max_len)?.text())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded;

    fn tiny() -> (ParamStore, MsrModel) {
        let (mut store, mut rng) = seeded(11);
        let cfg = MsrConfig {
            units: 6,
            embed_dim: 4,
            mel_bins: 5,
            kernel: 3,
            label_smoothing: 0.1,
        };
        let m = MsrModel::new(&mut Builder::new(&mut store, &mut rng, "msr"), &cfg, 3).unwrap();
        (store, m)
    }

    #[test]
    fn vocab_round_trip() {
        assert_eq!(Vocab.len(), 41);
        let t = Vocab.encode("Don't  stop 42").unwrap();
        assert_eq!(t.text(), "don't stop 42");
        assert_eq!(t.word_count(), 3);
        assert_eq!(t.first_words(2).text(), "don't stop");
        assert_eq!(t.first_words(9), t);
        assert!(matches!(Vocab.encode("a-b"), Err(Error::Format(_))));
        let syms: std::collections::HashSet<String> =
            (0..41).map(|i| Vocab.symbol(i).unwrap()).collect();
        assert_eq!(syms.len(), 41);
        assert!(Vocab.symbol(41).is_none());
    }

    #[test]
    fn framing() {
        let t = Vocab.encode("ab").unwrap();
        assert_eq!(t.decoder_inputs(), vec![BOS, 4, 5]);
        assert_eq!(t.decoder_targets(), vec![4, 5, EOS]);
        assert!(TokenSequence::new(vec![4, PAD]).is_err());
    }

    #[test]
    fn modes_parse_and_wire() {
        for m in Mode::ALL {
            assert_eq!(m.tag().parse::<Mode>().unwrap(), m);
        }
        assert!(matches!("AVV".parse::<Mode>(), Err(Error::Config(_))));
        assert!(Mode::VAV.needs_enhancer() && Mode::VAV.video());
        assert!(Mode::VA.needs_enhancer() && !Mode::VA.video());
        assert_eq!(Mode::V.audio(), AudioSource::Absent);
    }

    #[test]
    fn audio_path_restores_video_rate() {
        let (store, m) = tiny();
        let mut g = Graph::with_params(&store);
        let a = g.constant(Tensor::full(&[40, 5], 0.5));
        let e = m.audio_path(&mut g, a).unwrap();
        assert_eq!(g.shape(e), &[10, 6]);
        let bad = g.constant(Tensor::zeros(&[42, 5]));
        assert!(matches!(
            m.audio_path(&mut g, bad),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn uniform_output_gives_log_vocab() {
        let (mut store, m) = tiny();
        m.force_output(&mut store, 0.0);
        let t = Vocab.encode("ab c").unwrap();
        let mut g = Graph::with_params(&store);
        let v = g.constant(Tensor::full(&[3, 3], 0.2));
        let loss = m
            .sequence_loss(
                &mut g,
                None,
                Some(v),
                &t.decoder_inputs(),
                &t.decoder_targets(),
            )
            .unwrap();
        assert!((g.value(loss).item() - (41f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn no_modality_is_a_contract_error() {
        let (store, m) = tiny();
        let r = greedy_decode(&store, &m, None, None, 5);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn eos_first_gives_empty_transcript() {
        let (mut store, m) = tiny();
        m.force_output(&mut store, 50.0);
        let v = Tensor::full(&[2, 3], 0.1);
        assert!(greedy_decode(&store, &m, None, Some(&v), 10)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn curriculum_crops_by_word() {
        let ex = MsrExample {
            audio: Some(Tensor::zeros(&[24, 2])),
            video: Some(Tensor::zeros(&[6, 1])),
            target: Vocab.encode("ab cd").unwrap(),
            word_ends: Some(vec![3, 6]),
        };
        let one = ex.limited_to(1).unwrap();
        assert_eq!(one.target.text(), "ab");
        assert_eq!(one.audio.unwrap().shape(), &[12, 2]);
        assert_eq!(one.video.unwrap().shape(), &[3, 1]);
        let blind = MsrExample {
            word_ends: None,
            ..ex
        };
        assert!(blind.limited_to(1).is_none());
        let c = Curriculum {
            start_words: 1,
            grow_every: 10,
            max_words: Some(2),
        };
        assert_eq!([c.words_at(0), c.words_at(10), c.words_at(99)], [1, 2, 2]);
    }
}
