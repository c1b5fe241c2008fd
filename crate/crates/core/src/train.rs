//! Training loops and evaluation shared by the command-line tool, the
//! examples and the acceptance suite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ae::{ae_forward, ae_train_step, energy_error, AeModel};
use crate::data::{batch_indices, NoiseMixer, Sample};
use crate::error::{config_err, Error, Result};
use crate::frontend::{VideoClip, WordClassifier};
use crate::graph::Graph;
use crate::metrics::corpus_wer;
use crate::msr::{msr_train_step, run_mode, Curriculum, Mode, ModeInput, MsrModel};
use crate::optim::{Adam, PlateauSchedule};
use crate::params::ParamStore;
use crate::signal::{MagnitudeSpectrogram, NoiseSpec};

/// Adam learning rate, halved after `patience` windows of `window` steps
/// without improvement, never below `floor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub floor: f64,
    pub patience: usize,
    pub window: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-4,
            floor: 5e-6,
            patience: 3,
            window: 50,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return config_err("learning-rate window must be at least one step");
        }
        PlateauSchedule::new(self.initial, self.floor, self.patience).map(|_| ())
    }
}

/// Feeds window means of the loss to a plateau schedule.
struct LrDriver {
    plateau: PlateauSchedule,
    window: usize,
    acc: f64,
    n: usize,
}

impl LrDriver {
    fn new(s: &LrSchedule) -> Result<Self> {
        s.validate()?;
        Ok(Self {
            plateau: PlateauSchedule::new(s.initial, s.floor, s.patience)?,
            window: s.window,
            acc: 0.0,
            n: 0,
        })
    }

    fn observe(&mut self, loss: f64, opt: &mut Adam) -> Result<()> {
        self.acc += loss;
        self.n += 1;
        if self.n == self.window {
            let lr = self.plateau.observe(self.acc / self.n as f64);
            opt.set_lr(lr)?;
            self.acc = 0.0;
            self.n = 0;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeTrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    /// Mixing conditions; `p_n = 1` mixes every example.
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for AeTrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 4,
            lr: LrSchedule::default(),
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

/// Per-step losses of the enhancement phase. Every example gets freshly
/// drawn babble.
pub fn train_ae(
    store: &mut ParamStore,
    model: &AeModel,
    samples: &[Sample],
    mixer: &NoiseMixer,
    opts: &AeTrainOptions,
    mut log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if samples.is_empty() || opts.batch == 0 {
        return Err(Error::Scheduling(
            "enhancement training needs samples and a positive batch".into(),
        ));
    }
    opts.noise.validate()?;
    let mut opt = Adam::new(opts.lr.initial)?;
    let mut lr = LrDriver::new(&opts.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch);
        for i in batch_indices(samples.len(), opts.batch, &mut rng) {
            let noisy = mixer.augmented(&samples[i], &opts.noise, &mut rng)?;
            batch.push(samples[i].ae_example(&noisy));
        }
        let loss = ae_train_step(store, model, &mut opt, &batch, rng.gen())?;
        lr.observe(loss, &mut opt)?;
        log(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Probabilities of the three input wirings during recognition training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeMix {
    pub av: f64,
    pub audio_only: f64,
    pub video_only: f64,
}

impl Default for ModeMix {
    fn default() -> Self {
        Self {
            av: 0.5,
            audio_only: 0.25,
            video_only: 0.25,
        }
    }
}

impl ModeMix {
    pub fn av_only() -> Self {
        Self {
            av: 1.0,
            audio_only: 0.0,
            video_only: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.av, self.audio_only, self.video_only];
        if w.iter().any(|&p| !(p >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return config_err(format!(
                "mode mix {w:?} needs non-negative weights with a positive sum"
            ));
        }
        Ok(())
    }

    /// `(audio, video)` flags.
    fn draw(&self, rng: &mut impl Rng) -> (bool, bool) {
        let total = self.av + self.audio_only + self.video_only;
        let u = rng.gen::<f64>() * total;
        if u < self.av {
            (true, true)
        } else if u < self.av + self.audio_only {
            (true, false)
        } else {
            (false, true)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsrTrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    pub curriculum: Curriculum,
    pub modes: ModeMix,
    /// Babble on the audio input; `None` trains on clean magnitudes.
    pub noise: Option<NoiseSpec>,
    pub seed: u64,
}

impl Default for MsrTrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: LrSchedule::default(),
            curriculum: Curriculum::default(),
            modes: ModeMix::default(),
            noise: None,
            seed: 0,
        }
    }
}

/// Per-step losses of the recognition phase. With an enhancer, audio is
/// enhanced before it reaches the recognizer (the joint phase).
#[allow(clippy::too_many_arguments)]
pub fn train_msr(
    store: &mut ParamStore,
    model: &MsrModel,
    samples: &[Sample],
    mixer: Option<&NoiseMixer>,
    enhancer: Option<&AeModel>,
    opts: &MsrTrainOptions,
    mut log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if samples.is_empty() || opts.batch == 0 {
        return Err(Error::Scheduling(
            "recognition training needs samples and a positive batch".into(),
        ));
    }
    opts.curriculum.validate()?;
    opts.modes.validate()?;
    if let Some(n) = &opts.noise {
        n.validate()?;
        if mixer.is_none() {
            return config_err("noisy recognition training needs babble sources");
        }
    }
    let mut opt = Adam::new(opts.lr.initial)?;
    let mut lr = LrDriver::new(&opts.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let words = opts.curriculum.words_at(step);
        let mut batch = Vec::with_capacity(opts.batch);
        for i in batch_indices(samples.len(), opts.batch, &mut rng) {
            let s = &samples[i];
            let (use_audio, use_video) = opts.modes.draw(&mut rng);
            let audio = if use_audio {
                let m = match (&opts.noise, mixer) {
                    (Some(spec), Some(mx)) => mx.augmented(s, spec, &mut rng)?,
                    _ => s.clean.clone(),
                };
                Some(match enhancer {
                    Some(ae) => ae_forward(store, ae, &s.visual, &m)?.1,
                    None => m,
                })
            } else {
                None
            };
            batch.push(s.msr_example(audio.as_ref(), use_video));
        }
        let loss = msr_train_step(store, model, &mut opt, &batch, words, rng.gen())?;
        lr.observe(loss, &mut opt)?;
        log(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendTrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FrontendTrainOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Word-level clips cut from utterances at their word boundaries, labelled
/// by position in `words`.
pub fn word_clips(
    utts: &[crate::corpus::Utterance],
    words: &[String],
) -> Result<Vec<(VideoClip, usize)>> {
    let mut out = Vec::new();
    for u in utts {
        let mut start = 0;
        for (w, &end) in u.transcript.split_whitespace().zip(&u.word_ends) {
            let label = words.iter().position(|x| x == w).ok_or_else(|| {
                Error::Format(format!("{}: word '{w}' is not in the word list", u.id))
            })?;
            let f = u.clip.frames();
            let hw = f.shape()[1] * f.shape()[2];
            let data = f.data()[start * hw..end * hw].to_vec();
            let t =
                crate::tensor::Tensor::new(vec![end - start, f.shape()[1], f.shape()[2]], data)?;
            out.push((VideoClip::new(t)?, label));
            start = end;
        }
    }
    Ok(out)
}

/// Cross-entropy word classification; returns per-step losses.
pub fn train_frontend(
    store: &mut ParamStore,
    model: &WordClassifier,
    clips: &[(VideoClip, usize)],
    opts: &FrontendTrainOptions,
    mut log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if clips.is_empty() || opts.batch == 0 {
        return Err(Error::Scheduling(
            "front-end training needs clips and a positive batch".into(),
        ));
    }
    let mut opt = Adam::new(opts.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let idx = batch_indices(clips.len(), opts.batch, &mut rng);
        let batch: Vec<VideoClip> = idx.iter().map(|&i| clips[i].0.clone()).collect();
        let (loss, grads) = {
            let mut g = Graph::with_params(store).training(rng.gen::<u64>());
            let logits = model.word_classify_many(&mut g, &batch)?;
            let logits = g.concat(&logits, 0)?;
            let labels: Vec<Option<usize>> = idx.iter().map(|&i| Some(clips[i].1)).collect();
            let loss = g.cross_entropy(logits, &labels, 0.0)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "word classification loss {value}"
                )));
            }
            (value, g.backward(loss)?)
        };
        store.accumulate(&grads);
        opt.step(store)?;
        store.zero_grad();
        log(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Classification accuracy of a word classifier in evaluation mode.
pub fn frontend_accuracy(
    store: &ParamStore,
    model: &WordClassifier,
    clips: &[(VideoClip, usize)],
) -> Result<f64> {
    let mut preds = Vec::with_capacity(clips.len());
    for (clip, _) in clips {
        let mut g = Graph::with_params(store);
        let logits = model.word_classify(&mut g, clip)?;
        preds.push(g.value(logits).argmax_rows()[0]);
    }
    let golds: Vec<usize> = clips.iter().map(|c| c.1).collect();
    crate::metrics::word_accuracy(&preds, &golds)
}

/// Hypotheses for every sample under one mode with the given audio.
pub fn transcribe(
    store: &ParamStore,
    mode: Mode,
    samples: &[Sample],
    audio: &[MagnitudeSpectrogram],
    enhancer: Option<&AeModel>,
    model: &MsrModel,
    max_len: usize,
) -> Result<Vec<String>> {
    if samples.len() != audio.len() {
        return Err(Error::Contract(format!(
            "{} samples with {} magnitudes",
            samples.len(),
            audio.len()
        )));
    }
    samples
        .iter()
        .zip(audio)
        .map(|(s, m)| {
            run_mode(
                store,
                mode,
                &ModeInput {
                    noisy: m,
                    visual: &s.visual,
                },
                enhancer,
                model,
                max_len,
            )
        })
        .collect()
}

/// Corpus WER of one mode.
pub fn evaluate_wer(
    store: &ParamStore,
    mode: Mode,
    samples: &[Sample],
    audio: &[MagnitudeSpectrogram],
    enhancer: Option<&AeModel>,
    model: &MsrModel,
    max_len: usize,
) -> Result<f64> {
    let hyps = transcribe(store, mode, samples, audio, enhancer, model, max_len)?;
    let refs: Vec<String> = samples.iter().map(|s| s.target.text()).collect();
    corpus_wer(
        refs.iter()
            .map(|r| r.as_str())
            .zip(hyps.iter().map(|h| h.as_str())),
    )
}

/// Mean energy error of the given magnitudes and of their enhancement
/// against the clean references: `(noisy, enhanced)`.
pub fn energy_errors(
    store: &ParamStore,
    model: &AeModel,
    samples: &[Sample],
    noisy: &[MagnitudeSpectrogram],
) -> Result<(f64, f64)> {
    if samples.is_empty() || samples.len() != noisy.len() {
        return Err(Error::Contract(format!(
            "{} samples with {} magnitudes",
            samples.len(),
            noisy.len()
        )));
    }
    let (mut a, mut b) = (0.0, 0.0);
    for (s, m) in samples.iter().zip(noisy) {
        let (_, enh) = ae_forward(store, model, &s.visual, m)?;
        a += energy_error(m.frames(), s.clean.frames())?;
        b += energy_error(enh.frames(), s.clean.frames())?;
    }
    let n = samples.len() as f64;
    Ok((a / n, b / n))
}

/// Mean over consecutive windows of `w` values; a trailing partial window
/// is dropped.
pub fn window_means(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 {
        return Vec::new();
    }
    xs.chunks_exact(w)
        .map(|c| c.iter().sum::<f64>() / w as f64)
        .collect()
}

/// Deterministic split into `(train, held_out)` with `held` items held out.
pub fn split<T: Clone>(items: &[T], held: usize, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = held.min(items.len());
    let test = idx[..held].iter().map(|&i| items[i].clone()).collect();
    let mut rest: Vec<usize> = idx[held..].to_vec();
    rest.sort_unstable();
    (rest.into_iter().map(|i| items[i].clone()).collect(), test)
}
