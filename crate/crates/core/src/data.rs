//! Utterances turned into network inputs: frozen visual features, clean
//! magnitudes and babble-mixed magnitudes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ae::AeExample;
use crate::checkpoint::{load_tensor, save_tensor};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::frontend::{frontend_forward, Frontend};
use crate::msr::{MsrExample, TokenSequence, Vocab};
use crate::params::ParamStore;
use crate::signal::{
    mix_at_snr, synth_babble, FeatureExtractor, MagnitudeSpectrogram, NoiseSpec, Waveform,
};
use crate::tensor::Tensor;

/// One utterance with its cached features.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub target: TokenSequence,
    pub waveform: Waveform,
    pub word_ends: Vec<usize>,
    /// `[T, D]`.
    pub visual: Tensor,
    /// `[4T, F]`.
    pub clean: MagnitudeSpectrogram,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.visual.shape()[0]
    }

    pub fn msr_example(&self, audio: Option<&MagnitudeSpectrogram>, video: bool) -> MsrExample {
        MsrExample {
            audio: audio.map(|m| m.frames().clone()),
            video: video.then(|| self.visual.clone()),
            target: self.target.clone(),
            word_ends: Some(self.word_ends.clone()),
        }
    }

    pub fn ae_example(&self, noisy: &MagnitudeSpectrogram) -> AeExample {
        AeExample {
            visual: self.visual.clone(),
            noisy: noisy.frames().clone(),
            clean: self.clean.frames().clone(),
        }
    }
}

/// Extracts features for every utterance with a frozen front end.
pub fn prepare(
    store: &ParamStore,
    frontend: &Frontend,
    fx: &FeatureExtractor,
    utts: &[Utterance],
) -> Result<Vec<Sample>> {
    utts.iter()
        .map(|u| {
            let visual = frontend_forward(store, frontend, &u.clip)?.feats;
            prepare_with_features(fx, u, visual)
        })
        .collect()
}

/// Builds a sample from precomputed `[T, D]` features.
pub fn prepare_with_features(
    fx: &FeatureExtractor,
    u: &Utterance,
    visual: Tensor,
) -> Result<Sample> {
    if visual.ndim() != 2 || visual.shape()[0] != u.frames() {
        return Err(Error::Alignment(format!(
            "{}: features {:?} for {} frames",
            u.id,
            visual.shape(),
            u.frames()
        )));
    }
    let clean = fx.stft_mel_aligned(&u.waveform, u.frames())?;
    Ok(Sample {
        id: u.id.clone(),
        target: Vocab.encode(&u.transcript)?,
        waveform: u.waveform.clone(),
        word_ends: u.word_ends.clone(),
        visual,
        clean,
    })
}

/// Writes one `<id>.feat` tensor per sample.
pub fn save_feature_cache(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for s in samples {
        save_tensor(dir.join(format!("{}.feat", s.id)), "visual", &s.visual)?;
    }
    Ok(())
}

/// Loads cached features; fails with a format error when one is missing.
pub fn load_feature_cache(
    dir: impl AsRef<Path>,
    fx: &FeatureExtractor,
    utts: &[Utterance],
) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    utts.iter()
        .map(|u| {
            let p = dir.join(format!("{}.feat", u.id));
            if !p.exists() {
                return Err(Error::Format(format!(
                    "no cached features at {}",
                    p.display()
                )));
            }
            prepare_with_features(fx, u, load_tensor(p, "visual")?)
        })
        .collect()
}

/// Babble mixing against a fixed pool of source waveforms.
#[derive(Clone, Debug)]
pub struct NoiseMixer {
    sources: Vec<Waveform>,
    fx: FeatureExtractor,
}

impl NoiseMixer {
    pub fn new(sources: Vec<Waveform>, fx: FeatureExtractor) -> Self {
        Self { sources, fx }
    }

    /// Magnitudes of `sample` with fresh babble at `snr_db`; `None` is clean.
    pub fn noisy(
        &self,
        sample: &Sample,
        snr_db: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<MagnitudeSpectrogram> {
        let Some(snr) = snr_db else {
            return Ok(sample.clean.clone());
        };
        let babble = synth_babble(&self.sources, sample.waveform.len(), rng)?;
        let mixed = mix_at_snr(&sample.waveform, &babble, snr)?;
        self.fx.stft_mel_aligned(&mixed, sample.frames())
    }

    /// Draws the condition from `spec` (clean with probability `1 - p_n`).
    pub fn augmented(
        &self,
        sample: &Sample,
        spec: &NoiseSpec,
        rng: &mut impl Rng,
    ) -> Result<MagnitudeSpectrogram> {
        let snr = spec.draw(rng);
        self.noisy(sample, snr, rng)
    }
}

/// Per-sample noisy magnitudes at one SNR, reproducible from `seed`.
pub fn noisy_set(
    mixer: &NoiseMixer,
    samples: &[Sample],
    snr_db: Option<f64>,
    seed: u64,
) -> Result<Vec<MagnitudeSpectrogram>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x100_0193).wrapping_add(i as u64));
            mixer.noisy(s, snr_db, &mut rng)
        })
        .collect()
}

/// Random indices for a batch.
pub fn batch_indices(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}
