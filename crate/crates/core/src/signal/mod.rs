//! Waveforms, mel-magnitude features and babble-noise synthesis.

mod mel;
mod noise;
mod wav;

pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, FeatureExtractor};
pub use noise::{mix_at_snr, power, snr_scale, synth_babble, NoiseSpec, BABBLE_SOURCES};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
/// 40 ms analysis window.
pub const WIN_LENGTH: usize = 640;
/// 10 ms hop, four audio frames per 25 fps video frame.
pub const HOP_LENGTH: usize = 160;
pub const MEL_BINS: usize = 80;
pub const VIDEO_FPS: u32 = 25;
/// Audio samples spanned by one video frame.
pub const SAMPLES_PER_VIDEO_FRAME: usize = (SAMPLE_RATE / VIDEO_FPS) as usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Format(format!(
                "sample rate {sample_rate} Hz, expected {SAMPLE_RATE}"
            )));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Format(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn silence(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| x * c).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Zero-pads or trims to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

/// Mel-scale magnitude frames `[frames, bins]`, all entries non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSpectrogram {
    frames: Tensor,
}

impl MagnitudeSpectrogram {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.ndim() != 2 {
            return Err(Error::Dimension(format!(
                "spectrogram must be [frames, bins], got {:?}",
                frames.shape()
            )));
        }
        if let Some(x) = frames
            .data()
            .iter()
            .find(|x| !(**x >= 0.0) || !x.is_finite())
        {
            return Err(Error::Format(format!(
                "spectrogram entry {x} is not a finite magnitude"
            )));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn bins(&self) -> usize {
        self.frames.dim(1)
    }

    /// Checks the 4T contract against a clip of `video_frames` frames.
    pub fn check_aligned(&self, video_frames: usize) -> Result<()> {
        if self.n_frames() != 4 * video_frames {
            return Err(Error::Alignment(format!(
                "{} audio frames for {video_frames} video frames (need {})",
                self.n_frames(),
                4 * video_frames
            )));
        }
        Ok(())
    }
}
