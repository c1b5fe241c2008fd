use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{MagnitudeSpectrogram, Waveform, HOP_LENGTH, MEL_BINS, SAMPLE_RATE, WIN_LENGTH};
use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters `[n_bins, n_fft/2 + 1]` with unit peaks, centers
/// equally spaced on the mel scale between `f_lo` and `f_hi`. Returns the
/// filters and their center frequencies in Hz.
pub fn mel_filterbank(
    n_bins: usize,
    f_lo: f64,
    f_hi: f64,
    n_fft: usize,
    sample_rate: u32,
) -> Result<(Tensor, Vec<f64>)> {
    let nyquist = sample_rate as f64 / 2.0;
    let n_freq = n_fft / 2 + 1;
    if n_bins == 0 || n_bins > n_freq {
        return config_err(format!("{n_bins} mel bins for {n_freq} FFT bins"));
    }
    if !(0.0..f_hi).contains(&f_lo) || f_hi > nyquist {
        return config_err(format!(
            "mel range {f_lo}..{f_hi} Hz outside 0..{nyquist} Hz"
        ));
    }
    let (m_lo, m_hi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
    let edges: Vec<f64> = (0..n_bins + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_bins + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut fb = Tensor::zeros(&[n_bins, n_freq]);
    for b in 0..n_bins {
        let (lo, c, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..n_freq {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            fb.set(&[b, k], w);
        }
    }
    Ok((fb, edges[1..=n_bins].to_vec()))
}

/// Hann-windowed STFT magnitude followed by the mel filterbank. Framing is
/// centered with reflect padding, giving `ceil(len / hop)` frames.
#[derive(Clone)]
pub struct FeatureExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Tensor,
    centers: Vec<f64>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("bins", &self.centers.len())
            .finish()
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(MEL_BINS).expect("default mel configuration is valid")
    }
}

impl FeatureExtractor {
    pub fn new(mel_bins: usize) -> Result<Self> {
        let (filterbank, centers) = mel_filterbank(mel_bins, 0.0, 8000.0, WIN_LENGTH, SAMPLE_RATE)?;
        let window = (0..WIN_LENGTH)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WIN_LENGTH as f64).cos())
            .collect();
        Ok(Self {
            fft: FftPlanner::new().plan_fft_forward(WIN_LENGTH),
            window,
            filterbank,
            centers,
        })
    }

    pub fn filterbank(&self) -> &Tensor {
        &self.filterbank
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers
    }

    pub fn mel_bins(&self) -> usize {
        self.centers.len()
    }

    /// Linear magnitude spectrum frames `[ceil(len/hop), n_fft/2 + 1]`.
    pub fn stft_magnitude(&self, w: &Waveform) -> Result<Tensor> {
        if w.is_empty() {
            return Err(Error::DegenerateInput("empty waveform".into()));
        }
        let x = w.samples();
        let n = x.len();
        let frames = n.div_ceil(HOP_LENGTH);
        let half = WIN_LENGTH / 2;
        let n_freq = WIN_LENGTH / 2 + 1;
        let mut out = Vec::with_capacity(frames * n_freq);
        let mut buf = vec![Complex::new(0.0, 0.0); WIN_LENGTH];
        for f in 0..frames {
            let start = (f * HOP_LENGTH) as isize - half as isize;
            for (j, slot) in buf.iter_mut().enumerate() {
                let v = x[reflect(start + j as isize, n)];
                *slot = Complex::new(v * self.window[j], 0.0);
            }
            self.fft.process(&mut buf);
            out.extend(buf[..n_freq].iter().map(|c| c.norm()));
        }
        Tensor::new(vec![frames, n_freq], out)
    }

    pub fn stft_mel(&self, w: &Waveform) -> Result<MagnitudeSpectrogram> {
        let mag = self.stft_magnitude(w)?;
        let (frames, n_freq) = (mag.dim(0), mag.dim(1));
        let bins = self.mel_bins();
        let fb = self.filterbank.data();
        let mut out = vec![0.0; frames * bins];
        for (t, row) in mag.data().chunks(n_freq).enumerate() {
            for b in 0..bins {
                let filt = &fb[b * n_freq..(b + 1) * n_freq];
                out[t * bins + b] = filt.iter().zip(row).map(|(a, m)| a * m).sum();
            }
        }
        MagnitudeSpectrogram::new(Tensor::new(vec![frames, bins], out)?)
    }

    /// Features for a clip of `video_frames` frames: the waveform is
    /// zero-padded or trimmed to `4T` hops first, so exactly `4T` frames come out.
    pub fn stft_mel_aligned(
        &self,
        w: &Waveform,
        video_frames: usize,
    ) -> Result<MagnitudeSpectrogram> {
        if video_frames == 0 {
            return Err(Error::DegenerateInput("clip has no video frames".into()));
        }
        self.stft_mel(&w.fit_to(4 * video_frames * HOP_LENGTH))
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}
