use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{config_err, Error, Result};

pub const BABBLE_SOURCES: usize = 30;

/// How noise is applied to training audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Candidate SNRs in dB; one is drawn per noisy sample.
    pub snr_db: Vec<f64>,
    /// Probability that a training sample gets noise at all.
    pub p_n: f64,
    pub n_sources: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            snr_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            p_n: 0.25,
            n_sources: BABBLE_SOURCES,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_n) {
            return config_err(format!("p_n = {} outside [0, 1]", self.p_n));
        }
        if self.n_sources < BABBLE_SOURCES {
            return config_err(format!(
                "babble needs {BABBLE_SOURCES} sources, got {}",
                self.n_sources
            ));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return config_err("noise SNR list must be non-empty and finite");
        }
        Ok(())
    }

    /// `Some(snr)` with probability `p_n`.
    pub fn draw(&self, rng: &mut impl Rng) -> Option<f64> {
        if rng.gen::<f64>() < self.p_n {
            Some(self.snr_db[rng.gen_range(0..self.snr_db.len())])
        } else {
            None
        }
    }
}

pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Sum of 30 randomly chosen sources, each read cyclically from a uniform
/// random offset, normalized to unit RMS (silence stays silence).
pub fn synth_babble(sources: &[Waveform], len: usize, rng: &mut impl Rng) -> Result<Waveform> {
    if sources.len() < BABBLE_SOURCES {
        return config_err(format!(
            "babble needs {BABBLE_SOURCES} sources, got {}",
            sources.len()
        ));
    }
    if let Some(i) = sources.iter().position(|s| s.is_empty()) {
        return Err(Error::DegenerateInput(format!(
            "babble source {i} is empty"
        )));
    }
    let mut out = vec![0.0; len];
    for i in sample(rng, sources.len(), BABBLE_SOURCES).into_iter() {
        let src = sources[i].samples();
        let offset = rng.gen_range(0..src.len());
        for (j, o) in out.iter_mut().enumerate() {
            *o += src[(offset + j) % src.len()];
        }
    }
    let p = power(&out);
    if p > 0.0 {
        let g = 1.0 / p.sqrt();
        out.iter_mut().for_each(|x| *x *= g);
    }
    Waveform::from_samples(out)
}

/// Gain that puts `noise` at `snr_db` below `clean`.
pub fn snr_scale(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<f64> {
    let (pc, pn) = (power(clean.samples()), power(noise.samples()));
    if pc == 0.0 || pn == 0.0 {
        return Err(Error::DegenerateInput(format!(
            "cannot set SNR with clean power {pc} and noise power {pn}"
        )));
    }
    Ok((pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `clean + g·noise` with `g` from [`snr_scale`].
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.len() != noise.len() {
        return Err(Error::Dimension(format!(
            "mixing {} clean samples with {} noise samples",
            clean.len(),
            noise.len()
        )));
    }
    let g = snr_scale(clean, noise, snr_db)?;
    let mixed = clean
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(c, n)| c + g * n)
        .collect();
    Waveform::from_samples(mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(f: f64, len: usize) -> Waveform {
        let s = (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / 16_000.0).sin())
            .collect();
        Waveform::from_samples(s).unwrap()
    }

    #[test]
    fn snr_scales_match_closed_form() {
        let a = sine(440.0, 1600);
        assert!((snr_scale(&a, &a, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((snr_scale(&a, &a, 20.0).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mixed_snr_is_exact() {
        let c = sine(300.0, 4000);
        let n = sine(1234.5, 4000).scaled(0.37);
        for snr in [-10.0, -5.0, 0.0, 5.0, 10.0] {
            let g = snr_scale(&c, &n, snr).unwrap();
            let measured = 10.0 * (power(c.samples()) / power(n.scaled(g).samples())).log10();
            assert!((measured - snr).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_power_is_degenerate() {
        let c = sine(300.0, 100);
        let z = Waveform::silence(100);
        assert!(matches!(
            mix_at_snr(&c, &z, 0.0),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            mix_at_snr(&z, &c, 0.0),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn babble_is_unit_rms_and_silence_stays_silent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let srcs: Vec<_> = (0..40)
            .map(|i| sine(200.0 + 37.0 * i as f64, 3000))
            .collect();
        let b = synth_babble(&srcs, 5000, &mut rng).unwrap();
        assert!((power(b.samples()).sqrt() - 1.0).abs() < 1e-9);
        let quiet: Vec<_> = (0..30).map(|_| Waveform::silence(100)).collect();
        let b = synth_babble(&quiet, 64, &mut rng).unwrap();
        assert!(b.samples().iter().all(|&x| x == 0.0));
        assert!(matches!(
            synth_babble(&srcs[..29], 10, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn noise_spec_validation() {
        assert!(NoiseSpec::default().validate().is_ok());
        let bad = NoiseSpec {
            p_n: 1.5,
            ..NoiseSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
