//! STFT magnitudes through an 80-bin mel filterbank, aligned to four audio
//! frames per video frame. A pure tone lands in the mel bin whose center is
//! nearest to it.
//!
//! ```bash
//! cargo run --release --example mel_features
//! ```

use avsr::corpus::{synth_corpus, CorpusConfig};
use avsr::signal::{mix_at_snr, FeatureExtractor, Waveform, SAMPLE_RATE};

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

fn main() -> avsr::Result<()> {
    let fx = FeatureExtractor::default();
    let centers = fx.centers_hz().to_vec();

    for hz in [440.0, 1000.0, 3000.0] {
        let tone: Vec<f64> = (0..SAMPLE_RATE as usize)
            .map(|i| 0.1 * (std::f64::consts::TAU * hz * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        let m = fx.stft_mel(&Waveform::from_samples(tone)?)?;
        let mid = m.frames().row(m.n_frames() / 2);
        let bin = argmax(mid);
        println!(
            "{hz:>6} Hz tone -> mel bin {bin:>2} (center {:.0} Hz)",
            centers[bin]
        );
    }

    let utts = synth_corpus(&CorpusConfig {
        sentences: 3,
        ..CorpusConfig::default()
    })?;
    let babble = Waveform::from_samples(
        utts[1]
            .waveform
            .fit_to(utts[0].waveform.len())
            .samples()
            .to_vec(),
    )?;
    for u in &utts {
        let m = fx.stft_mel_aligned(&u.waveform, u.frames())?;
        m.check_aligned(u.frames())?;
        println!(
            "{} '{}': {} video frames -> {} x {} magnitudes",
            u.id,
            u.transcript,
            u.frames(),
            m.n_frames(),
            m.bins()
        );
    }
    let noisy = mix_at_snr(&utts[0].waveform, &babble, 0.0)?;
    let clean = fx.stft_mel_aligned(&utts[0].waveform, utts[0].frames())?;
    let mixed = fx.stft_mel_aligned(&noisy, utts[0].frames())?;
    println!(
        "energy error of a 0 dB mixture against its clean source: {:.3}",
        avsr::ae::energy_error(mixed.frames(), clean.frames())?
    );
    Ok(())
}
