//! Trains the audio-visual enhancer on babble mixtures at 0 dB with each
//! temporal unit and reports the held-out energy error of the noisy input
//! and of the enhanced magnitudes against the clean ones.
//!
//! ```bash
//! cargo run --release --example enhance_babble
//! ```

use avsr::config::RunConfig;
use avsr::corpus::synth_corpus;
use avsr::metrics::Snr;
use avsr::pipeline::{babble, features, phase_ae, split_corpus, test_audio, Models};
use avsr::signal::FeatureExtractor;
use avsr::temporal::UnitKind;
use avsr::train::{energy_errors, window_means};

fn main() -> avsr::Result<()> {
    let fx = FeatureExtractor::default();
    for unit in [UnitKind::Tcn, UnitKind::ResNet1d] {
        let mut cfg = RunConfig::default();
        cfg.corpus.sentences = 60;
        cfg.eval.held_out = 10;
        cfg.model.unit = unit;
        cfg.ae_train.steps = 300;

        let (mut store, models) = Models::build(&cfg)?;
        let utts = synth_corpus(&cfg.corpus)?;
        let (train, test) = split_corpus(&cfg, &utts);
        let (train, test) = (
            features(&store, &models, &fx, &train)?,
            features(&store, &models, &fx, &test)?,
        );
        let mixer = babble(&cfg, &fx)?;

        let losses = phase_ae(&mut store, &models, &cfg, &train, &mixer, |_, _| {})?;
        let curve: Vec<String> = window_means(&losses, 100)
            .iter()
            .map(|l| format!("{l:.4}"))
            .collect();
        let noisy = test_audio(&cfg, &mixer, &test, Snr::Db(0))?;
        let (before, after) = energy_errors(&store, &models.ae, &test, &noisy)?;
        println!(
            "{unit:?}: loss per 100 steps [{}], held-out energy error {before:.3} -> {after:.3} ({:+.1}%)",
            curve.join(", "),
            100.0 * (after - before) / before
        );
    }
    Ok(())
}
