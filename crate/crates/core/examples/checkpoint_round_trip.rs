//! Saves the recognizer weights to a checkpoint archive, loads them into a
//! freshly initialized model and compares the logits bit for bit. Training
//! twice from the same seed yields identical losses.
//!
//! ```bash
//! cargo run --release --example checkpoint_round_trip
//! ```

use avsr::config::RunConfig;
use avsr::corpus::synth_corpus;
use avsr::msr::msr_forward;
use avsr::pipeline::{features, load_phase, phase_msr, save_phase, Models, Phase};
use avsr::signal::FeatureExtractor;

fn main() -> avsr::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.corpus.sentences = 8;
    cfg.eval.held_out = 2;
    cfg.msr_train.steps = 30;
    let fx = FeatureExtractor::default();

    let train_once = || -> avsr::Result<_> {
        let (mut store, models) = Models::build(&cfg)?;
        let samples = features(&store, &models, &fx, &synth_corpus(&cfg.corpus)?)?;
        let losses = phase_msr(
            &mut store,
            &models,
            &cfg.msr_train,
            &samples,
            None,
            |_, _| {},
        )?;
        Ok((store, models, samples, losses))
    };
    let (store, models, samples, losses) = train_once()?;
    let (_, _, _, again) = train_once()?;
    let same = losses
        .iter()
        .zip(&again)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!(
        "two runs from seed {}: {} identical losses: {same}",
        cfg.seed,
        losses.len()
    );

    let path = std::env::temp_dir().join("avsr-example-msr.avsr");
    save_phase(&store, &cfg, Phase::Msr, losses.len(), &path)?;
    let (mut fresh, _) = Models::build(&RunConfig {
        seed: cfg.seed + 1,
        ..cfg.clone()
    })?;
    let steps = load_phase(&mut fresh, &cfg, Phase::Msr, &path)?;
    println!(
        "loaded {} ({} bytes) after {steps} steps",
        path.display(),
        std::fs::metadata(&path)?.len()
    );

    let s = &samples[0];
    let inputs = s.target.decoder_inputs();
    let a = msr_forward(
        &store,
        &models.msr,
        Some(&s.clean),
        Some(&s.visual),
        &inputs,
    )?;
    let b = msr_forward(
        &fresh,
        &models.msr,
        Some(&s.clean),
        Some(&s.visual),
        &inputs,
    )?;
    let exact = a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    println!("logits {:?} bit-identical after reload: {exact}", a.shape());

    let wrong = load_phase(&mut fresh, &cfg, Phase::Ae, &path).unwrap_err();
    println!(
        "loading it as an enhancer checkpoint fails (exit code {}): {wrong}",
        wrong.exit_code()
    );
    Ok(())
}
