//! Fits the multimodal recognizer to 20 clean sentences with both streams
//! and decodes them back greedily. A working attention decoder drives the
//! training WER to near zero within 2000 steps.
//!
//! ```bash
//! cargo run --release --example recognizer_overfit
//! ```

use avsr::config::RunConfig;
use avsr::corpus::synth_corpus;
use avsr::msr::Mode;
use avsr::pipeline::{features, phase_msr, Models};
use avsr::signal::FeatureExtractor;
use avsr::train::{evaluate_wer, transcribe, ModeMix};

fn main() -> avsr::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.corpus.sentences = 20;
    cfg.eval.held_out = 0;
    let fx = FeatureExtractor::default();
    let (mut store, models) = Models::build(&cfg)?;
    let samples = features(&store, &models, &fx, &synth_corpus(&cfg.corpus)?)?;
    let clean: Vec<_> = samples.iter().map(|s| s.clean.clone()).collect();

    let mut opts = cfg.msr_train.clone();
    opts.modes = ModeMix::av_only();
    let max_len = cfg.eval.max_len;
    let losses = phase_msr(&mut store, &models, &opts, &samples, None, |step, loss| {
        if step % 400 == 0 {
            println!("step {step:>4}  loss {loss:.3}");
        }
    })?;
    let wer = evaluate_wer(
        &store,
        Mode::AV,
        &samples,
        &clean,
        None,
        &models.msr,
        max_len,
    )?;
    println!("after {} steps: training WER {wer:.3}", losses.len());

    let hyps = transcribe(
        &store,
        Mode::AV,
        &samples[..5],
        &clean[..5],
        None,
        &models.msr,
        max_len,
    )?;
    for (s, h) in samples.iter().zip(&hyps) {
        println!("  {:<16} -> {h}", s.target.text());
    }
    Ok(())
}
