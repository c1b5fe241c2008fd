//! The pseudo-3D visual front end. Each bottleneck replaces a 3×3×3
//! convolution by a 1×3×3 spatial and a 3×1×1 temporal one (12C² weights
//! instead of 27C²) wired as P3D-A, B or C. A short word-classification
//! run shows the trunk learns from mouth crops alone.
//!
//! ```bash
//! cargo run --release --example p3d_frontend
//! ```

use avsr::config::RunConfig;
use avsr::corpus::synth_corpus;
use avsr::frontend::frontend_forward;
use avsr::pipeline::{Models, VISUAL};
use avsr::train::{frontend_accuracy, train_frontend, word_clips, FrontendTrainOptions};

fn main() -> avsr::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.corpus.sentences = 30;
    let (mut store, models) = Models::build(&cfg)?;
    let fe = models.frontend();

    println!("block  mode  in -> out   factored  full 3x3x3");
    for (i, blk) in fe.blocks().iter().enumerate() {
        let stage = store
            .iter()
            .filter(|(_, p)| {
                p.name.contains(&format!("/s{i}b0/spatial/conv"))
                    || p.name.contains(&format!("/s{i}b0/temporal/conv"))
            })
            .map(|(_, p)| p.value.numel())
            .sum::<usize>();
        let inner = (blk.out_ch / 4).max(1);
        println!(
            "{i:>5}  {:?}   {:>3} -> {:<3}  {stage:>8}  {:>10}",
            blk.mode,
            blk.in_ch,
            blk.out_ch,
            27 * inner * inner
        );
    }
    println!(
        "trainable front-end weights: {}",
        store.count_weights(VISUAL)
    );

    let utts = synth_corpus(&cfg.corpus)?;
    let feats = frontend_forward(&store, fe, &utts[0].clip)?;
    println!(
        "'{}': {} frames -> features {} x {}",
        utts[0].transcript,
        utts[0].clip.len(),
        feats.len(),
        feats.width()
    );

    let clips = word_clips(&utts, &cfg.corpus.words)?;
    let before = frontend_accuracy(&store, &models.classifier, &clips)?;
    let opts = FrontendTrainOptions {
        steps: 60,
        ..FrontendTrainOptions::default()
    };
    train_frontend(
        &mut store,
        &models.classifier,
        &clips,
        &opts,
        |step, loss| {
            if step % 20 == 0 {
                println!("  step {step:>3}  loss {loss:.3}");
            }
        },
    )?;
    let after = frontend_accuracy(&store, &models.classifier, &clips)?;
    println!(
        "word accuracy over {} clips of {} words: {:.2} -> {:.2}",
        clips.len(),
        cfg.corpus.words.len(),
        before,
        after
    );
    Ok(())
}
