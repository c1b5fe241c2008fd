//! Generates a small synthetic audio-visual corpus, writes it to disk and
//! reads it back. Each letter is a two-tone chord lasting two video frames;
//! the mouth image follows the letter's viseme class.
//!
//! ```bash
//! cargo run --release --example synth_corpus -- /tmp/avsr-corpus
//! ```

use std::path::PathBuf;

use avsr::corpus::{letter_tones, read_corpus, synth_corpus, viseme, write_corpus, CorpusConfig};

fn main() -> avsr::Result<()> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("avsr-corpus"));
    let cfg = CorpusConfig {
        sentences: 8,
        ..CorpusConfig::default()
    };
    let utts = synth_corpus(&cfg)?;
    for u in &utts {
        println!(
            "{}  {:<16} {:>3} frames  {:.2} s  word ends {:?}",
            u.id,
            u.transcript,
            u.frames(),
            u.waveform.duration_secs(),
            u.word_ends
        );
    }

    println!("\nletter  tones (Hz)      viseme (opening, width)");
    for c in "bpmfvtdn".chars() {
        let (lo, hi) = letter_tones(c).expect("letter");
        let (o, w) = viseme(c);
        println!("  {c}     {lo:>5} {hi:>5}     ({o:.2}, {w:.2})");
    }

    write_corpus(&dir, &utts)?;
    let back = read_corpus(&dir)?;
    assert_eq!(back.len(), utts.len());
    assert!(back
        .iter()
        .zip(&utts)
        .all(|(a, b)| a.waveform == b.waveform && a.transcript == b.transcript));
    utts[0].clip.save_pgm_dir(dir.join("frames_utt0000"))?;
    println!(
        "\nwrote {} and verified the round trip; frames of utt0000 are PGM images",
        dir.display()
    );
    Ok(())
}
