//! Word error rate as (S + D + I) / N from a minimal-edit alignment, with
//! the breakdown per sentence, a corpus figure and a mode-by-SNR table in
//! text and CSV form.
//!
//! ```bash
//! cargo run --release --example wer_table
//! ```

use avsr::metrics::{corpus_wer, wer_str, ResultTable, Snr};

fn main() -> avsr::Result<()> {
    let pairs = [
        ("bat pat mat", "bat pat mat"),
        ("bat pat mat", "bat mat"),
        ("fan van", "fan fan van"),
        ("tin din gap", "pin din cap"),
        ("cap", "gap bin pin"),
    ];
    println!(
        "{:<14} {:<14}  S  D  I  N    WER",
        "reference", "hypothesis"
    );
    for (r, h) in pairs {
        let b = wer_str(r, h)?;
        println!(
            "{r:<14} {h:<14} {:>2} {:>2} {:>2} {:>2}  {:>5.3}",
            b.substitutions, b.deletions, b.insertions, b.ref_words, b.wer
        );
    }
    println!("corpus WER {:.3}", corpus_wer(pairs)?);

    let mut table = ResultTable::new(&["A", "AV", "VAV"]);
    for (snr, row) in [
        (Snr::Clean, [0.08, 0.05, 0.06]),
        (Snr::Db(0), [0.61, 0.43, 0.27]),
    ] {
        for (col, wer) in ["A", "AV", "VAV"].into_iter().zip(row) {
            table.insert(col, snr, wer);
        }
    }
    print!("\n{}\n{}", table.to_text(), table.to_csv());
    Ok(())
}
