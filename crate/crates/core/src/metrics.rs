//! Word error rate, word accuracy and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Lower-cased words split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Minimal-edit word alignment with unit costs. Among alignments of equal
/// cost, substitutions are preferred over a deletion plus an insertion.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<WerBreakdown> {
    let (n, m) = (reference.len(), hypothesis.len());
    if n == 0 {
        return Err(Error::DegenerateInput("empty reference".into()));
    }
    // cost[i][j]: (edits, substitutions) aligning ref[..i] with hyp[..j];
    // ties on edits go to the path with more substitutions.
    let mut cost = vec![vec![(0usize, 0usize, 0usize); m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = (i, 0, i);
    }
    for j in 0..=m {
        cost[0][j] = (j, 0, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let (e, s, d) = cost[i - 1][j - 1];
            let diag = if same { (e, s, d) } else { (e + 1, s + 1, d) };
            let (e, s, d) = cost[i - 1][j];
            let del = (e + 1, s, d + 1);
            let (e, s, d) = cost[i][j - 1];
            let ins = (e + 1, s, d);
            cost[i][j] = [diag, del, ins]
                .into_iter()
                .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
                .expect("three candidates");
        }
    }
    let (edits, s, d) = cost[n][m];
    let i = edits - s - d;
    Ok(WerBreakdown {
        substitutions: s,
        deletions: d,
        insertions: i,
        ref_words: n,
        wer: edits as f64 / n as f64,
    })
}

/// [`wer`] on raw transcripts.
pub fn wer_str(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    wer(&tokenize(reference), &tokenize(hypothesis))
}

/// Corpus-level WER: total edits over total reference words.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<f64> {
    let (mut edits, mut words) = (0usize, 0usize);
    for (r, h) in pairs {
        let b = wer_str(r, h)?;
        edits += b.errors();
        words += b.ref_words;
    }
    if words == 0 {
        return Err(Error::DegenerateInput("no reference words".into()));
    }
    Ok(edits as f64 / words as f64)
}

pub fn word_accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::DegenerateInput("no labels".into()));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Noise condition of a result row. Serialized as `"clean"` or the dB value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Snr {
    Clean,
    Db(i32),
}

impl Snr {
    /// Row order: clean, then decreasing SNR.
    pub const ROWS: [Snr; 6] = [
        Snr::Clean,
        Snr::Db(10),
        Snr::Db(5),
        Snr::Db(0),
        Snr::Db(-5),
        Snr::Db(-10),
    ];

    pub fn db(self) -> Option<f64> {
        match self {
            Snr::Clean => None,
            Snr::Db(d) => Some(d as f64),
        }
    }

    fn rank(self) -> i64 {
        match self {
            Snr::Clean => i64::MIN,
            Snr::Db(d) => -(d as i64),
        }
    }
}

impl std::fmt::Display for Snr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Snr::Clean => write!(f, "clean"),
            Snr::Db(d) => write!(f, "{d}"),
        }
    }
}

impl std::str::FromStr for Snr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("clean") {
            return Ok(Snr::Clean);
        }
        s.trim_end_matches("dB")
            .trim()
            .parse::<i32>()
            .map(Snr::Db)
            .map_err(|_| Error::Config(format!("bad SNR '{s}' (clean or an integer dB)")))
    }
}

impl TryFrom<String> for Snr {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Snr> for String {
    fn from(s: Snr) -> String {
        s.to_string()
    }
}

/// WER results by (mode column, SNR row).
#[derive(Clone, Debug, Default)]
pub struct ResultTable {
    columns: Vec<String>,
    cells: BTreeMap<(i64, Snr, usize), f64>,
}

impl ResultTable {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            cells: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, column: &str, snr: Snr, wer: f64) {
        let c = match self.columns.iter().position(|c| c == column) {
            Some(c) => c,
            None => {
                self.columns.push(column.to_string());
                self.columns.len() - 1
            }
        };
        self.cells.insert((snr.rank(), snr, c), wer);
    }

    pub fn get(&self, column: &str, snr: Snr) -> Option<f64> {
        let c = self.columns.iter().position(|c| c == column)?;
        self.cells.get(&(snr.rank(), snr, c)).copied()
    }

    fn rows(&self) -> Vec<Snr> {
        let mut rows: Vec<Snr> = self.cells.keys().map(|k| k.1).collect();
        rows.sort_by_key(|s| s.rank());
        rows.dedup();
        rows
    }

    /// Aligned text; WER as a percentage with one decimal, `-` for gaps.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:>6}", "SNR");
        for c in &self.columns {
            let _ = write!(s, " {c:>7}");
        }
        s.push('\n');
        for row in self.rows() {
            let _ = write!(s, "{:>6}", row.to_string());
            for c in 0..self.columns.len() {
                match self.cells.get(&(row.rank(), row, c)) {
                    Some(v) => {
                        let _ = write!(s, " {:>7.1}", 100.0 * v);
                    }
                    None => {
                        let _ = write!(s, " {:>7}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("snr");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for row in self.rows() {
            s.push_str(&row.to_string());
            for c in 0..self.columns.len() {
                s.push(',');
                if let Some(v) = self.cells.get(&(row.rank(), row, c)) {
                    let _ = write!(s, "{:.1}", 100.0 * v);
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let b = wer_str("a b c", "a x c d").unwrap();
        assert_eq!((b.substitutions, b.deletions, b.insertions), (1, 0, 1));
        assert!((b.wer - 2.0 / 3.0).abs() < 1e-15);
        let b = wer_str("a b c d e", "").unwrap();
        assert_eq!((b.deletions, b.wer), (5, 1.0));
        assert_eq!(wer_str("x y", "x y").unwrap().wer, 0.0);
        assert!(matches!(wer_str("", "a"), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn not_symmetric() {
        let ab = wer_str("a b c", "a").unwrap();
        let ba = wer_str("a", "a b c").unwrap();
        assert_eq!((ab.deletions, ba.insertions), (2, 2));
        assert_ne!(ab.wer, ba.wer);
    }

    #[test]
    fn accuracy() {
        assert_eq!(word_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(word_accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert!(matches!(
            word_accuracy(&[1], &[1, 2]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn table_layout() {
        let empty = ResultTable::new(&["AV", "VA", "VAV"]);
        assert_eq!(empty.to_text().lines().count(), 1);
        let mut t = ResultTable::new(&["AV", "VA", "VAV"]);
        t.insert("VA", Snr::Db(-10), 0.5);
        t.insert("AV", Snr::Db(5), 0.1234);
        t.insert("AV", Snr::Clean, 0.0);
        let text = t.to_text();
        let rows: Vec<&str> = text
            .lines()
            .map(|l| l.split_whitespace().next().unwrap())
            .collect();
        assert_eq!(rows, vec!["SNR", "clean", "5", "-10"]);
        assert!(text.contains("12.3"));
        assert!(t.to_csv().contains("-10,,50.0,"));
    }
}
