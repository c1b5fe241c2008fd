//! Deterministic synthetic audio-visual corpus.
//!
//! Every letter lasts two video frames (1280 samples). Its audio is a pair of
//! tones, one from a low and one from a high register, so letters are
//! separable in the mel domain. Its video is a mouth glyph whose opening and
//! width come from the letter's viseme class; letters of one class
//! (`b p m`, `f v`, `t d n s z l`, `c k g q x`) look identical, so words
//! such as `bat`/`pat`/`mat` need audio to be told apart. Words are
//! separated by one silent frame, and each utterance starts and ends with
//! one.
//!
//! On disk a corpus is a directory with `manifest.tsv`
//! (`id, transcript, word_ends`), one `<id>.wav` and one `<id>.clip` each.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::frontend::{VideoClip, FRAME_SIZE};
use crate::msr::Vocab;
use crate::signal::{read_wav, write_wav, Waveform, SAMPLES_PER_VIDEO_FRAME, SAMPLE_RATE};
use crate::tensor::Tensor;

pub const FRAMES_PER_LETTER: usize = 2;
const LOW_HZ: [f64; 6] = [300.0, 420.0, 580.0, 800.0, 1100.0, 1500.0];
const HIGH_HZ: [f64; 7] = [1900.0, 2400.0, 3000.0, 3700.0, 4500.0, 5400.0, 6500.0];
const RAMP: usize = 160;

/// Words built so that several share a viseme sequence.
pub const DEFAULT_WORDS: [&str; 12] = [
    "bat", "pat", "mat", "fan", "van", "tin", "din", "cap", "gap", "bin", "pin", "fin",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub words: Vec<String>,
    /// Peak amplitude of each tone.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sentences: 20,
            min_words: 1,
            max_words: 3,
            words: DEFAULT_WORDS.iter().map(|w| w.to_string()).collect(),
            amplitude: 0.02,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_words == 0 || self.min_words > self.max_words {
            return config_err(format!(
                "word range {}..={}",
                self.min_words, self.max_words
            ));
        }
        if self.words.is_empty() {
            return config_err("the corpus needs at least one word");
        }
        for w in &self.words {
            if w.is_empty() || w.chars().any(|c| c == ' ' || letter_index(c).is_none()) {
                return config_err(format!(
                    "corpus word '{w}' has characters outside the vocabulary"
                ));
            }
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 0.45) {
            return config_err(format!(
                "tone amplitude {} outside (0, 0.45]",
                self.amplitude
            ));
        }
        Ok(())
    }
}

/// One synthetic utterance. `word_ends[i]` is the first video frame after
/// word `i` and its trailing silent frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    pub waveform: Waveform,
    pub clip: VideoClip,
    pub word_ends: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.clip.len()
    }
}

fn letter_index(c: char) -> Option<usize> {
    let id = Vocab.id(c)?;
    (id > crate::msr::SPACE).then(|| id - crate::msr::SPACE - 1)
}

/// The two tone frequencies of a character.
pub fn letter_tones(c: char) -> Option<(f64, f64)> {
    let l = letter_index(c)?;
    Some((LOW_HZ[l % LOW_HZ.len()], HIGH_HZ[l / LOW_HZ.len()]))
}

/// `(opening, width)` of the mouth for a character, both in `[0, 1]`.
pub fn viseme(c: char) -> (f64, f64) {
    match c.to_ascii_lowercase() {
        'b' | 'p' | 'm' => (0.0, 0.6),
        'f' | 'v' => (0.1, 0.55),
        'c' | 'k' | 'g' | 'q' | 'x' => (0.35, 0.45),
        'a' => (0.8, 0.6),
        'e' => (0.5, 0.65),
        'i' => (0.3, 0.75),
        'o' => (0.7, 0.35),
        'u' => (0.4, 0.25),
        'r' | 'w' => (0.3, 0.3),
        'h' => (0.55, 0.5),
        'j' | 'y' => (0.2, 0.65),
        _ => (0.2, 0.5),
    }
}

const REST: (f64, f64) = (0.0, 0.5);

/// Per-utterance variation, shared by all of its letters.
struct Speaker {
    pitch: f64,
    dx: f64,
    dy: f64,
    size: f64,
}

fn render_frame(shape: (f64, f64), sp: &Speaker, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (opening, width) = shape;
    let n = FRAME_SIZE;
    let (cx, cy) = (56.0 + sp.dx, 64.0 + sp.dy);
    let lip_a = (18.0 + 26.0 * width) * sp.size;
    let lip_b = (7.0 + 18.0 * opening) * sp.size;
    let gap_a = 0.8 * lip_a;
    let gap_b = 18.0 * opening * sp.size;
    let mut px = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let lips = (fx / lip_a).powi(2) + (fy / lip_b).powi(2) <= 1.0;
            let gap = gap_b > 0.0 && (fx / gap_a).powi(2) + (fy / gap_b).powi(2) <= 1.0;
            let base: f64 = if gap {
                0.1
            } else if lips {
                0.75
            } else {
                0.45
            };
            px[y * n + x] = (base + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
        }
    }
    px
}

/// Renders one utterance from its words.
pub fn synth_utterance(
    id: &str,
    words: &[&str],
    amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    if words.is_empty() {
        return Err(Error::DegenerateInput(
            "an utterance needs at least one word".into(),
        ));
    }
    let sp = Speaker {
        pitch: rng.gen_range(0.98..1.02),
        dx: rng.gen_range(-2.0..2.0),
        dy: rng.gen_range(-2.0..2.0),
        size: rng.gen_range(0.95..1.05),
    };
    // Frame schedule: None is silence.
    let mut schedule: Vec<Option<char>> = vec![None];
    let mut word_ends = Vec::with_capacity(words.len());
    for w in words {
        for c in w.chars() {
            if letter_tones(c).is_none() {
                return Err(Error::Format(format!("'{c}' in '{w}' has no tone code")));
            }
            schedule.extend(std::iter::repeat(Some(c)).take(FRAMES_PER_LETTER));
        }
        schedule.push(None);
        word_ends.push(schedule.len());
    }
    let t = schedule.len();
    let mut samples = vec![0.0; t * SAMPLES_PER_VIDEO_FRAME];
    let letter_len = FRAMES_PER_LETTER * SAMPLES_PER_VIDEO_FRAME;
    let mut f = 0;
    while f < t {
        if let Some(c) = schedule[f] {
            let (lo, hi) = letter_tones(c).expect("checked above");
            let gain = amplitude * rng.gen_range(0.85..1.15);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let start = f * SAMPLES_PER_VIDEO_FRAME;
            for i in 0..letter_len {
                let env = if i < RAMP {
                    0.5 - 0.5 * (std::f64::consts::PI * i as f64 / RAMP as f64).cos()
                } else if i >= letter_len - RAMP {
                    0.5 - 0.5 * (std::f64::consts::PI * (letter_len - i) as f64 / RAMP as f64).cos()
                } else {
                    1.0
                };
                let ts = i as f64 / SAMPLE_RATE as f64;
                let w = std::f64::consts::TAU * ts * sp.pitch;
                samples[start + i] = gain * env * ((w * lo + phase).sin() + (w * hi).sin());
            }
            f += FRAMES_PER_LETTER;
        } else {
            f += 1;
        }
    }
    // Quantize to the 16-bit grid so on-disk and in-memory corpora agree.
    for s in &mut samples {
        *s = (*s * 32768.0).round() / 32768.0;
    }
    let mut pixels = Vec::with_capacity(t * FRAME_SIZE * FRAME_SIZE);
    for slot in &schedule {
        let shape = slot.map(viseme).unwrap_or(REST);
        pixels.extend(render_frame(shape, &sp, rng));
    }
    for p in &mut pixels {
        *p = (*p as f32) as f64;
    }
    Ok(Utterance {
        id: id.to_string(),
        transcript: words.join(" "),
        waveform: Waveform::from_samples(samples)?,
        clip: VideoClip::new(Tensor::new(vec![t, FRAME_SIZE, FRAME_SIZE], pixels)?)?,
        word_ends,
    })
}

fn draw_words<'a>(cfg: &'a CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    let n = rng.gen_range(cfg.min_words..=cfg.max_words);
    (0..n)
        .map(|_| cfg.words.choose(rng).expect("validated non-empty").as_str())
        .collect()
}

/// `cfg.sentences` utterances named `utt0000`, `utt0001`, …
pub fn synth_corpus(cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.sentences)
        .map(|i| {
            let words = draw_words(cfg, &mut rng);
            synth_utterance(&format!("utt{i:04}"), &words, cfg.amplitude, &mut rng)
        })
        .collect()
}

/// Waveforms of `n` further utterances from an independent stream, for
/// building babble.
pub fn babble_sources(cfg: &CorpusConfig, n: usize) -> Result<Vec<Waveform>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let wide = CorpusConfig {
        min_words: 2,
        max_words: 4,
        ..cfg.clone()
    };
    (0..n)
        .map(|i| {
            let words = draw_words(&wide, &mut rng);
            Ok(synth_utterance(&format!("bab{i:04}"), &words, cfg.amplitude, &mut rng)?.waveform)
        })
        .collect()
}

pub fn write_corpus(dir: impl AsRef<Path>, utts: &[Utterance]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for u in utts {
        write_wav(dir.join(format!("{}.wav", u.id)), &u.waveform)?;
        u.clip.save_raw(dir.join(format!("{}.clip", u.id)))?;
        let ends: Vec<String> = u.word_ends.iter().map(|e| e.to_string()).collect();
        manifest.push_str(&format!("{}\t{}\t{}\n", u.id, u.transcript, ends.join(",")));
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let dir = dir.as_ref();
    let manifest = fs::read_to_string(dir.join("manifest.tsv"))
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join("manifest.tsv").display())))?;
    let mut out = Vec::new();
    for (n, line) in manifest
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Format(format!(
                "manifest line {}: expected 3 columns",
                n + 1
            )));
        }
        let word_ends = cols[2]
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", n + 1)))?;
        let waveform = read_wav(dir.join(format!("{}.wav", cols[0])))?;
        let clip = VideoClip::load_raw(dir.join(format!("{}.clip", cols[0])))?;
        if waveform.len() != clip.len() * SAMPLES_PER_VIDEO_FRAME {
            return Err(Error::Alignment(format!(
                "{}: {} samples for {} frames",
                cols[0],
                waveform.len(),
                clip.len()
            )));
        }
        if word_ends.len() != cols[1].split_whitespace().count()
            || word_ends.last() != Some(&clip.len())
        {
            return Err(Error::Format(format!(
                "{}: word boundaries do not match",
                cols[0]
            )));
        }
        out.push(Utterance {
            id: cols[0].to_string(),
            transcript: cols[1].to_string(),
            waveform,
            clip,
            word_ends,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = synth_utterance("x", &["bat", "fin"], 0.02, &mut rng).unwrap();
        assert_eq!(u.frames(), 1 + 6 + 1 + 6 + 1);
        assert_eq!(u.word_ends, vec![8, 15]);
        assert_eq!(u.waveform.len(), 15 * SAMPLES_PER_VIDEO_FRAME);
        assert!(u.waveform.samples()[..SAMPLES_PER_VIDEO_FRAME]
            .iter()
            .all(|&s| s == 0.0));
    }

    #[test]
    fn visemes_hide_voicing() {
        assert_eq!(viseme('b'), viseme('p'));
        assert_eq!(viseme('t'), viseme('d'));
        assert_ne!(letter_tones('b'), letter_tones('p'));
        let all: std::collections::HashSet<_> = ('a'..='z')
            .map(|c| letter_tones(c).map(|(a, b)| (a as u32, b as u32)))
            .collect();
        assert_eq!(all.len(), 26);
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = CorpusConfig {
            sentences: 3,
            ..CorpusConfig::default()
        };
        assert_eq!(synth_corpus(&cfg).unwrap(), synth_corpus(&cfg).unwrap());
        let other = CorpusConfig {
            seed: 1,
            ..cfg.clone()
        };
        assert_ne!(synth_corpus(&cfg).unwrap(), synth_corpus(&other).unwrap());
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let cfg = CorpusConfig {
            sentences: 2,
            ..CorpusConfig::default()
        };
        let utts = synth_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &utts).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), utts);
    }

    #[test]
    fn bad_words_are_config_errors() {
        let cfg = CorpusConfig {
            words: vec!["a-b".into()],
            ..CorpusConfig::default()
        };
        assert!(matches!(synth_corpus(&cfg), Err(Error::Config(_))));
    }
}
