//! Invariants over random inputs.

use avsr::ae::energy_error;
use avsr::checkpoint::Archive;
use avsr::metrics::{corpus_wer, wer};
use avsr::msr::{Curriculum, Vocab};
use avsr::train::split;
use avsr::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["bat", "pat", "mat", "fan"]), 0..8)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn wer_counts_account_for_both_lengths(r in words(), h in words()) {
        prop_assume!(!r.is_empty());
        let b = wer(&r, &h).unwrap();
        prop_assert_eq!(b.ref_words - b.deletions + b.insertions, h.len());
        prop_assert!(b.errors() <= r.len().max(h.len()));
        prop_assert!(b.errors() >= r.len().abs_diff(h.len()));
        prop_assert_eq!(b.wer, b.errors() as f64 / r.len() as f64);
    }

    #[test]
    fn identical_transcripts_have_zero_wer(r in words()) {
        prop_assume!(!r.is_empty());
        prop_assert_eq!(wer(&r, &r).unwrap().errors(), 0);
        let text = r.join(" ");
        prop_assert_eq!(corpus_wer([(text.as_str(), text.as_str())]).unwrap(), 0.0);
    }

    #[test]
    fn energy_error_is_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let m = Tensor::uniform(&[5, 7], 1.0, &mut r);
        let mo = Tensor::uniform(&[5, 7], 1.0, &mut r).map(|x| x.abs() + 0.1);
        let a = energy_error(&m, &mo).unwrap();
        let b = energy_error(&m.scale(c), &mo.scale(c)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn split_partitions_the_items(n in 0usize..60, held in 0usize..70, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (train, test) = split(&items, held, seed);
        prop_assert_eq!(test.len(), held.min(n));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, items);
        prop_assert!(train.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn archives_round_trip_bit_exactly(
        tensors in prop::collection::vec(prop::collection::vec(any::<f64>(), 1..20), 0..5),
        key in "[a-z]{1,8}",
        value in "[ -~]{0,20}",
    ) {
        let mut a = Archive::new().with_meta(&key, &value);
        for (i, t) in tensors.iter().enumerate() {
            a.push(format!("t{i}"), Tensor::new(vec![t.len()], t.clone()).unwrap());
        }
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        let b = Archive::read_from(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(b.meta(&key).unwrap(), value.as_str());
        for (i, t) in tensors.iter().enumerate() {
            let got = b.get(&format!("t{i}")).unwrap();
            prop_assert!(got.data().iter().zip(t).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn vocabulary_round_trips_transcripts(text in "[a-z0-9']{1,6}( [a-z0-9']{1,6}){0,4}") {
        let seq = Vocab.encode(&text).unwrap();
        prop_assert_eq!(seq.text(), text.clone());
        prop_assert_eq!(seq.word_count(), text.split(' ').count());
    }

    #[test]
    fn curriculum_never_shrinks(start in 1usize..5, grow in 1usize..400, cap in prop::option::of(1usize..8), step in 0usize..5000) {
        let c = Curriculum { start_words: start, grow_every: grow, max_words: cap };
        prop_assert!(c.words_at(step + 1) >= c.words_at(step));
        if let Some(m) = cap {
            prop_assert!(c.words_at(step) <= m.max(start));
        }
    }
}
