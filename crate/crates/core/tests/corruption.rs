mod common;

use cocolm::corpus::{TokenSequence, CLS, MASK, NUM_SPECIAL, PAD};
use cocolm::corruption::{
    corrupt_batch, in_sampling_support, mask_count, replace_from_logits, sample_mask_positions, sample_token,
    CorruptionRecord, Replacement,
};
use cocolm::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_record(r: &CorruptionRecord, vocab: usize) {
    let orig = r.original.ids();
    let len = orig.len();
    assert_eq!(r.mask_set.len(), mask_count(len, 0.15));
    assert!(r.mask_set.windows(2).all(|w| w[0] < w[1]));
    assert!(!r.mask_set.contains(&0));
    for t in 0..len {
        let masked = r.mask_set.contains(&t);
        if masked {
            assert_eq!(r.aux_input[t], MASK);
            assert!(in_sampling_support(r.corrupted[t]) && r.corrupted[t] < vocab);
        } else {
            assert_eq!(r.aux_input[t], orig[t]);
            assert_eq!(r.corrupted[t], orig[t]);
        }
        assert_eq!(r.replaced[t], r.corrupted[t] != orig[t]);
        assert!(!r.replaced[t] || masked);
        assert_ne!(r.corrupted[t], MASK);
    }
}

#[test]
fn auxiliary_corruptions_respect_every_invariant() {
    let (config, data) = common::micro(3);
    let (model, store) = common::model(&config, data.vocab.len());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut count = 0;
    for chunk in data.train.chunks(8).cycle().take(250) {
        let records = corrupt_batch(&model, &store, chunk, 0.15, Replacement::Auxiliary, &mut rng).unwrap();
        for r in &records {
            check_record(r, data.vocab.len());
            count += 1;
        }
    }
    assert!(count >= 1000);
}

#[test]
fn mask_count_is_the_rounded_rate() {
    for len in 4..200 {
        assert_eq!(mask_count(len, 0.15), (0.15 * len as f64).round() as usize, "len {len}");
    }
    assert_eq!(mask_count(3, 0.15), 1);
    assert_eq!(mask_count(2, 0.15), 1);
    assert_eq!(mask_count(20, 0.15), 3);
}

#[test]
fn mask_positions_are_uniform_over_non_cls_positions() {
    let seq = TokenSequence::from_ids(vec![
        CLS, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 3,
    ])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 40_000;
    let mut hits = vec![0usize; seq.len()];
    for _ in 0..trials {
        for p in sample_mask_positions(&seq, 0.15, &mut rng).unwrap() {
            hits[p] += 1;
        }
    }
    assert_eq!(hits[0], 0);
    let p = 3.0 / 19.0;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    for &h in &hits[1..] {
        assert!((h as f64 - trials as f64 * p).abs() < 5.0 * sd, "{hits:?}");
    }
}

#[test]
fn sampled_tokens_follow_the_restricted_softmax() {
    let logits = [2.0, 0.5, 1.5, -0.3, 1.0, 0.0, 0.7, -1.2];
    let restricted: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(t, &z)| if in_sampling_support(t) { z } else { f64::NEG_INFINITY })
        .collect();
    let expected = common::softmax(&restricted);
    assert_eq!(expected[PAD], 0.0);
    assert_eq!(expected[MASK], 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let trials = 200_000;
    let mut counts = [0usize; 8];
    for _ in 0..trials {
        counts[sample_token(&logits, &mut rng)] += 1;
    }
    for t in 0..8 {
        let p = expected[t];
        let sd = (trials as f64 * p * (1.0 - p)).sqrt().max(1.0);
        assert!(
            (counts[t] as f64 - trials as f64 * p).abs() < 5.0 * sd,
            "token {t}: {counts:?}"
        );
    }
}

#[test]
fn replacement_rate_equals_one_minus_the_original_probability() {
    let original = TokenSequence::from_ids(vec![CLS, 5, 6, 7, 3]).unwrap();
    let logits = Tensor::new(vec![1, 8], vec![0.0, 0.2, 0.0, 0.4, 0.0, 1.1, 2.0, -0.5]).unwrap();
    let restricted: Vec<f64> = logits
        .data()
        .iter()
        .enumerate()
        .map(|(t, &z)| if in_sampling_support(t) { z } else { f64::NEG_INFINITY })
        .collect();
    let expected = 1.0 - common::softmax_at(&restricted, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let trials = 100_000;
    let mut replaced = 0;
    for _ in 0..trials {
        let mut rec = vec![CorruptionRecord::masked(original.clone(), vec![2])];
        replace_from_logits(&mut rec, &logits, &mut rng).unwrap();
        replaced += rec[0].num_replaced();
    }
    let sd = (trials as f64 * expected * (1.0 - expected)).sqrt();
    assert!((replaced as f64 - trials as f64 * expected).abs() < 5.0 * sd);
}

#[test]
fn random_replacement_rate_is_one_minus_inverse_support() {
    let (mut config, data) = common::micro(8);
    config.trainer.replacement = Replacement::Random;
    let (model, store) = common::model(&config, data.vocab.len());
    let ordinary = data.vocab.len() - NUM_SPECIAL;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut masked, mut replaced) = (0usize, 0usize);
    for _ in 0..400 {
        let records = corrupt_batch(&model, &store, &data.train[..16], 0.15, Replacement::Random, &mut rng).unwrap();
        for r in &records {
            check_record(r, data.vocab.len());
            for &t in &r.mask_set {
                if r.original.ids()[t] >= NUM_SPECIAL {
                    masked += 1;
                    replaced += usize::from(r.replaced[t]);
                }
            }
        }
    }
    let p = 1.0 - 1.0 / ordinary as f64;
    let sd = (masked as f64 * p * (1.0 - p)).sqrt();
    assert!(
        (replaced as f64 - masked as f64 * p).abs() < 5.0 * sd,
        "{replaced}/{masked} vs {p}"
    );
}

#[test]
fn corruption_is_reproducible_from_the_seed() {
    let (config, data) = common::micro(10);
    let (model, store) = common::model(&config, data.vocab.len());
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        corrupt_batch(&model, &store, &data.train[..6], 0.15, Replacement::Auxiliary, &mut rng).unwrap()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn degenerate_inputs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seq = TokenSequence::from_ids(vec![CLS, 5, 3]).unwrap();
    assert!(sample_mask_positions(&seq, 0.0, &mut rng).is_err());
    assert!(sample_mask_positions(&seq, 1.0, &mut rng).is_err());
    let logits = Tensor::zeros(&[2, 8]);
    let mut rec = vec![CorruptionRecord::masked(seq, vec![1])];
    assert!(replace_from_logits(&mut rec, &logits, &mut rng).is_err());
}

proptest! {
    #[test]
    fn random_sequences_satisfy_the_invariants(seed in any::<u64>(), body in 1usize..40, rate in 0.05f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = vec![CLS];
        ids.extend((0..body).map(|_| rng.random_range(NUM_SPECIAL..30)));
        ids.push(3);
        let seq = TokenSequence::from_ids(ids).unwrap();
        let m = sample_mask_positions(&seq, rate, &mut rng).unwrap();
        prop_assert_eq!(m.len(), mask_count(seq.len(), rate));
        let logits = Tensor::new(
            vec![m.len(), 30],
            (0..m.len() * 30).map(|_| rng.random_range(-2.0..2.0)).collect(),
        ).unwrap();
        let mut rec = vec![CorruptionRecord::masked(seq, m)];
        replace_from_logits(&mut rec, &logits, &mut rng).unwrap();
        let r = &rec[0];
        for t in 0..r.len() {
            prop_assert_eq!(r.replaced[t], r.corrupted[t] != r.original.ids()[t]);
            prop_assert!(r.mask_set.contains(&t) || r.corrupted[t] == r.original.ids()[t]);
            prop_assert!(r.corrupted[t] != MASK && r.corrupted[t] != PAD);
        }
    }
}
