//! Masking and the sampled corruption `X^MLM` built from the auxiliary model.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{pad_rows, TokenSequence, CLS, MASK, NUM_SPECIAL, PAD};
use crate::encoder::DualModel;
use crate::tensor::{softmax_slice, Graph, ParamStore, Tensor};
use crate::{Error, Result};

/// How masked positions are refilled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    /// Sample from the auxiliary model's MLM distribution.
    #[default]
    Auxiliary,
    /// Uniform over ordinary (non-special) tokens.
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorruptionRecord {
    pub original: TokenSequence,
    /// Sorted masked positions.
    pub mask_set: Vec<usize>,
    pub aux_input: Vec<usize>,
    pub corrupted: Vec<usize>,
    pub replaced: Vec<bool>,
}

impl CorruptionRecord {
    /// Record with `[MASK]` in the aux input and the corrupted ids not yet
    /// sampled (equal to the original).
    pub fn masked(original: TokenSequence, mask_set: Vec<usize>) -> Self {
        let mut aux_input = original.ids().to_vec();
        for &i in &mask_set {
            aux_input[i] = MASK;
        }
        let corrupted = original.ids().to_vec();
        let replaced = vec![false; corrupted.len()];
        Self {
            original,
            mask_set,
            aux_input,
            corrupted,
            replaced,
        }
    }

    pub fn len(&self) -> usize {
        self.corrupted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corrupted.is_empty()
    }

    fn set(&mut self, position: usize, token: usize) {
        self.corrupted[position] = token;
        self.replaced[position] = token != self.original.ids()[position];
    }

    pub fn num_replaced(&self) -> usize {
        self.replaced.iter().filter(|&&r| r).count()
    }
}

/// `max(1, round(mask_rate * len))`, capped at the number of maskable positions.
pub fn mask_count(len: usize, mask_rate: f64) -> usize {
    let n = (mask_rate * len as f64).round() as usize;
    n.max(1).min(len.saturating_sub(1))
}

/// Distinct positions drawn uniformly from `1..len`; `[CLS]` at 0 is never masked.
pub fn sample_mask_positions<R: Rng + ?Sized>(seq: &TokenSequence, mask_rate: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::Config(format!("mask_rate {mask_rate} outside (0, 1)")));
    }
    let len = seq.len();
    if len < 2 {
        return Err(Error::Data("sequence has no maskable position".into()));
    }
    let mut positions: Vec<usize> = index::sample(rng, len - 1, mask_count(len, mask_rate))
        .into_iter()
        .map(|i| i + 1)
        .collect();
    positions.sort_unstable();
    Ok(positions)
}

/// Whether `token` may be drawn as a replacement.
pub fn in_sampling_support(token: usize) -> bool {
    token != PAD && token != CLS && token != MASK
}

/// Multinomial draw from `softmax(logits)` restricted to the sampling support.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let restricted: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(t, &z)| if in_sampling_support(t) { z } else { f64::NEG_INFINITY })
        .collect();
    let probs = softmax_slice(&restricted);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (t, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = t;
            if u < acc {
                return t;
            }
        }
    }
    last
}

/// Fill the masked positions of `records` from per-position logits, given
/// in record order then position order (`[total masked, vocab]`).
pub fn replace_from_logits<R: Rng + ?Sized>(
    records: &mut [CorruptionRecord],
    logits: &Tensor,
    rng: &mut R,
) -> Result<()> {
    let total: usize = records.iter().map(|r| r.mask_set.len()).sum();
    if logits.rank() != 2 || logits.shape()[0] != total {
        return Err(Error::Data(format!(
            "{total} masked positions, logits {:?}",
            logits.shape()
        )));
    }
    let mut row = 0;
    for r in records.iter_mut() {
        for k in 0..r.mask_set.len() {
            let token = sample_token(logits.row(row), rng);
            let pos = r.mask_set[k];
            r.set(pos, token);
            row += 1;
        }
    }
    Ok(())
}

/// Uniform ordinary-token replacements at the masked positions.
pub fn random_replacements<R: Rng + ?Sized>(
    record: &mut CorruptionRecord,
    vocab_size: usize,
    rng: &mut R,
) -> Result<()> {
    if vocab_size <= NUM_SPECIAL {
        return Err(Error::Config("vocabulary has no ordinary tokens".into()));
    }
    for k in 0..record.mask_set.len() {
        let pos = record.mask_set[k];
        record.set(pos, rng.random_range(NUM_SPECIAL..vocab_size));
    }
    Ok(())
}

/// Auxiliary MLM logits at every masked position of `records`, from an
/// inference pass (dropout off, no gradient).
pub fn aux_logits(model: &DualModel, store: &ParamStore, records: &[CorruptionRecord]) -> Result<Tensor> {
    let rows: Vec<&[usize]> = records.iter().map(|r| r.aux_input.as_slice()).collect();
    let batch = pad_rows(&rows);
    let mut g = Graph::no_grad();
    let emb = g.param(store, model.embeddings)?;
    let h = model
        .aux
        .encode::<rand_chacha::ChaCha8Rng>(&mut g, store, emb, &batch, None)?;
    let picks: Vec<usize> = records
        .iter()
        .enumerate()
        .flat_map(|(b, r)| r.mask_set.iter().map(move |&t| b * batch.seq_len + t))
        .collect();
    let hm = g.gather_rows(h.var, &picks)?;
    let logits = model.mlm_head.logits(&mut g, store, emb, hm)?;
    Ok(g.value(logits).clone())
}

/// Mask every sequence and refill the masks. All masks are drawn before any
/// replacement.
pub fn corrupt_batch<R: Rng + ?Sized>(
    model: &DualModel,
    store: &ParamStore,
    originals: &[TokenSequence],
    mask_rate: f64,
    replacement: Replacement,
    rng: &mut R,
) -> Result<Vec<CorruptionRecord>> {
    let mut records = Vec::with_capacity(originals.len());
    for s in originals {
        let m = sample_mask_positions(s, mask_rate, rng)?;
        records.push(CorruptionRecord::masked(s.clone(), m));
    }
    match replacement {
        Replacement::Auxiliary => {
            let logits = aux_logits(model, store, &records)?;
            replace_from_logits(&mut records, &logits, rng)?;
        }
        Replacement::Random => {
            for r in &mut records {
                random_replacements(r, model.vocab_size(), rng)?;
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(len: usize) -> TokenSequence {
        TokenSequence::from_body(&(0..len - 2).map(|i| 5 + i).collect::<Vec<_>>(), 512).unwrap()
    }

    #[test]
    fn mask_counts() {
        assert_eq!(mask_count(20, 0.15), 3);
        assert_eq!(mask_count(4, 0.15), 1);
        assert_eq!(mask_count(2, 0.15), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask_positions(&seq(20), 0.15, &mut rng).unwrap().len(), 3);
        assert!(sample_mask_positions(&seq(20), 1.0, &mut rng).is_err());
    }

    #[test]
    fn one_hot_logits_reproduce_the_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = seq(12);
        let m = sample_mask_positions(&s, 0.3, &mut rng).unwrap();
        let mut recs = vec![CorruptionRecord::masked(s.clone(), m.clone())];
        let v = 20;
        let mut data = vec![-1e6; m.len() * v];
        for (k, &p) in m.iter().enumerate() {
            data[k * v + s.ids()[p]] = 50.0;
        }
        replace_from_logits(&mut recs, &Tensor::new(vec![m.len(), v], data).unwrap(), &mut rng).unwrap();
        assert_eq!(recs[0].corrupted, s.ids());
        assert_eq!(recs[0].num_replaced(), 0);
        for &p in &m {
            assert_eq!(recs[0].aux_input[p], MASK);
        }
    }

    #[test]
    fn excluded_specials_are_never_drawn() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut logits = vec![0.0; 8];
        logits[PAD] = 30.0;
        logits[CLS] = 30.0;
        logits[MASK] = 30.0;
        for _ in 0..1000 {
            assert!(in_sampling_support(sample_token(&logits, &mut rng)));
        }
    }
}
