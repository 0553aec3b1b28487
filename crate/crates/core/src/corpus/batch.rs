use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{CLS, PAD, SEP};
use crate::{Error, Result};

/// `[CLS] body [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    /// Wrap `body` with the boundary tokens, truncating it so the whole
    /// sequence fits in `max_len`.
    pub fn from_body(body: &[usize], max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::Config(format!(
                "max_seq_len {max_len} leaves no room for a body"
            )));
        }
        let keep = body.len().min(max_len - 2);
        let mut ids = Vec::with_capacity(keep + 2);
        ids.push(CLS);
        ids.extend_from_slice(&body[..keep]);
        ids.push(SEP);
        Ok(Self { ids })
    }

    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != CLS || ids[ids.len() - 1] != SEP {
            return Err(Error::Data("a sequence must be [CLS] body [SEP]".into()));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn body(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Same body truncated to fit `max_len`, with `[SEP]` re-appended.
    pub fn truncated(&self, max_len: usize) -> Result<Self> {
        Self::from_body(self.body(), max_len)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Crop {
    pub sequence: TokenSequence,
    pub start: usize,
    /// Set when the body was too short to crop and the input was returned.
    pub too_short: bool,
}

/// Number of body tokens kept by a crop.
pub fn crop_len(body_len: usize, keep_fraction: f64) -> usize {
    // The small slack absorbs representation error such as 0.9 * 20.
    (((keep_fraction * body_len as f64) - 1e-9).ceil() as usize).clamp(1, body_len)
}

/// A uniformly placed contiguous span of `ceil(keep_fraction * body_len)`
/// body tokens, re-wrapped with `[CLS]`/`[SEP]`.
pub fn crop<R: Rng + ?Sized>(x: &TokenSequence, keep_fraction: f64, rng: &mut R) -> Result<Crop> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "crop keep fraction {keep_fraction} outside (0, 1]"
        )));
    }
    let body = x.body();
    if body.len() < 2 {
        return Ok(Crop {
            sequence: x.clone(),
            start: 0,
            too_short: true,
        });
    }
    let len = crop_len(body.len(), keep_fraction);
    if len == body.len() {
        return Ok(Crop {
            sequence: x.clone(),
            start: 0,
            too_short: false,
        });
    }
    let start = rng.random_range(0..=body.len() - len);
    let sequence = TokenSequence::from_body(&body[start..start + len], usize::MAX)?;
    Ok(Crop {
        sequence,
        start,
        too_short: false,
    })
}

/// Right-padded id matrix `[batch, seq_len]` with a real-token mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

impl PaddedBatch {
    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.mask
            .chunks(self.seq_len)
            .map(|m| m.iter().filter(|&&x| x).count())
            .collect()
    }

    /// Flat row index of `(sequence, position)`.
    pub fn flat(&self, b: usize, t: usize) -> usize {
        b * self.seq_len + t
    }
}

/// Pad raw id rows (no boundary handling) to their common maximum length.
pub fn pad_rows(rows: &[&[usize]]) -> PaddedBatch {
    let seq_len = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(rows.len() * seq_len);
    let mut mask = Vec::with_capacity(rows.len() * seq_len);
    for r in rows {
        ids.extend_from_slice(r);
        mask.extend(std::iter::repeat_n(true, r.len()));
        ids.extend(std::iter::repeat_n(PAD, seq_len - r.len()));
        mask.extend(std::iter::repeat_n(false, seq_len - r.len()));
    }
    PaddedBatch {
        ids,
        mask,
        batch: rows.len(),
        seq_len,
    }
}

/// Pad sequences to the batch maximum, truncating any longer than `max_len`.
pub fn pad_batch(sequences: &[TokenSequence], max_len: usize) -> Result<PaddedBatch> {
    let fitted: Vec<TokenSequence> = sequences
        .iter()
        .map(|s| {
            if s.len() > max_len {
                s.truncated(max_len)
            } else {
                Ok(s.clone())
            }
        })
        .collect::<Result<_>>()?;
    let rows: Vec<&[usize]> = fitted.iter().map(|s| s.ids()).collect();
    Ok(pad_rows(&rows))
}

/// One shuffled epoch of padded batches. Every sequence appears exactly once;
/// the last batch may be smaller.
pub fn make_batches<R: Rng + ?Sized>(
    sequences: &[TokenSequence],
    batch_size: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<PaddedBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let seqs: Vec<TokenSequence> = chunk.iter().map(|&i| sequences[i].clone()).collect();
            pad_batch(&seqs, max_len)
        })
        .collect()
}

/// Epoch-based index sampler whose order is a pure function of
/// `(seed, epoch)`. Incomplete tail batches are skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSampler {
    num_items: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl BatchSampler {
    pub fn new(num_items: usize, seed: u64) -> Self {
        Self::restore(num_items, seed, 0, 0)
    }

    pub fn restore(num_items: usize, seed: u64, epoch: u64, cursor: usize) -> Self {
        Self {
            num_items,
            seed,
            epoch,
            cursor,
            order: Self::epoch_order(num_items, seed, epoch),
        }
    }

    fn epoch_order(num_items: usize, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch + 1);
        let mut order: Vec<usize> = (0..num_items).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn next_indices(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if batch_size == 0 || batch_size > self.num_items {
            return Err(Error::Config(format!(
                "batch of {batch_size} from {} sequences",
                self.num_items
            )));
        }
        if self.cursor + batch_size > self.num_items {
            self.epoch += 1;
            self.cursor = 0;
            self.order = Self::epoch_order(self.num_items, self.seed, self.epoch);
        }
        let out = self.order[self.cursor..self.cursor + batch_size].to_vec();
        self.cursor += batch_size;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(body: &[usize]) -> TokenSequence {
        TokenSequence::from_body(body, 64).unwrap()
    }

    #[test]
    fn crop_keeps_ninety_percent() {
        let x = seq(&[10, 11, 12, 13, 14, 15, 16, 17, 18, 19]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let c = crop(&x, 0.9, &mut rng).unwrap();
            assert_eq!(c.sequence.body().len(), 9);
            assert!(c.start <= 1);
            assert_eq!(c.sequence.body(), &x.body()[c.start..c.start + 9]);
        }
    }

    #[test]
    fn crop_length_is_exact_ceil() {
        assert_eq!(crop_len(20, 0.9), 18);
        assert_eq!(crop_len(10, 0.9), 9);
        assert_eq!(crop_len(3, 0.9), 3);
        assert_eq!(crop_len(7, 0.5), 4);
    }

    #[test]
    fn crop_identity_and_short_bodies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = seq(&[7, 8, 9]);
        let c = crop(&x, 1.0, &mut rng).unwrap();
        assert_eq!(c.sequence, x);
        assert!(!c.too_short);
        let short = seq(&[7]);
        let c = crop(&short, 0.5, &mut rng).unwrap();
        assert!(c.too_short);
        assert_eq!(c.sequence, short);
        assert!(crop(&x, 0.0, &mut rng).is_err());
    }

    #[test]
    fn padding_to_batch_max() {
        let a = TokenSequence::from_ids(vec![CLS, 5, 6, 7, SEP]).unwrap();
        let b = TokenSequence::from_ids(vec![CLS, 5, SEP]).unwrap();
        let batch = pad_batch(&[a, b], 6).unwrap();
        assert_eq!((batch.batch, batch.seq_len), (2, 5));
        assert_eq!(batch.lengths(), vec![5, 3]);
        assert_eq!(batch.row(1), &[CLS, 5, SEP, PAD, PAD]);
    }

    #[test]
    fn long_sequences_are_truncated_with_sep() {
        let long = seq(&[5, 6, 7, 8, 9, 10]);
        let batch = pad_batch(&[long], 5).unwrap();
        assert_eq!(batch.row(0), &[CLS, 5, 6, 7, SEP]);
    }

    #[test]
    fn same_seed_same_batches() {
        let seqs: Vec<_> = (0..10).map(|i| seq(&[5 + i])).collect();
        let a = make_batches(&seqs, 3, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = make_batches(&seqs, 3, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn sampler_restore_continues_identically() {
        let mut s = BatchSampler::new(10, 9);
        let mut seen = Vec::new();
        for _ in 0..7 {
            seen.push(s.next_indices(3).unwrap());
        }
        let mut a = s.clone();
        let mut b = BatchSampler::restore(10, 9, s.epoch(), s.cursor());
        for _ in 0..5 {
            assert_eq!(a.next_indices(3).unwrap(), b.next_indices(3).unwrap());
        }
        // within an epoch no index repeats
        let first: Vec<usize> = seen[..3].concat();
        let set: std::collections::HashSet<_> = first.iter().collect();
        assert_eq!(set.len(), 9);
    }
}
