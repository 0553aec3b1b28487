//! Copy and corrective-LM accuracy by token class, [CLS] cosine geometry,
//! pair-similarity histograms and embedding export.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::corpus::{crop, encode, pad_rows, SentencePair, TokenSequence, Vocabulary};
use crate::corruption::{corrupt_batch, CorruptionRecord};
use crate::encoder::{sequence_embedding, DualModel};
use crate::objectives::corrective_distribution;
use crate::tensor::{cosine_similarity, sigmoid, Graph, ParamStore, Tensor};
use crate::{Error, Result};

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.05;

/// Shortest decimal form of `x` rounded to 9 significant digits.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    rounded.to_string()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub copy_acc_replaced: Option<f64>,
    pub copy_acc_original: Option<f64>,
    pub clm_acc_replaced: Option<f64>,
    pub clm_acc_original: Option<f64>,
    pub mean_cos_positive: f64,
    pub mean_cos_negative: f64,
    pub alignment: f64,
    pub uniformity: f64,
}

impl MetricRecord {
    pub const CSV_HEADER: &'static str = "step,copy_acc_replaced,copy_acc_original,clm_acc_replaced,clm_acc_original,mean_cos_positive,mean_cos_negative,alignment,uniformity";

    /// One CSV line; missing accuracies are empty fields.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            fmt_opt(self.copy_acc_replaced),
            fmt_opt(self.copy_acc_original),
            fmt_opt(self.clm_acc_replaced),
            fmt_opt(self.clm_acc_original),
            fmt_sig(self.mean_cos_positive),
            fmt_sig(self.mean_cos_negative),
            fmt_sig(self.alignment),
            fmt_sig(self.uniformity)
        )
    }

    pub fn cosine_gap(&self) -> f64 {
        self.mean_cos_positive - self.mean_cos_negative
    }
}

fn fraction(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

/// `(acc_replaced, acc_original)`: an original token is right when
/// `p_copy(1) > 0.5`, a replaced one when `p_copy(1) <= 0.5`.
pub fn copy_accuracy(copy_probs: &[f64], replaced: &[bool]) -> (Option<f64>, Option<f64>) {
    let (mut rh, mut rn, mut oh, mut on) = (0, 0, 0, 0);
    for (&p, &r) in copy_probs.iter().zip(replaced) {
        if r {
            rn += 1;
            rh += usize::from(p <= 0.5);
        } else {
            on += 1;
            oh += usize::from(p > 0.5);
        }
    }
    (fraction(rh, rn), fraction(oh, on))
}

/// `(acc_replaced, acc_original)` of predicted ids against the originals.
pub fn clm_accuracy(predictions: &[usize], originals: &[usize], replaced: &[bool]) -> (Option<f64>, Option<f64>) {
    let (mut rh, mut rn, mut oh, mut on) = (0, 0, 0, 0);
    for ((&p, &o), &r) in predictions.iter().zip(originals).zip(replaced) {
        if r {
            rn += 1;
            rh += usize::from(p == o);
        } else {
            on += 1;
            oh += usize::from(p == o);
        }
    }
    (fraction(rh, rn), fraction(oh, on))
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::Data("zero embedding cannot be normalized".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance over positive pairs and log-mean Gaussian
/// potential over all pairs of `random`, all after L2 normalization.
pub fn alignment_uniformity(positives: &[(Vec<f64>, Vec<f64>)], random: &[Vec<f64>]) -> Result<(f64, f64)> {
    if random.len() < 2 {
        return Err(Error::Data(format!(
            "uniformity needs at least 2 embeddings, got {}",
            random.len()
        )));
    }
    let mut align = 0.0;
    for (u, v) in positives {
        align += sq_dist(&normalized(u)?, &normalized(v)?);
    }
    let align = if positives.is_empty() {
        f64::NAN
    } else {
        align / positives.len() as f64
    };
    let r: Vec<Vec<f64>> = random.iter().map(|v| normalized(v)).collect::<Result<_>>()?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            acc += (-2.0 * sq_dist(&r[i], &r[j])).exp();
            count += 1;
        }
    }
    Ok((align, (acc / count as f64).ln()))
}

/// Inference-mode `[CLS]` embeddings, `batch_size` sequences per pass.
pub fn embed_sequences(
    model: &DualModel,
    store: &ParamStore,
    sequences: &[TokenSequence],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(sequences.len());
    for chunk in sequences.chunks(batch_size.max(1)) {
        let rows: Vec<&[usize]> = chunk.iter().map(TokenSequence::ids).collect();
        let e = cls_embeddings(model, store, &rows)?;
        out.extend((0..e.rows()).map(|i| e.row(i).to_vec()));
    }
    Ok(out)
}

fn cls_embeddings(model: &DualModel, store: &ParamStore, rows: &[&[usize]]) -> Result<Tensor> {
    let batch = pad_rows(rows);
    let mut g = Graph::no_grad();
    let emb = g.param(store, model.embeddings)?;
    let h = model.main.encode::<ChaCha8Rng>(&mut g, store, emb, &batch, None)?;
    let cls = sequence_embedding(&mut g, h)?;
    Ok(g.value(cls).clone())
}

/// Per-batch raw outputs of the main model on corrupted inputs.
struct BatchOutputs {
    copy_probs: Vec<f64>,
    replaced: Vec<bool>,
    clm_pred: Vec<usize>,
    clm_orig: Vec<usize>,
    clm_replaced: Vec<bool>,
    cls_corrupted: Vec<Vec<f64>>,
    cls_crop: Vec<Vec<f64>>,
}

fn batch_outputs(
    model: &DualModel,
    store: &ParamStore,
    config: &Config,
    records: &[CorruptionRecord],
    crops: &[TokenSequence],
) -> Result<BatchOutputs> {
    let rows: Vec<&[usize]> = records.iter().map(|r| r.corrupted.as_slice()).collect();
    let batch = pad_rows(&rows);
    let mut g = Graph::no_grad();
    let emb = g.param(store, model.embeddings)?;
    let h = model.main.encode::<ChaCha8Rng>(&mut g, store, emb, &batch, None)?;
    let all: Vec<usize> = records
        .iter()
        .enumerate()
        .flat_map(|(b, r)| (0..r.len()).map(move |t| h.row(b, t)))
        .collect();
    let hs = g.gather_rows(h.var, &all)?;
    let z = if config.trainer.mode.uses_rtd() {
        model.rtd_head.logits(&mut g, store, hs)?
    } else {
        model.clm_head.copy_logits(&mut g, store, hs)?
    };
    let copy_probs: Vec<f64> = g.value(z).data().iter().map(|&x| sigmoid(x)).collect();
    let replaced: Vec<bool> = records.iter().flat_map(|r| r.replaced.iter().copied()).collect();

    let masked: Vec<usize> = records
        .iter()
        .enumerate()
        .flat_map(|(b, r)| r.mask_set.iter().map(move |&t| h.row(b, t)))
        .collect();
    let hm = g.gather_rows(h.var, &masked)?;
    let lm = model.clm_head.lm_logits(&mut g, emb, hm)?;
    let zc = model.clm_head.copy_logits(&mut g, store, hm)?;
    let (lm, zc) = (g.value(lm).clone(), g.value(zc).clone());
    let mut clm_pred = Vec::new();
    let mut clm_orig = Vec::new();
    let mut clm_replaced = Vec::new();
    let mut k = 0;
    for r in records {
        for &t in &r.mask_set {
            let p = corrective_distribution(lm.row(k), zc.data()[k], r.corrupted[t]);
            clm_pred.push(argmax(&p));
            clm_orig.push(r.original.ids()[t]);
            clm_replaced.push(r.replaced[t]);
            k += 1;
        }
    }
    let cls = sequence_embedding(&mut g, h)?;
    let cls = g.value(cls).clone();
    let crop_rows: Vec<&[usize]> = crops.iter().map(TokenSequence::ids).collect();
    let cc = cls_embeddings(model, store, &crop_rows)?;
    Ok(BatchOutputs {
        copy_probs,
        replaced,
        clm_pred,
        clm_orig,
        clm_replaced,
        cls_corrupted: (0..cls.rows()).map(|i| cls.row(i).to_vec()).collect(),
        cls_crop: (0..cc.rows()).map(|i| cc.row(i).to_vec()).collect(),
    })
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Corrupt and crop held-out `sequences` in batches of
/// `config.probe.batch_origins` and measure the main model. Positive pairs
/// are the two views of one origin, negatives every cross-origin pair of
/// views within a batch.
pub fn probe<R: Rng + ?Sized>(
    model: &DualModel,
    store: &ParamStore,
    config: &Config,
    sequences: &[TokenSequence],
    step: u64,
    rng: &mut R,
) -> Result<MetricRecord> {
    let take = sequences.len().min(config.probe.heldout_sequences);
    let n = config.probe.batch_origins;
    if take < 2 || n < 2 {
        return Err(Error::Data(format!(
            "probe needs at least 2 sequences and batches of 2, got {take} and {n}"
        )));
    }
    let mut copy_probs = Vec::new();
    let mut replaced = Vec::new();
    let mut pred = Vec::new();
    let mut orig = Vec::new();
    let mut clm_replaced = Vec::new();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut pairs = Vec::new();
    let mut crop_views = Vec::new();
    for chunk in sequences[..take].chunks(n) {
        let records = corrupt_batch(
            model,
            store,
            chunk,
            config.trainer.mask_rate,
            config.trainer.replacement,
            rng,
        )?;
        let mut crops = Vec::with_capacity(chunk.len());
        for s in chunk {
            crops.push(crop(s, config.trainer.crop_keep, rng)?.sequence);
        }
        let out = batch_outputs(model, store, config, &records, &crops)?;
        copy_probs.extend(out.copy_probs);
        replaced.extend(out.replaced);
        pred.extend(out.clm_pred);
        orig.extend(out.clm_orig);
        clm_replaced.extend(out.clm_replaced);
        let views: Vec<(usize, &Vec<f64>)> = out
            .cls_corrupted
            .iter()
            .enumerate()
            .chain(out.cls_crop.iter().enumerate())
            .collect();
        for k in 0..chunk.len() {
            pos.push(cosine_similarity(&out.cls_corrupted[k], &out.cls_crop[k])?);
            pairs.push((out.cls_corrupted[k].clone(), out.cls_crop[k].clone()));
        }
        for i in 0..views.len() {
            for j in i + 1..views.len() {
                if views[i].0 != views[j].0 {
                    neg.push(cosine_similarity(views[i].1, views[j].1)?);
                }
            }
        }
        crop_views.extend(out.cls_crop);
    }
    let (copy_acc_replaced, copy_acc_original) = copy_accuracy(&copy_probs, &replaced);
    let (clm_acc_replaced, clm_acc_original) = clm_accuracy(&pred, &orig, &clm_replaced);
    let (alignment, uniformity) = alignment_uniformity(&pairs, &crop_views)?;
    Ok(MetricRecord {
        step,
        copy_acc_replaced,
        copy_acc_original,
        clm_acc_replaced,
        clm_acc_original,
        mean_cos_positive: mean(&pos),
        mean_cos_negative: mean(&neg),
        alignment,
        uniformity,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairCosines {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Out-of-vocabulary words mapped to `[UNK]`.
    pub unknown_words: usize,
}

/// Cosine of the two sentences' `[CLS]` embeddings for every pair.
pub fn pair_cosines(
    model: &DualModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    pairs: &[SentencePair],
    batch_size: usize,
) -> Result<PairCosines> {
    let max_len = model.config().max_seq_len;
    let mut left = Vec::with_capacity(pairs.len());
    let mut right = Vec::with_capacity(pairs.len());
    let mut unknown_words = 0;
    for p in pairs {
        let (a, ua) = encode(vocab, &p.a, max_len)?;
        let (b, ub) = encode(vocab, &p.b, max_len)?;
        unknown_words += ua + ub;
        left.push(a);
        right.push(b);
    }
    let ea = embed_sequences(model, store, &left, batch_size)?;
    let eb = embed_sequences(model, store, &right, batch_size)?;
    let values = ea
        .iter()
        .zip(&eb)
        .map(|(a, b)| cosine_similarity(a, b))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(PairCosines {
        mean: mean(&values),
        values,
        unknown_words,
    })
}

/// Counts over bins of width 0.05 covering [-1, 1]; 1.0 falls in the last bin.
pub fn histogram(values: &[f64]) -> Vec<(f64, f64, usize)> {
    let bins = (2.0 / HISTOGRAM_BIN_WIDTH).round() as usize;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = ((v.clamp(-1.0, 1.0) + 1.0) / HISTOGRAM_BIN_WIDTH).floor() as usize;
        counts[i.min(bins - 1)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let lo = -1.0 + i as f64 * HISTOGRAM_BIN_WIDTH;
            (lo, lo + HISTOGRAM_BIN_WIDTH, c)
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// `pair,cosine` rows.
pub fn write_pair_cosines(path: &Path, cosines: &PairCosines) -> Result<()> {
    let mut s = String::from("pair,cosine\n");
    for (i, v) in cosines.values.iter().enumerate() {
        writeln!(s, "{i},{}", fmt_sig(*v)).expect("string write");
    }
    write_text(path, &s)
}

/// `bin_lo,bin_hi,count` rows.
pub fn write_histogram(path: &Path, values: &[f64]) -> Result<()> {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (lo, hi, c) in histogram(values) {
        writeln!(s, "{},{},{c}", fmt_sig(lo), fmt_sig(hi)).expect("string write");
    }
    write_text(path, &s)
}

/// One line per sentence: id, then every coordinate of its `[CLS]`
/// embedding at full precision, tab separated.
pub fn export_embeddings(
    model: &DualModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    sentences: &[String],
    batch_size: usize,
) -> Result<String> {
    let max_len = model.config().max_seq_len;
    let seqs = sentences
        .iter()
        .map(|s| encode(vocab, s, max_len).map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    let emb = embed_sequences(model, store, &seqs, batch_size)?;
    let mut s = String::new();
    for (i, e) in emb.iter().enumerate() {
        write!(s, "{i}").expect("string write");
        for x in e {
            write!(s, "\t{x}").expect("string write");
        }
        s.push('\n');
    }
    Ok(s)
}
