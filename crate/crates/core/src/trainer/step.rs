use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{NoCopyVariant, TrainerConfig};
use crate::corpus::{crop, pad_rows, TokenSequence};
use crate::corruption::{corrupt_batch, CorruptionRecord};
use crate::encoder::{sequence_embedding, DualModel, Hidden};
use crate::objectives::{
    copy_loss, lm_loss, mlm_loss, rtd_loss, scl_loss, total_loss, LmTerm, LossBreakdown, LossTerms, ObjectiveMode,
};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::Result;

/// Learning rate of update `step` (1-based): linear warmup from 0 to the
/// peak, then linear decay to 0 at the last step.
pub fn lr_at(step: u64, config: &TrainerConfig) -> f64 {
    let (peak, warm, total) = (config.lr_peak, config.warmup_steps, config.steps);
    if warm > 0 && step <= warm {
        return peak * step as f64 / warm as f64;
    }
    if step >= total {
        return 0.0;
    }
    peak * (total - step) as f64 / (total - warm) as f64
}

/// Everything random about one step, drawn before any differentiable pass.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub records: Vec<CorruptionRecord>,
    pub crops: Vec<TokenSequence>,
    pub dropout_seed: u64,
}

impl PreparedBatch {
    pub fn replaced_fraction(&self) -> f64 {
        let masked: usize = self.records.iter().map(|r| r.mask_set.len()).sum();
        let replaced: usize = self.records.iter().map(CorruptionRecord::num_replaced).sum();
        replaced as f64 / masked.max(1) as f64
    }
}

/// Mask and corrupt `originals` with the auxiliary model, crop them, and
/// draw the dropout seed.
pub fn prepare_batch<R: Rng + ?Sized>(
    model: &DualModel,
    store: &ParamStore,
    originals: &[TokenSequence],
    config: &TrainerConfig,
    rng: &mut R,
) -> Result<PreparedBatch> {
    let records = corrupt_batch(model, store, originals, config.mask_rate, config.replacement, rng)?;
    let mut crops = Vec::with_capacity(originals.len());
    for s in originals {
        crops.push(crop(s, config.crop_keep, rng)?.sequence);
    }
    Ok(PreparedBatch {
        records,
        crops,
        dropout_seed: rng.random(),
    })
}

/// Loss graph of one prepared batch.
pub struct ForwardPass {
    pub graph: Graph,
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// The individual loss nodes, for differentiating one term alone.
    pub terms: LossTerms,
    /// Masked positions whose `p_LM` hit the log floor.
    pub clamped: usize,
}

/// Row indices of every non-pad position of the first `n` sequences.
fn token_rows(hidden: &Hidden, records: &[CorruptionRecord]) -> Vec<usize> {
    records
        .iter()
        .enumerate()
        .flat_map(|(b, r)| (0..r.len()).map(move |t| hidden.row(b, t)))
        .collect()
}

fn masked_rows(hidden: &Hidden, records: &[CorruptionRecord]) -> Vec<usize> {
    records
        .iter()
        .enumerate()
        .flat_map(|(b, r)| r.mask_set.iter().map(move |&t| hidden.row(b, t)))
        .collect()
}

/// Forward every loss term of `mode`. Dropout is on iff `train`, with masks
/// drawn from the batch's dropout seed so repeated calls agree exactly.
pub fn forward_loss(
    model: &DualModel,
    store: &ParamStore,
    batch: &PreparedBatch,
    config: &TrainerConfig,
    train: bool,
    want_grad: bool,
) -> Result<ForwardPass> {
    let g = if want_grad { Graph::new() } else { Graph::no_grad() };
    forward_loss_in(g, model, store, batch, config, train)
}

/// [`forward_loss`] recorded on a caller-supplied graph.
pub fn forward_loss_in(
    mut g: Graph,
    model: &DualModel,
    store: &ParamStore,
    batch: &PreparedBatch,
    config: &TrainerConfig,
    train: bool,
) -> Result<ForwardPass> {
    let mode = config.mode;
    let mut drng = ChaCha8Rng::seed_from_u64(batch.dropout_seed);
    let records = &batch.records;
    let emb = g.param(store, model.embeddings)?;

    let aux_rows: Vec<&[usize]> = records.iter().map(|r| r.aux_input.as_slice()).collect();
    let aux_batch = pad_rows(&aux_rows);
    let h_aux = model
        .aux
        .encode(&mut g, store, emb, &aux_batch, train.then_some(&mut drng))?;
    let picks = masked_rows(&h_aux, records);
    let h_m = g.gather_rows(h_aux.var, &picks)?;
    let aux_logits = model.mlm_head.logits(&mut g, store, emb, h_m)?;
    let targets: Vec<usize> = records
        .iter()
        .flat_map(|r| r.mask_set.iter().map(|&t| r.original.ids()[t]))
        .collect();
    let mut terms = LossTerms {
        mlm_aux: Some(mlm_loss(&mut g, aux_logits, &targets)?),
        ..LossTerms::default()
    };

    let mut main_rows: Vec<&[usize]> = records.iter().map(|r| r.corrupted.as_slice()).collect();
    if mode.uses_scl() {
        main_rows.extend(batch.crops.iter().map(|c| c.ids()));
    }
    let main_batch = pad_rows(&main_rows);
    let h = model
        .main
        .encode(&mut g, store, emb, &main_batch, train.then_some(&mut drng))?;

    let all_rows = token_rows(&h, records);
    let replaced_all: Vec<bool> = records.iter().flat_map(|r| r.replaced.iter().copied()).collect();
    if mode.uses_copy_loss() {
        let hs = g.gather_rows(h.var, &all_rows)?;
        let z = model.clm_head.copy_logits(&mut g, store, hs)?;
        terms.copy = Some(copy_loss(&mut g, z, &replaced_all)?);
    } else if mode.uses_rtd() {
        let hs = g.gather_rows(h.var, &all_rows)?;
        let z = model.rtd_head.logits(&mut g, store, hs)?;
        terms.copy = Some(rtd_loss(&mut g, z, &replaced_all)?);
    }

    let mut clamped = 0;
    let lm_positions = match mode.lm_term() {
        LmTerm::None => None,
        LmTerm::Masked { stopgrad } => Some((masked_rows(&h, records), stopgrad, true)),
        LmTerm::AllTokens => Some((all_rows.clone(), false, false)),
    };
    if let Some((rows, stopgrad, masked_only)) = lm_positions {
        let (inputs, lm_targets): (Vec<usize>, Vec<usize>) = if masked_only {
            records
                .iter()
                .flat_map(|r| r.mask_set.iter().map(|&t| (r.corrupted[t], r.original.ids()[t])))
                .unzip()
        } else {
            records
                .iter()
                .flat_map(|r| r.corrupted.iter().copied().zip(r.original.ids().iter().copied()))
                .unzip()
        };
        let hs = g.gather_rows(h.var, &rows)?;
        let lm_logits = model.clm_head.lm_logits(&mut g, emb, hs)?;
        let drop_mechanism = mode == ObjectiveMode::ClmNoCopy && config.no_copy_variant == NoCopyVariant::DropMechanism;
        terms.lm = Some(if drop_mechanism {
            mlm_loss(&mut g, lm_logits, &lm_targets)?
        } else {
            let z = model.clm_head.copy_logits(&mut g, store, hs)?;
            let out = lm_loss(&mut g, lm_logits, z, &inputs, &lm_targets, stopgrad)?;
            clamped = out.clamped;
            out.loss
        });
    }

    if mode.uses_scl() {
        let cls = sequence_embedding(&mut g, h)?;
        terms.scl = Some(scl_loss(&mut g, cls, config.tau)?);
    }

    let (total, breakdown) = total_loss(&mut g, mode, &terms, config.lambda_copy)?;
    Ok(ForwardPass {
        graph: g,
        total,
        breakdown,
        terms,
        clamped,
    })
}

/// Loss value and gradient of every parameter for one prepared batch.
pub fn loss_and_grads(
    model: &DualModel,
    store: &ParamStore,
    batch: &PreparedBatch,
    config: &TrainerConfig,
) -> Result<(ForwardPass, Vec<Tensor>)> {
    let pass = forward_loss(model, store, batch, config, true, true)?;
    let grads = pass.graph.backward(pass.total)?.for_params(store);
    Ok((pass, grads))
}
