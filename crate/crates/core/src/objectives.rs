//! Auxiliary MLM, corrective LM with copy mechanism, replaced token
//! detection, sequence contrastive loss and their per-mode totals.

use serde::{Deserialize, Serialize};

use crate::tensor::{sigmoid, softmax_slice, Graph, Tensor, Var};
use crate::{Error, Result};

pub const LM_PROB_FLOOR: f64 = 1e-12;

/// Pretraining objective, one per run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    #[default]
    FullCocolm,
    RtdOnly,
    ClmOnly,
    SclPlusRtd,
    AllTokenMlm,
    ClmNoCopy,
    ClmNoStopgrad,
}

/// Which language-modeling loss a mode trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmTerm {
    None,
    /// Masked positions, copy factors optionally detached.
    Masked {
        stopgrad: bool,
    },
    /// Every non-pad position, no detaching.
    AllTokens,
}

impl ObjectiveMode {
    pub const ALL: [ObjectiveMode; 7] = [
        ObjectiveMode::FullCocolm,
        ObjectiveMode::RtdOnly,
        ObjectiveMode::ClmOnly,
        ObjectiveMode::SclPlusRtd,
        ObjectiveMode::AllTokenMlm,
        ObjectiveMode::ClmNoCopy,
        ObjectiveMode::ClmNoStopgrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveMode::FullCocolm => "full_cocolm",
            ObjectiveMode::RtdOnly => "rtd_only",
            ObjectiveMode::ClmOnly => "clm_only",
            ObjectiveMode::SclPlusRtd => "scl_plus_rtd",
            ObjectiveMode::AllTokenMlm => "all_token_mlm",
            ObjectiveMode::ClmNoCopy => "clm_no_copy",
            ObjectiveMode::ClmNoStopgrad => "clm_no_stopgrad",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_scl(self) -> bool {
        matches!(
            self,
            ObjectiveMode::FullCocolm
                | ObjectiveMode::SclPlusRtd
                | ObjectiveMode::ClmNoCopy
                | ObjectiveMode::ClmNoStopgrad
        )
    }

    pub fn uses_copy_loss(self) -> bool {
        matches!(
            self,
            ObjectiveMode::FullCocolm | ObjectiveMode::ClmOnly | ObjectiveMode::ClmNoStopgrad
        )
    }

    pub fn uses_rtd(self) -> bool {
        matches!(self, ObjectiveMode::RtdOnly | ObjectiveMode::SclPlusRtd)
    }

    pub fn lm_term(self) -> LmTerm {
        match self {
            ObjectiveMode::FullCocolm | ObjectiveMode::ClmOnly | ObjectiveMode::ClmNoCopy => {
                LmTerm::Masked { stopgrad: true }
            }
            ObjectiveMode::ClmNoStopgrad => LmTerm::Masked { stopgrad: false },
            ObjectiveMode::AllTokenMlm => LmTerm::AllTokens,
            ObjectiveMode::RtdOnly | ObjectiveMode::SclPlusRtd => LmTerm::None,
        }
    }
}

impl std::fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar loss values of one step. In RTD modes `l_copy` holds the RTD loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mlm_aux: f64,
    pub l_copy: f64,
    pub l_lm: f64,
    pub l_scl: f64,
    pub total: f64,
    pub lambda_copy: f64,
}

/// `(p_copy(1), p_copy(0))` for a copy logit.
pub fn copy_prob(logit: f64) -> (f64, f64) {
    let p1 = sigmoid(logit);
    (p1, 1.0 - p1)
}

/// Full corrective distribution over the vocabulary at one position.
pub fn corrective_distribution(lm_logits: &[f64], copy_logit: f64, input_id: usize) -> Vec<f64> {
    let (p1, p0) = copy_prob(copy_logit);
    let mut p: Vec<f64> = softmax_slice(lm_logits).into_iter().map(|s| p0 * s).collect();
    p[input_id] += p1;
    p
}

/// Mean cross-entropy of `logits [n, V]` against `targets`.
pub fn mlm_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let ce = g.cross_entropy(logits, targets)?;
    Ok(g.mean(ce)?)
}

/// Mean binary cross-entropy with target 1 for copied (unreplaced) tokens.
pub fn copy_loss(g: &mut Graph, copy_logits: Var, replaced: &[bool]) -> Result<Var> {
    let targets: Vec<f64> = replaced.iter().map(|&r| if r { 0.0 } else { 1.0 }).collect();
    let bce = g.bce_with_logits(copy_logits, &targets)?;
    Ok(g.mean(bce)?)
}

/// Same loss as [`copy_loss`] on the separate detection head.
pub fn rtd_loss(g: &mut Graph, rtd_logits: Var, replaced: &[bool]) -> Result<Var> {
    copy_loss(g, rtd_logits, replaced)
}

/// `p_LM(target)` per row, with the copy factors detached when `stopgrad`.
pub fn corrective_lm_prob(
    g: &mut Graph,
    lm_logits: Var,
    copy_logits: Var,
    input_ids: &[usize],
    targets: &[usize],
    stopgrad: bool,
) -> Result<Var> {
    let n = targets.len();
    if input_ids.len() != n || g.shape(copy_logits) != [n] {
        return Err(Error::Data(format!(
            "corrective prob: {n} targets, {} inputs, copy logits {:?}",
            input_ids.len(),
            g.shape(copy_logits)
        )));
    }
    let p1 = g.sigmoid(copy_logits)?;
    let p1 = if stopgrad { g.stop_gradient(p1)? } else { p1 };
    let neg = g.scale(p1, -1.0)?;
    let p0 = g.add_scalar(neg, 1.0)?;
    let probs = g.softmax(lm_logits)?;
    let s = g.pick(probs, targets)?;
    let same: Vec<f64> = input_ids
        .iter()
        .zip(targets)
        .map(|(a, b)| f64::from(u8::from(a == b)))
        .collect();
    let copy = g.mul_const(p1, Tensor::vector(same))?;
    let gen = g.mul(p0, s)?;
    Ok(g.add(copy, gen)?)
}

#[derive(Clone, Copy, Debug)]
pub struct LmLoss {
    pub loss: Var,
    /// Rows whose probability was raised to the floor before the log.
    pub clamped: usize,
}

/// Mean `-log p_LM(target)` over the given rows.
pub fn lm_loss(
    g: &mut Graph,
    lm_logits: Var,
    copy_logits: Var,
    input_ids: &[usize],
    targets: &[usize],
    stopgrad: bool,
) -> Result<LmLoss> {
    let p = corrective_lm_prob(g, lm_logits, copy_logits, input_ids, targets, stopgrad)?;
    let clamped = g.value(p).data().iter().filter(|&&x| x < LM_PROB_FLOOR).count();
    let p = g.clamp_min(p, LM_PROB_FLOOR)?;
    let lp = g.log(p)?;
    let m = g.mean(lp)?;
    Ok(LmLoss {
        loss: g.scale(m, -1.0)?,
        clamped,
    })
}

/// In-batch contrastive loss over `2N` sequence embeddings. Row `k` and row
/// `k + N` are the two views of origin `k`; every other row is a negative.
/// Returns the mean over all `2N` anchors.
pub fn scl_loss(g: &mut Graph, embeddings: Var, tau: f64) -> Result<Var> {
    let shape = g.shape(embeddings).to_vec();
    if shape.len() != 2 || !shape[0].is_multiple_of(2) {
        return Err(Error::Data(format!("contrastive embeddings {shape:?}")));
    }
    let n = shape[0] / 2;
    if n < 2 {
        return Err(Error::ContrastBatchTooSmall(n));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let rows = 2 * n;
    let u = g.normalize_rows(embeddings)?;
    let sims = g.matmul(u, u, true)?;
    let sims = g.scale(sims, 1.0 / tau)?;
    // Self-similarity is excluded from the denominator.
    let mut diag = Tensor::zeros(&[rows, rows]);
    for i in 0..rows {
        diag.data_mut()[i * rows + i] = -1e30;
    }
    let diag = g.constant(diag)?;
    let masked = g.add(sims, diag)?;
    let ls = g.log_softmax(masked)?;
    let positives: Vec<usize> = (0..rows).map(|i| (i + n) % rows).collect();
    let lp = g.pick(ls, &positives)?;
    let m = g.mean(lp)?;
    Ok(g.scale(m, -1.0)?)
}

/// Loss graph nodes produced for one step; absent terms are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub mlm_aux: Option<Var>,
    /// Copy loss, or the RTD loss in RTD modes.
    pub copy: Option<Var>,
    pub lm: Option<Var>,
    pub scl: Option<Var>,
}

/// Sum the terms the mode trains: `l_mlm_aux + lambda * l_copy + l_lm + l_scl`.
pub fn total_loss(
    g: &mut Graph,
    mode: ObjectiveMode,
    terms: &LossTerms,
    lambda_copy: f64,
) -> Result<(Var, LossBreakdown)> {
    let missing = |what: &str| Error::Data(format!("mode {mode} needs the {what} loss"));
    let aux = terms.mlm_aux.ok_or_else(|| missing("auxiliary MLM"))?;
    let mut total = aux;
    let mut out = LossBreakdown {
        l_mlm_aux: g.value(aux).item(),
        lambda_copy,
        ..LossBreakdown::default()
    };
    if mode.uses_copy_loss() || mode.uses_rtd() {
        let c = terms.copy.ok_or_else(|| missing("copy/RTD"))?;
        out.l_copy = g.value(c).item();
        let w = g.scale(c, lambda_copy)?;
        total = g.add(total, w)?;
    }
    if mode.lm_term() != LmTerm::None {
        let l = terms.lm.ok_or_else(|| missing("language modeling"))?;
        out.l_lm = g.value(l).item();
        total = g.add(total, l)?;
    }
    if mode.uses_scl() {
        let s = terms.scl.ok_or_else(|| missing("contrastive"))?;
        out.l_scl = g.value(s).item();
        total = g.add(total, s)?;
    }
    out.total = g.value(total).item();
    Ok((total, out))
}
