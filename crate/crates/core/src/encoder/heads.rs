use rand::Rng;

use super::transformer::{normal_matrix, LayerNormParams, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::Result;

/// Auxiliary MLM head: dense projection, GELU and LayerNorm, then inner
/// products with the shared embeddings plus a vocabulary bias.
#[derive(Clone, Debug)]
pub struct MlmHead {
    dense: Linear,
    ln: LayerNormParams,
    bias: ParamId,
}

impl MlmHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            dense: Linear::new(store, &format!("{prefix}.dense"), d, d, rng)?,
            ln: LayerNormParams::new(store, &format!("{prefix}.ln"), d)?,
            bias: store.add(format!("{prefix}.vocab_bias"), Tensor::zeros(&[vocab]), false)?,
        })
    }

    /// The projected representation fed to the output layer.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let y = self.dense.apply(g, store, h)?;
        let y = g.gelu(y)?;
        self.ln.apply(g, store, y)
    }

    /// Logits `[rows, vocab]` for hidden rows `h`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, embeddings: Var, h: Var) -> Result<Var> {
        let y = self.project(g, store, h)?;
        let logits = g.matmul(y, embeddings, true)?;
        let bias = g.param(store, self.bias)?;
        Ok(g.add_broadcast(logits, bias)?)
    }
}

/// Main CLM head: LM layer tied to the embeddings with no projection, and a
/// copy-score vector.
#[derive(Clone, Debug)]
pub struct ClmHead {
    w_copy: ParamId,
}

impl ClmHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w_copy: store.add(format!("{prefix}.w_copy"), normal_matrix(rng, &[d, 1]), true)?,
        })
    }

    pub fn w_copy(&self) -> ParamId {
        self.w_copy
    }

    pub fn lm_logits(&self, g: &mut Graph, embeddings: Var, h: Var) -> Result<Var> {
        Ok(g.matmul(h, embeddings, true)?)
    }

    /// `w_copy^T h_i` per row, shape `[rows]`.
    pub fn copy_logits(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let w = g.param(store, self.w_copy)?;
        let z = g.matmul(h, w, false)?;
        let n = g.shape(z)[0];
        Ok(g.reshape(z, vec![n])?)
    }
}

/// Replaced-token-detection head, `w_rtd^T h_i + b` per row.
#[derive(Clone, Debug)]
pub struct RtdHead {
    w: ParamId,
    b: ParamId,
}

impl RtdHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{prefix}.w"), normal_matrix(rng, &[d, 1]), true)?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[1]), false)?,
        })
    }

    pub fn params(&self) -> (ParamId, ParamId) {
        (self.w, self.b)
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let z = g.matmul(h, w, false)?;
        let z = g.add_broadcast(z, b)?;
        let n = g.shape(z)[0];
        Ok(g.reshape(z, vec![n])?)
    }
}
