//! Knowledge transfer attention: a per-task query embedding attends over the
//! knowledge-base outputs of similar earlier tasks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::kb::Mode;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KtaBlock {
    pub task_id: usize,
    width: usize,
    heads: usize,
    dropout: f64,
    classes: usize,
    query_emb: ParamId,
    theta_q: ParamId,
    theta_k: ParamId,
    theta_v: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Result of [`KtaBlock::attend`].
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    /// Node holding the attention weights (`[row][head][source]`).
    pub attention: Var,
}

impl KtaBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        task_id: usize,
        width: usize,
        heads: usize,
        dropout: f64,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {width} is not divisible by {heads} heads")));
        }
        Ok(Self {
            task_id,
            width,
            heads,
            dropout,
            classes,
            query_emb: store.add(Tensor::uniform(1, width, 1.0, rng)),
            theta_q: store.add(Tensor::glorot(width, width, rng)),
            theta_k: store.add(Tensor::glorot(width, width, rng)),
            theta_v: store.add(Tensor::glorot(width, width, rng)),
            ln_gain: store.add(Tensor::filled(1, width, 1.0)),
            ln_bias: store.add(Tensor::zeros(1, width)),
            head_w: store.add(Tensor::glorot(width, classes, rng)),
            head_b: store.add(Tensor::zeros(1, classes)),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.query_emb,
            self.theta_q,
            self.theta_k,
            self.theta_v,
            self.ln_gain,
            self.ln_bias,
            self.head_w,
            self.head_b,
        ]
    }

    /// `(query embedding, θ_q, θ_k, θ_v, layer-norm gain, layer-norm bias)`.
    pub fn attention_params(&self) -> [ParamId; 6] {
        [
            self.query_emb,
            self.theta_q,
            self.theta_k,
            self.theta_v,
            self.ln_gain,
            self.ln_bias,
        ]
    }

    fn leaf(g: &mut Graph, id: ParamId, mode: Mode) -> Var {
        match mode {
            Mode::Frozen => g.frozen(id),
            _ => g.param(id),
        }
    }

    /// Attention over `similar` (each `batch × width`), scaled by
    /// `1/√(number of similar tasks)`, then dropout and layer norm.
    pub fn attend(&self, g: &mut Graph, similar: &[Var], mode: Mode, rng: &mut Rng) -> Result<Attended> {
        if similar.is_empty() {
            return Err(Error::Input(format!(
                "task {} has no similar predecessors to attend over",
                self.task_id
            )));
        }
        let e = Self::leaf(g, self.query_emb, mode);
        let tq = Self::leaf(g, self.theta_q, mode);
        let tk = Self::leaf(g, self.theta_k, mode);
        let tv = Self::leaf(g, self.theta_v, mode);
        let q = g.matmul(e, tq)?;
        let mut keys = Vec::with_capacity(similar.len());
        let mut values = Vec::with_capacity(similar.len());
        for &h in similar {
            keys.push(g.matmul(h, tk)?);
            values.push(g.matmul(h, tv)?);
        }
        let scale = 1.0 / (similar.len() as f64).sqrt();
        let attention = g.attention(q, &keys, &values, self.heads, scale)?;
        let dropped = g.dropout(attention, self.dropout, mode == Mode::Train, rng)?;
        let gain = Self::leaf(g, self.ln_gain, mode);
        let bias = Self::leaf(g, self.ln_bias, mode);
        let output = g.layer_norm(dropped, gain, bias)?;
        Ok(Attended { output, attention })
    }

    /// Linear `f_KTA` head.
    pub fn classify(&self, g: &mut Graph, h: Var, mode: Mode) -> Result<Var> {
        let w = Self::leaf(g, self.head_w, mode);
        let b = Self::leaf(g, self.head_b, mode);
        let z = g.matmul(h, w)?;
        g.add_row(z, b)
    }
}

/// Equal-weight sum of the two cross-entropy terms.
pub fn joint_loss(g: &mut Graph, mask_logits: Var, kta_logits: Var, labels: &[usize]) -> Result<Var> {
    let a = g.softmax_cross_entropy(mask_logits, labels)?;
    let b = g.softmax_cross_entropy(kta_logits, labels)?;
    g.add(a, b)
}

/// Mean attention weight per `(source, head)` from a `[row][head][source]`
/// buffer.
pub fn mean_weights(weights: &[f64], heads: usize, sources: usize) -> Vec<Vec<f64>> {
    let rows = weights.len() / (heads * sources).max(1);
    let mut out = vec![vec![0.0; heads]; sources];
    for r in 0..rows {
        for h in 0..heads {
            for (i, o) in out.iter_mut().enumerate() {
                o[h] += weights[(r * heads + h) * sources + i];
            }
        }
    }
    for o in out.iter_mut().flatten() {
        *o /= rows.max(1) as f64;
    }
    out
}
