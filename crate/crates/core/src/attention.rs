//! Multi-head scaled dot-product attention over patch tokens, with
//! RMS-normalised queries and keys (QKNorm) and no projection biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{LinearLayer, RmsNormLayer};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadParams {
    /// `d_k × D`
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub q_norm: RmsNormLayer,
    pub k_norm: RmsNormLayer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    /// Maps the concatenated heads (`H·d_k`) back to `D`.
    pub output: LinearLayer,
    pub d_model: usize,
    pub d_k: usize,
    /// When false, queries and keys enter the dot product unnormalised.
    pub qk_norm: bool,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        qk_norm: bool,
        freeze_qk_gain: bool,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || n_heads > d_model {
            return Err(Error::Config(format!(
                "{n_heads} heads do not fit model dimension {d_model}"
            )));
        }
        let d_k = d_model / n_heads;
        let heads = (0..n_heads)
            .map(|h| {
                let p = format!("{name}.head{h}");
                let head = HeadParams {
                    query: LinearLayer::new(store, &format!("{p}.query"), d_model, d_k, false, rng),
                    key: LinearLayer::new(store, &format!("{p}.key"), d_model, d_k, false, rng),
                    value: LinearLayer::new(store, &format!("{p}.value"), d_model, d_k, false, rng),
                    q_norm: RmsNormLayer::new(store, &format!("{p}.q_norm"), d_k, eps),
                    k_norm: RmsNormLayer::new(store, &format!("{p}.k_norm"), d_k, eps),
                };
                store.set_frozen(head.q_norm.gain, freeze_qk_gain);
                store.set_frozen(head.k_norm.gain, freeze_qk_gain);
                head
            })
            .collect();
        let output = LinearLayer::new(
            store,
            &format!("{name}.output"),
            n_heads * d_k,
            d_model,
            false,
            rng,
        );
        Ok(Self {
            heads,
            output,
            d_model,
            d_k,
            qk_norm,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }
}

/// Bias-free projections of `[.., K, D]` tokens for head `h`.
pub fn qkv_project(
    tape: &mut Tape,
    bound: &Bound,
    tokens: Var,
    params: &AttentionParams,
    h: usize,
) -> Result<(Var, Var, Var)> {
    let head = params
        .heads
        .get(h)
        .ok_or_else(|| Error::Contract(format!("head {h} of {}", params.n_heads())))?;
    let q = head.query.forward(tape, bound, tokens)?;
    let k = head.key.forward(tape, bound, tokens)?;
    let v = head.value.forward(tape, bound, tokens)?;
    Ok((q, k, v))
}

/// `softmax(Q·Kᵀ/√d_k)·V` over the key axis. Returns the output and the
/// attention weights.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    d_k: usize,
) -> Result<(Var, Var)> {
    if tape.shape(q) != tape.shape(k) {
        return Err(shape_err("attention", tape.shape(q), tape.shape(k)));
    }
    let r = tape.shape(k).len();
    if tape.shape(v).len() != r || tape.shape(v)[r - 2] != tape.shape(k)[r - 2] {
        return Err(shape_err("attention", tape.shape(k), tape.shape(v)));
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax(logits, r - 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Attention for one head with QKNorm applied to the raw projections.
/// Returns `(output, attention weights)`.
pub fn qknorm_attention(
    tape: &mut Tape,
    bound: &Bound,
    q: Var,
    k: Var,
    v: Var,
    head: &HeadParams,
    d_k: usize,
) -> Result<(Var, Var)> {
    let qn = head.q_norm.forward(tape, bound, q)?;
    let kn = head.k_norm.forward(tape, bound, k)?;
    scaled_dot_attention(tape, qn, kn, v, d_k)
}

/// Full multi-head block on `[.., K, D]` tokens: per-head attention,
/// concatenation along features, output projection. The caller adds the
/// residual.
pub fn multi_head_attention(
    tape: &mut Tape,
    bound: &Bound,
    tokens: Var,
    params: &AttentionParams,
) -> Result<Var> {
    Ok(multi_head_attention_with_weights(tape, bound, tokens, params)?.0)
}

/// As [`multi_head_attention`], also returning each head's weight matrix.
pub fn multi_head_attention_with_weights(
    tape: &mut Tape,
    bound: &Bound,
    tokens: Var,
    params: &AttentionParams,
) -> Result<(Var, Vec<Var>)> {
    if tape.shape(tokens).last() != Some(&params.d_model) {
        return Err(shape_err(
            "multi_head_attention",
            tape.shape(tokens),
            &[params.d_model],
        ));
    }
    let mut outs = Vec::with_capacity(params.n_heads());
    let mut weights = Vec::with_capacity(params.n_heads());
    for (h, head) in params.heads.iter().enumerate() {
        let (q, k, v) = qkv_project(tape, bound, tokens, params, h)?;
        let (o, w) = if params.qk_norm {
            qknorm_attention(tape, bound, q, k, v, head, params.d_k)?
        } else {
            scaled_dot_attention(tape, q, k, v, params.d_k)?
        };
        outs.push(o);
        weights.push(w);
    }
    let axis = tape.shape(tokens).len() - 1;
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat(&outs, axis)?
    };
    Ok((params.output.forward(tape, bound, cat)?, weights))
}
