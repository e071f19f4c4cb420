//! Linear layers, RMSNorm, reversible instance normalisation, learnable
//! positional tables and patching.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const RMSNORM_EPS: f64 = 1e-8;
pub const REVIN_EPS: f64 = 1e-5;

/// `y = x·Wᵀ + b` over the last axis. `weight` is `out × in`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    /// Kaiming-uniform with fan-in scaling: `U(-1/√in, 1/√in)` for weight and bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.register(
            format!("{name}.weight"),
            Tensor::uniform(&[out_dim, in_dim], -bound, bound, rng),
        );
        let bias = bias.then(|| {
            store.register(
                format!("{name}.bias"),
                Tensor::uniform(&[out_dim], -bound, bound, rng),
            )
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let last = tape.shape(x).last().copied();
        if last != Some(self.in_dim) {
            return Err(shape_err(
                "linear",
                tape.shape(x),
                &[self.out_dim, self.in_dim],
            ));
        }
        let wt = tape.transpose(bound.var(self.weight))?;
        let y = tape.matmul(x, wt)?;
        match self.bias {
            Some(b) => tape.add(y, bound.var(b)),
            None => Ok(y),
        }
    }
}

/// Root-mean-square normalisation over the last axis with a learnable gain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RmsNormLayer {
    pub gain: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl RmsNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        let gain = store.register(format!("{name}.gain"), Tensor::ones(&[dim]));
        Self { gain, dim, eps }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        if tape.shape(x).last() != Some(&self.dim) {
            return Err(shape_err("rmsnorm", tape.shape(x), &[self.dim]));
        }
        let n = tape.rms_normalize(x, self.eps)?;
        tape.mul(n, bound.var(self.gain))
    }
}

/// `gain ⊙ x / max(rms(x), eps)` along the last axis, no re-centring.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    if x.shape().last() != gain.shape().last() || gain.rank() != 1 {
        return Err(shape_err("rmsnorm", x.shape(), gain.shape()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let gv = tape.constant(gain.clone());
    let n = tape.rms_normalize(xv, eps)?;
    let y = tape.mul(n, gv)?;
    Ok(tape.value(y).clone())
}

/// Per-channel statistics removed by [`revin_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct RevInState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
}

impl RevInState {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, y: &Tensor) -> Result<(usize, usize)> {
        match y.shape() {
            [n, h] if *n == self.channels() => Ok((*n, *h)),
            s => Err(shape_err("revin", s, &[self.channels()])),
        }
    }

    /// Normalises other data (e.g. forecast targets) with these statistics.
    pub fn normalize(&self, y: &Tensor) -> Result<Tensor> {
        let (_, h) = self.check(y)?;
        let data = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i / h]) / self.std[i / h])
            .collect();
        Tensor::new(y.shape().to_vec(), data)
    }
}

/// Removes each channel's mean and standard deviation over the time axis.
/// Constant channels get `std = eps`.
pub fn revin_normalize(x: &Tensor, eps: f64) -> Result<(Tensor, RevInState)> {
    let (n, l) = match x.shape() {
        [n, l] => (*n, *l),
        s => return Err(shape_err("revin_normalize", s, &[])),
    };
    if l < 2 {
        return Err(Error::InputTooShort { len: l, need: 2 });
    }
    let mut mean = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n * l);
    for row in x.data().chunks_exact(l) {
        let mu = row.iter().sum::<f64>() / l as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / l as f64;
        let sd = var.sqrt().max(eps);
        out.extend(row.iter().map(|v| (v - mu) / sd));
        mean.push(mu);
        std.push(sd);
    }
    Ok((Tensor::new(vec![n, l], out)?, RevInState { mean, std, eps }))
}

/// Restores the statistics captured by the matching [`revin_normalize`] call.
pub fn revin_denormalize(y: &Tensor, state: RevInState) -> Result<Tensor> {
    let (_, h) = state.check(y)?;
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * state.std[i / h] + state.mean[i / h])
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

/// Learnable `D × K` positional table, initialised from `U(0, 0.2)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub table: ParamId,
    pub d_model: usize,
    pub n_patches: usize,
}

impl PositionalEncoding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_patches: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.register(
            format!("{name}.table"),
            Tensor::uniform(&[d_model, n_patches], 0.0, 0.2, rng),
        );
        Self {
            table,
            d_model,
            n_patches,
        }
    }
}

/// Number of non-overlapping patches of length `p` in `l` steps.
pub fn patch_count(l: usize, p: usize) -> usize {
    l / p
}

/// Splits a univariate series (`[L]` or `[1, L]`) into a `P × K` matrix whose
/// column `k` is the `k`-th patch. Trailing `L - K·P` steps are dropped.
pub fn make_patches(x: &Tensor, patch_len: usize) -> Result<Tensor> {
    let l = match x.shape() {
        [l] | [1, l] => *l,
        s => return Err(shape_err("make_patches", s, &[1])),
    };
    if patch_len == 0 {
        return Err(Error::Contract("patch length must be positive".into()));
    }
    if l < patch_len {
        return Err(Error::InputTooShort {
            len: l,
            need: patch_len,
        });
    }
    let k = patch_count(l, patch_len);
    let mut out = vec![0.0; patch_len * k];
    for j in 0..k {
        for i in 0..patch_len {
            out[i * k + j] = x.data()[j * patch_len + i];
        }
    }
    Tensor::new(vec![patch_len, k], out)
}

/// Token-major patches for a batch of series: `[S, L] -> [S, K, P]`.
pub fn patch_batch(x: &Tensor, patch_len: usize) -> Result<Tensor> {
    let (s, l) = match x.shape() {
        [s, l] => (*s, *l),
        sh => return Err(shape_err("patch_batch", sh, &[])),
    };
    if patch_len == 0 || l < patch_len {
        return Err(Error::InputTooShort {
            len: l,
            need: patch_len.max(1),
        });
    }
    let k = patch_count(l, patch_len);
    let mut out = Vec::with_capacity(s * k * patch_len);
    for row in x.data().chunks_exact(l) {
        out.extend_from_slice(&row[..k * patch_len]);
    }
    Tensor::new(vec![s, k, patch_len], out)
}

/// Patch embedding on token-major input: `[S, K, P] -> [S, K, D]`,
/// `W_p·patch + b_p + W_pos[:, k]` for every token.
pub fn embed_tokens(
    tape: &mut Tape,
    bound: &Bound,
    patches: Var,
    proj: &LinearLayer,
    pos: &PositionalEncoding,
) -> Result<Var> {
    let k = tape.shape(patches).get(1).copied().unwrap_or(0);
    if tape.shape(patches).len() != 3 || k != pos.n_patches {
        return Err(shape_err(
            "embed_tokens",
            tape.shape(patches),
            &[pos.d_model, pos.n_patches],
        ));
    }
    let y = proj.forward(tape, bound, patches)?;
    let pos_t = tape.transpose(bound.var(pos.table))?;
    tape.add(y, pos_t)
}

/// Patch embedding for one channel: `P × K -> D × K`.
pub fn embed_patches(
    tape: &mut Tape,
    bound: &Bound,
    xp: Var,
    proj: &LinearLayer,
    pos: &PositionalEncoding,
) -> Result<Var> {
    let (p, k) = match tape.shape(xp) {
        [p, k] => (*p, *k),
        s => return Err(shape_err("embed_patches", s, &[])),
    };
    let tokens = tape.transpose(xp)?;
    let tokens = tape.reshape(tokens, &[1, k, p])?;
    let z = embed_tokens(tape, bound, tokens, proj, pos)?;
    let z = tape.reshape(z, &[k, pos.d_model])?;
    tape.transpose(z)
}

/// Inverted dropout on the tape; identity when `p == 0`.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, p: f64, rng: &mut R) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let shape = tape.shape(x).to_vec();
    let mask: Vec<f64> = (0..crate::tensor::numel(&shape))
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}
