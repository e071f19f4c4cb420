//! LinearNet, ridge regression on frozen representations, and seasonal
//! persistence.

use log::debug;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::data::WindowSet;
use crate::error::{shape_err, Error, Result};
use crate::heads::{
    flatten_tokens, mse_loss, normalized_rows, take_rows, window_rows, FinetuneConfig,
};
use crate::layers::{
    embed_tokens, patch_batch, revin_denormalize, revin_normalize, LinearLayer, PositionalEncoding,
    RevInState, REVIN_EPS,
};
use crate::optim::Adam;
use crate::params::{Bound, ParamStore};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearNetConfig {
    pub context_len: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub horizon: usize,
}

impl LinearNetConfig {
    pub fn n_patches(&self) -> usize {
        self.context_len / self.patch_len.max(1)
    }
}

/// Patch embedding, flatten and a linear output layer, with no encoder.
#[derive(Debug, Clone)]
pub struct LinearNet {
    pub config: LinearNetConfig,
    pub store: ParamStore,
    pub embed: LinearLayer,
    pub pos: PositionalEncoding,
    pub output: LinearLayer,
}

impl LinearNet {
    pub fn new(config: LinearNetConfig, seed: u64) -> Result<Self> {
        if config.patch_len == 0 || config.context_len < config.patch_len || config.horizon == 0 {
            return Err(Error::Config(format!(
                "invalid LinearNet config {config:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, k) = (config.d_model, config.n_patches());
        let embed = LinearLayer::new(&mut store, "embed", config.patch_len, d, true, &mut rng);
        let pos = PositionalEncoding::new(&mut store, "pos", d, k, &mut rng);
        let output = LinearLayer::new(&mut store, "output", d * k, config.horizon, true, &mut rng);
        Ok(Self {
            config,
            store,
            embed,
            pos,
            output,
        })
    }

    /// `[S, K, P]` patches to `[S, H]` on the RevIN scale.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, patches: Var) -> Result<Var> {
        let z = embed_tokens(tape, bound, patches, &self.embed, &self.pos)?;
        let flat = flatten_tokens(tape, z)?;
        self.output.forward(tape, bound, flat)
    }

    fn forward_normalized(&self, rows: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let p = tape.constant(patch_batch(rows, self.config.patch_len)?);
        let y = self.forward(&mut tape, &bound, p)?;
        Ok(tape.value(y).clone())
    }

    /// Forecasts every row of `[S, L]` independently.
    pub fn forecast_rows(&self, rows: &Tensor) -> Result<Tensor> {
        let (norm, state) = revin_normalize(rows, REVIN_EPS)?;
        revin_denormalize(&self.forward_normalized(&norm)?, state)
    }

    pub fn forecast(&self, x: &Tensor) -> Result<Tensor> {
        self.forecast_rows(x)
    }

    /// End-to-end training by MSE on the RevIN scale; returns per-epoch loss.
    pub fn train(
        &mut self,
        train: &WindowSet,
        cfg: &FinetuneConfig,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if train.horizon != self.config.horizon || train.context_len != self.config.context_len {
            return Err(Error::Contract(format!(
                "windows (L={}, H={}) do not match LinearNet {:?}",
                train.context_len, train.horizon, self.config
            )));
        }
        let rows = normalized_rows(train, REVIN_EPS)?;
        let patches = patch_batch(&rows.contexts, self.config.patch_len)?;
        let (k, p) = (patches.shape()[1], patches.shape()[2]);
        let flat_patches = patches.reshape(&[patches.shape()[0], k * p])?;
        let mut opt = Adam::new(cfg.adam, &self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "linearnet"));
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let (mut sum, mut steps) = (0.0, 0);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let idx = window_rows(chunk, train.channels());
                let mut tape = Tape::new();
                let bound = self.store.bind(&mut tape, true);
                let x = take_rows(&flat_patches, &idx).reshape(&[idx.len(), k, p])?;
                let xv = tape.constant(x);
                let pred = self.forward(&mut tape, &bound, xv)?;
                let loss = mse_loss(&mut tape, pred, &take_rows(&rows.targets, &idx))?;
                let v = tape.value(loss).data()[0];
                if !v.is_finite() {
                    return Err(Error::Diverged(format!(
                        "LinearNet loss {v} at epoch {epoch}"
                    )));
                }
                tape.backward(loss)?;
                opt.step(&mut self.store, &bound.grads(&tape));
                sum += v;
                steps += 1;
            }
            debug!("linearnet epoch {epoch}: {:.6}", sum / steps as f64);
            losses.push(sum / steps as f64);
        }
        Ok(losses)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new("linearnet", &self.config, &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("linearnet")?;
        let mut m = Self::new(ckpt.config()?, 0)?;
        ckpt.restore_into(&mut m.store)?;
        Ok(m)
    }
}

/// Regularisation strengths tried by [`ridge_fit`].
pub const RIDGE_GRID: [f64; 13] = [
    0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// `F × O`.
    pub coef: Tensor,
    pub intercept: Vec<f64>,
    pub lambda: f64,
    /// Validation MSE at `lambda`, when selected on a validation set.
    pub val_mse: Option<f64>,
}

fn to_matrix(x: &Tensor) -> Result<DMatrix<f64>> {
    match x.shape() {
        [r, c] => Ok(DMatrix::from_row_slice(*r, *c, x.data())),
        s => Err(shape_err("ridge", s, &[])),
    }
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        data.extend(m.row(i).iter());
    }
    Tensor::from_parts(vec![r, c], data)
}

/// Column means and the centred copy.
fn centre(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let means: Vec<f64> = m.column_iter().map(|c| c.mean()).collect();
    let mut out = m.clone();
    for (j, mu) in means.iter().enumerate() {
        out.column_mut(j).add_scalar_mut(-mu);
    }
    (means, out)
}

/// Closed-form ridge on centred data, `(XᵀX + λI)β = Xᵀy`; the intercept
/// is not penalised.
pub fn ridge_solve(x: &Tensor, y: &Tensor, lambda: f64) -> Result<RidgeModel> {
    let (xm, ym) = (to_matrix(x)?, to_matrix(y)?);
    if xm.nrows() != ym.nrows() {
        return Err(shape_err("ridge_solve", x.shape(), y.shape()));
    }
    if xm.nrows() < 2 {
        return Err(Error::Contract(format!(
            "ridge needs at least 2 observations, got {}",
            xm.nrows()
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::Config(format!(
            "ridge lambda must be positive, got {lambda}"
        )));
    }
    let (x_mean, xc) = centre(&xm);
    let (y_mean, yc) = centre(&ym);
    let xt = xc.transpose();
    let mut a = &xt * &xc;
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let rhs = &xt * &yc;
    let beta = a
        .cholesky()
        .ok_or_else(|| Error::Contract("ridge system is not positive definite".into()))?
        .solve(&rhs);
    let intercept = (0..beta.ncols())
        .map(|o| {
            y_mean[o]
                - (0..beta.nrows())
                    .map(|f| x_mean[f] * beta[(f, o)])
                    .sum::<f64>()
        })
        .collect();
    Ok(RidgeModel {
        coef: from_matrix(&beta),
        intercept,
        lambda,
        val_mse: None,
    })
}

impl RidgeModel {
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let (m, f) = match x.shape() {
            [m, f] if *f == self.coef.shape()[0] => (*m, *f),
            s => return Err(shape_err("ridge_predict", s, self.coef.shape())),
        };
        let o = self.coef.shape()[1];
        let mut out = Vec::with_capacity(m * o);
        for row in x.data().chunks_exact(f) {
            for j in 0..o {
                let dot: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * self.coef.data()[i * o + j])
                    .sum();
                out.push(dot + self.intercept[j]);
            }
        }
        Tensor::new(vec![m, o], out)
    }

    pub fn coef_norm(&self) -> f64 {
        self.coef.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Fits on the training pair for every `λ` in `grid` and keeps the one with
/// the lowest validation MSE (first on ties).
pub fn ridge_fit(
    x_train: &Tensor,
    y_train: &Tensor,
    x_val: &Tensor,
    y_val: &Tensor,
    grid: &[f64],
) -> Result<RidgeModel> {
    if x_val.shape().first() == Some(&0) || x_val.numel() == 0 || y_val.numel() == 0 {
        return Err(Error::Empty {
            what: "ridge validation set".into(),
        });
    }
    if grid.is_empty() {
        return Err(Error::Empty {
            what: "ridge lambda grid".into(),
        });
    }
    let mut best: Option<RidgeModel> = None;
    for &lambda in grid {
        let mut m = ridge_solve(x_train, y_train, lambda)?;
        let pred = m.predict(x_val)?;
        let mse = crate::metrics::metrics(&pred, y_val)?.mse;
        debug!("ridge lambda {lambda}: val mse {mse:.6}");
        m.val_mse = Some(mse);
        if best
            .as_ref()
            .is_none_or(|b| mse < b.val_mse.unwrap_or(f64::INFINITY))
        {
            best = Some(m);
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Ridge design for a window set: one observation per window, features the
/// last-patch representation of every channel concatenated (`N·D`), targets
/// every channel's horizon on the RevIN scale (`N·H`).
pub struct RidgeData {
    pub features: Tensor,
    pub targets: Tensor,
    pub states: RevInState,
}

pub fn ridge_data(backbone: &Backbone, ws: &WindowSet) -> Result<RidgeData> {
    let rows = normalized_rows(ws, REVIN_EPS)?;
    let z = backbone.encode_batch(&rows.contexts)?;
    let (s, k, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let n = ws.channels();
    let mut feats = Vec::with_capacity(s * d);
    for r in 0..s {
        let at = (r * k + k - 1) * d;
        feats.extend_from_slice(&z.data()[at..at + d]);
    }
    Ok(RidgeData {
        features: Tensor::new(vec![ws.len(), n * d], feats)?,
        targets: rows.targets.reshape(&[ws.len(), n * ws.horizon])?,
        states: rows.states,
    })
}

/// Ridge forecasts for every window, un-normalised, as `[W·N, H]` rows in
/// the same order as [`WindowSet::rows`].
pub fn ridge_forecast(model: &RidgeModel, data: &RidgeData, horizon: usize) -> Result<Tensor> {
    let pred = model.predict(&data.features)?;
    let rows = pred.numel() / horizon;
    revin_denormalize(&pred.reshape(&[rows, horizon])?, data.states.clone())
}

/// Repeats the last `period` steps of each row to fill `horizon` steps.
pub fn persistence_forecast(x: &Tensor, horizon: usize, period: usize) -> Result<Tensor> {
    let (n, l) = match x.shape() {
        [n, l] => (*n, *l),
        s => return Err(shape_err("persistence", s, &[])),
    };
    if period == 0 || l < period {
        return Err(Error::InputTooShort {
            len: l,
            need: period.max(1),
        });
    }
    let mut out = Vec::with_capacity(n * horizon);
    for row in x.data().chunks_exact(l) {
        let last = &row[l - period..];
        out.extend((0..horizon).map(|h| last[h % period]));
    }
    Tensor::new(vec![n, horizon], out)
}
