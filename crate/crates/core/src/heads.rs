//! Linear forecast head on top of a frozen backbone.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::data::WindowSet;
use crate::error::{shape_err, Error, Result};
use crate::layers::{revin_denormalize, revin_normalize, LinearLayer, RevInState, REVIN_EPS};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamStore};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub d_model: usize,
    pub n_patches: usize,
    pub horizon: usize,
}

/// `ŷ = W_o · flatten(z) + b_o`, shared by all channels.
#[derive(Debug, Clone)]
pub struct ForecastHead {
    pub shape: HeadShape,
    pub store: ParamStore,
    /// `H × (D·K)` with bias.
    pub output: LinearLayer,
}

impl ForecastHead {
    pub fn new(shape: HeadShape, seed: u64) -> Result<Self> {
        if shape.horizon == 0 {
            return Err(Error::Config("forecast horizon must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let output = LinearLayer::new(
            &mut store,
            "head",
            shape.d_model * shape.n_patches,
            shape.horizon,
            true,
            &mut rng,
        );
        Ok(Self {
            shape,
            store,
            output,
        })
    }

    pub fn for_backbone(backbone: &Backbone, horizon: usize, seed: u64) -> Result<Self> {
        Self::new(
            HeadShape {
                d_model: backbone.config.d_model,
                n_patches: backbone.n_patches(),
                horizon,
            },
            seed,
        )
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        self.output.forward(tape, bound, features)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new("forecast_head", &self.shape, &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("forecast_head")?;
        let mut h = Self::new(ckpt.config()?, 0)?;
        ckpt.restore_into(&mut h.store)?;
        Ok(h)
    }
}

/// `[S, K, D] -> [S, D·K]`, flattening `z ∈ R^{D×K}` row-major.
pub fn flatten_tokens(tape: &mut Tape, z: Var) -> Result<Var> {
    let (s, k, d) = match tape.shape(z) {
        [s, k, d] => (*s, *k, *d),
        sh => return Err(shape_err("flatten_tokens", sh, &[])),
    };
    let zt = tape.permute(z, &[0, 2, 1])?;
    tape.reshape(zt, &[s, d * k])
}

/// Flattened frozen representations `[S, D·K]` of already normalised rows.
pub fn representations(backbone: &Backbone, rows: &Tensor) -> Result<Tensor> {
    let z = backbone.encode_batch(rows)?;
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let f = flatten_tokens(&mut tape, zv)?;
    Ok(tape.value(f).clone())
}

/// Forecasts each row of `[S, L]` independently: RevIN, encode, head, inverse RevIN.
pub fn forecast_rows(rows: &Tensor, backbone: &Backbone, head: &ForecastHead) -> Result<Tensor> {
    let (norm, state) = revin_normalize(rows, backbone.config.revin_eps)?;
    let feats = representations(backbone, &norm)?;
    let y = apply_head(head, &feats)?;
    revin_denormalize(&y, state)
}

/// `[N, L] -> [N, H]`.
pub fn forecast(x: &Tensor, backbone: &Backbone, head: &ForecastHead) -> Result<Tensor> {
    forecast_rows(x, backbone, head)
}

fn apply_head(head: &ForecastHead, feats: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = head.store.bind(&mut tape, false);
    let f = tape.constant(feats.clone());
    let y = head.forward(&mut tape, &bound, f)?;
    Ok(tape.value(y).clone())
}

/// Mean squared error of `pred` against constant `targets`.
pub fn mse_loss(tape: &mut Tape, pred: Var, targets: &Tensor) -> Result<Var> {
    let t = tape.constant(targets.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Windows per step; each contributes one row per channel.
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            adam: AdamConfig::default(),
        }
    }
}

/// Contexts and targets of a window set on the per-window RevIN scale.
pub struct NormalizedRows {
    pub contexts: Tensor,
    pub targets: Tensor,
    pub states: RevInState,
}

pub fn normalized_rows(ws: &WindowSet, eps: f64) -> Result<NormalizedRows> {
    let (ctx, tgt) = ws.all_rows()?;
    let (contexts, states) = revin_normalize(&ctx, eps)?;
    let targets = states.normalize(&tgt)?;
    Ok(NormalizedRows {
        contexts,
        targets,
        states,
    })
}

pub(crate) fn take_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let w = x.shape()[1];
    let mut out = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        out.extend_from_slice(x.row(r));
    }
    Tensor::from_parts(vec![rows.len(), w], out)
}

/// Row indices of the given windows, `channels` rows each.
pub(crate) fn window_rows(windows: &[usize], channels: usize) -> Vec<usize> {
    windows
        .iter()
        .flat_map(|&w| w * channels..(w + 1) * channels)
        .collect()
}

/// Trains a fresh head on frozen backbone representations by MSE on the
/// RevIN scale. Returns the head and the mean loss of every epoch.
pub fn finetune(
    backbone: &Backbone,
    train: &WindowSet,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(ForecastHead, Vec<f64>)> {
    let mut head = ForecastHead::for_backbone(backbone, train.horizon, seed::derive(seed, "head"))?;
    let rows = normalized_rows(train, REVIN_EPS.max(backbone.config.revin_eps))?;
    let feats = representations(backbone, &rows.contexts)?;
    let mut opt = Adam::new(cfg.adam, &head.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "finetune"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let n = train.channels();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let idx = window_rows(chunk, n);
            let mut tape = Tape::new();
            let bound = head.store.bind(&mut tape, true);
            let f = tape.constant(take_rows(&feats, &idx));
            let pred = head.forward(&mut tape, &bound, f)?;
            let loss = mse_loss(&mut tape, pred, &take_rows(&rows.targets, &idx))?;
            let v = tape.value(loss).data()[0];
            if !v.is_finite() {
                return Err(Error::Diverged(format!(
                    "fine-tuning loss {v} at epoch {epoch}"
                )));
            }
            tape.backward(loss)?;
            opt.step(&mut head.store, &bound.grads(&tape));
            sum += v;
            steps += 1;
        }
        debug!("fine-tune epoch {epoch}: {:.6}", sum / steps as f64);
        losses.push(sum / steps as f64);
    }
    Ok((head, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::data::{make_windows, Split};
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            context_len: 16,
            patch_len: 4,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_head_forecasts_window_mean() {
        let b = Backbone::new(tiny(), 1).unwrap();
        let mut h = ForecastHead::for_backbone(&b, 3, 2).unwrap();
        let w = h.output.weight;
        *h.store.get_mut(w) = Tensor::zeros(&[3, 32]);
        *h.store.get_mut(h.output.bias.unwrap()) = Tensor::zeros(&[3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[2, 16], 0.0, 5.0, &mut rng);
        let y = forecast(&x, &b, &h).unwrap();
        for c in 0..2 {
            let m = x.row(c).iter().sum::<f64>() / 16.0;
            for v in y.row(c) {
                assert!((v - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forecast_shape() {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            ..ModelConfig::default()
        };
        let b = Backbone::new(cfg, 1).unwrap();
        let h = ForecastHead::for_backbone(&b, 24, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[5, 168], -1.0, 1.0, &mut rng);
        assert_eq!(forecast(&x, &b, &h).unwrap().shape(), &[5, 24]);
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let b = Backbone::new(tiny(), 4).unwrap();
        let h = ForecastHead::for_backbone(&b, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform(&[3, 16], -2.0, 2.0, &mut rng);
        let y = Tensor::uniform(&[3, 2], -2.0, 2.0, &mut rng);
        let feats = representations(&b, &revin_normalize(&x, REVIN_EPS).unwrap().0).unwrap();
        let loss = |store: &ParamStore| -> f64 {
            let mut t = Tape::new();
            let bound = store.bind(&mut t, false);
            let f = t.constant(feats.clone());
            let p = h.forward(&mut t, &bound, f).unwrap();
            let l = mse_loss(&mut t, p, &y).unwrap();
            t.value(l).data()[0]
        };
        let mut t = Tape::new();
        let bound = h.store.bind(&mut t, true);
        let f = t.constant(feats.clone());
        let p = h.forward(&mut t, &bound, f).unwrap();
        let l = mse_loss(&mut t, p, &y).unwrap();
        t.backward(l).unwrap();
        let g = bound.grads(&t)[0].clone();
        let w = h.output.weight;
        for i in 0..g.numel() {
            let mut s = h.store.clone();
            s.get_mut(w).data_mut()[i] += 1e-5;
            let up = loss(&s);
            s.get_mut(w).data_mut()[i] -= 2e-5;
            let dn = loss(&s);
            let num = (up - dn) / 2e-5;
            let an = g.data()[i];
            assert!((an - num).abs() / an.abs().max(num.abs()).max(1e-6) < 1e-4);
        }
    }

    fn trend_split(n: usize, len: usize, seed: u64) -> Split {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n)
            .flat_map(|c| (0..len).map(move |t| 0.01 * (c + 1) as f64 * t as f64))
            .map(|v| v + 0.01 * rng.random::<f64>())
            .collect();
        Split {
            values: Tensor::new(vec![n, len], data).unwrap(),
            offset: 0,
        }
    }

    #[test]
    fn finetune_freezes_backbone_and_beats_persistence_on_trend() {
        let b = Backbone::new(tiny(), 7).unwrap();
        let before = b.store.fingerprint();
        let ws = make_windows(&trend_split(2, 400, 8), 16, 4, 1).unwrap();
        let cfg = FinetuneConfig {
            epochs: 30,
            batch_size: 16,
            ..FinetuneConfig::default()
        };
        let (head, losses) = finetune(&b, &ws, &cfg, 9).unwrap();
        assert_eq!(before, b.store.fingerprint());
        assert!(losses.last().unwrap() < &losses[0]);
        let (again, _) = finetune(&b, &ws, &cfg, 9).unwrap();
        assert_eq!(head.store.fingerprint(), again.store.fingerprint());

        let test = make_windows(&trend_split(2, 120, 10), 16, 4, 1).unwrap();
        let (ctx, tgt) = test.all_rows().unwrap();
        let pred = forecast_rows(&ctx, &b, &head).unwrap();
        let pers = crate::baselines::persistence_forecast(&ctx, 4, 4).unwrap();
        let m = crate::metrics::metrics(&pred, &tgt).unwrap();
        let p = crate::metrics::metrics(&pers, &tgt).unwrap();
        assert!(m.mse < p.mse, "{m:?} vs {p:?}");
    }

    #[test]
    fn head_checkpoint_round_trip() {
        let h = ForecastHead::new(
            HeadShape {
                d_model: 4,
                n_patches: 3,
                horizon: 2,
            },
            1,
        )
        .unwrap();
        let c = ForecastHead::from_checkpoint(&h.to_checkpoint().unwrap()).unwrap();
        assert_eq!(h.store.fingerprint(), c.store.fingerprint());
        assert!(ForecastHead::new(
            HeadShape {
                d_model: 4,
                n_patches: 3,
                horizon: 0
            },
            1
        )
        .is_err());
    }
}
