//! Siamese masked pre-training: two passes through one shared backbone over
//! differently masked views of the same windows, masked-patch reconstruction
//! on both views and a cosine alignment term between their representations.

use std::fs::File;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, Dropout, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::layers::{patch_batch, revin_normalize, LinearLayer, RevInState};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamStore};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub low: f64,
    pub high: f64,
    /// One mask per window, shared by all of its channels.
    pub share_across_channels: bool,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            low: 0.15,
            high: 0.55,
            share_across_channels: false,
        }
    }
}

/// `⌈r·K⌉` clamped to `[1, K-1]`.
pub fn masked_count(k: usize, ratio: f64) -> usize {
    ((ratio * k as f64).ceil() as usize).clamp(1, k - 1)
}

/// Draws `r ~ U(low, high)` and masks `⌈r·K⌉` distinct patches.
pub fn draw_mask<R: Rng + ?Sized>(k: usize, spec: &MaskSpec, rng: &mut R) -> Result<Vec<bool>> {
    if k < 2 {
        return Err(Error::Contract(format!(
            "masking needs at least 2 patches, got {k}"
        )));
    }
    if !(0.0 <= spec.low && spec.low <= spec.high && spec.high <= 1.0) {
        return Err(Error::Config(format!(
            "mask ratio range [{}, {}] invalid",
            spec.low, spec.high
        )));
    }
    let r = if spec.high > spec.low {
        rng.random_range(spec.low..spec.high)
    } else {
        spec.low
    };
    Ok(mask_with_count(k, masked_count(k, r), rng))
}

fn mask_with_count<R: Rng + ?Sized>(k: usize, m: usize, rng: &mut R) -> Vec<bool> {
    let mut mask = vec![false; k];
    for i in rand::seq::index::sample(rng, k, m) {
        mask[i] = true;
    }
    mask
}

/// Zeroes the masked patch columns of a `P × K` matrix.
pub fn apply_mask(xp: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let k = match xp.shape() {
        [_, k] if *k == mask.len() => *k,
        s => return Err(shape_err("apply_mask", s, &[mask.len()])),
    };
    let mut out = xp.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask[i % k] {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Zeroes masked tokens of token-major `[S, K, P]` patches; `mask` has `S·K` entries.
pub fn mask_tokens(patches: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (s, k, p) = match patches.shape() {
        [s, k, p] if s * k == mask.len() => (*s, *k, *p),
        sh => return Err(shape_err("mask_tokens", sh, &[mask.len()])),
    };
    let mut out = patches.clone();
    for (t, chunk) in out.data_mut().chunks_exact_mut(p).enumerate() {
        if mask[t] {
            chunk.fill(0.0);
        }
    }
    debug_assert_eq!(out.numel(), s * k * p);
    Ok(out)
}

/// Shared per-patch decoder `D → P`, discarded after pre-training.
#[derive(Debug, Clone)]
pub struct ReconHead {
    pub store: ParamStore,
    pub layer: LinearLayer,
}

impl ReconHead {
    pub fn new(d_model: usize, patch_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = LinearLayer::new(&mut store, "recon", d_model, patch_len, true, &mut rng);
        Self { store, layer }
    }
}

/// Mean squared error between `head(z)` and `targets` over the elements of
/// masked tokens only. `z` is `[S, K, D]`, `targets` `[S, K, P]`, `mask` `S·K`.
pub fn reconstruction_loss(
    tape: &mut Tape,
    z: Var,
    targets: &Tensor,
    mask: &[bool],
    head: &ReconHead,
    head_bound: &Bound,
) -> Result<Var> {
    let pred = head.layer.forward(tape, head_bound, z)?;
    reconstruction_error(tape, pred, targets, mask)
}

/// Masked MSE for a prediction already in patch space.
pub fn reconstruction_error(
    tape: &mut Tape,
    pred: Var,
    targets: &Tensor,
    mask: &[bool],
) -> Result<Var> {
    if tape.shape(pred) != targets.shape() {
        return Err(shape_err(
            "reconstruction_loss",
            tape.shape(pred),
            targets.shape(),
        ));
    }
    let p = targets.shape()[2];
    if mask.len() * p != targets.numel() {
        return Err(shape_err(
            "reconstruction_loss",
            targets.shape(),
            &[mask.len()],
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty {
            what: "reconstruction mask".into(),
        });
    }
    let t = tape.constant(targets.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    let flat = tape.reshape(sq, &[targets.numel()])?;
    let elem_mask: Vec<bool> = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, p))
        .collect();
    let sel = tape.masked_select(flat, &elem_mask)?;
    Ok(tape.mean(sel))
}

/// Windows prepared for one Siamese step.
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    /// RevIN-normalised token-major patches `[S, K, P]`, one row per channel window.
    pub patches: Tensor,
    pub mask_a: Vec<bool>,
    pub mask_b: Vec<bool>,
    pub revin: RevInState,
}

impl PretrainBatch {
    /// `series` is `[S, L]` with `channels` consecutive rows per window.
    pub fn new<R: Rng + ?Sized>(
        series: &Tensor,
        channels: usize,
        patch_len: usize,
        spec: &MaskSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let (norm, revin) = revin_normalize(series, crate::layers::REVIN_EPS)?;
        let patches = patch_batch(&norm, patch_len)?;
        let (s, k) = (patches.shape()[0], patches.shape()[1]);
        if channels == 0 || s % channels != 0 {
            return Err(Error::Contract(format!(
                "{s} rows do not split into {channels} channels"
            )));
        }
        let draw = |rng: &mut R| -> Result<Vec<bool>> {
            let mut out = Vec::with_capacity(s * k);
            if spec.share_across_channels {
                for _ in 0..s / channels {
                    let m = draw_mask(k, spec, rng)?;
                    for _ in 0..channels {
                        out.extend_from_slice(&m);
                    }
                }
            } else {
                for _ in 0..s {
                    out.extend(draw_mask(k, spec, rng)?);
                }
            }
            Ok(out)
        };
        let mask_a = draw(rng)?;
        let mask_b = draw(rng)?;
        Ok(Self {
            patches,
            mask_a,
            mask_b,
            revin,
        })
    }
}

/// Loss terms of one Siamese step; `total` is the root for `backward`.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub total: Var,
    pub recon_a: Var,
    pub recon_b: Var,
    pub sim: Var,
    pub z_a: Var,
    pub z_b: Var,
}

/// Encodes one masked view and scores its reconstruction.
#[allow(clippy::too_many_arguments)]
pub fn masked_view_loss(
    tape: &mut Tape,
    backbone: &Backbone,
    bound: &Bound,
    head: &ReconHead,
    head_bound: &Bound,
    patches: &Tensor,
    mask: &[bool],
    drop: Option<&mut Dropout<'_>>,
) -> Result<(Var, Var)> {
    let input = tape.constant(mask_tokens(patches, mask)?);
    let z = backbone.encode_tokens(tape, bound, input, drop)?;
    let loss = reconstruction_loss(tape, z, patches, mask, head, head_bound)?;
    Ok((loss, z))
}

/// `recon(A) + recon(B) + λ_sim · mean(1 − cos(z_A, z_B))`. Both views run
/// through the single parameter binding `bound`.
#[allow(clippy::too_many_arguments)]
pub fn siamese_step(
    tape: &mut Tape,
    backbone: &Backbone,
    bound: &Bound,
    head: &ReconHead,
    head_bound: &Bound,
    batch: &PretrainBatch,
    lambda_sim: f64,
    mut drop: Option<&mut Dropout<'_>>,
) -> Result<StepLosses> {
    if !(lambda_sim >= 0.0) {
        return Err(Error::Config(format!(
            "lambda_sim must be >= 0, got {lambda_sim}"
        )));
    }
    let (recon_a, z_a) = masked_view_loss(
        tape,
        backbone,
        bound,
        head,
        head_bound,
        &batch.patches,
        &batch.mask_a,
        drop.as_deref_mut(),
    )?;
    let (recon_b, z_b) = masked_view_loss(
        tape,
        backbone,
        bound,
        head,
        head_bound,
        &batch.patches,
        &batch.mask_b,
        drop,
    )?;
    let cos = tape.cosine(z_a, z_b, backbone.config.rms_eps)?;
    let mean_cos = tape.mean(cos);
    let one = tape.constant(Tensor::scalar(1.0));
    let sim = tape.sub(one, mean_cos)?;
    let recon = tape.add(recon_a, recon_b)?;
    let weighted = tape.scale(sim, lambda_sim);
    let total = tape.add(recon, weighted)?;
    Ok(StepLosses {
        total,
        recon_a,
        recon_b,
        sim,
        z_a,
        z_b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// `None` picks 20 for one series and 100 for several.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    /// Step between consecutive window starts.
    pub stride: usize,
    pub lambda_sim: f64,
    pub mask: MaskSpec,
    pub adam: AdamConfig,
    /// Fill the `wall_time` log column; off keeps logs byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: None,
            batch_size: 64,
            stride: 1,
            lambda_sim: 0.1,
            mask: MaskSpec::default(),
            adam: AdamConfig::default(),
            record_wall_time: false,
        }
    }
}

impl PretrainConfig {
    pub fn epochs_for(&self, n_series: usize) -> usize {
        self.epochs.unwrap_or(if n_series > 1 { 100 } else { 20 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon_loss_a: f64,
    pub recon_loss_b: f64,
    pub sim_loss: f64,
    pub total: f64,
    pub wall_time: Option<f64>,
}

pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record([
        "epoch",
        "recon_loss_A",
        "recon_loss_B",
        "sim_loss",
        "total",
        "wall_time",
    ])?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            e.recon_loss_a.to_string(),
            e.recon_loss_b.to_string(),
            e.sim_loss.to_string(),
            e.total.to_string(),
            e.wall_time
                .map_or_else(|| "NA".to_string(), |t| format!("{t:.3}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Window starts `(series, offset)` over a set of `[N, T]` series.
pub fn window_index(series: &[Tensor], len: usize, stride: usize) -> Vec<(usize, usize)> {
    let stride = stride.max(1);
    series
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let t = s.shape()[1];
            let last = (t + 1).saturating_sub(len);
            (0..last).step_by(stride).map(move |o| (i, o))
        })
        .collect()
}

/// Stacks the channel rows of each window into an `[S, len]` tensor.
pub fn gather_windows(series: &[Tensor], idx: &[(usize, usize)], len: usize) -> Result<Tensor> {
    let mut rows = 0;
    let mut out = Vec::new();
    for &(i, o) in idx {
        let s = &series[i];
        let (n, t) = (s.shape()[0], s.shape()[1]);
        for c in 0..n {
            out.extend_from_slice(&s.data()[c * t + o..c * t + o + len]);
        }
        rows += n;
    }
    Tensor::new(vec![rows, len], out)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub backbone: Backbone,
    pub head: ReconHead,
    pub log: Vec<EpochLog>,
}

/// Pre-trains a fresh backbone on the given `[N, T]` training series (all
/// with the same `N`). Deterministic for a fixed `seed`.
pub fn pretrain(
    series: &[Tensor],
    model: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    let backbone = Backbone::new(model.clone(), seed::derive(seed, "backbone"))?;
    pretrain_from(backbone, series, cfg, seed)
}

/// As [`pretrain`], continuing from an existing backbone.
pub fn pretrain_from(
    mut backbone: Backbone,
    series: &[Tensor],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    let model = backbone.config.clone();
    let l = model.context_len;
    let channels = match series.first() {
        Some(s) if s.rank() == 2 => s.shape()[0],
        Some(s) => return Err(shape_err("pretrain", s.shape(), &[])),
        None => {
            return Err(Error::Empty {
                what: "pre-training series".into(),
            })
        }
    };
    if let Some(bad) = series
        .iter()
        .find(|s| s.rank() != 2 || s.shape()[0] != channels)
    {
        return Err(shape_err("pretrain", bad.shape(), &[channels]));
    }
    let mut windows = window_index(series, l, cfg.stride);
    if windows.is_empty() {
        return Err(Error::Empty {
            what: format!("pre-training windows of length {l}"),
        });
    }
    let epochs = cfg.epochs_for(series.len());
    let mut head = ReconHead::new(model.d_model, model.patch_len, seed::derive(seed, "recon"));
    let mut opt = Adam::new(cfg.adam, &backbone.store);
    let mut head_opt = Adam::new(cfg.adam, &head.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "pretrain"));
    let batch_size = cfg.batch_size.max(1);
    let start = Instant::now();
    let mut log = Vec::with_capacity(epochs);
    info!(
        "pre-training on {} windows x {} channels for {} epochs",
        windows.len(),
        channels,
        epochs
    );
    for epoch in 1..=epochs {
        windows.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut steps = 0usize;
        for chunk in windows.chunks(batch_size) {
            let x = gather_windows(series, chunk, l)?;
            let batch = PretrainBatch::new(&x, channels, model.patch_len, &cfg.mask, &mut rng)?;
            let mut tape = Tape::new();
            let bound = backbone.store.bind(&mut tape, true);
            let head_bound = head.store.bind(&mut tape, true);
            let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let mut drop = Dropout {
                attn: model.attn_dropout,
                ffn: model.ffn_dropout,
                rng: &mut drop_rng,
            };
            let use_drop = model.attn_dropout > 0.0 || model.ffn_dropout > 0.0;
            let losses = siamese_step(
                &mut tape,
                &backbone,
                &bound,
                &head,
                &head_bound,
                &batch,
                cfg.lambda_sim,
                use_drop.then_some(&mut drop),
            )?;
            let vals = [losses.recon_a, losses.recon_b, losses.sim, losses.total]
                .map(|v| tape.value(v).data()[0]);
            if !vals[3].is_finite() {
                return Err(Error::Diverged(format!(
                    "pre-training loss {} at epoch {epoch}, step {steps}",
                    vals[3]
                )));
            }
            tape.backward(losses.total)?;
            opt.step(&mut backbone.store, &bound.grads(&tape));
            head_opt.step(&mut head.store, &head_bound.grads(&tape));
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            steps += 1;
        }
        let n = steps as f64;
        let entry = EpochLog {
            epoch,
            recon_loss_a: sums[0] / n,
            recon_loss_b: sums[1] / n,
            sim_loss: sums[2] / n,
            total: sums[3] / n,
            wall_time: cfg.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        debug!("epoch {epoch}: total {:.6}", entry.total);
        log.push(entry);
    }
    Ok(PretrainOutcome {
        backbone,
        head,
        log,
    })
}

impl PretrainOutcome {
    pub fn head_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(
            "recon_head",
            &(self.backbone.config.d_model, self.backbone.config.patch_len),
            &self.head.store,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            context_len: 16,
            patch_len: 4,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            ..ModelConfig::default()
        }
    }

    fn sine_series(n: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n)
            .flat_map(|c| {
                let phase = c as f64;
                (0..t).map(move |i| (2.0 * std::f64::consts::PI * i as f64 / 8.0 + phase).sin())
            })
            .map(|v| v + 0.05 * rng.random::<f64>())
            .collect();
        Tensor::new(vec![n, t], data).unwrap()
    }

    #[test]
    fn ceiling_count_example() {
        assert_eq!(masked_count(14, 0.15), 3);
        assert_eq!(masked_count(2, 0.01), 1);
        assert_eq!(masked_count(4, 0.99), 3);
    }

    #[test]
    fn draw_mask_respects_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 2..20 {
            for _ in 0..200 {
                let m = draw_mask(k, &MaskSpec::default(), &mut rng).unwrap();
                let c = m.iter().filter(|&&b| b).count();
                assert!(c >= 1 && c < k);
            }
        }
        assert!(draw_mask(1, &MaskSpec::default(), &mut rng).is_err());
    }

    #[test]
    fn apply_mask_zeroes_columns_only() {
        let xp = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(apply_mask(&xp, &[false; 3]).unwrap(), xp);
        let m = apply_mask(&xp, &[false, true, false]).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 3.0, 4.0, 0.0, 6.0]);
    }

    #[test]
    fn perfect_reconstruction_is_zero_and_ignores_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let targets = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let mask = [true, false, false, false, true, false];
        let mut t = Tape::new();
        let p = t.constant(targets.clone());
        let l = reconstruction_error(&mut t, p, &targets, &mask).unwrap();
        assert_eq!(t.value(l).data(), &[0.0]);
        let mut noisy = targets.clone();
        for (i, v) in noisy.data_mut().iter_mut().enumerate() {
            if !mask[i / 4] {
                *v += 100.0;
            }
        }
        let p = t.constant(noisy);
        let l = reconstruction_error(&mut t, p, &targets, &mask).unwrap();
        assert_eq!(t.value(l).data(), &[0.0]);
    }

    #[test]
    fn zero_prediction_gives_mean_square_of_masked_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let targets = Tensor::uniform(&[4, 5, 3], -2.0, 2.0, &mut rng);
        let mask: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let expected = {
            let sel: Vec<f64> = targets
                .data()
                .iter()
                .enumerate()
                .filter(|(i, _)| mask[i / 3])
                .map(|(_, v)| v * v)
                .collect();
            sel.iter().sum::<f64>() / sel.len() as f64
        };
        let mut t = Tape::new();
        let p = t.constant(Tensor::zeros(&[4, 5, 3]));
        let l = reconstruction_error(&mut t, p, &targets, &mask).unwrap();
        assert!((t.value(l).data()[0] - expected).abs() < 1e-12);
    }

    fn batch(seed: u64) -> (Backbone, ReconHead, PretrainBatch) {
        let b = Backbone::new(tiny(), seed).unwrap();
        let h = ReconHead::new(8, 4, seed + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let x = sine_series(4, 16, seed);
        let pb = PretrainBatch::new(&x, 2, 4, &MaskSpec::default(), &mut rng).unwrap();
        (b, h, pb)
    }

    #[test]
    fn identical_masks_give_zero_similarity_loss() {
        let (b, h, mut pb) = batch(4);
        pb.mask_b = pb.mask_a.clone();
        let mut t = Tape::new();
        let bb = b.store.bind(&mut t, true);
        let hb = h.store.bind(&mut t, true);
        let l = siamese_step(&mut t, &b, &bb, &h, &hb, &pb, 0.1, None).unwrap();
        assert_eq!(t.value(l.sim).data(), &[0.0]);
        assert_eq!(t.value(l.recon_a), t.value(l.recon_b));
    }

    #[test]
    fn zero_lambda_gradients_are_sum_of_single_views() {
        let (b, h, pb) = batch(5);
        let grads = |views: &[&[bool]], siamese: bool| -> Vec<Tensor> {
            let mut t = Tape::new();
            let bb = b.store.bind(&mut t, true);
            let hb = h.store.bind(&mut t, true);
            let root = if siamese {
                siamese_step(&mut t, &b, &bb, &h, &hb, &pb, 0.0, None)
                    .unwrap()
                    .total
            } else {
                masked_view_loss(&mut t, &b, &bb, &h, &hb, &pb.patches, views[0], None)
                    .unwrap()
                    .0
            };
            t.backward(root).unwrap();
            let mut g = bb.grads(&t);
            g.extend(hb.grads(&t));
            g
        };
        let both = grads(&[], true);
        let a = grads(&[&pb.mask_a], false);
        let c = grads(&[&pb.mask_b], false);
        for ((s, x), y) in both.iter().zip(&a).zip(&c) {
            for ((s, x), y) in s.data().iter().zip(x.data()).zip(y.data()) {
                assert!((s - (x + y)).abs() <= 1e-12 * (1.0 + s.abs()));
            }
        }
    }

    #[test]
    fn zero_lambda_total_is_sum_of_recon() {
        let (b, h, pb) = batch(6);
        let mut t = Tape::new();
        let bb = b.store.bind(&mut t, true);
        let hb = h.store.bind(&mut t, true);
        let l = siamese_step(&mut t, &b, &bb, &h, &hb, &pb, 0.0, None).unwrap();
        let sum = t.value(l.recon_a).data()[0] + t.value(l.recon_b).data()[0];
        assert_eq!(t.value(l.total).data()[0], sum);
    }

    #[test]
    fn shared_masks_repeat_per_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = MaskSpec {
            share_across_channels: true,
            ..MaskSpec::default()
        };
        let pb = PretrainBatch::new(&sine_series(6, 16, 1), 3, 4, &spec, &mut rng).unwrap();
        let k = 4;
        for w in 0..2 {
            let base = &pb.mask_a[w * 3 * k..w * 3 * k + k];
            for c in 1..3 {
                assert_eq!(base, &pb.mask_a[(w * 3 + c) * k..(w * 3 + c + 1) * k]);
            }
        }
    }

    #[test]
    fn pretraining_is_deterministic_and_learns() {
        let series = vec![sine_series(2, 120, 8)];
        let cfg = PretrainConfig {
            epochs: Some(20),
            batch_size: 16,
            ..PretrainConfig::default()
        };
        let a = pretrain(&series, &tiny(), &cfg, 42).unwrap();
        let b = pretrain(&series, &tiny(), &cfg, 42).unwrap();
        assert_eq!(
            a.backbone.store.fingerprint(),
            b.backbone.store.fingerprint()
        );
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 20);
        assert!(a.log[19].total < a.log[0].total, "{:?}", a.log);
    }

    #[test]
    fn single_window_smoke() {
        let series = vec![sine_series(1, 16, 9)];
        let cfg = PretrainConfig {
            epochs: Some(1),
            ..PretrainConfig::default()
        };
        let out = pretrain(&series, &tiny(), &cfg, 1).unwrap();
        assert!(out.log[0].total.is_finite());
        assert_eq!(cfg.epochs_for(1), 1);
        assert_eq!(PretrainConfig::default().epochs_for(1), 20);
        assert_eq!(PretrainConfig::default().epochs_for(3), 100);
    }

    #[test]
    fn epoch_log_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log = vec![EpochLog {
            epoch: 1,
            recon_loss_a: 0.5,
            recon_loss_b: 0.25,
            sim_loss: 0.125,
            total: 0.7625,
            wall_time: None,
        }];
        write_epoch_log(&path, &log).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "epoch,recon_loss_A,recon_loss_B,sim_loss,total,wall_time\n1,0.5,0.25,0.125,0.7625,NA\n"
        );
    }

    #[test]
    fn window_index_counts() {
        let s = vec![Tensor::zeros(&[2, 20]), Tensor::zeros(&[2, 16])];
        assert_eq!(window_index(&s, 16, 1).len(), 5 + 1);
        assert_eq!(window_index(&s, 16, 2).len(), 3 + 1);
        assert!(window_index(&s, 21, 1).is_empty());
    }
}
