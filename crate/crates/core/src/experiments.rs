//! Experiment drivers: per-sector model comparison (E1) and multi-sector
//! pre-training (E2), with aggregation, paired t-tests and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, ModelConfig};
use crate::baselines::{
    persistence_forecast, ridge_data, ridge_fit, ridge_forecast, LinearNet, LinearNetConfig,
    RIDGE_GRID,
};
use crate::data::{
    generate_sectors, ingest_csv, make_windows, normalize_split, NormStats, SectorProfile,
    SectorSeries, SplitSpec, Splits, WindowSet,
};
use crate::error::{Error, Result};
use crate::heads::{finetune, forecast_rows, FinetuneConfig};
use crate::metrics::{metrics, Metrics};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::seed;
use crate::stats::paired_t_test;
use crate::tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SIAMTST_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Siamtst,
    Linearnet,
    Ridge,
    Persistence,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Siamtst,
        ModelKind::Linearnet,
        ModelKind::Ridge,
        ModelKind::Persistence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Siamtst => "siamtst",
            ModelKind::Linearnet => "linearnet",
            ModelKind::Ridge => "ridge",
            ModelKind::Persistence => "persistence",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub sectors: usize,
    pub hours: usize,
    pub seed: u64,
    pub profile: SectorProfile,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sectors: 8,
            hours: 2880,
            seed: 0,
            profile: SectorProfile::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// CSV file or directory of CSV files; synthetic data when absent.
    pub csv: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub split: SplitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct E2Config {
    /// Pre-training set sizes; 1 is the single-sector reference arm.
    pub sector_counts: Vec<usize>,
    /// Number of target sectors (the first ones in sorted order).
    pub targets: usize,
    /// Pre-training epochs for multi-sector arms; defaults to 100.
    pub multi_epochs: Option<usize>,
}

impl Default for E2Config {
    fn default() -> Self {
        Self {
            sector_counts: vec![1, 2, 4, 8],
            targets: 2,
            multi_epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Independent repetitions with seeds `seed, seed + 1, ...`.
    pub repeats: usize,
    pub data: DataConfig,
    /// Explicit sector selection; all sectors when absent.
    pub sectors: Option<Vec<String>>,
    pub models: Vec<ModelKind>,
    pub horizons: Vec<usize>,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub linearnet: FinetuneConfig,
    /// Window stride for fine-tuning and baseline training sets.
    pub train_stride: usize,
    /// Window stride for validation and test sets.
    pub eval_stride: usize,
    pub persistence_period: usize,
    pub e2: E2Config,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            repeats: 1,
            data: DataConfig::default(),
            sectors: None,
            models: ModelKind::ALL.to_vec(),
            horizons: vec![24, 48, 96, 168],
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            linearnet: FinetuneConfig::default(),
            train_stride: 1,
            eval_stride: 1,
            persistence_period: 24,
            e2: E2Config::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("model roster is empty".into()));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config(format!(
                "horizons must be positive and non-empty: {:?}",
                self.horizons
            )));
        }
        if self.repeats == 0 || self.train_stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("repeats and strides must be positive".into()));
        }
        if self.persistence_period == 0 {
            return Err(Error::Config("persistence period must be positive".into()));
        }
        self.model.validate()
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

/// Builds the worker pool, honouring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Reads one CSV file or every `*.csv` in a directory (sorted by name).
pub fn ingest_path(path: &Path) -> Result<Vec<SectorSeries>> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut out: BTreeMap<String, SectorSeries> = BTreeMap::new();
    for f in files {
        for s in ingest_csv(&f)?.sectors {
            if out.contains_key(&s.sector_id) {
                return Err(Error::Contract(format!(
                    "sector {} appears in more than one file",
                    s.sector_id
                )));
            }
            out.insert(s.sector_id.clone(), s);
        }
    }
    Ok(out.into_values().collect())
}

/// The configured sectors, sorted by id.
pub fn load_sectors(cfg: &ExperimentConfig) -> Result<Vec<SectorSeries>> {
    let mut all = match &cfg.data.csv {
        Some(p) => ingest_path(p)?,
        None => {
            let s = &cfg.data.synthetic;
            generate_sectors(s.sectors, s.seed, s.hours, &s.profile)?
        }
    };
    all.sort_by(|a, b| a.sector_id.cmp(&b.sector_id));
    if let Some(list) = &cfg.sectors {
        let want: BTreeSet<&str> = list.iter().map(String::as_str).collect();
        for id in &want {
            if !all.iter().any(|s| s.sector_id == *id) {
                return Err(Error::Config(format!("sector {id} not found in the data")));
            }
        }
        all.retain(|s| want.contains(s.sector_id.as_str()));
    }
    if all.is_empty() {
        return Err(Error::Empty {
            what: "sector selection".into(),
        });
    }
    Ok(all)
}

/// A sector with its normalised splits.
pub struct Prepared {
    pub sector: SectorSeries,
    pub splits: Splits,
    pub stats: NormStats,
}

pub fn prepare(sector: &SectorSeries, split: &SplitSpec) -> Result<Prepared> {
    let (splits, stats) = normalize_split(sector, split)?;
    Ok(Prepared {
        sector: sector.clone(),
        splits,
        stats,
    })
}

/// Train, validation and test windows for one horizon.
pub struct HorizonWindows {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

pub fn horizon_windows(
    p: &Prepared,
    cfg: &ExperimentConfig,
    horizon: usize,
) -> Result<HorizonWindows> {
    let l = cfg.model.context_len;
    Ok(HorizonWindows {
        train: make_windows(&p.splits.train, l, horizon, cfg.train_stride)?,
        val: make_windows(&p.splits.val, l, horizon, cfg.eval_stride)?,
        test: make_windows(&p.splits.test, l, horizon, cfg.eval_stride)?,
    })
}

/// One forecast value, in the layout of the forecast CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub sector_id: String,
    pub feature: String,
    /// Steps ahead, 1-based.
    pub horizon: usize,
    pub timestamp_index: usize,
    pub y_true: f64,
    pub y_pred: f64,
    pub y_true_denorm: f64,
    pub y_pred_denorm: f64,
}

/// Expands window-major `[W·N, H]` predictions into records for the given windows.
pub fn forecast_records(
    p: &Prepared,
    ws: &WindowSet,
    windows: &[usize],
    pred: &Tensor,
) -> Result<Vec<ForecastRecord>> {
    let (_, truth) = ws.rows(windows)?;
    let (n, h) = (ws.channels(), ws.horizon);
    if pred.shape() != truth.shape() {
        return Err(crate::error::shape_err(
            "forecast_records",
            pred.shape(),
            truth.shape(),
        ));
    }
    let mut out = Vec::with_capacity(pred.numel());
    for (wi, &w) in windows.iter().enumerate() {
        for c in 0..n {
            let r = wi * n + c;
            for s in 0..h {
                let (yt, yp) = (truth.row(r)[s], pred.row(r)[s]);
                out.push(ForecastRecord {
                    sector_id: p.sector.sector_id.clone(),
                    feature: p.sector.features[c].clone(),
                    horizon: s + 1,
                    timestamp_index: ws.target_index(w) + s,
                    y_true: yt,
                    y_pred: yp,
                    y_true_denorm: p.stats.inverse_value(c, yt),
                    y_pred_denorm: p.stats.inverse_value(c, yp),
                });
            }
        }
    }
    Ok(out)
}

pub fn write_forecast_csv(path: &Path, records: &[ForecastRecord]) -> Result<()> {
    write_csv_rows(path, records)
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Normalised and original-scale metrics of window-major predictions.
pub fn score(p: &Prepared, ws: &WindowSet, pred: &Tensor) -> Result<(Metrics, Metrics)> {
    let (_, truth) = ws.all_rows()?;
    let norm = metrics(pred, &truth)?;
    let n = ws.channels();
    let h = ws.horizon;
    let denorm = |x: &Tensor| -> Tensor {
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| p.stats.inverse_value((i / h) % n, v))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    };
    let raw = metrics(&denorm(pred), &denorm(&truth))?;
    Ok((norm, raw))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub model: String,
    /// Sectors in the pre-training set; 0 for models without pre-training.
    pub pretrain_sectors: usize,
    pub sector_id: String,
    pub horizon: usize,
    pub seed: u64,
    pub mae: f64,
    pub mse: f64,
    pub mae_denorm: f64,
    pub mse_denorm: f64,
    pub test_windows: usize,
    pub code_version: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub sector_id: String,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub experiment: String,
    pub model: String,
    pub pretrain_sectors: usize,
    pub horizon: usize,
    pub n: usize,
    pub mean_mae: f64,
    pub std_mae: f64,
    pub mean_mse: f64,
    pub std_mse: f64,
    /// 1 = lowest mean among the arms at this horizon.
    pub rank_mae: usize,
    pub rank_mse: usize,
    pub code_version: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestRow {
    pub experiment: String,
    pub horizon: usize,
    pub metric: String,
    /// `label` of the first arm, e.g. `siamtst` or `siamtst@8`.
    pub arm_a: String,
    pub arm_b: String,
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
    pub significant: bool,
    pub degenerate: bool,
    pub code_version: String,
    pub config_hash: String,
}

/// A model's forecast for the last test window, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub experiment: String,
    pub model: String,
    pub pretrain_sectors: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub record: ForecastRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub experiment: String,
    pub code_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<Aggregate>,
    pub tests: Vec<TTestRow>,
    pub failures: Vec<Failure>,
    #[serde(skip)]
    pub trajectories: Vec<TrajectoryRow>,
}

fn arm_label(model: &str, k: usize) -> String {
    if model == "siamtst" && k > 1 {
        format!("{model}@{k}")
    } else {
        model.to_string()
    }
}

struct Ctx<'a> {
    experiment: &'a str,
    cfg: &'a ExperimentConfig,
    hash: String,
}

impl Ctx<'_> {
    #[allow(clippy::too_many_arguments)]
    fn row(
        &self,
        model: ModelKind,
        k: usize,
        p: &Prepared,
        ws: &WindowSet,
        seed: u64,
        m: (Metrics, Metrics),
    ) -> ResultRow {
        ResultRow {
            experiment: self.experiment.into(),
            model: model.name().into(),
            pretrain_sectors: k,
            sector_id: p.sector.sector_id.clone(),
            horizon: ws.horizon,
            seed,
            mae: m.0.mae,
            mse: m.0.mse,
            mae_denorm: m.1.mae,
            mse_denorm: m.1.mse,
            test_windows: ws.len(),
            code_version: VERSION.into(),
            config_hash: self.hash.clone(),
        }
    }

    fn trajectory(
        &self,
        model: ModelKind,
        k: usize,
        p: &Prepared,
        ws: &WindowSet,
        seed: u64,
        pred: &Tensor,
    ) -> Result<Vec<TrajectoryRow>> {
        let last = ws.len() - 1;
        let n = ws.channels();
        let rows: Vec<f64> = pred.data()[last * n * ws.horizon..].to_vec();
        let t = Tensor::new(vec![n, ws.horizon], rows)?;
        Ok(forecast_records(p, ws, &[last], &t)?
            .into_iter()
            .map(|record| TrajectoryRow {
                experiment: self.experiment.into(),
                model: model.name().into(),
                pretrain_sectors: k,
                seed,
                record,
            })
            .collect())
    }
}

type JobOutput = (Vec<ResultRow>, Vec<TrajectoryRow>);

/// Fine-tunes and scores the forecast head for every horizon.
fn siamtst_arm(
    ctx: &Ctx<'_>,
    backbone: &Backbone,
    p: &Prepared,
    k: usize,
    seed: u64,
) -> Result<JobOutput> {
    let (mut rows, mut traj) = (Vec::new(), Vec::new());
    for &h in &ctx.cfg.horizons {
        let w = horizon_windows(p, ctx.cfg, h)?;
        let tag = format!("finetune/{}/h{h}", p.sector.sector_id);
        let (head, _) = finetune(
            backbone,
            &w.train,
            &ctx.cfg.finetune,
            seed::derive(seed, &tag),
        )?;
        let (ctx_rows, _) = w.test.all_rows()?;
        let pred = forecast_rows(&ctx_rows, backbone, &head)?;
        rows.push(ctx.row(
            ModelKind::Siamtst,
            k,
            p,
            &w.test,
            seed,
            score(p, &w.test, &pred)?,
        ));
        traj.extend(ctx.trajectory(ModelKind::Siamtst, k, p, &w.test, seed, &pred)?);
    }
    Ok((rows, traj))
}

fn pretrain_single(cfg: &ExperimentConfig, p: &Prepared, seed: u64) -> Result<Backbone> {
    let tag = format!("pretrain/{}", p.sector.sector_id);
    let mut pc = cfg.pretrain.clone();
    pc.epochs = Some(pc.epochs_for(1));
    Ok(pretrain(
        std::slice::from_ref(&p.splits.train.values),
        &cfg.model,
        &pc,
        seed::derive(seed, &tag),
    )?
    .backbone)
}

fn e1_sector(ctx: &Ctx<'_>, p: &Prepared, seed: u64) -> Result<JobOutput> {
    let cfg = ctx.cfg;
    let (mut rows, mut traj) = (Vec::new(), Vec::new());
    let needs_backbone = cfg
        .models
        .iter()
        .any(|m| matches!(m, ModelKind::Siamtst | ModelKind::Ridge));
    let backbone = if needs_backbone {
        Some(pretrain_single(cfg, p, seed)?)
    } else {
        None
    };
    for &model in &cfg.models {
        match model {
            ModelKind::Siamtst => {
                let b = backbone.as_ref().expect("pre-trained");
                let (r, t) = siamtst_arm(ctx, b, p, 1, seed)?;
                rows.extend(r);
                traj.extend(t);
            }
            ModelKind::Linearnet => {
                for &h in &cfg.horizons {
                    let w = horizon_windows(p, cfg, h)?;
                    let tag = format!("linearnet/{}/h{h}", p.sector.sector_id);
                    let s = seed::derive(seed, &tag);
                    let mut net = LinearNet::new(
                        LinearNetConfig {
                            context_len: cfg.model.context_len,
                            patch_len: cfg.model.patch_len,
                            d_model: cfg.model.d_model,
                            horizon: h,
                        },
                        s,
                    )?;
                    net.train(&w.train, &cfg.linearnet, s)?;
                    let (c, _) = w.test.all_rows()?;
                    let pred = net.forecast_rows(&c)?;
                    rows.push(ctx.row(model, 0, p, &w.test, seed, score(p, &w.test, &pred)?));
                    traj.extend(ctx.trajectory(model, 0, p, &w.test, seed, &pred)?);
                }
            }
            ModelKind::Ridge => {
                let b = backbone.as_ref().expect("pre-trained");
                for &h in &cfg.horizons {
                    let w = horizon_windows(p, cfg, h)?;
                    let tr = ridge_data(b, &w.train)?;
                    let va = ridge_data(b, &w.val)?;
                    let te = ridge_data(b, &w.test)?;
                    let m = ridge_fit(
                        &tr.features,
                        &tr.targets,
                        &va.features,
                        &va.targets,
                        &RIDGE_GRID,
                    )?;
                    let pred = ridge_forecast(&m, &te, h)?;
                    rows.push(ctx.row(model, 1, p, &w.test, seed, score(p, &w.test, &pred)?));
                    traj.extend(ctx.trajectory(model, 1, p, &w.test, seed, &pred)?);
                }
            }
            ModelKind::Persistence => {
                for &h in &cfg.horizons {
                    let w = horizon_windows(p, cfg, h)?;
                    let (c, _) = w.test.all_rows()?;
                    let pred = persistence_forecast(&c, h, cfg.persistence_period)?;
                    rows.push(ctx.row(model, 0, p, &w.test, seed, score(p, &w.test, &pred)?));
                    traj.extend(ctx.trajectory(model, 0, p, &w.test, seed, &pred)?);
                }
            }
        }
    }
    Ok((rows, traj))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Mean ± sample std per (model, pre-training set size, horizon), ranked
/// within each horizon.
pub fn aggregate(experiment: &str, rows: &[ResultRow], hash: &str) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(usize, String, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.horizon, r.model.clone(), r.pretrain_sectors))
            .or_default()
            .push(r);
    }
    let mut out: Vec<Aggregate> = groups
        .into_iter()
        .map(|((horizon, model, k), g)| {
            let (mean_mae, std_mae) = mean_std(&g.iter().map(|r| r.mae).collect::<Vec<_>>());
            let (mean_mse, std_mse) = mean_std(&g.iter().map(|r| r.mse).collect::<Vec<_>>());
            Aggregate {
                experiment: experiment.into(),
                model,
                pretrain_sectors: k,
                horizon,
                n: g.len(),
                mean_mae,
                std_mae,
                mean_mse,
                std_mse,
                rank_mae: 0,
                rank_mse: 0,
                code_version: VERSION.into(),
                config_hash: hash.into(),
            }
        })
        .collect();
    let horizons: BTreeSet<usize> = out.iter().map(|a| a.horizon).collect();
    for h in horizons {
        let idx: Vec<usize> = (0..out.len()).filter(|&i| out[i].horizon == h).collect();
        for metric in [0, 1] {
            let key = |a: &Aggregate| if metric == 0 { a.mean_mae } else { a.mean_mse };
            let mut sorted = idx.clone();
            sorted.sort_by(|&a, &b| key(&out[a]).total_cmp(&key(&out[b])));
            for (rank, i) in sorted.into_iter().enumerate() {
                if metric == 0 {
                    out[i].rank_mae = rank + 1;
                } else {
                    out[i].rank_mse = rank + 1;
                }
            }
        }
    }
    out
}

/// Paired tests of arm `a` against arm `b` at every horizon, matched by
/// (sector, seed).
pub fn compare_arms(
    experiment: &str,
    rows: &[ResultRow],
    a: (&str, usize),
    b: (&str, usize),
    hash: &str,
) -> Result<Vec<TTestRow>> {
    let pick = |arm: (&str, usize), h: usize| -> BTreeMap<(String, u64), &ResultRow> {
        rows.iter()
            .filter(|r| r.model == arm.0 && r.pretrain_sectors == arm.1 && r.horizon == h)
            .map(|r| ((r.sector_id.clone(), r.seed), r))
            .collect()
    };
    let horizons: BTreeSet<usize> = rows.iter().map(|r| r.horizon).collect();
    let mut out = Vec::new();
    for h in horizons {
        let (ra, rb) = (pick(a, h), pick(b, h));
        let keys: Vec<_> = ra.keys().filter(|k| rb.contains_key(*k)).cloned().collect();
        if keys.len() < 2 {
            continue;
        }
        for metric in ["mae", "mse"] {
            let get = |r: &ResultRow| if metric == "mae" { r.mae } else { r.mse };
            let xa: Vec<f64> = keys.iter().map(|k| get(ra[k])).collect();
            let xb: Vec<f64> = keys.iter().map(|k| get(rb[k])).collect();
            let t = paired_t_test(&xa, &xb)?;
            out.push(TTestRow {
                experiment: experiment.into(),
                horizon: h,
                metric: metric.into(),
                arm_a: arm_label(a.0, a.1),
                arm_b: arm_label(b.0, b.1),
                n: keys.len(),
                mean_diff: t.mean_diff,
                t: t.t,
                p_value: t.p_value,
                significant: t.p_value < 0.05,
                degenerate: t.degenerate,
                code_version: VERSION.into(),
                config_hash: hash.into(),
            });
        }
    }
    Ok(out)
}

fn collect_jobs<J, F>(
    jobs: Vec<J>,
    label: impl Fn(&J) -> (String, u64),
    f: F,
) -> Result<(JobOutput, Vec<Failure>)>
where
    J: Send + Sync,
    F: Fn(&J) -> Result<JobOutput> + Send + Sync,
{
    let pool = thread_pool()?;
    let results: Vec<Result<JobOutput>> = pool.install(|| jobs.par_iter().map(&f).collect());
    let (mut rows, mut traj, mut failures) = (Vec::new(), Vec::new(), Vec::new());
    for (job, res) in jobs.iter().zip(results) {
        match res {
            Ok((r, t)) => {
                rows.extend(r);
                traj.extend(t);
            }
            Err(e) => {
                let (sector_id, seed) = label(job);
                warn!("sector {sector_id} (seed {seed}) failed and is excluded: {e}");
                failures.push(Failure {
                    sector_id,
                    seed,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(((rows, traj), failures))
}

fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (
            a.horizon,
            &a.model,
            a.pretrain_sectors,
            &a.sector_id,
            a.seed,
        )
            .cmp(&(
                b.horizon,
                &b.model,
                b.pretrain_sectors,
                &b.sector_id,
                b.seed,
            ))
    });
}

/// Per-sector pre-training and fine-tuning of SiamTST against LinearNet,
/// ridge on the pre-trained representations and seasonal persistence.
pub fn run_e1(cfg: &ExperimentConfig) -> Result<ForecastReport> {
    cfg.validate()?;
    let sectors = load_sectors(cfg)?;
    let ctx = Ctx {
        experiment: "e1",
        cfg,
        hash: cfg.fingerprint(),
    };
    let prepared: Vec<Result<Prepared>> = sectors
        .iter()
        .map(|s| prepare(s, &cfg.data.split))
        .collect();
    let jobs: Vec<(usize, u64)> = cfg
        .run_seeds()
        .into_iter()
        .flat_map(|s| (0..sectors.len()).map(move |i| (i, s)))
        .collect();
    info!("E1: {} sectors x {} seeds", sectors.len(), cfg.repeats);
    let ((mut rows, trajectories), failures) = collect_jobs(
        jobs,
        |&(i, s)| (sectors[i].sector_id.clone(), s),
        |&(i, s)| match &prepared[i] {
            Ok(p) => e1_sector(&ctx, p, s),
            Err(e) => Err(Error::Contract(e.to_string())),
        },
    )?;
    sort_rows(&mut rows);
    let mut tests = Vec::new();
    if cfg.models.contains(&ModelKind::Siamtst) {
        for &m in cfg.models.iter().filter(|&&m| m != ModelKind::Siamtst) {
            let k = if m == ModelKind::Ridge { 1 } else { 0 };
            tests.extend(compare_arms(
                "e1",
                &rows,
                ("siamtst", 1),
                (m.name(), k),
                &ctx.hash,
            )?);
        }
    }
    Ok(ForecastReport {
        experiment: "e1".into(),
        code_version: VERSION.into(),
        seed: cfg.seed,
        aggregates: aggregate("e1", &rows, &ctx.hash),
        config_hash: ctx.hash,
        config: cfg.clone(),
        rows,
        tests,
        failures,
        trajectories,
    })
}

/// Indices of the pre-training set for target `t`: the target followed by
/// the next `k − 1` sectors in sorted order, wrapping around.
pub fn pretrain_set(t: usize, k: usize, total: usize) -> Vec<usize> {
    (0..k).map(|j| (t + j) % total).collect()
}

fn e2_job(
    ctx: &Ctx<'_>,
    prepared: &[Prepared],
    t: usize,
    k: usize,
    seed: u64,
) -> Result<JobOutput> {
    let cfg = ctx.cfg;
    let target = &prepared[t];
    let backbone = if k == 1 {
        pretrain_single(cfg, target, seed)?
    } else {
        let series: Vec<Tensor> = pretrain_set(t, k, prepared.len())
            .into_iter()
            .map(|i| prepared[i].splits.train.values.clone())
            .collect();
        let mut pc = cfg.pretrain.clone();
        pc.epochs = Some(cfg.e2.multi_epochs.unwrap_or_else(|| pc.epochs_for(k)));
        let tag = format!("pretrain/{}/k{k}", target.sector.sector_id);
        pretrain(&series, &cfg.model, &pc, seed::derive(seed, &tag))?.backbone
    };
    siamtst_arm(ctx, &backbone, target, k, seed)
}

/// Multi-sector pre-training: one backbone per (target, k), fine-tuned and
/// scored on the target only.
pub fn run_e2(cfg: &ExperimentConfig) -> Result<ForecastReport> {
    cfg.validate()?;
    let sectors = load_sectors(cfg)?;
    if sectors.len() < 2 {
        return Err(Error::Config(format!(
            "E2 needs at least 2 sectors, found {}",
            sectors.len()
        )));
    }
    let counts = &cfg.e2.sector_counts;
    if counts.is_empty() || counts.iter().any(|&k| k == 0 || k > sectors.len()) {
        return Err(Error::Config(format!(
            "sector counts {counts:?} must lie in 1..={}",
            sectors.len()
        )));
    }
    let targets = cfg.e2.targets.clamp(1, sectors.len());
    let ctx = Ctx {
        experiment: "e2",
        cfg,
        hash: cfg.fingerprint(),
    };
    let prepared = sectors
        .iter()
        .map(|s| prepare(s, &cfg.data.split))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for s in cfg.run_seeds() {
        for t in 0..targets {
            for &k in counts {
                jobs.push((t, k, s));
            }
        }
    }
    info!(
        "E2: {targets} targets x {counts:?} sector counts x {} seeds",
        cfg.repeats
    );
    let ((mut rows, trajectories), failures) = collect_jobs(
        jobs,
        |&(t, _, s)| (sectors[t].sector_id.clone(), s),
        |&(t, k, s)| e2_job(&ctx, &prepared, t, k, s),
    )?;
    sort_rows(&mut rows);
    let base = *counts.iter().min().expect("non-empty");
    let mut tests = Vec::new();
    for &k in counts.iter().filter(|&&k| k != base) {
        tests.extend(compare_arms(
            "e2",
            &rows,
            ("siamtst", k),
            ("siamtst", base),
            &ctx.hash,
        )?);
    }
    Ok(ForecastReport {
        experiment: "e2".into(),
        code_version: VERSION.into(),
        seed: cfg.seed,
        aggregates: aggregate("e2", &rows, &ctx.hash),
        config_hash: ctx.hash,
        config: cfg.clone(),
        rows,
        tests,
        failures,
        trajectories,
    })
}

/// Writes `results.csv`, `aggregates.csv`, `ttests.csv`, `failures.csv`,
/// `trajectories.csv` and `summary.json` under `dir`.
pub fn write_report(report: &ForecastReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv_rows(&dir.join("results.csv"), &report.rows)?;
    write_csv_rows(&dir.join("aggregates.csv"), &report.aggregates)?;
    write_csv_rows(&dir.join("ttests.csv"), &report.tests)?;
    let failures: Vec<_> = report
        .failures
        .iter()
        .map(|f| {
            (
                &f.sector_id,
                f.seed,
                &f.reason,
                VERSION,
                &report.config_hash,
            )
        })
        .collect();
    let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
    w.write_record(["sector_id", "seed", "reason", "code_version", "config_hash"])?;
    for f in failures {
        w.serialize(f)?;
    }
    w.flush()?;
    write_trajectories(&dir.join("trajectories.csv"), &report.trajectories)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(report)? + "\n",
    )?;
    Ok(())
}

fn write_trajectories(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "experiment",
        "model",
        "pretrain_sectors",
        "seed",
        "sector_id",
        "feature",
        "horizon",
        "timestamp_index",
        "y_true",
        "y_pred",
        "y_true_denorm",
        "y_pred_denorm",
    ])?;
    for r in rows {
        let f = &r.record;
        w.write_record([
            r.experiment.clone(),
            r.model.clone(),
            r.pretrain_sectors.to_string(),
            r.seed.to_string(),
            f.sector_id.clone(),
            f.feature.clone(),
            f.horizon.to_string(),
            f.timestamp_index.to_string(),
            f.y_true.to_string(),
            f.y_pred.to_string(),
            f.y_true_denorm.to_string(),
            f.y_pred_denorm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct TrajectoryIn {
    experiment: String,
    model: String,
    pretrain_sectors: usize,
    seed: u64,
    sector_id: String,
    feature: String,
    horizon: usize,
    timestamp_index: usize,
    y_true_denorm: f64,
    y_pred_denorm: f64,
}

/// Selection for [`plot_tables`].
#[derive(Debug, Clone, Default)]
pub struct PlotSelection {
    pub sector: Option<String>,
    pub feature: Option<String>,
    /// Forecast window length; the largest available when absent.
    pub window: Option<usize>,
}

/// Turns a run directory into plot-ready tables:
/// `plot_metrics.csv` (one line per arm and horizon) and
/// `plot_forecasts.csv` (wide: step, truth, one column per arm) for one
/// sector, feature and window length. Returns the files written.
pub fn plot_tables(run_dir: &Path, out: &Path, sel: &PlotSelection) -> Result<Vec<PathBuf>> {
    let report: ForecastReport =
        serde_json::from_str(&fs::read_to_string(run_dir.join("summary.json"))?)?;
    fs::create_dir_all(out)?;
    let metrics_path = out.join("plot_metrics.csv");
    let mut w = csv::Writer::from_path(&metrics_path)?;
    w.write_record([
        "experiment",
        "arm",
        "horizon",
        "mean_mae",
        "std_mae",
        "mean_mse",
        "std_mse",
        "code_version",
        "config_hash",
    ])?;
    for a in &report.aggregates {
        w.write_record([
            a.experiment.clone(),
            arm_label(&a.model, a.pretrain_sectors),
            a.horizon.to_string(),
            a.mean_mae.to_string(),
            a.std_mae.to_string(),
            a.mean_mse.to_string(),
            a.std_mse.to_string(),
            a.code_version.clone(),
            a.config_hash.clone(),
        ])?;
    }
    w.flush()?;

    let mut rdr = csv::Reader::from_path(run_dir.join("trajectories.csv"))?;
    let all: Vec<TrajectoryIn> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    let window = match sel.window {
        Some(h) => h,
        None => all
            .iter()
            .map(|r| r.horizon)
            .max()
            .ok_or_else(|| Error::Empty {
                what: "trajectory table".into(),
            })?,
    };
    // the window length of a trajectory row is the largest step of its group
    let mut groups: BTreeMap<(String, String, String, usize, u64), Vec<&TrajectoryIn>> =
        BTreeMap::new();
    for r in &all {
        groups
            .entry((
                r.sector_id.clone(),
                r.feature.clone(),
                arm_label(&r.model, r.pretrain_sectors),
                r.timestamp_index - r.horizon,
                r.seed,
            ))
            .or_default()
            .push(r);
    }
    let sector = sel
        .sector
        .clone()
        .or_else(|| all.first().map(|r| r.sector_id.clone()))
        .unwrap_or_default();
    let feature = sel
        .feature
        .clone()
        .or_else(|| all.first().map(|r| r.feature.clone()))
        .unwrap_or_default();
    let mut arms: BTreeMap<String, Vec<&TrajectoryIn>> = BTreeMap::new();
    for ((s, f, arm, _, seed), g) in &groups {
        if *s == sector && *f == feature && *seed == report.seed && g.len() == window {
            arms.entry(arm.clone()).or_insert_with(|| g.clone());
        }
    }
    if arms.is_empty() {
        return Err(Error::Empty {
            what: format!("trajectories for {sector}/{feature} with window {window}"),
        });
    }
    let experiment = all
        .first()
        .map(|r| r.experiment.clone())
        .unwrap_or_default();
    let forecasts_path = out.join("plot_forecasts.csv");
    let mut w = csv::Writer::from_path(&forecasts_path)?;
    let mut header = vec![
        "experiment".to_string(),
        "sector_id".into(),
        "feature".into(),
        "step".into(),
        "timestamp_index".into(),
        "y_true".into(),
    ];
    header.extend(arms.keys().cloned());
    w.write_record(&header)?;
    let first = arms.values().next().expect("non-empty");
    for (i, base) in first.iter().enumerate() {
        let mut rec = vec![
            experiment.clone(),
            sector.clone(),
            feature.clone(),
            base.horizon.to_string(),
            base.timestamp_index.to_string(),
            base.y_true_denorm.to_string(),
        ];
        rec.extend(arms.values().map(|g| g[i].y_pred_denorm.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(vec![metrics_path, forecasts_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                synthetic: SyntheticConfig {
                    sectors: 2,
                    hours: 600,
                    ..SyntheticConfig::default()
                },
                ..DataConfig::default()
            },
            horizons: vec![12],
            model: ModelConfig {
                context_len: 48,
                patch_len: 12,
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                ..ModelConfig::default()
            },
            pretrain: PretrainConfig {
                epochs: Some(1),
                stride: 8,
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig {
                epochs: 2,
                ..FinetuneConfig::default()
            },
            linearnet: FinetuneConfig {
                epochs: 2,
                ..FinetuneConfig::default()
            },
            train_stride: 4,
            eval_stride: 12,
            e2: E2Config {
                sector_counts: vec![1, 2],
                targets: 2,
                multi_epochs: Some(1),
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_partial_json() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"seed": 5, "horizons": [24]}"#).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.horizons, vec![24]);
        assert_eq!(c.models.len(), 4);
        assert_eq!(c.model.d_model, 64);
        let d = ExperimentConfig::default();
        assert_eq!(d.horizons, vec![24, 48, 96, 168]);
        assert_eq!(d.e2.sector_counts, vec![1, 2, 4, 8]);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"models": ["nope"]}"#).is_err());
        let bad = ExperimentConfig {
            horizons: vec![0],
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn e1_smoke_has_row_per_model_and_sector() {
        let cfg = tiny_config();
        let r = run_e1(&cfg).unwrap();
        assert!(r.failures.is_empty());
        assert_eq!(r.rows.len(), 2 * 4);
        assert_eq!(r.aggregates.len(), 4);
        for a in &r.aggregates {
            let mine: Vec<f64> = r
                .rows
                .iter()
                .filter(|x| x.model == a.model && x.horizon == a.horizon)
                .map(|x| x.mse)
                .collect();
            assert!((a.mean_mse - mine.iter().sum::<f64>() / mine.len() as f64).abs() < 1e-15);
        }
        let mut ranks: Vec<usize> = r.aggregates.iter().map(|a| a.rank_mse).collect();
        ranks.sort();
        assert_eq!(ranks, vec![1, 2, 3, 4]);
        assert_eq!(r.tests.len(), 3 * 2);
    }

    #[test]
    fn e2_unit_arm_matches_e1() {
        let mut cfg = tiny_config();
        cfg.models = vec![ModelKind::Siamtst];
        let e1 = run_e1(&cfg).unwrap();
        let e2 = run_e2(&cfg).unwrap();
        let unit: Vec<_> = e2.rows.iter().filter(|r| r.pretrain_sectors == 1).collect();
        assert_eq!(unit.len(), e1.rows.len());
        for (a, b) in unit.iter().zip(&e1.rows) {
            assert_eq!((a.mae, a.mse), (b.mae, b.mse));
        }
        assert_eq!(e2.rows.len(), 4);
    }

    #[test]
    fn failing_sector_is_recorded() {
        let mut cfg = tiny_config();
        cfg.models = vec![ModelKind::Persistence];
        cfg.horizons = vec![200];
        let r = run_e1(&cfg).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.failures.len(), 2);
    }

    #[test]
    fn pretrain_sets_wrap() {
        assert_eq!(pretrain_set(6, 4, 8), vec![6, 7, 0, 1]);
        assert_eq!(pretrain_set(0, 1, 8), vec![0]);
    }

    #[test]
    fn report_files_and_plot_tables() {
        let mut cfg = tiny_config();
        cfg.models = vec![ModelKind::Persistence, ModelKind::Linearnet];
        let r = run_e1(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(&r, dir.path()).unwrap();
        for f in [
            "results.csv",
            "aggregates.csv",
            "ttests.csv",
            "failures.csv",
            "trajectories.csv",
            "summary.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let results = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert!(results
            .lines()
            .next()
            .unwrap()
            .ends_with("code_version,config_hash"));
        let files = plot_tables(
            dir.path(),
            &dir.path().join("plots"),
            &PlotSelection::default(),
        )
        .unwrap();
        let wide = fs::read_to_string(&files[1]).unwrap();
        assert!(wide
            .lines()
            .next()
            .unwrap()
            .ends_with("y_true,linearnet,persistence"));
        assert_eq!(wide.lines().count(), 1 + 12);
    }
}
