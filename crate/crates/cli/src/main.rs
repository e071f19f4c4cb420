//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 when a command fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;
use siamtst::backbone::Backbone;
use siamtst::baselines::{
    persistence_forecast, ridge_data, ridge_fit, ridge_forecast, LinearNet, LinearNetConfig,
    RIDGE_GRID,
};
use siamtst::checkpoint::Checkpoint;
use siamtst::data::{generate_sectors, make_windows, write_csv, WindowSet};
use siamtst::experiments::{
    forecast_records, horizon_windows, load_sectors, plot_tables, prepare, run_e1, run_e2,
    write_forecast_csv, write_report, ExperimentConfig, ForecastRecord, PlotSelection, Prepared,
    VERSION,
};
use siamtst::heads::{finetune, forecast_rows, ForecastHead};
use siamtst::metrics::metrics;
use siamtst::pretrain::{pretrain, write_epoch_log};
use siamtst::{seed, Error, Result, Tensor};

#[derive(Parser, Debug)]
#[command(
    name = "siamtst",
    version,
    about = "Siamese patch-transformer forecasting toolkit"
)]
struct Cli {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write one synthetic CSV per sector.
    Generate,
    /// Pre-train a backbone on the selected sectors' training splits.
    Pretrain(SectorArgs),
    /// Train a forecast head on a frozen backbone.
    Finetune(FinetuneArgs),
    /// Forecast test windows with a backbone and head.
    Forecast(ForecastArgs),
    /// Train and run a baseline on one sector.
    Baseline(BaselineArgs),
    /// Score a forecast CSV.
    Evaluate(EvaluateArgs),
    /// Per-sector comparison of all models.
    E1,
    /// Multi-sector pre-training study.
    E2,
    /// Plot-ready tables from an E1 or E2 output directory.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SectorArgs {
    /// Sector ids; the config selection when omitted.
    #[arg(long = "sector")]
    sectors: Vec<String>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sector: Option<String>,
    /// Forecast length; the first configured horizon when omitted.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    sector: Option<String>,
    /// Step between forecast windows; the horizon when omitted.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineKind {
    Linearnet,
    Ridge,
    Persistence,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(value_enum)]
    kind: BaselineKind,
    #[arg(long)]
    sector: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Backbone checkpoint for ridge.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory written by `e1` or `e2`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    sector: Option<String>,
    #[arg(long)]
    feature: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Generate => generate(&cfg, cli.seed, out),
        Command::Pretrain(a) => pretrain_cmd(&cfg, out, a),
        Command::Finetune(a) => finetune_cmd(&cfg, out, a),
        Command::Forecast(a) => forecast_cmd(&cfg, out, a),
        Command::Baseline(a) => baseline_cmd(&cfg, out, a),
        Command::Evaluate(a) => evaluate_cmd(out, a),
        Command::E1 => {
            let r = run_e1(&cfg)?;
            write_report(&r, out)?;
            info!("E1 report written to {}", out.display());
            Ok(())
        }
        Command::E2 => {
            let r = run_e2(&cfg)?;
            write_report(&r, out)?;
            info!("E2 report written to {}", out.display());
            Ok(())
        }
        Command::Report(a) => {
            let sel = PlotSelection {
                sector: a.sector.clone(),
                feature: a.feature.clone(),
                window: a.horizon,
            };
            for f in plot_tables(&a.input, out, &sel)? {
                info!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

/// `--seed` replaces the synthetic data seed here.
fn generate(cfg: &ExperimentConfig, seed: Option<u64>, out: &Path) -> Result<()> {
    let s = &cfg.data.synthetic;
    let sectors = generate_sectors(s.sectors, seed.unwrap_or(s.seed), s.hours, &s.profile)?;
    for sector in &sectors {
        let path = out.join(format!("{}.csv", sector.sector_id));
        write_csv(&path, std::slice::from_ref(sector))?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn select(cfg: &ExperimentConfig, ids: &[String]) -> Result<Vec<Prepared>> {
    let mut cfg = cfg.clone();
    if !ids.is_empty() {
        cfg.sectors = Some(ids.to_vec());
    }
    load_sectors(&cfg)?
        .iter()
        .map(|s| prepare(s, &cfg.data.split))
        .collect()
}

fn one_sector(cfg: &ExperimentConfig, id: &Option<String>) -> Result<Prepared> {
    let ids: Vec<String> = id.iter().cloned().collect();
    Ok(select(cfg, &ids)?.swap_remove(0))
}

fn horizon_of(cfg: &ExperimentConfig, h: Option<usize>) -> usize {
    h.unwrap_or(cfg.horizons[0])
}

fn pretrain_cmd(cfg: &ExperimentConfig, out: &Path, a: &SectorArgs) -> Result<()> {
    let prepared = select(cfg, &a.sectors)?;
    let series: Vec<Tensor> = prepared
        .iter()
        .map(|p| p.splits.train.values.clone())
        .collect();
    let tag = match prepared.as_slice() {
        [p] => format!("pretrain/{}", p.sector.sector_id),
        _ => "pretrain/multi".to_string(),
    };
    let mut pc = cfg.pretrain.clone();
    pc.epochs = Some(pc.epochs_for(series.len()));
    let outcome = pretrain(&series, &cfg.model, &pc, seed::derive(cfg.seed, &tag))?;
    outcome
        .backbone
        .to_checkpoint()?
        .save(&out.join("backbone.json"))?;
    write_epoch_log(&out.join("pretrain_log.csv"), &outcome.log)?;
    info!(
        "pre-trained on {} sectors; backbone {}",
        prepared.len(),
        outcome.backbone.store.fingerprint()
    );
    Ok(())
}

fn load_backbone(path: &Path) -> Result<Backbone> {
    Backbone::from_checkpoint(&Checkpoint::load(path)?)
}

fn finetune_cmd(cfg: &ExperimentConfig, out: &Path, a: &FinetuneArgs) -> Result<()> {
    let backbone = load_backbone(&a.checkpoint)?;
    let p = one_sector(cfg, &a.sector)?;
    let h = horizon_of(cfg, a.horizon);
    let w = horizon_windows(&p, &with_model(cfg, &backbone), h)?;
    let tag = format!("finetune/{}/h{h}", p.sector.sector_id);
    let (head, losses) = finetune(
        &backbone,
        &w.train,
        &cfg.finetune,
        seed::derive(cfg.seed, &tag),
    )?;
    let path = out.join(format!("head_h{h}.json"));
    head.to_checkpoint()?.save(&path)?;
    info!(
        "head for {} (H={h}) written to {}; final loss {:.6}",
        p.sector.sector_id,
        path.display(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// The config with its model settings replaced by a checkpoint's.
fn with_model(cfg: &ExperimentConfig, backbone: &Backbone) -> ExperimentConfig {
    ExperimentConfig {
        model: backbone.config.clone(),
        ..cfg.clone()
    }
}

fn test_windows(
    cfg: &ExperimentConfig,
    p: &Prepared,
    h: usize,
    stride: Option<usize>,
) -> Result<WindowSet> {
    make_windows(
        &p.splits.test,
        cfg.model.context_len,
        h,
        stride.unwrap_or(h),
    )
}

fn write_forecasts(
    out: &Path,
    name: &str,
    p: &Prepared,
    ws: &WindowSet,
    pred: &Tensor,
) -> Result<()> {
    let idx: Vec<usize> = (0..ws.len()).collect();
    let records = forecast_records(p, ws, &idx, pred)?;
    let path = out.join(name);
    write_forecast_csv(&path, &records)?;
    info!("{} forecasts written to {}", records.len(), path.display());
    Ok(())
}

fn forecast_cmd(cfg: &ExperimentConfig, out: &Path, a: &ForecastArgs) -> Result<()> {
    let backbone = load_backbone(&a.checkpoint)?;
    let head = ForecastHead::from_checkpoint(&Checkpoint::load(&a.head)?)?;
    let cfg = with_model(cfg, &backbone);
    let p = one_sector(&cfg, &a.sector)?;
    let ws = test_windows(&cfg, &p, head.shape.horizon, a.stride)?;
    let (ctx, _) = ws.all_rows()?;
    let pred = forecast_rows(&ctx, &backbone, &head)?;
    write_forecasts(out, "forecast.csv", &p, &ws, &pred)
}

fn baseline_cmd(cfg: &ExperimentConfig, out: &Path, a: &BaselineArgs) -> Result<()> {
    let h = horizon_of(cfg, a.horizon);
    let (cfg, backbone) = match (&a.kind, &a.checkpoint) {
        (BaselineKind::Ridge, Some(path)) => {
            let b = load_backbone(path)?;
            (with_model(cfg, &b), Some(b))
        }
        (BaselineKind::Ridge, None) => {
            return Err(Error::Config(
                "ridge needs --checkpoint <backbone.json>".into(),
            ))
        }
        _ => (cfg.clone(), None),
    };
    let p = one_sector(&cfg, &a.sector)?;
    let ws = test_windows(&cfg, &p, h, a.stride)?;
    let (ctx, _) = ws.all_rows()?;
    let (name, pred) = match a.kind {
        BaselineKind::Persistence => (
            "persistence",
            persistence_forecast(&ctx, h, cfg.persistence_period)?,
        ),
        BaselineKind::Linearnet => {
            let w = horizon_windows(&p, &cfg, h)?;
            let tag = format!("linearnet/{}/h{h}", p.sector.sector_id);
            let s = seed::derive(cfg.seed, &tag);
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
            net.to_checkpoint()?
                .save(&out.join(format!("linearnet_h{h}.json")))?;
            ("linearnet", net.forecast_rows(&ctx)?)
        }
        BaselineKind::Ridge => {
            let b = backbone.as_ref().expect("checked above");
            let w = horizon_windows(&p, &cfg, h)?;
            let tr = ridge_data(b, &w.train)?;
            let va = ridge_data(b, &w.val)?;
            let m = ridge_fit(
                &tr.features,
                &tr.targets,
                &va.features,
                &va.targets,
                &RIDGE_GRID,
            )?;
            info!("ridge selected lambda {}", m.lambda);
            ("ridge", ridge_forecast(&m, &ridge_data(b, &ws)?, h)?)
        }
    };
    write_forecasts(out, &format!("forecast_{name}_h{h}.csv"), &p, &ws, &pred)
}

fn evaluate_cmd(out: &Path, a: &EvaluateArgs) -> Result<()> {
    let mut rdr = csv::Reader::from_path(&a.predictions)?;
    let rows: Vec<ForecastRecord> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(Error::Empty {
            what: format!("predictions in {}", a.predictions.display()),
        });
    }
    let col = |f: fn(&ForecastRecord) -> f64| Tensor::vector(rows.iter().map(f).collect());
    let norm = metrics(&col(|r| r.y_pred), &col(|r| r.y_true))?;
    let raw = metrics(&col(|r| r.y_pred_denorm), &col(|r| r.y_true_denorm))?;
    let summary = json!({
        "code_version": VERSION,
        "predictions": a.predictions,
        "n": rows.len(),
        "mae": norm.mae,
        "mse": norm.mse,
        "mae_denorm": raw.mae,
        "mse_denorm": raw.mse,
    });
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.json"), &text)?;
    print!("{text}");
    Ok(())
}
