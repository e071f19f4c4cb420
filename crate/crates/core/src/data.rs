//! Synthetic telco-KPI series, CSV ingestion, train-only normalisation,
//! contiguous splits and sliding windows.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_FEATURES: [&str; 5] = [
    "mcdr_denom",
    "msdr_denom",
    "thp_nom_tt_kpi",
    "thp_denom_tt_kpi",
    "ho_denom",
];

/// Sectors with more missing values than this in any feature are dropped.
pub const MAX_MISSING: usize = 16;

pub const MIN_HOURS: usize = 24 * 14;

pub const TIME_FORMAT: &str = "%Y-%m-%dT%H";

const NORM_EPS: f64 = 1e-8;

/// One sector's hourly multivariate series.
#[derive(Debug, Clone, PartialEq)]
pub struct SectorSeries {
    pub sector_id: String,
    pub features: Vec<String>,
    /// `N × T`, one row per feature.
    pub values: Tensor,
    pub start: NaiveDateTime,
}

impl SectorSeries {
    pub fn n_features(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + Duration::hours(t as i64)
    }
}

/// Generator knobs. Everything random is drawn from the seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SectorProfile {
    /// Scales daily and weekly seasonality; 0 removes both.
    pub seasonal_amplitude: f64,
    /// Scales the linear trend; 0 removes it.
    pub trend: f64,
    /// Noise standard deviation relative to the base level.
    pub noise: f64,
    /// Per-hour spike probability (tripled for the handover feature).
    pub spike_rate: f64,
    /// Spike height relative to the base level.
    pub spike_scale: f64,
    /// Seed of the network-wide seasonal shape shared by all sectors.
    pub family_seed: u64,
    /// Spread of per-sector deviations from the shared shape.
    pub sector_variation: f64,
    pub features: Vec<String>,
}

impl Default for SectorProfile {
    fn default() -> Self {
        Self {
            seasonal_amplitude: 1.0,
            trend: 1.0,
            noise: 0.08,
            spike_rate: 0.002,
            spike_scale: 2.0,
            family_seed: 2024,
            sector_variation: 0.15,
            features: DEFAULT_FEATURES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SectorProfile {
    /// Constant level plus noise.
    pub fn flat() -> Self {
        Self {
            seasonal_amplitude: 0.0,
            trend: 0.0,
            spike_rate: 0.0,
            ..Self::default()
        }
    }
}

/// Monday, 2 January 2023, 00:00.
pub fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2023, 1, 2)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

struct FeatureShape {
    level: f64,
    harmonics: [(f64, f64); 3],
    weekly: f64,
    weekend: f64,
    phase: f64,
}

fn feature_shape<R: Rng>(rng: &mut R) -> FeatureShape {
    FeatureShape {
        level: rng.random_range(50.0..500.0),
        harmonics: [
            (rng.random_range(0.3..0.6), rng.random_range(0.0..2.0 * PI)),
            (rng.random_range(0.1..0.25), rng.random_range(0.0..2.0 * PI)),
            (rng.random_range(0.0..0.1), rng.random_range(0.0..2.0 * PI)),
        ],
        weekly: rng.random_range(0.05..0.15),
        weekend: rng.random_range(0.05..0.25),
        phase: rng.random_range(0.0..2.0 * PI),
    }
}

/// One synthetic sector: base level, daily harmonics, weekly modulation,
/// trend, level-dependent noise and sparse positive spikes.
pub fn generate_sector(
    sector_id: &str,
    seed: u64,
    hours: usize,
    profile: &SectorProfile,
) -> Result<SectorSeries> {
    if hours < MIN_HOURS {
        return Err(Error::InputTooShort {
            len: hours,
            need: MIN_HOURS,
        });
    }
    if profile.features.is_empty() {
        return Err(Error::Config("profile has no features".into()));
    }
    let mut family = ChaCha8Rng::seed_from_u64(profile.family_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = profile.features.len();
    let mut data = Vec::with_capacity(n * hours);
    for (f, name) in profile.features.iter().enumerate() {
        let shared = feature_shape(&mut family);
        let var = profile.sector_variation;
        let level = shared.level * rng.random_range(1.0 - 2.0 * var..1.0 + 2.0 * var).max(0.1);
        let amp = profile.seasonal_amplitude * rng.random_range(1.0 - var..1.0 + var);
        let shift = rng.random_range(-var..var);
        let slope = profile.trend * rng.random_range(-0.1..0.3) / hours as f64;
        let noise = profile.noise;
        let rate = if name.starts_with("ho_") || f == n - 1 {
            3.0 * profile.spike_rate
        } else {
            profile.spike_rate
        };
        for t in 0..hours {
            let day = 2.0 * PI * t as f64 / 24.0;
            let daily: f64 = shared
                .harmonics
                .iter()
                .enumerate()
                .map(|(j, (a, ph))| a * ((j + 1) as f64 * day + ph + shift).cos())
                .sum();
            let week = 2.0 * PI * t as f64 / 168.0;
            let weekly = 1.0 + shared.weekly * (week + shared.phase).cos();
            let weekend = if (t / 24) % 7 >= 5 {
                1.0 - shared.weekend
            } else {
                1.0
            };
            let seasonal = 1.0 + amp * (weekly * weekend * (1.0 + daily) - 1.0);
            let mean = level * (1.0 + slope * t as f64) * seasonal.max(0.05);
            let sd = noise * level * (0.5 + 0.5 * mean / level);
            let mut v = mean + sd * std_normal.sample(&mut rng);
            if rate > 0.0 && rng.random::<f64>() < rate {
                v += profile.spike_scale * level * rng.random_range(0.5..1.5);
            }
            data.push(v.max(0.0));
        }
    }
    Ok(SectorSeries {
        sector_id: sector_id.to_string(),
        features: profile.features.clone(),
        values: Tensor::new(vec![n, hours], data)?,
        start: default_start(),
    })
}

/// `count` sectors named `sector_000`, ... with seeds derived from `seed`.
pub fn generate_sectors(
    count: usize,
    seed: u64,
    hours: usize,
    profile: &SectorProfile,
) -> Result<Vec<SectorSeries>> {
    (0..count)
        .map(|i| {
            let id = format!("sector_{i:03}");
            generate_sector(&id, seed::derive(seed, &id), hours, profile)
        })
        .collect()
}

/// Writes sectors in the ingestion schema. Rows are grouped by sector.
pub fn write_csv(path: &Path, sectors: &[SectorSeries]) -> Result<()> {
    let first = sectors.first().ok_or_else(|| Error::Empty {
        what: "sector list".into(),
    })?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_writer(File::create(path)?);
    let mut header = vec!["time_period".to_string(), "sector_id".to_string()];
    header.extend(first.features.iter().cloned());
    w.write_record(&header)?;
    for s in sectors {
        if s.features != first.features {
            return Err(Error::Contract(format!(
                "sector {} has a different feature list",
                s.sector_id
            )));
        }
        let (n, t) = (s.n_features(), s.len());
        for i in 0..t {
            let mut row = Vec::with_capacity(n + 2);
            row.push(s.timestamp(i).format(TIME_FORMAT).to_string());
            row.push(s.sector_id.clone());
            for f in 0..n {
                row.push(s.values.data()[f * t + i].to_string());
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A sector removed during ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DroppedSector {
    pub sector_id: String,
    pub feature: String,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    /// Sorted by `sector_id`.
    pub sectors: Vec<SectorSeries>,
    pub dropped: Vec<DroppedSector>,
}

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(&format!("{s}:00"), "%Y-%m-%dT%H:%M")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .ok()
}

fn parse_value(s: &str) -> std::result::Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| format!("invalid number {s:?}"))
}

struct RawSector {
    times: Vec<NaiveDateTime>,
    rows: Vec<Vec<Option<f64>>>,
    first_line: u64,
}

/// Reads the `time_period,sector_id,<features...>` schema. Hourly gaps
/// count as missing values; sectors over the missing-value threshold are
/// dropped, the rest are linearly interpolated.
pub fn ingest_csv(path: &Path) -> Result<Ingested> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.len() < 3 || &header[0] != "time_period" || &header[1] != "sector_id" {
        return Err(parse_err(
            1,
            "header must be time_period,sector_id,<feature...>".into(),
        ));
    }
    let features: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut raw: BTreeMap<String, RawSector> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let time = parse_time(&rec[0])
            .ok_or_else(|| parse_err(line, format!("invalid time_period {:?}", &rec[0])))?;
        let values = rec
            .iter()
            .skip(2)
            .map(parse_value)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|m| parse_err(line, m))?;
        let entry = raw.entry(rec[1].to_string()).or_insert_with(|| RawSector {
            times: Vec::new(),
            rows: Vec::new(),
            first_line: line,
        });
        if let Some(prev) = entry.times.last() {
            if time <= *prev {
                return Err(parse_err(
                    line,
                    format!(
                        "timestamps not increasing for sector {}: {} after {}",
                        &rec[1], time, prev
                    ),
                ));
            }
            if (time - *prev).num_minutes() % 60 != 0 {
                return Err(parse_err(line, format!("{time} is off the hourly grid")));
            }
        }
        entry.times.push(time);
        entry.rows.push(values);
    }
    let mut sectors = Vec::new();
    let mut dropped = Vec::new();
    for (id, r) in raw {
        let start = r.times[0];
        let t = ((*r.times.last().expect("non-empty") - start).num_hours() + 1) as usize;
        let n = features.len();
        let mut cols: Vec<Vec<Option<f64>>> = vec![vec![None; t]; n];
        for (time, row) in r.times.iter().zip(&r.rows) {
            let i = (*time - start).num_hours() as usize;
            for (f, v) in row.iter().enumerate() {
                cols[f][i] = *v;
            }
        }
        let worst = cols
            .iter()
            .enumerate()
            .map(|(f, c)| (f, c.iter().filter(|v| v.is_none()).count()))
            .max_by_key(|&(f, m)| (m, std::cmp::Reverse(f)))
            .expect("at least one feature");
        let all_missing = cols.iter().position(|c| c.iter().all(Option::is_none));
        if worst.1 > MAX_MISSING || all_missing.is_some() {
            let f = all_missing.unwrap_or(worst.0);
            let missing = cols[f].iter().filter(|v| v.is_none()).count();
            warn!(
                "dropping sector {id} (from line {}): {missing} missing values in {}",
                r.first_line, features[f]
            );
            dropped.push(DroppedSector {
                sector_id: id,
                feature: features[f].clone(),
                missing,
            });
            continue;
        }
        let mut data = Vec::with_capacity(n * t);
        for c in &cols {
            data.extend(interpolate(c));
        }
        sectors.push(SectorSeries {
            sector_id: id,
            features: features.clone(),
            values: Tensor::new(vec![n, t], data)?,
            start,
        });
    }
    info!(
        "ingested {} sectors from {} ({} dropped)",
        sectors.len(),
        path.display(),
        dropped.len()
    );
    Ok(Ingested { sectors, dropped })
}

/// Linear interpolation between known values; ends take the nearest known value.
pub fn interpolate(values: &[Option<f64>]) -> Vec<f64> {
    let known: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|x| (i, x)))
        .collect();
    let Some(&(first, first_v)) = known.first() else {
        return vec![0.0; values.len()];
    };
    let mut out = vec![first_v; values.len()];
    for w in known.windows(2) {
        let ((i0, v0), (i1, v1)) = (w[0], w[1]);
        for (i, o) in out.iter_mut().enumerate().take(i1 + 1).skip(i0) {
            *o = v0 + (v1 - v0) * (i - i0) as f64 / (i1 - i0) as f64;
        }
    }
    let &(last, last_v) = known.last().expect("non-empty");
    out[last..].fill(last_v);
    out[..first].fill(first_v);
    out
}

/// Contiguous train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    /// Split lengths; train and validation are floored, test takes the rest.
    pub fn lengths(&self, total: usize) -> Result<[usize; 3]> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !(*f > 0.0)) || ((fr.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {fr:?} must be positive and sum to 1"
            )));
        }
        let train = (total as f64 * self.train).floor() as usize;
        let val = (total as f64 * self.val).floor() as usize;
        let test = total.saturating_sub(train + val);
        if train == 0 || val == 0 || test == 0 {
            return Err(Error::Empty {
                what: format!("a split of a {total}-step series"),
            });
        }
        Ok([train, val, test])
    }
}

/// Per-feature z-score statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation per row of `x`.
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (n, t) = match x.shape() {
            [n, t] => (*n, *t),
            s => return Err(shape_err("norm_stats", s, &[])),
        };
        let mut mean = Vec::with_capacity(n);
        let mut std = Vec::with_capacity(n);
        for (f, row) in x.data().chunks_exact(t).enumerate() {
            let mu = row.iter().sum::<f64>() / t as f64;
            let sd = (row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / t as f64).sqrt();
            if sd < NORM_EPS {
                warn!("feature {f} has degenerate std {sd:e}; clamping to {NORM_EPS:e}");
            }
            mean.push(mu);
            std.push(sd.max(NORM_EPS));
        }
        Ok(Self { mean, std })
    }

    fn map(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let t = match x.shape() {
            [n, t] if *n == self.mean.len() => *t,
            s => return Err(shape_err("norm_stats", s, &[self.mean.len()])),
        };
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i / t], self.std[i / t]))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.map(x, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        self.map(x, |v, m, s| v * s + m)
    }

    /// Inverse transform of a single value of feature `f`.
    pub fn inverse_value(&self, f: usize, v: f64) -> f64 {
        v * self.std[f] + self.mean[f]
    }
}

/// A contiguous normalised slice of a sector series.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `N × len`.
    pub values: Tensor,
    /// Index of the first step within the full series.
    pub offset: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

fn slice_cols(x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let (n, t) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(n * (to - from));
    for row in x.data().chunks_exact(t) {
        out.extend_from_slice(&row[from..to]);
    }
    Tensor::new(vec![n, to - from], out)
}

/// Splits contiguously, fits statistics on the training part only and
/// normalises all three parts with them.
pub fn normalize_split(series: &SectorSeries, spec: &SplitSpec) -> Result<(Splits, NormStats)> {
    let [tr, va, _] = spec.lengths(series.len())?;
    let t = series.len();
    let raw_train = slice_cols(&series.values, 0, tr)?;
    let stats = NormStats::fit(&raw_train)?;
    let part = |from: usize, to: usize| -> Result<Split> {
        Ok(Split {
            values: stats.apply(&slice_cols(&series.values, from, to)?)?,
            offset: from,
        })
    };
    let splits = Splits {
        train: part(0, tr)?,
        val: part(tr, tr + va)?,
        test: part(tr + va, t)?,
    };
    Ok((splits, stats))
}

/// Sliding `(context, target)` windows that stay inside one split.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub split: Split,
    pub context_len: usize,
    pub horizon: usize,
    /// Context start positions within the split.
    pub starts: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.split.values.shape()[0]
    }

    fn cols(&self, from: usize, len: usize) -> Tensor {
        slice_cols(&self.split.values, from, from + len).expect("window inside split")
    }

    /// `N × L` context of window `i`.
    pub fn context(&self, i: usize) -> Tensor {
        self.cols(self.starts[i], self.context_len)
    }

    /// `N × H` target of window `i`.
    pub fn target(&self, i: usize) -> Tensor {
        self.cols(self.starts[i] + self.context_len, self.horizon)
    }

    /// Absolute series index of the first target step of window `i`.
    pub fn target_index(&self, i: usize) -> usize {
        self.split.offset + self.starts[i] + self.context_len
    }

    /// Channel rows of the chosen windows, window-major:
    /// contexts `[|idx|·N, L]` and targets `[|idx|·N, H]`.
    pub fn rows(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let (n, t) = (self.channels(), self.split.len());
        let (l, h) = (self.context_len, self.horizon);
        let mut ctx = Vec::with_capacity(idx.len() * n * l);
        let mut tgt = Vec::with_capacity(idx.len() * n * h);
        let data = self.split.values.data();
        for &i in idx {
            let s = self.starts[i];
            for c in 0..n {
                ctx.extend_from_slice(&data[c * t + s..c * t + s + l]);
                tgt.extend_from_slice(&data[c * t + s + l..c * t + s + l + h]);
            }
        }
        Ok((
            Tensor::new(vec![idx.len() * n, l], ctx)?,
            Tensor::new(vec![idx.len() * n, h], tgt)?,
        ))
    }

    pub fn all_rows(&self) -> Result<(Tensor, Tensor)> {
        self.rows(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// `(len − L − H) / stride + 1` windows over a split.
pub fn make_windows(
    split: &Split,
    context_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowSet> {
    if context_len == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config(
            "context length, horizon and stride must be positive".into(),
        ));
    }
    let need = context_len + horizon;
    if split.len() < need {
        return Err(Error::Empty {
            what: format!("window set (split of {} steps, need {need})", split.len()),
        });
    }
    let starts = (0..=split.len() - need).step_by(stride).collect();
    Ok(WindowSet {
        split: split.clone(),
        context_len,
        horizon,
        starts,
    })
}
