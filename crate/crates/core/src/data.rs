//! Dataset ingestion, windowing, normalization, chronological splits, and
//! synthetic series generation.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnops::{ForecastModel, ModelConfig};
use crate::rng::Prng;
use crate::searchspace::ArchitectureSpec;

/// Sampling frequency of a series, with the seasonal periodicity used by
/// scaled error metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    Yearly,
    Quarterly,
    Monthly,
    Weekly,
    Daily,
    Hourly,
    QuarterHourly,
    Unknown,
}

impl Frequency {
    pub fn periodicity(self) -> usize {
        match self {
            Frequency::Yearly => 1,
            Frequency::Quarterly => 4,
            Frequency::Monthly => 12,
            Frequency::Weekly => 1,
            Frequency::Daily => 1,
            Frequency::Hourly => 24,
            Frequency::QuarterHourly => 96,
            Frequency::Unknown => 1,
        }
    }

    pub fn parse(tag: &str) -> Result<Frequency> {
        match tag.to_ascii_lowercase().as_str() {
            "yearly" => Ok(Frequency::Yearly),
            "quarterly" => Ok(Frequency::Quarterly),
            "monthly" => Ok(Frequency::Monthly),
            "weekly" => Ok(Frequency::Weekly),
            "daily" => Ok(Frequency::Daily),
            "hourly" => Ok(Frequency::Hourly),
            "quarter_hourly" | "quarterhourly" | "15min" => Ok(Frequency::QuarterHourly),
            "unknown" => Ok(Frequency::Unknown),
            other => Err(Error::config(format!("unknown frequency tag {other:?}"))),
        }
    }
}

/// A named multivariate series: equal-length finite channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawSeries {
    pub name: String,
    pub channel_names: Vec<String>,
    pub channels: Vec<Vec<f64>>,
    pub frequency: Frequency,
}

impl RawSeries {
    pub fn new(
        name: impl Into<String>,
        channel_names: Vec<String>,
        channels: Vec<Vec<f64>>,
        frequency: Frequency,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::ingest("series has no channels"));
        }
        if channel_names.len() != channels.len() {
            return Err(Error::ingest(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                channels.len()
            )));
        }
        let len = channels[0].len();
        if len == 0 {
            return Err(Error::ingest("series has zero length"));
        }
        for (name, ch) in channel_names.iter().zip(&channels) {
            if ch.len() != len {
                return Err(Error::ingest(format!(
                    "channel {name:?} has length {} but expected {len}",
                    ch.len()
                )));
            }
            if let Some(i) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::ingest(format!(
                    "channel {name:?} has a non-finite value at index {i}"
                )));
            }
        }
        Ok(RawSeries {
            name: name.into(),
            channel_names,
            channels,
            frequency,
        })
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

/// How to interpret a CSV file: first column is a timestamp, every other
/// column is a numeric channel.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub series_name: String,
    pub frequency: Frequency,
}

/// Ingest an ETT-style CSV. Rows are re-sorted into timestamp order if
/// needed (with a warning); empty or `NaN` cells are repaired by
/// forward-fill then back-fill.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 {
        return Err(Error::ingest(format!(
            "{}: need a timestamp column plus at least one value column",
            path.display()
        )));
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();

    struct Row {
        timestamp: String,
        values: Vec<f64>,
    }
    let mut rows: Vec<Row> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let row_number = i + 1; // 1-based data row, excluding the header
        if record.len() != headers.len() {
            return Err(Error::ingest(format!(
                "{}: row {row_number} has {} fields, expected {}",
                path.display(),
                record.len(),
                headers.len()
            )));
        }
        let mut values = Vec::with_capacity(channel_names.len());
        for (j, cell) in record.iter().skip(1).enumerate() {
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| {
                    Error::ingest(format!(
                        "{}: unparseable cell at row {row_number}, column {:?}: {cell:?}",
                        path.display(),
                        channel_names[j]
                    ))
                })?
            };
            values.push(v);
        }
        rows.push(Row {
            timestamp: record[0].to_string(),
            values,
        });
    }
    if rows.is_empty() {
        return Err(Error::ingest(format!("{}: no data rows", path.display())));
    }

    // Timestamps sort numerically when every one parses as a number,
    // lexicographically otherwise (ISO timestamps sort correctly either
    // way).
    let numeric: Option<Vec<f64>> = rows
        .iter()
        .map(|r| r.timestamp.parse::<f64>().ok())
        .collect();
    let in_order = match &numeric {
        Some(keys) => keys.windows(2).all(|w| w[0] <= w[1]),
        None => rows.windows(2).all(|w| w[0].timestamp <= w[1].timestamp),
    };
    if !in_order {
        log::warn!(
            "{}: rows out of timestamp order; re-sorting",
            path.display()
        );
        match numeric {
            Some(keys) => {
                let mut order: Vec<usize> = (0..rows.len()).collect();
                order.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).expect("finite keys"));
                let mut sorted = Vec::with_capacity(rows.len());
                for idx in order {
                    sorted.push(Row {
                        timestamp: rows[idx].timestamp.clone(),
                        values: rows[idx].values.clone(),
                    });
                }
                rows = sorted;
            }
            None => rows.sort_by(|a, b| a.timestamp.cmp(&b.timestamp)),
        }
    }

    let mut channels: Vec<Vec<f64>> = vec![Vec::with_capacity(rows.len()); channel_names.len()];
    for row in &rows {
        for (c, v) in row.values.iter().enumerate() {
            channels[c].push(*v);
        }
    }
    for (name, ch) in channel_names.iter().zip(channels.iter_mut()) {
        fill_missing(ch).map_err(|_| {
            Error::ingest(format!(
                "{}: channel {name:?} has no finite values",
                path.display()
            ))
        })?;
    }
    RawSeries::new(
        schema.series_name.clone(),
        channel_names,
        channels,
        schema.frequency,
    )
}

/// Forward-fill then back-fill NaN entries in place. Errors when the whole
/// channel is NaN.
fn fill_missing(ch: &mut [f64]) -> Result<()> {
    if ch.iter().all(|v| v.is_nan()) {
        return Err(Error::ingest("channel entirely missing"));
    }
    let mut last: Option<f64> = None;
    for v in ch.iter_mut() {
        if v.is_nan() {
            if let Some(fill) = last {
                *v = fill;
            }
        } else {
            last = Some(*v);
        }
    }
    let mut next: Option<f64> = None;
    for v in ch.iter_mut().rev() {
        if v.is_nan() {
            *v = next.expect("a finite value exists");
        } else {
            next = Some(*v);
        }
    }
    Ok(())
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats { mean: 0.0, std: 1.0 }
    }

    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        NormStats {
            mean,
            std: if std <= 1e-8 { 1.0 } else { std },
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One forecasting sample: a lookback window and its target horizon for a
/// single channel, in normalized units. `start` is the global index of the
/// first lookback point.
#[derive(Debug, Clone)]
pub struct Window {
    pub channel: usize,
    pub start: usize,
    pub lookback: Vec<f64>,
    pub target: Vec<f64>,
}

/// All stride-1 windows of one chronological split.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub split: Split,
    pub lookback_len: usize,
    pub horizon: usize,
    pub num_channels: usize,
    pub stats: Vec<NormStats>,
    pub windows: Vec<Window>,
}

impl WindowedDataset {
    /// Window positions per channel (the count formula
    /// span − T_L − T_P + 1).
    pub fn num_positions(&self) -> usize {
        self.windows.len() / self.num_channels
    }

    pub fn pairs(&self) -> Vec<(&[f64], &[f64])> {
        self.windows
            .iter()
            .map(|w| (w.lookback.as_slice(), w.target.as_slice()))
            .collect()
    }
}

/// Chronological split fractions. Unused tail is allowed when they sum to
/// less than one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn ett() -> Self {
        // 12/4/4 months of a 20-month record.
        SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !f.is_finite() || f < 0.0 {
                return Err(Error::config(format!("{name} fraction must be finite and >= 0")));
            }
        }
        if self.train <= 0.0 {
            return Err(Error::config("train fraction must be positive"));
        }
        if self.train + self.val + self.test > 1.0 + 1e-9 {
            return Err(Error::config("split fractions sum to more than 1"));
        }
        Ok(())
    }
}

/// The train/val/test window sets of one series.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: WindowedDataset,
    pub val: Option<WindowedDataset>,
    pub test: Option<WindowedDataset>,
    pub stats: Vec<NormStats>,
}

fn windows_of_span(
    series: &RawSeries,
    stats: &[NormStats],
    split: Split,
    span: std::ops::Range<usize>,
    t_l: usize,
    t_p: usize,
) -> Result<WindowedDataset> {
    let span_len = span.end - span.start;
    if span_len < t_l + t_p {
        return Err(Error::config(format!(
            "{split:?} span of {span_len} points cannot hold one window of {} points",
            t_l + t_p
        )));
    }
    let positions = span_len - t_l - t_p + 1;
    let mut windows = Vec::with_capacity(positions * series.num_channels());
    for p in 0..positions {
        let start = span.start + p;
        for (c, ch) in series.channels.iter().enumerate() {
            let st = &stats[c];
            let lookback: Vec<f64> = ch[start..start + t_l].iter().map(|&v| st.normalize(v)).collect();
            let target: Vec<f64> = ch[start + t_l..start + t_l + t_p]
                .iter()
                .map(|&v| st.normalize(v))
                .collect();
            windows.push(Window {
                channel: c,
                start,
                lookback,
                target,
            });
        }
    }
    Ok(WindowedDataset {
        split,
        lookback_len: t_l,
        horizon: t_p,
        num_channels: series.num_channels(),
        stats: stats.to_vec(),
        windows,
    })
}

/// Cut the series into disjoint chronological spans and enumerate stride-1
/// windows inside each. Channels are z-scored with statistics computed on
/// the train span only.
pub fn make_windows(
    series: &RawSeries,
    t_l: usize,
    t_p: usize,
    fractions: SplitFractions,
) -> Result<DataSplits> {
    fractions.validate()?;
    if t_l == 0 || t_p == 0 {
        return Err(Error::config("lookback and horizon must be positive"));
    }
    let n = series.len();
    if n < t_l + t_p {
        return Err(Error::config(format!(
            "series of {n} points cannot hold one window of {} points",
            t_l + t_p
        )));
    }
    let train_end = (n as f64 * fractions.train).floor() as usize;
    let val_end = (n as f64 * (fractions.train + fractions.val)).floor() as usize;
    let test_end = (n as f64 * (fractions.train + fractions.val + fractions.test))
        .floor()
        .min(n as f64) as usize;

    let stats: Vec<NormStats> = series
        .channels
        .iter()
        .map(|ch| NormStats::of(&ch[0..train_end.max(1)]))
        .collect();

    let train = windows_of_span(series, &stats, Split::Train, 0..train_end, t_l, t_p)?;
    let val = if fractions.val > 0.0 {
        Some(windows_of_span(series, &stats, Split::Val, train_end..val_end, t_l, t_p)?)
    } else {
        None
    };
    let test = if fractions.test > 0.0 {
        Some(windows_of_span(series, &stats, Split::Test, val_end..test_end, t_l, t_p)?)
    } else {
        None
    };
    Ok(DataSplits {
        train,
        val,
        test,
        stats,
    })
}

/// Short-horizon univariate split: lookback fixed to twice the horizon, the
/// final horizon of each channel is the single test window, and the last
/// tenth of the remaining train windows (at least one) serves as the
/// internal validation set. Values stay in original units so scaled metrics
/// can use the in-sample history.
#[derive(Debug, Clone)]
pub struct ShortTermSplit {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    /// Per channel: everything before the test targets, in original units.
    pub insample: Vec<Vec<f64>>,
    pub periodicity: usize,
}

pub fn short_term_split(series: &RawSeries, horizon: usize) -> Result<ShortTermSplit> {
    if horizon == 0 {
        return Err(Error::config("horizon must be positive"));
    }
    let t_l = 2 * horizon;
    let n = series.len();
    // Train span must hold at least two windows so one can be validation.
    let min_len = (t_l + horizon) + 2;
    if n < min_len {
        return Err(Error::config(format!(
            "series of {n} points is too short for horizon {horizon} (need {min_len})"
        )));
    }
    let stats = vec![NormStats::identity(); series.num_channels()];
    let test = windows_of_span(series, &stats, Split::Test, n - t_l - horizon..n, t_l, horizon)?;
    let fit_span = 0..n - horizon;
    let all_fit = windows_of_span(series, &stats, Split::Train, fit_span, t_l, horizon)?;
    let positions = all_fit.num_positions();
    let val_positions = (positions / 10).max(1);
    let train_positions = positions - val_positions;
    let c = series.num_channels();
    let mut train = all_fit;
    let val_windows = train.windows.split_off(train_positions * c);
    let val = WindowedDataset {
        split: Split::Val,
        lookback_len: t_l,
        horizon,
        num_channels: c,
        stats: stats.clone(),
        windows: val_windows,
    };
    let insample: Vec<Vec<f64>> = series
        .channels
        .iter()
        .map(|ch| ch[..n - horizon].to_vec())
        .collect();
    Ok(ShortTermSplit {
        train,
        val,
        test,
        insample,
        periodicity: series.frequency.periodicity(),
    })
}

/// What to synthesize.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Sum of integer-period sinusoids with random amplitudes and phases,
    /// plus Gaussian noise. With zero noise the series is exactly periodic
    /// with the periods' least common multiple.
    Sines {
        periods: Vec<usize>,
        noise_sigma: f64,
    },
    /// AR(1): x_t = coeff · x_{t−1} + sigma · ε_t.
    Ar { coeff: f64, sigma: f64 },
    /// Autoregressive rollout of a frozen randomly initialized forecast
    /// model with a known architecture, driven by noise injection and
    /// globally standardized afterwards.
    Teacher {
        cfg: ModelConfig,
        spec: ArchitectureSpec,
        gain: f64,
        noise_sigma: f64,
    },
}

impl SyntheticKind {
    pub fn name(&self) -> &'static str {
        match self {
            SyntheticKind::Sines { .. } => "sines",
            SyntheticKind::Ar { .. } => "ar",
            SyntheticKind::Teacher { .. } => "teacher",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: SyntheticKind,
    pub length: usize,
    pub channels: usize,
    pub seed: u64,
    pub frequency: Frequency,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("length must be positive"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be positive"));
        }
        match &self.kind {
            SyntheticKind::Sines { periods, noise_sigma } => {
                if periods.is_empty() {
                    return Err(Error::config("sines needs at least one period"));
                }
                if periods.iter().any(|&p| p < 2) {
                    return Err(Error::config("sine periods must be at least 2"));
                }
                if !noise_sigma.is_finite() || *noise_sigma < 0.0 {
                    return Err(Error::config("noise sigma must be finite and >= 0"));
                }
            }
            SyntheticKind::Ar { coeff, sigma } => {
                if !coeff.is_finite() || coeff.abs() >= 1.0 {
                    return Err(Error::config("ar coefficient must satisfy |coeff| < 1"));
                }
                if !sigma.is_finite() || *sigma <= 0.0 {
                    return Err(Error::config("ar sigma must be finite and positive"));
                }
            }
            SyntheticKind::Teacher {
                cfg,
                spec,
                gain,
                noise_sigma,
            } => {
                cfg.validate()?;
                if spec.blocks.len() != cfg.num_blocks {
                    return Err(Error::config(format!(
                        "teacher spec has {} blocks but config expects {}",
                        spec.blocks.len(),
                        cfg.num_blocks
                    )));
                }
                if !gain.is_finite() || *gain <= 0.0 {
                    return Err(Error::config("teacher gain must be finite and positive"));
                }
                if !noise_sigma.is_finite() || *noise_sigma < 0.0 {
                    return Err(Error::config("noise sigma must be finite and >= 0"));
                }
            }
        }
        Ok(())
    }
}

/// Provenance record written next to generated data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub config: SyntheticConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generating_spec: Option<ArchitectureSpec>,
}

pub fn gen_synthetic(config: &SyntheticConfig) -> Result<(RawSeries, SyntheticManifest)> {
    config.validate()?;
    let root = Prng::new(config.seed).split("synthetic").split(config.kind.name());
    let mut channels = Vec::with_capacity(config.channels);
    let mut generating_spec = None;
    match &config.kind {
        SyntheticKind::Sines { periods, noise_sigma } => {
            for c in 0..config.channels {
                let mut rng = root.split_index("channel", c as u64);
                let comps: Vec<(f64, f64, usize)> = periods
                    .iter()
                    .map(|&p| {
                        let amp = rng.uniform(0.5, 1.5);
                        let phase = rng.uniform(0.0, std::f64::consts::TAU);
                        (amp, phase, p)
                    })
                    .collect();
                let mut ch = Vec::with_capacity(config.length);
                for t in 0..config.length {
                    let mut v = 0.0;
                    for &(amp, phase, p) in &comps {
                        // Reduce t modulo the period before the float sine so
                        // a noiseless series is bit-identically periodic.
                        let frac = (t % p) as f64 / p as f64;
                        v += amp * (std::f64::consts::TAU * frac + phase).sin();
                    }
                    if *noise_sigma > 0.0 {
                        v += noise_sigma * rng.normal();
                    }
                    ch.push(v);
                }
                channels.push(ch);
            }
        }
        SyntheticKind::Ar { coeff, sigma } => {
            for c in 0..config.channels {
                let mut rng = root.split_index("channel", c as u64);
                let mut ch = Vec::with_capacity(config.length);
                let mut x = 0.0;
                for _ in 0..config.length {
                    x = coeff * x + sigma * rng.normal();
                    ch.push(x);
                }
                channels.push(ch);
            }
        }
        SyntheticKind::Teacher {
            cfg,
            spec,
            gain,
            noise_sigma,
        } => {
            generating_spec = Some(spec.clone());
            let teacher = ForecastModel::with_gain(cfg.clone(), spec.clone(), config.seed, *gain)?;
            for c in 0..config.channels {
                let mut rng = root.split_index("channel", c as u64);
                // Seed lookback of pure noise, discarded from the output so
                // every kept point is model-generated.
                let mut history: Vec<f64> = (0..cfg.lookback).map(|_| rng.normal()).collect();
                let mut kept: Vec<f64> = Vec::with_capacity(config.length);
                while kept.len() < config.length {
                    let window = history[history.len() - cfg.lookback..].to_vec();
                    let forecast = teacher.forecast(&[window])?;
                    for &y in &forecast[0] {
                        let v = y + noise_sigma * rng.normal();
                        history.push(v);
                        kept.push(v);
                        if kept.len() == config.length {
                            break;
                        }
                    }
                }
                let st = NormStats::of(&kept);
                channels.push(kept.iter().map(|&v| st.normalize(v)).collect());
            }
        }
    }
    let channel_names = (0..config.channels).map(|c| format!("ch{c}")).collect();
    let series = RawSeries::new(config.name.clone(), channel_names, channels, config.frequency)?;
    let manifest = SyntheticManifest {
        config: config.clone(),
        generating_spec,
    };
    Ok((series, manifest))
}

/// Deterministic shuffled index order for one training epoch.
pub fn epoch_order(num_windows: usize, rng: &mut Prng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_windows).collect();
    rng.shuffle(&mut order);
    order
}

/// Distinct global time indices covered by any target in the dataset.
pub fn target_index_range(ds: &WindowedDataset) -> (usize, usize) {
    let starts: BTreeSet<usize> = ds.windows.iter().map(|w| w.start).collect();
    let min = *starts.iter().next().expect("non-empty dataset") + ds.lookback_len;
    let max = *starts.iter().next_back().expect("non-empty dataset") + ds.lookback_len
        + ds.horizon
        - 1;
    (min, max)
}
