//! Forecast evaluation metrics and the seasonal-naive reference used by the
//! overall weighted average (OWA).
//!
//! Everything operates on plain slices. Percentage metrics follow the M4
//! conventions: SMAPE/MAPE terms with a zero denominator contribute 0 (and
//! are logged), while a zero MASE scaling denominator is an error because
//! the whole metric becomes undefined.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(op: &'static str, y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::usage(format!("{op}: need at least one observation")));
    }
    if y.len() != yhat.len() {
        return Err(Error::Dimension {
            op,
            lhs: vec![y.len()],
            rhs: vec![yhat.len()],
        });
    }
    Ok(())
}

/// Mean squared error: (1/H) Σ (y - ŷ)².
pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths("mse", y, yhat)?;
    let h = y.len() as f64;
    Ok(y.iter()
        .zip(yhat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / h)
}

/// Mean absolute error: (1/H) Σ |y - ŷ|.
pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths("mae", y, yhat)?;
    let h = y.len() as f64;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / h)
}

/// Symmetric mean absolute percentage error:
/// (200/H) Σ |y - ŷ| / (|y| + |ŷ|), zero-denominator terms contributing 0.
pub fn smape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths("smape", y, yhat)?;
    let mut skipped = 0usize;
    let sum: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| {
            let denom = a.abs() + b.abs();
            if denom == 0.0 {
                skipped += 1;
                0.0
            } else {
                (a - b).abs() / denom
            }
        })
        .sum();
    if skipped > 0 {
        log::debug!("smape: {skipped} of {} terms had zero denominator", y.len());
    }
    Ok(200.0 / y.len() as f64 * sum)
}

/// Mean absolute percentage error: (100/H) Σ |y - ŷ| / |y|,
/// zero-denominator terms contributing 0.
pub fn mape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths("mape", y, yhat)?;
    let mut skipped = 0usize;
    let sum: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| {
            if a.abs() == 0.0 {
                skipped += 1;
                0.0
            } else {
                (a - b).abs() / a.abs()
            }
        })
        .sum();
    if skipped > 0 {
        log::debug!("mape: {skipped} of {} terms had zero denominator", y.len());
    }
    Ok(100.0 / y.len() as f64 * sum)
}

/// Mean absolute scaled error with the scaling denominator computed on the
/// in-sample (training) series: mae(y, ŷ) scaled by the mean absolute
/// seasonal difference (1/(n-s)) Σ_{j=s}^{n-1} |x_j - x_{j-s}|.
pub fn mase(y: &[f64], yhat: &[f64], insample: &[f64], s: usize) -> Result<f64> {
    check_lengths("mase", y, yhat)?;
    if s == 0 {
        return Err(Error::usage("mase: periodicity s must be at least 1"));
    }
    if insample.len() <= s {
        return Err(Error::usage(format!(
            "mase: in-sample series of {} values is too short for periodicity {s}",
            insample.len()
        )));
    }
    let denom = insample
        .windows(s + 1)
        .map(|w| (w[s] - w[0]).abs())
        .sum::<f64>()
        / (insample.len() - s) as f64;
    if denom == 0.0 {
        return Err(Error::UndefinedMetric(
            "mase scaling denominator is zero (in-sample series is seasonally constant)".into(),
        ));
    }
    Ok(mae(y, yhat)? / denom)
}

/// MASE variant that scales by seasonal differences of the horizon itself:
/// mae(y, ŷ) / ((1/(H-s)) Σ_{j=s}^{H-1} |y_j - y_{j-s}|). Needs H > s.
pub fn mase_horizon(y: &[f64], yhat: &[f64], s: usize) -> Result<f64> {
    check_lengths("mase_horizon", y, yhat)?;
    if s == 0 {
        return Err(Error::usage("mase_horizon: periodicity s must be at least 1"));
    }
    if y.len() <= s {
        return Err(Error::usage(format!(
            "mase_horizon: horizon {} is too short for periodicity {s}",
            y.len()
        )));
    }
    let denom = y.windows(s + 1).map(|w| (w[s] - w[0]).abs()).sum::<f64>()
        / (y.len() - s) as f64;
    if denom == 0.0 {
        return Err(Error::UndefinedMetric(
            "mase scaling denominator is zero (horizon is seasonally constant)".into(),
        ));
    }
    Ok(mae(y, yhat)? / denom)
}

/// Overall weighted average: ½ (SMAPE/SMAPE_naive + MASE/MASE_naive).
pub fn owa(smape: f64, mase: f64, smape_naive: f64, mase_naive: f64) -> Result<f64> {
    if smape_naive <= 0.0 || mase_naive <= 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "owa needs positive naive references, got smape {smape_naive} and mase {mase_naive}"
        )));
    }
    Ok(0.5 * (smape / smape_naive + mase / mase_naive))
}

/// Repeat the last observed season across the horizon: forecast[t] is the
/// in-sample value one whole period back, x[n - s + (t mod s)].
pub fn seasonal_naive_forecast(insample: &[f64], s: usize, horizon: usize) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(Error::usage("seasonal naive: periodicity s must be at least 1"));
    }
    if insample.len() < s {
        return Err(Error::usage(format!(
            "seasonal naive: in-sample series of {} values is shorter than period {s}",
            insample.len()
        )));
    }
    let n = insample.len();
    Ok((0..horizon).map(|t| insample[n - s + (t % s)]).collect())
}

/// One evaluation run's worth of metric values. `mase` and `owa` are only
/// present when an in-sample series (and thus a naive reference) was
/// supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizon: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub periodicity: Option<usize>,
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    pub mape: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mase: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub owa: Option<f64>,
}

impl MetricsReport {
    /// Scale-dependent metrics only (the long-horizon protocol).
    pub fn long_term(y: &[f64], yhat: &[f64]) -> Result<Self> {
        let report = MetricsReport {
            horizon: y.len(),
            periodicity: None,
            mse: mse(y, yhat)?,
            mae: mae(y, yhat)?,
            smape: smape(y, yhat)?,
            mape: mape(y, yhat)?,
            mase: None,
            owa: None,
        };
        report.validate()?;
        Ok(report)
    }

    /// Full report including MASE and OWA against the seasonal-naive
    /// reference built from `insample` (the short-horizon protocol).
    pub fn short_term(y: &[f64], yhat: &[f64], insample: &[f64], s: usize) -> Result<Self> {
        let naive = seasonal_naive_forecast(insample, s, y.len())?;
        let model_smape = smape(y, yhat)?;
        let model_mase = mase(y, yhat, insample, s)?;
        let naive_smape = smape(y, &naive)?;
        let naive_mase = mase(y, &naive, insample, s)?;
        let report = MetricsReport {
            horizon: y.len(),
            periodicity: Some(s),
            mse: mse(y, yhat)?,
            mae: mae(y, yhat)?,
            smape: model_smape,
            mape: mape(y, yhat)?,
            mase: Some(model_mase),
            owa: Some(owa(model_smape, model_mase, naive_smape, naive_mase)?),
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let mut vals = vec![self.mse, self.mae, self.smape, self.mape];
        vals.extend(self.mase);
        vals.extend(self.owa);
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::numeric("metrics report contains a non-finite or negative value"));
        }
        if !(0.0..=200.0).contains(&self.smape) {
            return Err(Error::numeric(format!(
                "smape {} outside [0, 200]",
                self.smape
            )));
        }
        Ok(())
    }

    /// Arithmetic mean of several reports (e.g. one per seed). All reports
    /// must share horizon and periodicity; MASE/OWA are averaged only when
    /// present in every report.
    pub fn mean_of(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::usage("mean_of: need at least one report"));
        }
        let first = &reports[0];
        for r in reports {
            if r.horizon != first.horizon || r.periodicity != first.periodicity {
                return Err(Error::usage(
                    "mean_of: reports differ in horizon or periodicity",
                ));
            }
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mean_opt = |f: fn(&MetricsReport) -> Option<f64>| {
            reports
                .iter()
                .map(f)
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / n)
        };
        Ok(MetricsReport {
            horizon: first.horizon,
            periodicity: first.periodicity,
            mse: mean(|r| r.mse),
            mae: mean(|r| r.mae),
            smape: mean(|r| r.smape),
            mape: mean(|r| r.mape),
            mase: mean_opt(|r| r.mase),
            owa: mean_opt(|r| r.owa),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_forecast_is_zero() {
        let y = [1.0, -2.0, 3.5];
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(smape(&y, &y).unwrap(), 0.0);
        assert_eq!(mape(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn hand_worked_values() {
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(smape(&[1.0], &[3.0]).unwrap(), 100.0);
        assert_eq!(mape(&[2.0], &[1.0]).unwrap(), 50.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(
            mae(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn smape_zero_denominator_contributes_zero() {
        // First term 0/0 -> 0; second term 200 * (2/2) / 2 = 100.
        assert_eq!(smape(&[0.0, 1.0], &[0.0, -1.0]).unwrap(), 100.0);
    }

    #[test]
    fn smape_never_exceeds_200() {
        let v = smape(&[1.0, -5.0], &[-2.0, 3.0]).unwrap();
        assert!(v <= 200.0);
        assert_eq!(smape(&[1.0], &[-1.0]).unwrap(), 200.0);
    }

    #[test]
    fn mase_unit_example() {
        // Naive diffs of [1,2,3,4] at s=1 are all 1, so MASE = |5-4| / 1.
        let v = mase(&[5.0], &[4.0], &[1.0, 2.0, 3.0, 4.0], 1).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn mase_self_scaling_is_one() {
        // Steady drift: every in-sample seasonal diff is 2, and the naive
        // forecast misses the continuing drift by exactly 2 at every step,
        // so the scaled error is exactly 1.
        let insample = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let naive = seasonal_naive_forecast(&insample, 2, 2).unwrap();
        assert_eq!(naive, vec![5.0, 6.0]);
        let y = [7.0, 8.0];
        let v = mase(&y, &naive, &insample, 2).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn mase_constant_insample_is_undefined() {
        assert!(matches!(
            mase(&[1.0], &[2.0], &[3.0, 3.0, 3.0], 1),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn owa_examples() {
        assert_eq!(owa(10.0, 1.0, 20.0, 2.0).unwrap(), 0.5);
        assert_eq!(owa(7.0, 3.0, 7.0, 3.0).unwrap(), 1.0);
        assert!(matches!(owa(1.0, 1.0, 0.0, 1.0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn seasonal_naive_repeats_last_cycle() {
        let f = seasonal_naive_forecast(&[1.0, 2.0, 3.0, 4.0], 2, 5).unwrap();
        assert_eq!(f, vec![3.0, 4.0, 3.0, 4.0, 3.0]);
        let f1 = seasonal_naive_forecast(&[1.0, 2.0, 9.0], 1, 3).unwrap();
        assert_eq!(f1, vec![9.0, 9.0, 9.0]);
    }

    #[test]
    fn report_keys_are_fixed() {
        let r = MetricsReport::short_term(&[5.0], &[4.0], &[1.0, 2.0, 3.0, 4.0], 1).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        for key in ["mse", "mae", "smape", "mape", "mase", "owa", "horizon", "periodicity"] {
            assert!(json.get(key).is_some(), "missing key {key}");
        }
    }

    #[test]
    fn long_term_report_omits_scaled_metrics() {
        let r = MetricsReport::long_term(&[1.0, 2.0], &[1.5, 2.5]).unwrap();
        assert!(r.mase.is_none() && r.owa.is_none());
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("mase") && !json.contains("owa"));
    }

    #[test]
    fn mean_of_averages_fields_and_drops_partial_options() {
        let a = MetricsReport::long_term(&[1.0, 2.0], &[1.5, 2.5]).unwrap();
        let b = MetricsReport::long_term(&[1.0, 2.0], &[2.0, 3.0]).unwrap();
        let m = MetricsReport::mean_of(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.mse, (a.mse + b.mse) / 2.0);
        assert_eq!(m.mae, (a.mae + b.mae) / 2.0);
        assert!(m.mase.is_none());

        let s = MetricsReport::short_term(&[5.0], &[4.0], &[1.0, 2.0, 3.0, 4.0], 1).unwrap();
        let ms = MetricsReport::mean_of(&[s.clone(), s.clone()]).unwrap();
        assert_eq!(ms.mase, s.mase);
        assert_eq!(ms.owa, s.owa);
        // Mixed horizons are rejected rather than silently averaged.
        assert!(MetricsReport::mean_of(&[a, s]).is_err());
        assert!(MetricsReport::mean_of(&[]).is_err());
    }

    #[test]
    fn naive_reference_report_scores_owa_one() {
        let insample = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let y = [5.0, 3.0, 5.0];
        let naive = seasonal_naive_forecast(&insample, 2, 3).unwrap();
        let r = MetricsReport::short_term(&y, &naive, &insample, 2).unwrap();
        assert!((r.owa.unwrap() - 1.0).abs() < 1e-15);
    }
}
