//! Two-stage covariate shift estimation.
//!
//! Stage I tracks the first principal component of the feature stream with
//! an EWMA one-step-ahead predictor and raises a warning when an observation
//! leaves the adaptive control band. Stage II confirms a warning with a
//! two-sample Hotelling T² test between the current trial's sub-window
//! features and the training-averaged sub-window features.
//!
//! ```text
//! err  = x − z_prev
//! σ̂²   = ϑ·err² + (1 − ϑ)·σ̂²_prev
//! band = z_prev ± L·sqrt(σ̂²_prev)      (limits before the update)
//! z    = λ·x + (1 − λ)·z_prev
//! ```
//!
//! After a validated shift the detector re-anchors on the shifted level:
//! `z ← x`, `σ̂² ← σ²₀`.

use std::io::{self, BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use thiserror::Error;

use crate::features::{pca_first_component, FeatureError, FeatureVector, PcaModel};
use crate::linalg::mean_and_covariance;

#[derive(Debug, Error)]
pub enum CseError {
    #[error("series too short: need {need}, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("grid step {0} does not divide [0, 1] evenly")]
    GridStep(f64),
    #[error("training series is constant")]
    Degenerate,
    #[error("non-finite observation {0}")]
    NonFinite(f64),
    #[error("invalid detector parameter: {0}")]
    InvalidParameter(String),
    #[error("hotelling test: {0}")]
    Hotelling(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Result of the λ grid search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// Sum of squared one-step-ahead errors at `lambda`.
    pub sse: f64,
    /// Set when the series is constant; `lambda` is then 0.
    pub degenerate: bool,
}

/// One-step-ahead prediction errors `x_i − z_{i−1}` of the EWMA started at `z0`.
pub fn one_step_errors(series: &[f64], lambda: f64, z0: f64) -> Vec<f64> {
    let mut z = z0;
    series
        .iter()
        .map(|&x| {
            let e = x - z;
            z = lambda * x + (1.0 - lambda) * z;
            e
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Picks λ from `{0, step, …, 1}` minimising the one-step-ahead SSE with
/// `z₀ = mean(series)`. Ties go to the smaller λ.
pub fn select_lambda(series: &[f64], grid_step: f64) -> Result<LambdaSelection, CseError> {
    if series.len() < 3 {
        return Err(CseError::TooShort {
            need: 3,
            got: series.len(),
        });
    }
    if let Some(&bad) = series.iter().find(|v| !v.is_finite()) {
        return Err(CseError::NonFinite(bad));
    }
    let n_steps = (1.0 / grid_step).round();
    if !(grid_step > 0.0 && grid_step <= 1.0) || ((n_steps * grid_step) - 1.0).abs() > 1e-9 {
        return Err(CseError::GridStep(grid_step));
    }
    let n_steps = n_steps as usize;
    let z0 = mean(series);
    if series.iter().all(|&v| v == series[0]) {
        return Ok(LambdaSelection {
            lambda: 0.0,
            sse: 0.0,
            degenerate: true,
        });
    }
    let mut best = LambdaSelection {
        lambda: 0.0,
        sse: f64::INFINITY,
        degenerate: false,
    };
    for i in 0..=n_steps {
        let lambda = i as f64 / n_steps as f64;
        let sse: f64 = one_step_errors(series, lambda, z0)
            .iter()
            .map(|e| e * e)
            .sum();
        if i == 0 || sse < best.sse - 1e-12 * best.sse.max(1.0) {
            best = LambdaSelection {
                lambda,
                sse,
                degenerate: false,
            };
        }
    }
    Ok(best)
}

/// Control-limit multiplier: a fixed value or the smallest value that leaves
/// the training series free of warnings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlLimit {
    Fixed(f64),
    Calibrated,
}

impl Default for ControlLimit {
    fn default() -> Self {
        ControlLimit::Fixed(3.0)
    }
}

/// Parameters of stage I.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    pub lambda_grid_step: f64,
    pub limit: ControlLimit,
    pub vartheta: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            lambda_grid_step: 0.01,
            limit: ControlLimit::default(),
            vartheta: 0.1,
        }
    }
}

/// Mutable stage-I state for one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwmaDetector {
    pub z: f64,
    pub sigma2_err: f64,
    pub lambda: f64,
    pub limit: f64,
    pub vartheta: f64,
    pub step_count: usize,
    pub z0: f64,
    pub sigma2_0: f64,
}

/// Outcome of a single [`EwmaDetector::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EwmaStep {
    pub warning: bool,
    pub lcl: f64,
    pub ucl: f64,
    pub err: f64,
}

impl EwmaDetector {
    pub fn new(
        z0: f64,
        sigma2_0: f64,
        lambda: f64,
        limit: f64,
        vartheta: f64,
    ) -> Result<EwmaDetector, CseError> {
        let bad = |m: String| Err(CseError::InvalidParameter(m));
        if !(0.0..=1.0).contains(&lambda) {
            return bad(format!("lambda {lambda} outside [0, 1]"));
        }
        if !(limit > 0.0 && limit.is_finite()) {
            return bad(format!("L {limit} must be positive"));
        }
        if !(vartheta > 0.0 && vartheta <= 1.0) {
            return bad(format!("vartheta {vartheta} outside (0, 1]"));
        }
        if !(sigma2_0 >= 0.0 && sigma2_0.is_finite() && z0.is_finite()) {
            return bad("z0 and sigma2_0 must be finite, sigma2_0 nonnegative".into());
        }
        Ok(EwmaDetector {
            z: z0,
            sigma2_err: sigma2_0,
            lambda,
            limit,
            vartheta,
            step_count: 0,
            z0,
            sigma2_0,
        })
    }

    /// Current control band `(LCL, UCL)`.
    pub fn bounds(&self) -> (f64, f64) {
        let half = self.limit * self.sigma2_err.sqrt();
        (self.z - half, self.z + half)
    }

    pub fn step(&mut self, x: f64) -> Result<EwmaStep, CseError> {
        if !x.is_finite() {
            return Err(CseError::NonFinite(x));
        }
        let (lcl, ucl) = self.bounds();
        let err = x - self.z;
        let warning = x < lcl || x > ucl;
        self.sigma2_err = self.vartheta * err * err + (1.0 - self.vartheta) * self.sigma2_err;
        self.z = self.lambda * x + (1.0 - self.lambda) * self.z;
        self.step_count += 1;
        Ok(EwmaStep {
            warning,
            lcl,
            ucl,
            err,
        })
    }

    /// Restarts the chart at level `x` with the training error variance.
    pub fn reanchor(&mut self, x: f64) {
        self.z = x;
        self.sigma2_err = self.sigma2_0;
    }
}

/// Smallest `L` for which running the chart over `series` raises no warning.
pub fn calibrate_limit(series: &[f64], lambda: f64, z0: f64, sigma2_0: f64, vartheta: f64) -> f64 {
    let mut z = z0;
    let mut s2 = sigma2_0;
    let mut worst: f64 = 0.0;
    for &x in series {
        let err = x - z;
        if s2 > 0.0 {
            worst = worst.max(err.abs() / s2.sqrt());
        }
        s2 = vartheta * err * err + (1.0 - vartheta) * s2;
        z = lambda * x + (1.0 - lambda) * z;
    }
    worst
}

/// Builds the stage-I detector from the training features projected on the
/// first principal component.
pub fn detector_from_training(
    train_features: &[FeatureVector],
    pca: &PcaModel,
    params: &DetectorParams,
) -> Result<EwmaDetector, CseError> {
    if train_features.len() < 10 {
        return Err(CseError::TooShort {
            need: 10,
            got: train_features.len(),
        });
    }
    let series = train_features
        .iter()
        .map(|f| pca_first_component(pca, f))
        .collect::<Result<Vec<_>, _>>()?;
    let sel = select_lambda(&series, params.lambda_grid_step)?;
    if sel.degenerate {
        return Err(CseError::Degenerate);
    }
    let z0 = mean(&series);
    let sigma2_0 = sel.sse / series.len() as f64;
    let limit = match params.limit {
        ControlLimit::Fixed(l) => l,
        ControlLimit::Calibrated => {
            calibrate_limit(&series, sel.lambda, z0, sigma2_0, params.vartheta)
        }
    };
    EwmaDetector::new(z0, sigma2_0, sel.lambda, limit, params.vartheta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HotellingResult {
    pub t2: f64,
    pub f: f64,
    pub df: (f64, f64),
    pub p_value: f64,
    pub reject: bool,
}

/// Two-sample Hotelling T² with pooled covariance and the exact F transform.
/// A pooled covariance with an eigenvalue below `ε = 1e-10·trace/d` gets
/// `ε·I` added before solving.
pub fn hotelling_t2(
    sample1: &[FeatureVector],
    sample2: &[FeatureVector],
    alpha: f64,
) -> Result<HotellingResult, CseError> {
    let (n1, n2) = (sample1.len(), sample2.len());
    let d = sample1.first().map_or(0, |v| v.dimension());
    if d == 0 || sample1.iter().chain(sample2).any(|v| v.dimension() != d) {
        return Err(CseError::Hotelling("samples differ in dimension".into()));
    }
    if n1 < 2 || n2 < 2 || n1 + n2 - 2 <= d {
        return Err(CseError::Hotelling(format!(
            "need n1 + n2 - 2 > d, got n1={n1}, n2={n2}, d={d}"
        )));
    }
    let rows1: Vec<&[f64]> = sample1.iter().map(|v| v.as_slice()).collect();
    let rows2: Vec<&[f64]> = sample2.iter().map(|v| v.as_slice()).collect();
    let (m1, c1) = mean_and_covariance(&rows1);
    let (m2, c2) = mean_and_covariance(&rows2);
    let mut pooled = (c1 * (n1 - 1) as f64 + c2 * (n2 - 1) as f64) / (n1 + n2 - 2) as f64;
    let diff: DVector<f64> = m1 - m2;
    let trace = pooled.trace();
    let t2 = if trace > 0.0 {
        let eps = 1e-10 * trace / d as f64;
        if pooled.symmetric_eigenvalues().min() < eps {
            pooled += DMatrix::identity(d, d) * eps;
        }
        let solved = pooled
            .clone()
            .cholesky()
            .map(|c| c.solve(&diff))
            .or_else(|| pooled.lu().solve(&diff))
            .ok_or_else(|| CseError::Hotelling("pooled covariance is singular".into()))?;
        (n1 * n2) as f64 / (n1 + n2) as f64 * diff.dot(&solved)
    } else if diff.iter().all(|&v| v == 0.0) {
        0.0
    } else {
        f64::INFINITY
    };
    let (df1, df2) = (d as f64, (n1 + n2 - d - 1) as f64);
    let f = df2 / (df1 * (n1 + n2 - 2) as f64) * t2;
    let p_value = if t2 <= 0.0 {
        1.0
    } else if f.is_infinite() {
        0.0
    } else {
        let dist = FisherSnedecor::new(df1, df2).map_err(|e| CseError::Hotelling(e.to_string()))?;
        dist.sf(f).clamp(0.0, 1.0)
    };
    Ok(HotellingResult {
        t2,
        f,
        df: (df1, df2),
        p_value,
        reject: p_value < alpha,
    })
}

/// Element-wise mean over training trials of their sub-window features: the
/// stage-II reference sample.
pub fn reference_window(
    train_windows: &[Vec<FeatureVector>],
) -> Result<Vec<FeatureVector>, CseError> {
    let first = train_windows
        .first()
        .ok_or(CseError::TooShort { need: 1, got: 0 })?;
    let mut acc: Vec<Vec<f64>> = first.iter().map(|v| vec![0.0; v.dimension()]).collect();
    for w in train_windows {
        if w.len() != acc.len() || w.iter().zip(&acc).any(|(v, a)| v.dimension() != a.len()) {
            return Err(CseError::Hotelling(
                "training windows differ in shape".into(),
            ));
        }
        for (a, v) in acc.iter_mut().zip(w) {
            for (s, x) in a.iter_mut().zip(v.as_slice()) {
                *s += x;
            }
        }
    }
    let n = train_windows.len() as f64;
    Ok(acc
        .into_iter()
        .map(|a| FeatureVector::new(a.into_iter().map(|s| s / n).collect()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warning,
    Validated,
}

/// A stage-I warning, confirmed (`Validated`) or not by stage II.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEvent {
    #[serde(rename = "index")]
    pub trial_index: usize,
    pub stage: Stage,
    /// Out-of-band observation for warnings, T² for validated shifts.
    pub statistic: f64,
    pub p_value: Option<f64>,
}

/// Runs both stages on one trial. `detector` is re-anchored after a
/// validated shift.
pub fn cse_detect(
    detector: &mut EwmaDetector,
    trial_index: usize,
    feature: &FeatureVector,
    pca: &PcaModel,
    current_window: &[FeatureVector],
    train_ref_window: &[FeatureVector],
    alpha: f64,
) -> Result<Option<ShiftEvent>, CseError> {
    if current_window.is_empty() || current_window.len() != train_ref_window.len() {
        return Err(CseError::Hotelling(format!(
            "windows must be nonempty and equal in size, got {} and {}",
            current_window.len(),
            train_ref_window.len()
        )));
    }
    let x = pca_first_component(pca, feature)?;
    if !detector.step(x)?.warning {
        return Ok(None);
    }
    let test = hotelling_t2(current_window, train_ref_window, alpha)?;
    let event = if test.reject {
        detector.reanchor(x);
        ShiftEvent {
            trial_index,
            stage: Stage::Validated,
            statistic: test.t2,
            p_value: Some(test.p_value),
        }
    } else {
        ShiftEvent {
            trial_index,
            stage: Stage::Warning,
            statistic: x,
            p_value: Some(test.p_value),
        }
    };
    Ok(Some(event))
}

pub fn write_events_jsonl<W: Write>(events: &[ShiftEvent], mut out: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events_jsonl<R: BufRead>(input: R) -> io::Result<Vec<ShiftEvent>> {
    let mut events = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            events.push(serde_json::from_str(&line)?);
        }
    }
    Ok(events)
}
