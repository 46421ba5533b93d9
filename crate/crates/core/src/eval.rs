//! Experiment driver: configuration, pipeline assembly, metrics, the
//! Wilcoxon signed-rank test and report emission.
//!
//! # Configuration (TOML)
//!
//! ```toml
//! seeds = [0, 1, 2]                # synthetic data: one unit per seed
//! output_dir = "out"
//! validation_fraction = 0.3
//!
//! [data.synthetic]                 # or [data.csv] with path, train_sessions, test_sessions
//! n_trials = 200
//! shift_points = [100]
//! shift_magnitude = 2.0
//!
//! [features]
//! window = { start_s = 0.5, duration_s = 3.0 }
//! h = 1
//!
//! [[runs]]
//! combo = "C3"
//! mode = "active"                  # active | passive | static
//! structure = "ensemble"           # ensemble | single
//! ```
//!
//! Every field except `data` and `runs` has a default; see the type docs.
//!
//! # Parameter selection
//!
//! The training trials are split chronologically: the first
//! `1 − validation_fraction` fit the spatial filters, PCA and classifiers, the
//! rest serve as a labelled validation stream. For each run, K and Γ are
//! chosen on a grid by validation accuracy, with the run's adaptation
//! replaced by the passive schedule (a 30-trial validation stream rarely
//! contains a shift, and K and Γ only matter when adaptation happens). Ties
//! keep the first grid point. The final models are then refit on all
//! training trials.
//!
//! # Output layout
//!
//! ```text
//! <output_dir>/report.json
//! <output_dir>/<unit>/truth.csv
//! <output_dir>/<unit>/<run>/predictions.csv
//! <output_dir>/<unit>/<run>/events.jsonl
//! <output_dir>/<unit>/<run>/augmentations.csv
//! <output_dir>/<unit>/<run>/ensemble_sizes.csv
//! <output_dir>/<unit>/<run>/accuracy_curve.csv
//! ```
//!
//! All files are written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::cse::{detector_from_training, reference_window, write_events_jsonl, DetectorParams};
use crate::dsp::{apply_filter_bank, default_bands, extract_window, FilterBank};
use crate::features::{
    fbcsp_features, fbcsp_segment_features, train_csp, train_pca, CspModel, FeatureVector,
};
use crate::ingest::{
    generate_synthetic_stream, load_trials, split_sessions, Class, SynthConfig, Trial, TrialSet,
    SYNTH_TEST_SESSION, SYNTH_TRAIN_SESSION,
};
use crate::learners::{LabeledPoint, SigmaPolicy, DEFAULT_LDA_SHRINKAGE};
use crate::uael::{
    read_predictions_csv, run_cse_uael, run_passive, run_single, write_augmentations_csv,
    write_ensemble_sizes_csv, write_predictions_csv, Combo, Prediction, RunResult, Scheme,
    ShiftReference, TestTrial, UaelConfig,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{stage} failed{}: {message}", unit.as_ref().map(|u| format!(" for {u}")).unwrap_or_default())]
    Runtime {
        stage: &'static str,
        unit: Option<String>,
        message: String,
    },
}

impl EvalError {
    /// Process exit code: 2 config, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            EvalError::Config(_) => 2,
            EvalError::Data(_) => 3,
            EvalError::Runtime { .. } => 4,
        }
    }

    fn runtime(stage: &'static str, unit: &str, e: impl fmt::Display) -> EvalError {
        EvalError::Runtime {
            stage,
            unit: Some(unit.to_string()),
            message: e.to_string(),
        }
    }

    fn io(stage: &'static str, path: &Path, e: io::Error) -> EvalError {
        EvalError::Runtime {
            stage,
            unit: None,
            message: format!("{}: {e}", path.display()),
        }
    }
}

/// Percentage of predictions matching `truth`; both must list the same trial
/// indices in the same order.
pub fn accuracy(predictions: &[Prediction], truth: &[(usize, Class)]) -> Result<f64, EvalError> {
    if predictions.len() != truth.len() || predictions.is_empty() {
        return Err(EvalError::Data(format!(
            "{} predictions for {} labelled trials",
            predictions.len(),
            truth.len()
        )));
    }
    let mut correct = 0usize;
    for (p, &(idx, label)) in predictions.iter().zip(truth) {
        if p.trial_index != idx {
            return Err(EvalError::Data(format!(
                "prediction for trial {} aligned with truth for trial {idx}",
                p.trial_index
            )));
        }
        correct += usize::from(p.label == label);
    }
    Ok(100.0 * correct as f64 / truth.len() as f64)
}

/// Midranks (1-based) of `values`, doubled so that they are integers.
fn doubled_midranks(values: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Average of ranks i+1..=j+1, doubled.
        let r2 = i + j + 2;
        for &o in &order[i..=j] {
            ranks[o] = r2;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Wilcoxon signed-rank test of `a − b`. Zero differences are dropped and
/// tied magnitudes get average ranks. The p-value is exact (enumeration of
/// the sign-flip distribution) for up to 25 nonzero differences and uses the
/// tie-corrected normal approximation with continuity correction above.
/// The one-sided alternative is `a > b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], two_sided: bool) -> Result<f64, EvalError> {
    if a.len() != b.len() || a.len() < 5 {
        return Err(EvalError::Data(format!(
            "need two samples of equal length >= 5, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|v| *v != 0.0)
        .collect();
    if d.is_empty() {
        return Err(EvalError::Data("all differences are zero".into()));
    }
    let n = d.len();
    let magnitudes: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (r2, ties) = doubled_midranks(&magnitudes);
    let w2: usize = d
        .iter()
        .zip(&r2)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .sum();

    let p = if n <= 25 {
        let total: usize = r2.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        for &r in &r2 {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let ge = counts[w2..].iter().sum::<f64>() / all;
        let le = counts[..=w2].iter().sum::<f64>() / all;
        if two_sided {
            (2.0 * ge.min(le)).min(1.0)
        } else {
            ge
        }
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
        let w = w2 as f64 / 2.0;
        let normal = Normal::standard();
        if two_sided {
            let z = ((w - mean).abs() - 0.5).max(0.0) / sd;
            (2.0 * normal.sf(z)).min(1.0)
        } else {
            normal.sf((w - mean - 0.5) / sd)
        }
    };
    Ok(p.max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthConfig),
    Csv {
        path: PathBuf,
        #[serde(default)]
        expected_rate_hz: Option<f64>,
        train_sessions: Vec<String>,
        test_sessions: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub start_s: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    pub bands_hz: Vec<(f64, f64)>,
    pub filter_order: usize,
    /// Trial window relative to trial start (cue onset is dataset specific).
    pub window: WindowSpec,
    /// CSP filter pairs per band.
    pub h: usize,
    /// Sub-windows per trial forming the stage-II sample.
    pub stage2_segments: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            bands_hz: default_bands(),
            filter_order: 8,
            window: WindowSpec {
                start_s: 0.5,
                duration_s: 3.0,
            },
            h: 1,
            stage2_segments: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Active,
    Passive,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    #[default]
    Ensemble,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub combo: Combo,
    pub mode: RunMode,
    #[serde(default)]
    pub structure: Structure,
}

impl RunSpec {
    pub fn name(&self) -> String {
        let mode = match self.mode {
            RunMode::Active => "active",
            RunMode::Passive => "passive",
            RunMode::Static => "static",
        };
        match (self.mode, self.structure) {
            (RunMode::Static, _) | (_, Structure::Ensemble) => {
                format!("{mode}-{}", self.combo.label())
            }
            (_, Structure::Single) => format!("{mode}-{}-single", self.combo.label()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub k: Vec<usize>,
    pub gamma: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            k: (3..=15).step_by(2).collect(),
            gamma: (0..9)
                .map(|i| 0.55 + 0.05 * i as f64)
                .map(|g| (g * 100.0).round() / 100.0)
                .collect(),
        }
    }
}

fn default_alpha() -> f64 {
    0.05
}
fn default_period() -> usize {
    10
}
fn default_shrinkage() -> f64 {
    DEFAULT_LDA_SHRINKAGE
}
fn default_validation() -> f64 {
    0.30
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Synthetic data only: one unit per seed, overriding the generator seed.
    /// Empty means the generator's own seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub detector: DetectorParams,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_period")]
    pub passive_period: usize,
    #[serde(default)]
    pub sigma_policy: SigmaPolicy,
    #[serde(default = "default_shrinkage")]
    pub lda_shrinkage: f64,
    #[serde(default)]
    pub grid: GridSpec,
    pub runs: Vec<RunSpec>,
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig, EvalError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig, EvalError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Config(m));
        if self.runs.is_empty() {
            return bad("no runs requested".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return bad(format!(
                "validation_fraction {} outside (0, 0.5]",
                self.validation_fraction
            ));
        }
        if self.grid.k.is_empty() || self.grid.gamma.is_empty() {
            return bad("parameter grid is empty".into());
        }
        let f = &self.features;
        if f.h == 0 || f.stage2_segments == 0 {
            return bad("h and stage2_segments must be positive".into());
        }
        let mut names: Vec<String> = self.runs.iter().map(RunSpec::name).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate run".into());
        }
        for &k in &self.grid.k {
            for &gamma in &self.grid.gamma {
                self.uael_config(&self.runs[0], k, gamma)
                    .validate()
                    .map_err(|e| EvalError::Config(e.to_string()))?;
            }
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn uael_config(&self, spec: &RunSpec, k: usize, gamma: f64) -> UaelConfig {
        UaelConfig {
            combo: spec.combo,
            scheme: if spec.mode == RunMode::Active {
                Scheme::Active
            } else {
                Scheme::Passive
            },
            passive_period: self.passive_period,
            k,
            gamma,
            alpha: self.alpha,
            detector: self.detector,
            sigma_policy: self.sigma_policy,
            lda_shrinkage: self.lda_shrinkage,
        }
    }
}

/// A trial after filtering and windowing: one band-limited copy per band.
#[derive(Debug, Clone)]
pub struct BandedTrial {
    pub trial_index: usize,
    pub label: Option<Class>,
    pub bands: Vec<Trial>,
}

/// Filters every trial through the bank and cuts the analysis window.
pub fn preprocess(
    trials: &[Trial],
    bank: &FilterBank,
    window: WindowSpec,
) -> Result<Vec<BandedTrial>, String> {
    trials
        .par_iter()
        .map(|t| {
            let bands = apply_filter_bank(bank, t)
                .map_err(|e| format!("trial {}: {e}", t.trial_index))?
                .iter()
                .map(|b| extract_window(b, window.start_s, window.duration_s))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| format!("trial {}: {e}", t.trial_index))?;
            Ok(BandedTrial {
                trial_index: t.trial_index,
                label: t.label,
                bands,
            })
        })
        .collect()
}

/// Spatial filters, PCA and stage-II reference learned from training trials.
#[derive(Debug, Clone)]
pub struct FeatureModels {
    pub csp: Vec<CspModel>,
    pub reference: ShiftReference,
    pub segments: usize,
}

impl FeatureModels {
    pub fn fit(
        train: &[BandedTrial],
        h: usize,
        segments: usize,
    ) -> Result<(FeatureModels, Vec<LabeledPoint>), String> {
        let n_bands = train.first().map_or(0, |t| t.bands.len());
        let by_class = |b: usize, c: Class| -> Vec<Trial> {
            train
                .iter()
                .filter(|t| t.label == Some(c))
                .map(|t| t.bands[b].clone())
                .collect()
        };
        let csp = (0..n_bands)
            .map(|b| train_csp(&by_class(b, Class::One), &by_class(b, Class::Two), h))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let mut points = Vec::with_capacity(train.len());
        let mut windows = Vec::with_capacity(train.len());
        for t in train {
            let label = t
                .label
                .ok_or_else(|| format!("training trial {} is unlabeled", t.trial_index))?;
            let features = fbcsp_features(&t.bands, &csp).map_err(|e| e.to_string())?;
            windows
                .push(fbcsp_segment_features(&t.bands, &csp, segments).map_err(|e| e.to_string())?);
            points.push(LabeledPoint {
                features,
                label,
                trial_index: t.trial_index,
            });
        }
        let feats: Vec<FeatureVector> = points.iter().map(|p| p.features.clone()).collect();
        let pca = train_pca(&feats).map_err(|e| e.to_string())?;
        let reference_window = reference_window(&windows).map_err(|e| e.to_string())?;
        Ok((
            FeatureModels {
                csp,
                reference: ShiftReference {
                    pca,
                    reference_window,
                },
                segments,
            },
            points,
        ))
    }

    /// Unlabeled test trials; labels are deliberately not carried over.
    pub fn test_trials(&self, trials: &[BandedTrial]) -> Result<Vec<TestTrial>, String> {
        trials
            .par_iter()
            .map(|t| {
                Ok(TestTrial {
                    trial_index: t.trial_index,
                    features: fbcsp_features(&t.bands, &self.csp).map_err(|e| e.to_string())?,
                    window: fbcsp_segment_features(&t.bands, &self.csp, self.segments)
                        .map_err(|e| e.to_string())?,
                })
            })
            .collect()
    }
}

fn truth_of(trials: &[BandedTrial]) -> Result<Vec<(usize, Class)>, String> {
    trials
        .iter()
        .map(|t| {
            t.label
                .map(|l| (t.trial_index, l))
                .ok_or_else(|| format!("trial {} is unlabeled", t.trial_index))
        })
        .collect()
}

/// Runs one spec with fixed K and Γ.
pub fn execute_run(
    spec: &RunSpec,
    cfg: &UaelConfig,
    train: &[LabeledPoint],
    test: &[TestTrial],
    reference: &ShiftReference,
) -> Result<RunResult, String> {
    let r = match (spec.mode, spec.structure) {
        (RunMode::Static, _) => run_single(train, test, None, cfg, false),
        (RunMode::Active, Structure::Ensemble) => run_cse_uael(train, test, reference, cfg),
        (RunMode::Passive, Structure::Ensemble) => run_passive(train, test, cfg),
        (_, Structure::Single) => run_single(train, test, Some(reference), cfg, true),
    };
    r.map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: String,
    pub accuracy: f64,
    pub k: usize,
    pub gamma: f64,
    pub validation_accuracy: f64,
    pub warnings: usize,
    pub validated: usize,
    pub final_ensemble_size: usize,
    pub augmented: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub unit: String,
    pub n_train: usize,
    pub n_test: usize,
    /// EWMA λ and control limit selected on the full training set.
    pub lambda: f64,
    pub limit: f64,
    pub runs: Vec<RunReport>,
}

/// A unit's report plus the raw run traces and truth, for artifact output.
#[derive(Debug, Clone)]
pub struct UnitOutcome {
    pub report: UnitReport,
    pub results: Vec<RunResult>,
    pub truth: Vec<(usize, Class)>,
}

/// Full pipeline for one train/test pair: selection on the validation split,
/// refit on all training trials, every requested run on the test stream.
pub fn evaluate_unit(
    unit: &str,
    train: &TrialSet,
    test: &TrialSet,
    cfg: &ExperimentConfig,
) -> Result<UnitOutcome, EvalError> {
    let rate = train
        .sample_rate_hz()
        .ok_or_else(|| EvalError::Data(format!("{unit}: empty training set")))?;
    let f = &cfg.features;
    let bank = FilterBank::design(&f.bands_hz, f.filter_order, rate)
        .map_err(|e| EvalError::Config(e.to_string()))?;
    let train_b = preprocess(train.trials(), &bank, f.window)
        .map_err(|e| EvalError::runtime("filtering", unit, e))?;
    let test_b = preprocess(test.trials(), &bank, f.window)
        .map_err(|e| EvalError::runtime("filtering", unit, e))?;
    let truth = truth_of(&test_b).map_err(|e| EvalError::Data(format!("{unit}: {e}")))?;

    let n_fit = ((train_b.len() as f64) * (1.0 - cfg.validation_fraction)).round() as usize;
    let (fit_part, val_part) = train_b.split_at(n_fit.min(train_b.len()));
    let (sel_models, sel_train) = FeatureModels::fit(fit_part, f.h, f.stage2_segments)
        .map_err(|e| EvalError::runtime("selection features", unit, e))?;
    let val_trials = sel_models
        .test_trials(val_part)
        .map_err(|e| EvalError::runtime("selection features", unit, e))?;
    let val_truth = truth_of(val_part).map_err(|e| EvalError::Data(format!("{unit}: {e}")))?;

    let (models, train_points) = FeatureModels::fit(&train_b, f.h, f.stage2_segments)
        .map_err(|e| EvalError::runtime("features", unit, e))?;
    let test_trials = models
        .test_trials(&test_b)
        .map_err(|e| EvalError::runtime("features", unit, e))?;
    let train_feats: Vec<FeatureVector> = train_points.iter().map(|p| p.features.clone()).collect();
    let detector = detector_from_training(&train_feats, &models.reference.pca, &cfg.detector)
        .map_err(|e| EvalError::runtime("detector", unit, e))?;

    let mut runs = Vec::new();
    let mut results = Vec::new();
    for spec in &cfg.runs {
        let selection_spec = RunSpec {
            mode: if spec.mode == RunMode::Active {
                RunMode::Passive
            } else {
                spec.mode
            },
            ..spec.clone()
        };
        let mut best: Option<(f64, usize, f64)> = None;
        for &k in &cfg.grid.k {
            for &gamma in &cfg.grid.gamma {
                let ucfg = cfg.uael_config(spec, k, gamma);
                let r = execute_run(
                    &selection_spec,
                    &ucfg,
                    &sel_train,
                    &val_trials,
                    &sel_models.reference,
                )
                .map_err(|e| EvalError::runtime("parameter selection", unit, e))?;
                let acc = accuracy(&r.predictions, &val_truth)?;
                if best.is_none_or(|(b, _, _)| acc > b) {
                    best = Some((acc, k, gamma));
                }
            }
        }
        let (validation_accuracy, k, gamma) = best.expect("grid is nonempty");
        let ucfg = cfg.uael_config(spec, k, gamma);
        let r = execute_run(spec, &ucfg, &train_points, &test_trials, &models.reference)
            .map_err(|e| EvalError::runtime("stream run", unit, e))?;
        runs.push(RunReport {
            run: spec.name(),
            accuracy: accuracy(&r.predictions, &truth)?,
            k,
            gamma,
            validation_accuracy,
            warnings: r.warning_count(),
            validated: r.validated_count(),
            final_ensemble_size: r.final_size(),
            augmented: r.augmentations.len(),
        });
        results.push(r);
    }
    Ok(UnitOutcome {
        report: UnitReport {
            unit: unit.to_string(),
            n_train: train.len(),
            n_test: test.len(),
            lambda: detector.lambda,
            limit: detector.limit,
            runs,
        },
        results,
        truth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub mean_accuracy: f64,
    pub mean_warnings: f64,
    pub mean_validated: f64,
    pub mean_final_ensemble_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub mean_difference: f64,
    /// Two-sided Wilcoxon p-value over units; absent with fewer than five
    /// units or identical accuracies.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub units: Vec<UnitReport>,
    pub summary: Vec<RunSummary>,
    pub comparisons: Vec<Comparison>,
}

fn summarize(cfg: &ExperimentConfig, units: &[UnitReport]) -> (Vec<RunSummary>, Vec<Comparison>) {
    let names: Vec<String> = cfg.runs.iter().map(RunSpec::name).collect();
    let column = |i: usize, f: &dyn Fn(&RunReport) -> f64| -> Vec<f64> {
        units.iter().map(|u| f(&u.runs[i])).collect()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let summary = names
        .iter()
        .enumerate()
        .map(|(i, name)| RunSummary {
            run: name.clone(),
            mean_accuracy: mean(&column(i, &|r| r.accuracy)),
            mean_warnings: mean(&column(i, &|r| r.warnings as f64)),
            mean_validated: mean(&column(i, &|r| r.validated as f64)),
            mean_final_ensemble_size: mean(&column(i, &|r| r.final_ensemble_size as f64)),
        })
        .collect();
    let mut comparisons = Vec::new();
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let (a, b) = (column(i, &|r| r.accuracy), column(j, &|r| r.accuracy));
            comparisons.push(Comparison {
                a: names[i].clone(),
                b: names[j].clone(),
                mean_difference: mean(&a) - mean(&b),
                p_value: wilcoxon_signed_rank(&a, &b, true).ok(),
            });
        }
    }
    (summary, comparisons)
}

/// A named evaluation unit with its train and test sets.
pub type Unit = (String, TrialSet, TrialSet);

/// Loads or synthesizes the data and returns `(unit, train, test)` triples.
pub fn load_units(cfg: &ExperimentConfig) -> Result<(Vec<u64>, Vec<Unit>), EvalError> {
    match &cfg.data {
        DataSource::Synthetic(base) => {
            let seeds = if cfg.seeds.is_empty() {
                vec![base.seed]
            } else {
                cfg.seeds.clone()
            };
            let units = seeds
                .par_iter()
                .map(|&seed| {
                    let set = generate_synthetic_stream(&SynthConfig {
                        seed,
                        ..base.clone()
                    })
                    .map_err(|e| EvalError::Config(e.to_string()))?;
                    let (train, test) = split_sessions(
                        &set,
                        &[SYNTH_TRAIN_SESSION.into()],
                        &[SYNTH_TEST_SESSION.into()],
                    )
                    .map_err(|e| EvalError::Config(format!("seed {seed}: {e}")))?;
                    Ok((format!("seed-{seed}"), train, test))
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            Ok((seeds, units))
        }
        DataSource::Csv {
            path,
            expected_rate_hz,
            train_sessions,
            test_sessions,
        } => {
            let set =
                load_trials(path, *expected_rate_hz).map_err(|e| EvalError::Data(e.to_string()))?;
            let mut units = Vec::new();
            for subject in set.subjects() {
                let subset = set.filter(|t| t.subject_id == subject);
                let (train, test) = split_sessions(&subset, train_sessions, test_sessions)
                    .map_err(|e| EvalError::Data(format!("subject {subject}: {e}")))?;
                units.push((subject, train, test));
            }
            Ok((Vec::new(), units))
        }
    }
}

/// End-to-end experiment; writes artifacts under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report, EvalError> {
    cfg.validate()?;
    let (seeds, units) = load_units(cfg)?;
    let outcomes = units
        .par_iter()
        .map(|(unit, train, test)| evaluate_unit(unit, train, test, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let reports: Vec<UnitReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let (summary, comparisons) = summarize(cfg, &reports);
    let report = Report {
        config: cfg.clone(),
        seeds,
        units: reports,
        summary,
        comparisons,
    };
    write_artifacts(&cfg.output_dir, cfg, &outcomes, &report)?;
    Ok(report)
}

/// Writes `contents` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn write_with(
    path: &Path,
    f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>,
) -> Result<(), EvalError> {
    let mut buf = Vec::new();
    f(&mut buf)
        .and_then(|_| write_atomic(path, &buf))
        .map_err(|e| EvalError::io("writing artifacts", path, e))
}

fn write_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    outcomes: &[UnitOutcome],
    report: &Report,
) -> Result<(), EvalError> {
    for o in outcomes {
        let unit_dir = dir.join(&o.report.unit);
        write_with(&unit_dir.join("truth.csv"), |b| {
            writeln!(b, "trial_index,label")?;
            o.truth.iter().try_for_each(|(i, l)| writeln!(b, "{i},{l}"))
        })?;
        for (spec, r) in cfg.runs.iter().zip(&o.results) {
            let run_dir = unit_dir.join(spec.name());
            write_with(&run_dir.join("predictions.csv"), |b| {
                write_predictions_csv(&r.predictions, b)
            })?;
            write_with(&run_dir.join("events.jsonl"), |b| {
                write_events_jsonl(&r.events, b)
            })?;
            write_with(&run_dir.join("augmentations.csv"), |b| {
                write_augmentations_csv(&r.augmentations, b)
            })?;
            write_with(&run_dir.join("ensemble_sizes.csv"), |b| {
                write_ensemble_sizes_csv(&r.ensemble_sizes, b)
            })?;
            write_with(&run_dir.join("accuracy_curve.csv"), |b| {
                writeln!(b, "trial_index,correct,cumulative_accuracy")?;
                let mut correct = 0usize;
                for (n, (p, (_, l))) in r.predictions.iter().zip(&o.truth).enumerate() {
                    let hit = p.label == *l;
                    correct += usize::from(hit);
                    writeln!(
                        b,
                        "{},{},{}",
                        p.trial_index,
                        u8::from(hit),
                        100.0 * correct as f64 / (n + 1) as f64
                    )?;
                }
                Ok(())
            })?;
        }
    }
    write_with(&dir.join("report.json"), |b| {
        serde_json::to_writer_pretty(&mut *b, report)?;
        b.push(b'\n');
        Ok(())
    })
}

/// Accuracy of every `<unit>/<run>/predictions.csv` under `dir` against the
/// unit's `truth.csv`, keyed by unit then run.
pub fn recompute_accuracies(
    dir: &Path,
) -> Result<BTreeMap<String, BTreeMap<String, f64>>, EvalError> {
    let read_dir =
        |p: &Path| fs::read_dir(p).map_err(|e| EvalError::Data(format!("{}: {e}", p.display())));
    let open = |p: &Path| {
        fs::File::open(p)
            .map(BufReader::new)
            .map_err(|e| EvalError::Data(format!("{}: {e}", p.display())))
    };
    let mut out = BTreeMap::new();
    for unit in read_dir(dir)? {
        let unit = unit.map_err(|e| EvalError::Data(e.to_string()))?.path();
        let truth_path = unit.join("truth.csv");
        if !truth_path.is_file() {
            continue;
        }
        let mut truth = Vec::new();
        for (n, line) in open(&truth_path)?.lines().enumerate().skip(1) {
            let line = line.map_err(|e| EvalError::Data(e.to_string()))?;
            let parsed = line.split_once(',').and_then(|(i, l)| {
                Some((
                    i.parse::<usize>().ok()?,
                    Class::from_code(l.trim().parse().ok()?)?,
                ))
            });
            truth.push(parsed.ok_or_else(|| {
                EvalError::Data(format!(
                    "{}: line {}: malformed",
                    truth_path.display(),
                    n + 1
                ))
            })?);
        }
        let mut runs = BTreeMap::new();
        for run in read_dir(&unit)? {
            let run = run.map_err(|e| EvalError::Data(e.to_string()))?.path();
            let preds_path = run.join("predictions.csv");
            if preds_path.is_file() {
                let preds = read_predictions_csv(open(&preds_path)?)
                    .map_err(|e| EvalError::Data(format!("{}: {e}", preds_path.display())))?;
                let name = run
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned();
                runs.insert(name, accuracy(&preds, &truth)?);
            }
        }
        out.insert(
            unit.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            runs,
        );
    }
    if out.is_empty() {
        return Err(EvalError::Data(format!(
            "no run artifacts under {}",
            dir.display()
        )));
    }
    Ok(out)
}
