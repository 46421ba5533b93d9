//! Stream orchestration for unsupervised adaptation.
//!
//! A run walks the unlabeled test stream once. Each trial is first predicted
//! by the current model, then may trigger an adaptation:
//!
//! - active: a shift validated by the two-stage detector,
//! - passive: every `passive_period`-th trial (counted from the first),
//! - static: never.
//!
//! An adaptation sweeps every test trial seen so far that has not yet been
//! accepted, scores it against the current training pool with the combo's
//! transductive learner and adds it with its predicted label when the
//! confidence exceeds Γ. A new member is then trained on the enlarged pool and
//! either appended to the ensemble or, for single-classifier runs, replaces
//! the current model.
//!
//! Spatial filters and PCA stay frozen; only classifiers are retrained. Test
//! labels are not part of [`TestTrial`] and cannot influence a run.

use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cse::{
    cse_detect, detector_from_training, CseError, DetectorParams, EwmaDetector, ShiftEvent, Stage,
};
use crate::features::{FeatureVector, PcaModel};
use crate::ingest::Class;
use crate::learners::{
    pwknn_cr, train_lda, Classifier, ClassifierKind, Ensemble, LabeledPoint, LdaModel,
    LearnerError, PwknnModel, SigmaPolicy, DEFAULT_LDA_SHRINKAGE,
};

#[derive(Debug, Error)]
pub enum UaelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Cse(#[from] CseError),
    #[error("trial {trial_index}: {source}")]
    Trial {
        trial_index: usize,
        #[source]
        source: Box<UaelError>,
    },
}

/// Transductive learner / ensemble member pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Combo {
    /// PWKNN transduction, PWKNN members.
    #[serde(rename = "C1", alias = "c1")]
    C1PwknnPwknn,
    /// LDA transduction (posterior as confidence), LDA members.
    #[serde(rename = "C2", alias = "c2")]
    C2LdaLda,
    /// PWKNN transduction, LDA members.
    #[serde(rename = "C3", alias = "c3")]
    C3PwknnLda,
}

impl Combo {
    pub fn transducer(self) -> ClassifierKind {
        match self {
            Combo::C1PwknnPwknn | Combo::C3PwknnLda => ClassifierKind::Pwknn,
            Combo::C2LdaLda => ClassifierKind::Lda,
        }
    }

    pub fn member(self) -> ClassifierKind {
        match self {
            Combo::C1PwknnPwknn => ClassifierKind::Pwknn,
            Combo::C2LdaLda | Combo::C3PwknnLda => ClassifierKind::Lda,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Combo::C1PwknnPwknn => "C1",
            Combo::C2LdaLda => "C2",
            Combo::C3PwknnLda => "C3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Active,
    Passive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UaelConfig {
    pub combo: Combo,
    pub scheme: Scheme,
    pub passive_period: usize,
    pub k: usize,
    /// Acceptance threshold Γ on the confidence ratio.
    pub gamma: f64,
    /// Stage-II significance level.
    pub alpha: f64,
    pub detector: DetectorParams,
    pub sigma_policy: SigmaPolicy,
    pub lda_shrinkage: f64,
}

impl Default for UaelConfig {
    fn default() -> Self {
        UaelConfig {
            combo: Combo::C3PwknnLda,
            scheme: Scheme::Active,
            passive_period: 10,
            k: 7,
            gamma: 0.7,
            alpha: 0.05,
            detector: DetectorParams::default(),
            sigma_policy: SigmaPolicy::default(),
            lda_shrinkage: DEFAULT_LDA_SHRINKAGE,
        }
    }
}

impl UaelConfig {
    pub fn validate(&self) -> Result<(), UaelError> {
        let bad = |m: String| Err(UaelError::Config(m));
        if self.k == 0 {
            return bad("K must be positive".into());
        }
        if !(0.5..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0.5, 1)", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if self.passive_period == 0 {
            return bad("passive_period must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lda_shrinkage) {
            return bad(format!(
                "lda_shrinkage {} outside [0, 1]",
                self.lda_shrinkage
            ));
        }
        Ok(())
    }
}

/// One unlabeled test trial: its feature vector and the sub-window features
/// used by stage II (may be empty for runs without a detector).
#[derive(Debug, Clone, PartialEq)]
pub struct TestTrial {
    pub trial_index: usize,
    pub features: FeatureVector,
    pub window: Vec<FeatureVector>,
}

/// Frozen training-phase quantities the detector needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftReference {
    pub pca: PcaModel,
    pub reference_window: Vec<FeatureVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub trial_index: usize,
    pub assigned_label: Class,
    pub confidence: f64,
    /// Trial index of the adaptation point that accepted this trial.
    pub shift_event_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub trial_index: usize,
    pub label: Class,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunResult {
    pub predictions: Vec<Prediction>,
    /// Stage-I warnings (failed validation) and validated shifts, in order.
    pub events: Vec<ShiftEvent>,
    /// Model size after each trial has been processed.
    pub ensemble_sizes: Vec<(usize, usize)>,
    pub augmentations: Vec<AugmentationRecord>,
    /// Selected EWMA λ and control limit, for detector runs.
    pub lambda: Option<f64>,
    pub limit: Option<f64>,
}

impl RunResult {
    pub fn validated_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.stage == Stage::Validated)
            .count()
    }

    /// Every stage-I warning, including those later validated.
    pub fn warning_count(&self) -> usize {
        self.events.len()
    }

    pub fn final_size(&self) -> usize {
        self.ensemble_sizes.last().map_or(1, |&(_, s)| s)
    }
}

/// How the confidence of an unlabeled trial is scored.
#[derive(Debug, Clone)]
pub enum Transducer {
    Pwknn { k: usize, sigma: f64 },
    Lda(LdaModel),
}

/// Scores every seen trial not in `accepted` against `train` and keeps those
/// with confidence strictly above `gamma`.
pub fn transductive_augment(
    seen: &[TestTrial],
    accepted: &BTreeSet<usize>,
    train: &[LabeledPoint],
    transducer: &Transducer,
    gamma: f64,
    event_index: usize,
) -> Result<Vec<AugmentationRecord>, UaelError> {
    let mut out = Vec::new();
    for t in seen.iter().filter(|t| !accepted.contains(&t.trial_index)) {
        let (confidence, label) = match transducer {
            Transducer::Pwknn { k, sigma } => {
                let o = pwknn_cr(&t.features, train, *k, *sigma)?;
                (o.cr, o.label)
            }
            Transducer::Lda(m) => {
                let p = m.posterior(&t.features)?;
                (p.confidence(), p.label())
            }
        };
        if confidence > gamma {
            out.push(AugmentationRecord {
                trial_index: t.trial_index,
                assigned_label: label,
                confidence,
                shift_event_index: event_index,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trigger {
    Detector,
    Periodic(usize),
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Growth {
    Append,
    Replace,
}

fn train_member(
    kind: ClassifierKind,
    pool: &[LabeledPoint],
    cfg: &UaelConfig,
    sigma: f64,
) -> Result<Classifier, UaelError> {
    Ok(match kind {
        ClassifierKind::Lda => Classifier::Lda(fit_lda(pool, cfg.lda_shrinkage)?),
        ClassifierKind::Pwknn => Classifier::Pwknn(PwknnModel::new(pool.to_vec(), cfg.k, sigma)?),
    })
}

fn fit_lda(pool: &[LabeledPoint], shrinkage: f64) -> Result<LdaModel, LearnerError> {
    let x: Vec<FeatureVector> = pool.iter().map(|p| p.features.clone()).collect();
    let y: Vec<Class> = pool.iter().map(|p| p.label).collect();
    train_lda(&x, &y, shrinkage)
}

struct RunState<'a> {
    test: &'a [TestTrial],
    reference: Option<&'a ShiftReference>,
    cfg: &'a UaelConfig,
    trigger: Trigger,
    growth: Growth,
    sigma: f64,
    pool: Vec<LabeledPoint>,
    model: Ensemble,
    detector: Option<EwmaDetector>,
    accepted: BTreeSet<usize>,
    result: RunResult,
}

impl RunState<'_> {
    fn fires(&mut self, pos: usize) -> Result<bool, UaelError> {
        let t = &self.test[pos];
        Ok(
            match (self.trigger, self.detector.as_mut(), self.reference) {
                (Trigger::Detector, Some(det), Some(reference)) => {
                    let ev = cse_detect(
                        det,
                        t.trial_index,
                        &t.features,
                        &reference.pca,
                        &t.window,
                        &reference.reference_window,
                        self.cfg.alpha,
                    )?;
                    let validated = ev.as_ref().is_some_and(|e| e.stage == Stage::Validated);
                    self.result.events.extend(ev);
                    validated
                }
                (Trigger::Periodic(p), _, _) => (pos + 1).is_multiple_of(p),
                _ => false,
            },
        )
    }

    fn adapt(&mut self, pos: usize) -> Result<(), UaelError> {
        let seen = &self.test[..=pos];
        let event_index = seen[pos].trial_index;
        let transducer = match self.cfg.combo.transducer() {
            ClassifierKind::Pwknn => Transducer::Pwknn {
                k: self.cfg.k,
                sigma: self.sigma,
            },
            ClassifierKind::Lda => Transducer::Lda(fit_lda(&self.pool, self.cfg.lda_shrinkage)?),
        };
        let records = transductive_augment(
            seen,
            &self.accepted,
            &self.pool,
            &transducer,
            self.cfg.gamma,
            event_index,
        )?;
        let mut candidates = seen.iter();
        for rec in &records {
            let trial = candidates
                .find(|s| s.trial_index == rec.trial_index)
                .expect("records follow stream order");
            self.accepted.insert(rec.trial_index);
            self.pool.push(LabeledPoint {
                features: trial.features.clone(),
                label: rec.assigned_label,
                trial_index: rec.trial_index,
            });
        }
        self.result.augmentations.extend(records);
        let member = train_member(self.cfg.combo.member(), &self.pool, self.cfg, self.sigma)?;
        match self.growth {
            Growth::Append => self.model.push(member, event_index)?,
            Growth::Replace => self.model = Ensemble::new(member),
        }
        Ok(())
    }

    fn process(&mut self, pos: usize) -> Result<(), UaelError> {
        let t = &self.test[pos];
        let (label, margin) = self.model.predict(&t.features)?;
        self.result.predictions.push(Prediction {
            trial_index: t.trial_index,
            label,
            margin,
        });
        if self.fires(pos)? {
            self.adapt(pos)?;
        }
        self.result
            .ensemble_sizes
            .push((t.trial_index, self.model.len()));
        Ok(())
    }
}

fn run(
    train: &[LabeledPoint],
    test: &[TestTrial],
    reference: Option<&ShiftReference>,
    cfg: &UaelConfig,
    trigger: Trigger,
    growth: Growth,
) -> Result<RunResult, UaelError> {
    cfg.validate()?;
    let train_features: Vec<FeatureVector> = train.iter().map(|p| p.features.clone()).collect();
    let sigma = match (cfg.combo.transducer(), cfg.combo.member()) {
        (ClassifierKind::Lda, ClassifierKind::Lda) => 1.0,
        _ => cfg.sigma_policy.resolve(&train_features)?,
    };
    let detector = match trigger {
        Trigger::Detector => {
            let r = reference
                .ok_or_else(|| UaelError::Config("active runs need a shift reference".into()))?;
            Some(detector_from_training(
                &train_features,
                &r.pca,
                &cfg.detector,
            )?)
        }
        _ => None,
    };
    let result = RunResult {
        lambda: detector.as_ref().map(|d| d.lambda),
        limit: detector.as_ref().map(|d| d.limit),
        ..RunResult::default()
    };
    let mut state = RunState {
        test,
        reference,
        cfg,
        trigger,
        growth,
        sigma,
        model: Ensemble::new(train_member(cfg.combo.member(), train, cfg, sigma)?),
        pool: train.to_vec(),
        detector,
        accepted: BTreeSet::new(),
        result,
    };
    for (pos, t) in test.iter().enumerate() {
        state.process(pos).map_err(|e| UaelError::Trial {
            trial_index: t.trial_index,
            source: Box::new(e),
        })?;
    }
    Ok(state.result)
}

/// Active ensemble adaptation driven by validated shifts.
pub fn run_cse_uael(
    train: &[LabeledPoint],
    test: &[TestTrial],
    reference: &ShiftReference,
    cfg: &UaelConfig,
) -> Result<RunResult, UaelError> {
    run(
        train,
        test,
        Some(reference),
        cfg,
        Trigger::Detector,
        Growth::Append,
    )
}

/// Passive ensemble adaptation every `cfg.passive_period` trials.
pub fn run_passive(
    train: &[LabeledPoint],
    test: &[TestTrial],
    cfg: &UaelConfig,
) -> Result<RunResult, UaelError> {
    run(
        train,
        test,
        None,
        cfg,
        Trigger::Periodic(cfg.passive_period),
        Growth::Append,
    )
}

/// One classifier, retrained and replaced at each trigger of `cfg.scheme`
/// when `adaptive`, otherwise fixed (the static baseline).
pub fn run_single(
    train: &[LabeledPoint],
    test: &[TestTrial],
    reference: Option<&ShiftReference>,
    cfg: &UaelConfig,
    adaptive: bool,
) -> Result<RunResult, UaelError> {
    let trigger = match (adaptive, cfg.scheme) {
        (false, _) => Trigger::Never,
        (true, Scheme::Active) => Trigger::Detector,
        (true, Scheme::Passive) => Trigger::Periodic(cfg.passive_period),
    };
    run(train, test, reference, cfg, trigger, Growth::Replace)
}

pub fn write_predictions_csv<W: Write>(preds: &[Prediction], mut out: W) -> io::Result<()> {
    writeln!(out, "trial_index,label,margin")?;
    for p in preds {
        writeln!(out, "{},{},{}", p.trial_index, p.label, p.margin)?;
    }
    Ok(())
}

pub fn read_predictions_csv<R: BufRead>(input: R) -> io::Result<Vec<Prediction>> {
    let bad = |line: usize, m: &str| {
        io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {m}"))
    };
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad(i + 1, "expected 3 fields"));
        }
        let trial_index = f[0].parse().map_err(|_| bad(i + 1, "bad trial_index"))?;
        let label = f[1]
            .parse::<u8>()
            .ok()
            .and_then(Class::from_code)
            .ok_or_else(|| bad(i + 1, "bad label"))?;
        let margin = f[2].parse().map_err(|_| bad(i + 1, "bad margin"))?;
        out.push(Prediction {
            trial_index,
            label,
            margin,
        });
    }
    Ok(out)
}

pub fn write_augmentations_csv<W: Write>(
    recs: &[AugmentationRecord],
    mut out: W,
) -> io::Result<()> {
    writeln!(
        out,
        "trial_index,assigned_label,confidence,shift_event_index"
    )?;
    for r in recs {
        writeln!(
            out,
            "{},{},{},{}",
            r.trial_index, r.assigned_label, r.confidence, r.shift_event_index
        )?;
    }
    Ok(())
}

pub fn write_ensemble_sizes_csv<W: Write>(sizes: &[(usize, usize)], mut out: W) -> io::Result<()> {
    writeln!(out, "trial_index,ensemble_size")?;
    for (i, s) in sizes {
        writeln!(out, "{i},{s}")?;
    }
    Ok(())
}
