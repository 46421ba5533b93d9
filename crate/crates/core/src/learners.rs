//! Base classifiers and the voting ensemble.
//!
//! - [`LdaModel`]: Gaussian shared-covariance discriminant with a small
//!   shrinkage of the pooled covariance toward its diagonal.
//! - [`knn_posterior`]: `P(ω|x) = K_ω / K` over the K nearest neighbours.
//! - [`pwknn_cr`]: RBF-weighted neighbour vote,
//!   `CR_ω₁ = Σ_{q∈ω₁} κ(x, x_q) / Σ_q κ(x, x_q)` with
//!   `κ(x, x_q) = exp(−‖x − x_q‖² / 2σ²)`, and `CR = max(CR_ω₁, 1 − CR_ω₁)`.
//! - [`Ensemble`]: equal-weight majority vote; a tied vote goes to the most
//!   recently added member.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureVector;
use crate::ingest::Class;
use crate::linalg::{mean_and_covariance, sq_dist};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("class {0} has {1} samples, need at least {2}")]
    MissingClass(Class, usize, usize),
    #[error("K = {k} but only {n} reference points")]
    InvalidK { k: usize, n: usize },
    #[error("sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{0} features and {1} labels")]
    Length(usize, usize),
    #[error("covariance is singular")]
    Singular,
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("ensemble holds {expected:?} members, got {got:?}")]
    KindMismatch {
        expected: ClassifierKind,
        got: ClassifierKind,
    },
    #[error("snapshot: {0}")]
    Snapshot(String),
}

/// A labelled point of the PWKNN reference set. `trial_index` breaks distance
/// ties (lower index first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub features: FeatureVector,
    pub label: Class,
    pub trial_index: usize,
}

/// Class posteriors `(p1, p2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub p1: f64,
    pub p2: f64,
}

impl Posterior {
    /// Most probable class; an exact tie goes to class 1.
    pub fn label(&self) -> Class {
        if self.p1 >= self.p2 {
            Class::One
        } else {
            Class::Two
        }
    }

    pub fn confidence(&self) -> f64 {
        self.p1.max(self.p2)
    }
}

fn check_dims(points: &[LabeledPoint], x: &FeatureVector) -> Result<(), LearnerError> {
    let expected = points
        .first()
        .map_or(x.dimension(), |p| p.features.dimension());
    match points
        .iter()
        .map(|p| &p.features)
        .chain([x])
        .find(|f| f.dimension() != expected)
    {
        Some(f) => Err(LearnerError::Dimension {
            expected,
            got: f.dimension(),
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub class_means: [DVector<f64>; 2],
    pub pooled_cov_inverse: DMatrix<f64>,
    pub log_priors: [f64; 2],
    pub shrinkage: f64,
}

pub const DEFAULT_LDA_SHRINKAGE: f64 = 1e-3;

/// Fits LDA with pooled within-class covariance shrunk toward its diagonal:
/// `Σ ← (1 − γ)Σ + γ·diag(Σ)`. Priors are the class frequencies.
pub fn train_lda(
    x: &[FeatureVector],
    y: &[Class],
    shrinkage: f64,
) -> Result<LdaModel, LearnerError> {
    if x.len() != y.len() {
        return Err(LearnerError::Length(x.len(), y.len()));
    }
    let d = x.first().map_or(0, |f| f.dimension());
    if let Some(f) = x.iter().find(|f| f.dimension() != d) {
        return Err(LearnerError::Dimension {
            expected: d,
            got: f.dimension(),
        });
    }
    let mut means = Vec::with_capacity(2);
    let mut scatter = DMatrix::zeros(d, d);
    let mut counts = [0usize; 2];
    for class in [Class::One, Class::Two] {
        let rows: Vec<&[f64]> = x
            .iter()
            .zip(y)
            .filter(|(_, &c)| c == class)
            .map(|(f, _)| f.as_slice())
            .collect();
        if rows.len() < 2 {
            return Err(LearnerError::MissingClass(class, rows.len(), 2));
        }
        let (mean, cov) = mean_and_covariance(&rows);
        scatter += cov * (rows.len() - 1) as f64;
        counts[class.slot()] = rows.len();
        means.push(mean);
    }
    let n = x.len() as f64;
    let pooled = scatter / (n - 2.0);
    let diag = DMatrix::from_diagonal(&pooled.diagonal());
    let shrunk = &pooled * (1.0 - shrinkage) + diag * shrinkage;
    let inverse = invert_spd(&shrunk).ok_or(LearnerError::Singular)?;
    Ok(LdaModel {
        class_means: [means[0].clone(), means[1].clone()],
        pooled_cov_inverse: inverse,
        log_priors: [(counts[0] as f64 / n).ln(), (counts[1] as f64 / n).ln()],
        shrinkage,
    })
}

/// Cholesky inverse, retried once with a ridge of `1e-10·trace/d` for
/// matrices that are singular to working precision.
fn invert_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Some(c.inverse());
    }
    let d = m.nrows();
    let ridge = 1e-10 * m.trace().max(f64::MIN_POSITIVE) / d as f64;
    (m + DMatrix::identity(d, d) * ridge)
        .cholesky()
        .map(|c| c.inverse())
}

impl LdaModel {
    pub fn dimension(&self) -> usize {
        self.class_means[0].len()
    }

    /// Linear discriminant scores `xᵀΣ⁻¹μ_k − ½μ_kᵀΣ⁻¹μ_k + log π_k`.
    pub fn scores(&self, x: &FeatureVector) -> Result<[f64; 2], LearnerError> {
        if x.dimension() != self.dimension() {
            return Err(LearnerError::Dimension {
                expected: self.dimension(),
                got: x.dimension(),
            });
        }
        let xv = DVector::from_column_slice(x.as_slice());
        let mut out = [0.0; 2];
        for (k, mu) in self.class_means.iter().enumerate() {
            let w = &self.pooled_cov_inverse * mu;
            out[k] = xv.dot(&w) - 0.5 * mu.dot(&w) + self.log_priors[k];
        }
        Ok(out)
    }

    pub fn posterior(&self, x: &FeatureVector) -> Result<Posterior, LearnerError> {
        let [s1, s2] = self.scores(x)?;
        // Logistic of the score difference, written to avoid overflow.
        let p1 = 1.0 / (1.0 + (s2 - s1).exp());
        Ok(Posterior { p1, p2: 1.0 - p1 })
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<Class, LearnerError> {
        let [s1, s2] = self.scores(x)?;
        Ok(if s1 >= s2 { Class::One } else { Class::Two })
    }
}

pub fn lda_posterior(model: &LdaModel, x: &FeatureVector) -> Result<Posterior, LearnerError> {
    model.posterior(x)
}

/// Indices of the `k` nearest points, ordered by (distance, trial index).
fn nearest(
    x: &FeatureVector,
    data: &[LabeledPoint],
    k: usize,
) -> Result<Vec<(usize, f64)>, LearnerError> {
    if k == 0 || k > data.len() {
        return Err(LearnerError::InvalidK { k, n: data.len() });
    }
    check_dims(data, x)?;
    let mut d: Vec<(usize, f64)> = data
        .iter()
        .enumerate()
        .map(|(i, p)| (i, sq_dist(x.as_slice(), p.features.as_slice())))
        .collect();
    let key = |&(i, dist): &(usize, f64)| (dist, data[i].trial_index);
    let cmp = |a: &(usize, f64), b: &(usize, f64)| {
        let (da, ia) = key(a);
        let (db, ib) = key(b);
        da.total_cmp(&db).then(ia.cmp(&ib))
    };
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    Ok(d)
}

/// `(K_ω₁ / K, K_ω₂ / K)` over the `k` nearest points.
pub fn knn_posterior(
    x: &FeatureVector,
    data: &[LabeledPoint],
    k: usize,
) -> Result<Posterior, LearnerError> {
    let nn = nearest(x, data, k)?;
    let k1 = nn
        .iter()
        .filter(|(i, _)| data[*i].label == Class::One)
        .count();
    let p1 = k1 as f64 / k as f64;
    Ok(Posterior {
        p1,
        p2: (k - k1) as f64 / k as f64,
    })
}

/// Outcome of [`pwknn_cr`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PwknnOutcome {
    /// Confidence ratio in `[0.5, 1]`.
    pub cr: f64,
    pub label: Class,
    /// All kernel weights underflowed; the unweighted posterior was used.
    pub fallback: bool,
}

pub fn pwknn_cr(
    x: &FeatureVector,
    data: &[LabeledPoint],
    k: usize,
    sigma: f64,
) -> Result<PwknnOutcome, LearnerError> {
    if !(sigma > 0.0) {
        return Err(LearnerError::InvalidSigma(sigma));
    }
    let nn = nearest(x, data, k)?;
    let mut w = [0.0; 2];
    for &(i, d2) in &nn {
        w[data[i].label.slot()] += (-d2 / (2.0 * sigma * sigma)).exp();
    }
    let total = w[0] + w[1];
    let (cr1, fallback) = if total > 0.0 {
        (w[0] / total, false)
    } else {
        (knn_posterior(x, data, k)?.p1, true)
    };
    let post = Posterior {
        p1: cr1,
        p2: 1.0 - cr1,
    };
    Ok(PwknnOutcome {
        cr: post.confidence(),
        label: post.label(),
        fallback,
    })
}

/// Median of all pairwise Euclidean distances.
pub fn median_pairwise_distance(points: &[FeatureVector]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            d.push(sq_dist(a.as_slice(), b.as_slice()).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    if d.len() % 2 == 1 {
        d[m]
    } else {
        0.5 * (d[m - 1] + d[m])
    }
}

/// RBF width rule for PWKNN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaPolicy {
    /// Median pairwise distance of the initial training set.
    #[default]
    Median,
    Fixed(f64),
}

impl SigmaPolicy {
    pub fn resolve(&self, points: &[FeatureVector]) -> Result<f64, LearnerError> {
        let s = match *self {
            SigmaPolicy::Median => median_pairwise_distance(points),
            SigmaPolicy::Fixed(s) => s,
        };
        if s > 0.0 && s.is_finite() {
            Ok(s)
        } else {
            Err(LearnerError::InvalidSigma(s))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwknnModel {
    pub reference_set: Vec<LabeledPoint>,
    pub k: usize,
    pub sigma: f64,
}

impl PwknnModel {
    pub fn new(
        reference_set: Vec<LabeledPoint>,
        k: usize,
        sigma: f64,
    ) -> Result<Self, LearnerError> {
        if k == 0 || k > reference_set.len() {
            return Err(LearnerError::InvalidK {
                k,
                n: reference_set.len(),
            });
        }
        for class in [Class::One, Class::Two] {
            if !reference_set.iter().any(|p| p.label == class) {
                return Err(LearnerError::MissingClass(class, 0, 1));
            }
        }
        if !(sigma > 0.0) {
            return Err(LearnerError::InvalidSigma(sigma));
        }
        Ok(PwknnModel {
            reference_set,
            k,
            sigma,
        })
    }

    pub fn classify(&self, x: &FeatureVector) -> Result<PwknnOutcome, LearnerError> {
        pwknn_cr(x, &self.reference_set, self.k, self.sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Lda,
    Pwknn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Classifier {
    Lda(LdaModel),
    Pwknn(PwknnModel),
}

impl Classifier {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Classifier::Lda(_) => ClassifierKind::Lda,
            Classifier::Pwknn(_) => ClassifierKind::Pwknn,
        }
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<Class, LearnerError> {
        match self {
            Classifier::Lda(m) => m.predict(x),
            Classifier::Pwknn(m) => Ok(m.classify(x)?.label),
        }
    }
}

/// Ordered, homogeneous collection of classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    members: Vec<Classifier>,
    kind: ClassifierKind,
    creation_events: Vec<usize>,
}

impl Ensemble {
    pub fn new(first: Classifier) -> Self {
        Ensemble {
            kind: first.kind(),
            members: vec![first],
            creation_events: Vec::new(),
        }
    }

    /// Appends a member created at trial `event_index`.
    pub fn push(&mut self, member: Classifier, event_index: usize) -> Result<(), LearnerError> {
        if member.kind() != self.kind {
            return Err(LearnerError::KindMismatch {
                expected: self.kind,
                got: member.kind(),
            });
        }
        self.members.push(member);
        self.creation_events.push(event_index);
        Ok(())
    }

    pub fn members(&self) -> &[Classifier] {
        &self.members
    }

    pub fn kind(&self) -> ClassifierKind {
        self.kind
    }

    pub fn creation_events(&self) -> &[usize] {
        &self.creation_events
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<(Class, f64), LearnerError> {
        let votes = self
            .members
            .iter()
            .map(|m| m.predict(x))
            .collect::<Result<Vec<_>, _>>()?;
        ensemble_vote(&votes)
    }

    pub fn to_json(&self) -> Result<String, LearnerError> {
        serde_json::to_string(&EnsembleSnapshot {
            format_version: SNAPSHOT_VERSION,
            ensemble: self.clone(),
        })
        .map_err(|e| LearnerError::Snapshot(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Ensemble, LearnerError> {
        let snap: EnsembleSnapshot =
            serde_json::from_str(text).map_err(|e| LearnerError::Snapshot(e.to_string()))?;
        if snap.format_version != SNAPSHOT_VERSION {
            return Err(LearnerError::Snapshot(format!(
                "unsupported format version {}",
                snap.format_version
            )));
        }
        let e = snap.ensemble;
        if e.members.is_empty()
            || e.members.len() != e.creation_events.len() + 1
            || e.members.iter().any(|m| m.kind() != e.kind)
        {
            return Err(LearnerError::Snapshot("inconsistent ensemble".into()));
        }
        Ok(e)
    }
}

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EnsembleSnapshot {
    format_version: u32,
    ensemble: Ensemble,
}

/// Majority label and margin `|v₁ − v₂| / n` of member votes in insertion
/// order. A tie goes to the last vote.
pub fn ensemble_vote(votes: &[Class]) -> Result<(Class, f64), LearnerError> {
    let last = *votes.last().ok_or(LearnerError::EmptyEnsemble)?;
    let v1 = votes.iter().filter(|&&c| c == Class::One).count();
    let v2 = votes.len() - v1;
    let label = match v1.cmp(&v2) {
        std::cmp::Ordering::Greater => Class::One,
        std::cmp::Ordering::Less => Class::Two,
        std::cmp::Ordering::Equal => last,
    };
    Ok((label, v1.abs_diff(v2) as f64 / votes.len() as f64))
}

pub fn ensemble_predict(e: &Ensemble, x: &FeatureVector) -> Result<(Class, f64), LearnerError> {
    e.predict(x)
}
