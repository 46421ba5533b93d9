//! Spatial feature extraction: common spatial patterns, normalised
//! log-variance features, filter-bank concatenation and PCA.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Trial;
use crate::linalg::{canonical_row_signs, mean_and_covariance, symmetric_eigen_desc};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("need at least {need} trials per class, got {got}")]
    InsufficientTrials { need: usize, got: usize },
    #[error("invalid number of filter pairs h={h} for {channels} channels")]
    InvalidPairs { h: usize, channels: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("composite covariance is rank deficient after regularisation")]
    RankDeficient,
    #[error("zero variance in selected spatial components")]
    ZeroVariance,
    #[error("band mismatch at position {position}: trial {trial:?}, model {model:?}")]
    BandMismatch {
        position: usize,
        trial: Option<(f64, f64)>,
        model: Option<(f64, f64)>,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// A feature vector fed to the detector and the classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector { values }
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(values: Vec<f64>) -> Self {
        FeatureVector { values }
    }
}

/// Learned CSP spatial filters for one frequency band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CspModel {
    /// Spatial filters as rows (filters × channels), ordered by descending
    /// class-1 eigenvalue.
    pub filters: DMatrix<f64>,
    /// Generalised eigenvalues, each the class-1 share of filtered variance.
    pub eigenvalues: Vec<f64>,
    pub h: usize,
    pub band_hz: Option<(f64, f64)>,
    /// The regularised, trace-normalised average class covariances the
    /// filters were solved for.
    pub class_covariances: [DMatrix<f64>; 2],
}

impl CspModel {
    pub fn n_channels(&self) -> usize {
        self.filters.ncols()
    }

    /// Spatial patterns: columns of the inverse filter matrix.
    pub fn patterns(&self) -> Option<DMatrix<f64>> {
        self.filters.clone().try_inverse()
    }
}

fn normalized_covariance(trial: &Trial) -> Result<DMatrix<f64>, FeatureError> {
    let mut x = trial.data.clone();
    for mut row in x.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let cov = &x * x.transpose();
    let trace = cov.trace();
    if !(trace > 0.0) {
        return Err(FeatureError::Degenerate(format!(
            "trial {} has zero power",
            trial.trial_index
        )));
    }
    Ok(cov / trace)
}

fn class_average(trials: &[Trial], channels: usize) -> Result<DMatrix<f64>, FeatureError> {
    let mut acc = DMatrix::zeros(channels, channels);
    for t in trials {
        if t.n_channels() != channels {
            return Err(FeatureError::ShapeMismatch(format!(
                "trial {} has {} channels, expected {channels}",
                t.trial_index,
                t.n_channels()
            )));
        }
        acc += normalized_covariance(t)?;
    }
    Ok(acc / trials.len() as f64)
}

fn common_band(trials: &[&Trial]) -> Result<Option<(f64, f64)>, FeatureError> {
    let band = trials.first().and_then(|t| t.band_hz);
    for (i, t) in trials.iter().enumerate() {
        if t.band_hz != band {
            return Err(FeatureError::BandMismatch {
                position: i,
                trial: t.band_hz,
                model: band,
            });
        }
    }
    Ok(band)
}

/// Trains CSP filters separating `class1` from `class2`.
///
/// Per-trial covariances are trace-normalised before class averaging and
/// each class average is regularised by `ε/2·I` with
/// `ε = 1e-8 · trace(Σ̄₁ + Σ̄₂) / channels`. The filters `W` satisfy
/// `W (Σ̄₁ + Σ̄₂) Wᵀ = I` and `W Σ̄₁ Wᵀ = diag(eigenvalues)`.
pub fn train_csp(class1: &[Trial], class2: &[Trial], h: usize) -> Result<CspModel, FeatureError> {
    let fewest = class1.len().min(class2.len());
    if fewest < 2 {
        return Err(FeatureError::InsufficientTrials {
            need: 2,
            got: fewest,
        });
    }
    let channels = class1[0].n_channels();
    if h == 0 || 2 * h > channels {
        return Err(FeatureError::InvalidPairs { h, channels });
    }
    let all: Vec<&Trial> = class1.iter().chain(class2).collect();
    let band_hz = common_band(&all)?;

    let mut sigma1 = class_average(class1, channels)?;
    let mut sigma2 = class_average(class2, channels)?;
    let eps = 1e-8 * (sigma1.trace() + sigma2.trace()) / channels as f64;
    for i in 0..channels {
        sigma1[(i, i)] += eps / 2.0;
        sigma2[(i, i)] += eps / 2.0;
    }
    let composite = &sigma1 + &sigma2;
    let (values, vectors) = symmetric_eigen_desc(&composite);
    let smallest = values.last().copied().unwrap_or(0.0);
    if !(smallest > 1e-14 * values[0]) {
        return Err(FeatureError::RankDeficient);
    }
    let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(
        channels,
        values.iter().map(|v| 1.0 / v.sqrt()),
    ));
    let whitening = inv_sqrt * vectors.transpose();
    let whitened1 = &whitening * &sigma1 * whitening.transpose();
    let (eigenvalues, rotation) = symmetric_eigen_desc(&whitened1);
    let mut filters = rotation.transpose() * whitening;
    canonical_row_signs(&mut filters);

    Ok(CspModel {
        filters,
        eigenvalues,
        h,
        band_hz,
        class_covariances: [sigma1, sigma2],
    })
}

/// Spatially filtered signal `Z = W E′` (filters × samples).
pub fn csp_project(model: &CspModel, trial: &Trial) -> Result<DMatrix<f64>, FeatureError> {
    if trial.n_channels() != model.n_channels() {
        return Err(FeatureError::ShapeMismatch(format!(
            "trial {} has {} channels, model expects {}",
            trial.trial_index,
            trial.n_channels(),
            model.n_channels()
        )));
    }
    Ok(&model.filters * &trial.data)
}

/// Normalised log-variance of the first `h` and last `h` rows of `z`:
/// `log(var(Z_p) / Σ_q var(Z_q))` over the selected rows.
pub fn log_variance_features(z: &DMatrix<f64>, h: usize) -> Result<FeatureVector, FeatureError> {
    let rows = z.nrows();
    if h == 0 || rows < 2 * h {
        return Err(FeatureError::InvalidPairs { h, channels: rows });
    }
    if z.ncols() < 2 {
        return Err(FeatureError::ShapeMismatch(format!(
            "need at least 2 samples, got {}",
            z.ncols()
        )));
    }
    let selected = (0..h).chain(rows - h..rows);
    let variances: Vec<f64> = selected.map(|r| z.row(r).variance()).collect();
    let total: f64 = variances.iter().sum();
    if !(total > 0.0) || variances.iter().any(|&v| v <= 0.0) {
        return Err(FeatureError::ZeroVariance);
    }
    Ok(FeatureVector::new(
        variances.iter().map(|v| (v / total).ln()).collect(),
    ))
}

/// Concatenates per-band CSP log-variance features in band order.
pub fn fbcsp_features(
    band_trials: &[Trial],
    models: &[CspModel],
) -> Result<FeatureVector, FeatureError> {
    if band_trials.len() != models.len() {
        return Err(FeatureError::ShapeMismatch(format!(
            "{} band trials for {} models",
            band_trials.len(),
            models.len()
        )));
    }
    let mut values = Vec::with_capacity(models.iter().map(|m| 2 * m.h).sum());
    for (position, (trial, model)) in band_trials.iter().zip(models).enumerate() {
        if trial.band_hz != model.band_hz {
            return Err(FeatureError::BandMismatch {
                position,
                trial: trial.band_hz,
                model: model.band_hz,
            });
        }
        let z = csp_project(model, trial)?;
        values.extend(log_variance_features(&z, model.h)?.values);
    }
    Ok(FeatureVector::new(values))
}

/// FBCSP features of `segments` consecutive, equal-length sub-windows of the
/// trial (trailing samples that do not fill a segment are dropped). These are
/// the per-time multivariate samples the stage-II test compares.
pub fn fbcsp_segment_features(
    band_trials: &[Trial],
    models: &[CspModel],
    segments: usize,
) -> Result<Vec<FeatureVector>, FeatureError> {
    let n_samples = band_trials.first().map_or(0, |t| t.n_samples());
    let seg_len = n_samples / segments.max(1);
    if segments == 0 || seg_len < 2 {
        return Err(FeatureError::ShapeMismatch(format!(
            "cannot cut {n_samples} samples into {segments} segments of at least 2"
        )));
    }
    (0..segments)
        .map(|s| {
            let per_band: Vec<Trial> = band_trials
                .iter()
                .map(|t| t.with_data(t.data.columns(s * seg_len, seg_len).into_owned()))
                .collect();
            fbcsp_features(&per_band, models)
        })
        .collect()
}

/// Principal component model of feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    /// Loadings as orthonormal rows (components × feature dims), ordered by
    /// explained variance; each row's first non-negligible loading is
    /// positive.
    pub components: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub explained_variance: Vec<f64>,
}

pub fn train_pca(samples: &[FeatureVector]) -> Result<PcaModel, FeatureError> {
    if samples.len() < 2 {
        return Err(FeatureError::InsufficientTrials {
            need: 2,
            got: samples.len(),
        });
    }
    let d = samples[0].dimension();
    if d == 0 || samples.iter().any(|s| s.dimension() != d) {
        return Err(FeatureError::ShapeMismatch(
            "feature vectors differ in dimension".into(),
        ));
    }
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
    let (mean, cov) = mean_and_covariance(&rows);
    if !(cov.trace() > 0.0) {
        return Err(FeatureError::Degenerate(
            "all feature vectors identical".into(),
        ));
    }
    let (values, vectors) = symmetric_eigen_desc(&cov);
    let mut components = vectors.transpose();
    canonical_row_signs(&mut components);
    Ok(PcaModel {
        components,
        mean,
        explained_variance: values.into_iter().map(|v| v.max(0.0)).collect(),
    })
}

impl PcaModel {
    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &FeatureVector) -> Result<(), FeatureError> {
        if x.dimension() != self.dimension() {
            return Err(FeatureError::ShapeMismatch(format!(
                "feature dimension {} but PCA model has {}",
                x.dimension(),
                self.dimension()
            )));
        }
        Ok(())
    }

    /// Scores on the leading `k` components.
    pub fn project(&self, x: &FeatureVector, k: usize) -> Result<Vec<f64>, FeatureError> {
        self.check(x)?;
        let centered = DVector::from_column_slice(x.as_slice()) - &self.mean;
        Ok((0..k.min(self.components.nrows()))
            .map(|r| self.components.row(r).transpose().dot(&centered))
            .collect())
    }

    pub fn reconstruct(&self, scores: &[f64]) -> FeatureVector {
        let mut out = self.mean.clone();
        for (r, s) in scores.iter().enumerate() {
            out += self.components.row(r).transpose() * *s;
        }
        FeatureVector::new(out.iter().copied().collect())
    }
}

/// Score of `x` on the first principal component.
pub fn pca_first_component(model: &PcaModel, x: &FeatureVector) -> Result<f64, FeatureError> {
    Ok(model.project(x, 1)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Class;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_trial(rng: &mut ChaCha8Rng, scales: &[f64], samples: usize, idx: usize) -> Trial {
        let data = DMatrix::from_fn(scales.len(), samples, |c, _| {
            let v: f64 = StandardNormal.sample(rng);
            v * scales[c]
        });
        Trial::new(data, Some(Class::One), 250.0, "s", "T", idx).unwrap()
    }

    #[test]
    fn diagonal_covariances_give_ratio_filters() {
        // Σ₁ = diag(4, 1), Σ₂ = diag(1, 4): the first filter picks channel 0
        // with class-1/class-2 variance ratio 4.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c1: Vec<Trial> = (0..30)
            .map(|i| gaussian_trial(&mut rng, &[2.0, 1.0], 500, i))
            .collect();
        let c2: Vec<Trial> = (0..30)
            .map(|i| gaussian_trial(&mut rng, &[1.0, 2.0], 500, 100 + i))
            .collect();
        let model = train_csp(&c1, &c2, 1).unwrap();
        let held1: Vec<Trial> = (0..20)
            .map(|i| gaussian_trial(&mut rng, &[2.0, 1.0], 500, i))
            .collect();
        let held2: Vec<Trial> = (0..20)
            .map(|i| gaussian_trial(&mut rng, &[1.0, 2.0], 500, i))
            .collect();
        let first_row_var = |ts: &[Trial]| -> f64 {
            ts.iter()
                .map(|t| csp_project(&model, t).unwrap().row(0).variance())
                .sum::<f64>()
                / ts.len() as f64
        };
        let ratio = first_row_var(&held1) / first_row_var(&held2);
        assert!(ratio >= 3.0, "ratio {ratio}");
        assert!(model.eigenvalues[0] > 0.75 && model.eigenvalues[1] < 0.25);
    }

    #[test]
    fn identical_classes_have_half_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c1: Vec<Trial> = (0..200)
            .map(|i| gaussian_trial(&mut rng, &[1.0, 1.5, 0.7], 400, i))
            .collect();
        let c2: Vec<Trial> = (0..200)
            .map(|i| gaussian_trial(&mut rng, &[1.0, 1.5, 0.7], 400, i))
            .collect();
        let model = train_csp(&c1, &c2, 1).unwrap();
        for ev in &model.eigenvalues {
            assert!((ev - 0.5).abs() < 0.02, "{ev}");
        }
    }

    #[test]
    fn csp_preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c: Vec<Trial> = (0..3)
            .map(|i| gaussian_trial(&mut rng, &[1.0, 1.0, 1.0], 50, i))
            .collect();
        assert_eq!(
            train_csp(&c, &c, 2).unwrap_err(),
            FeatureError::InvalidPairs { h: 2, channels: 3 }
        );
        assert!(matches!(
            train_csp(&c[..1], &c, 1),
            Err(FeatureError::InsufficientTrials { .. })
        ));
    }

    #[test]
    fn identity_and_scaling_projection() {
        let data = DMatrix::from_fn(2, 5, |c, s| (c * 5 + s) as f64);
        let trial = Trial::new(data.clone(), None, 250.0, "s", "T", 0).unwrap();
        let model = CspModel {
            filters: DMatrix::identity(2, 2),
            eigenvalues: vec![0.5, 0.5],
            h: 1,
            band_hz: None,
            class_covariances: [DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
        };
        assert_eq!(csp_project(&model, &trial).unwrap(), data);

        let single = Trial::new(
            DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]),
            None,
            250.0,
            "s",
            "T",
            0,
        )
        .unwrap();
        let scale = CspModel {
            filters: DMatrix::from_element(1, 1, 2.0),
            eigenvalues: vec![0.5],
            h: 1,
            band_hz: None,
            class_covariances: [DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
        };
        assert_eq!(
            csp_project(&scale, &single).unwrap(),
            DMatrix::from_row_slice(1, 3, &[2.0, -4.0, 1.0])
        );
        assert!(csp_project(&scale, &trial).is_err());
    }

    #[test]
    fn equal_variance_rows_give_uniform_features() {
        let z = DMatrix::from_row_slice(2, 4, &[1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0]);
        let f = log_variance_features(&z, 1).unwrap();
        for v in &f.values {
            assert!((v - 0.5f64.ln()).abs() < 1e-15);
        }
        let z4 = DMatrix::from_fn(6, 10, |_, s| if s % 2 == 0 { 1.0 } else { -1.0 });
        let f4 = log_variance_features(&z4, 2).unwrap();
        assert_eq!(f4.dimension(), 4);
        for v in &f4.values {
            assert!((v - 0.25f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_variance_normalisation_and_scale_invariance() {
        let z = DMatrix::from_fn(4, 50, |r, s| {
            ((r + 1) as f64) * ((s * (r + 2)) as f64 * 0.7).sin()
        });
        let f = log_variance_features(&z, 2).unwrap();
        let total: f64 = f.values.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let scaled = log_variance_features(&(&z * 7.5), 2).unwrap();
        for (a, b) in f.values.iter().zip(&scaled.values) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            log_variance_features(&DMatrix::zeros(2, 5), 1).unwrap_err(),
            FeatureError::ZeroVariance
        );
    }

    fn band_trial(band: (f64, f64), idx: usize) -> Trial {
        let data = DMatrix::from_fn(2, 40, |c, s| {
            ((s * (c + 2) + idx) as f64 * 0.31).sin() * (c + 1) as f64
        });
        let mut t = Trial::new(data, None, 250.0, "s", "T", idx).unwrap();
        t.band_hz = Some(band);
        t
    }

    fn band_model(band: (f64, f64)) -> CspModel {
        CspModel {
            filters: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.25, 1.0]),
            eigenvalues: vec![0.6, 0.4],
            h: 1,
            band_hz: Some(band),
            class_covariances: [DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
        }
    }

    #[test]
    fn fbcsp_concatenates_in_band_order() {
        let bands = crate::dsp::default_bands();
        let trials: Vec<Trial> = bands.iter().map(|&b| band_trial(b, 1)).collect();
        let models: Vec<CspModel> = bands.iter().map(|&b| band_model(b)).collect();
        let f = fbcsp_features(&trials, &models).unwrap();
        assert_eq!(f.dimension(), 20);

        let single = fbcsp_features(&trials[..1], &models[..1]).unwrap();
        let direct =
            log_variance_features(&csp_project(&models[0], &trials[0]).unwrap(), 1).unwrap();
        assert_eq!(single, direct);

        let mut permuted = models.clone();
        permuted.swap(0, 1);
        assert!(matches!(
            fbcsp_features(&trials, &permuted),
            Err(FeatureError::BandMismatch { position: 0, .. })
        ));
        assert!(fbcsp_features(&trials[..2], &models).is_err());
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<FeatureVector> = (0..200)
            .map(|_| {
                let t: f64 = StandardNormal.sample(&mut rng);
                let noise: Vec<f64> = (0..3)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        0.01 * e
                    })
                    .collect();
                FeatureVector::new(vec![3.0 * t + noise[0], noise[1], noise[2]])
            })
            .collect();
        let pca = train_pca(&samples).unwrap();
        assert!(pca.components[(0, 0)].abs() > 0.99);
        assert!(pca.components[(0, 0)] > 0.0);
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        let (_, cov) = mean_and_covariance(&rows);
        let total: f64 = pca.explained_variance.iter().sum();
        assert!((total - cov.trace()).abs() < 1e-9 * cov.trace());
        for w in pca.explained_variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn pca_projection_identities() {
        let samples: Vec<FeatureVector> = (0..10)
            .map(|i| FeatureVector::new(vec![i as f64, (i * i) as f64 * 0.1, -(i as f64) * 0.5]))
            .collect();
        let pca = train_pca(&samples).unwrap();
        let mean = FeatureVector::new(pca.mean.iter().copied().collect());
        assert!(pca_first_component(&pca, &mean).unwrap().abs() < 1e-12);
        let along: Vec<f64> = pca
            .mean
            .iter()
            .zip(pca.components.row(0).iter())
            .map(|(m, c)| m + c)
            .collect();
        assert!(
            (pca_first_component(&pca, &FeatureVector::new(along)).unwrap() - 1.0).abs() < 1e-12
        );
        for r in 0..3 {
            let first = pca
                .components
                .row(r)
                .iter()
                .copied()
                .find(|v| v.abs() > 1e-12)
                .unwrap();
            assert!(first > 0.0);
        }
        assert!(pca_first_component(&pca, &FeatureVector::new(vec![1.0])).is_err());
        let same = vec![FeatureVector::new(vec![1.0, 2.0]); 5];
        assert!(matches!(train_pca(&same), Err(FeatureError::Degenerate(_))));
    }
}
