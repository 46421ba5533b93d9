//! Seeded synthetic motor-imagery stream.
//!
//! Each trial is a sum of random-phase sinusoids on the DFT grid of the trial
//! length, restricted to `[band_low_hz, band_high_hz)` and grouped into
//! sub-bands of `subband_width_hz`. The log-power of channel `c` in sub-band
//! `j` is
//!
//! ```text
//! g[c][j] = class term + jitter·N(0,1) + nuisance term + shift term
//! ```
//!
//! - class term: channel 0 gets `∓separation/2`, channel 1 `±separation/2`
//!   (class 1 / class 2), remaining channels carry no class information.
//! - nuisance term (channel 0 only): `nuisance·u·p[j]` where `p` runs
//!   linearly from −1 to 1 over the sub-bands and `u = ±1` with equal
//!   probability per trial. It adds a large, label-independent spectral tilt
//!   that dominates the principal axis of the feature space.
//! - shift term, applied to every test trial at or after a shift point:
//!   channel 0 moves by `+m·sd0[j]·sign(p[j])` and channel 1 by
//!   `−m·sd1[j]·sign(p[j])`, where `sd` is the pre-shift standard deviation of
//!   that channel's log-power in that sub-band. Every log-power coordinate
//!   therefore moves by exactly `m` of its own standard deviations while the
//!   class term is untouched.
//!
//! A white noise floor of standard deviation `noise_floor·sqrt(n_freqs)` is
//! added to every channel. All randomness comes from `ChaCha8Rng` seeded with
//! `seed` through `SeedableRng::seed_from_u64`, so streams are bit-identical
//! across runs and platforms.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Class, IngestError, Trial, TrialSet};

pub const SYNTH_TRAIN_SESSION: &str = "train";
pub const SYNTH_TEST_SESSION: &str = "test";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Trials in the (shifted) test stream.
    pub n_trials: usize,
    pub n_channels: usize,
    pub samples_per_trial: usize,
    /// Class difference of the log band-power on channels 0 and 1.
    pub class_separation: f64,
    /// Positions in the test stream (0-based) where a shift starts.
    pub shift_points: Vec<usize>,
    /// Shift size per shift point, in pre-shift standard deviations.
    pub shift_magnitude: f64,
    pub seed: u64,
    /// Unshifted labelled trials generated ahead of the test stream.
    pub n_train_trials: usize,
    pub sample_rate_hz: f64,
    pub jitter: f64,
    pub nuisance: f64,
    pub noise_floor: f64,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub subband_width_hz: f64,
    pub subject_id: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_trials: 200,
            n_channels: 4,
            samples_per_trial: 1000,
            class_separation: 0.3,
            shift_points: vec![100],
            shift_magnitude: 2.0,
            seed: 0,
            n_train_trials: 100,
            sample_rate_hz: 250.0,
            jitter: 0.3,
            nuisance: 1.0,
            noise_floor: 0.05,
            band_low_hz: 8.0,
            band_high_hz: 30.0,
            subband_width_hz: 2.0,
            subject_id: "S01".to_string(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidConfig(m.to_string()));
        if self.n_trials == 0 {
            return bad("n_trials must be positive");
        }
        if self.n_channels < 2 {
            return bad("n_channels must be at least 2");
        }
        if self.samples_per_trial < 2 {
            return bad("samples_per_trial must be at least 2");
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return bad("class_separation must be a nonnegative finite number");
        }
        if !self.shift_magnitude.is_finite() {
            return bad("shift_magnitude must be finite");
        }
        if self.shift_points.windows(2).any(|w| w[0] >= w[1]) {
            return bad("shift_points must be strictly increasing");
        }
        if self.shift_points.iter().any(|&p| p >= self.n_trials) {
            return bad("shift_points must be smaller than n_trials");
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return bad("sample_rate_hz must be positive");
        }
        for (name, v) in [
            ("jitter", self.jitter),
            ("nuisance", self.nuisance),
            ("noise_floor", self.noise_floor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(IngestError::InvalidConfig(format!(
                    "{name} must be nonnegative"
                )));
            }
        }
        if !(self.band_low_hz > 0.0
            && self.band_low_hz < self.band_high_hz
            && self.subband_width_hz > 0.0)
        {
            return bad("invalid band_low_hz/band_high_hz/subband_width_hz");
        }
        if self.frequency_grid().0.is_empty() {
            return bad("no DFT frequency falls inside the synthesis band");
        }
        Ok(())
    }

    fn n_subbands(&self) -> usize {
        ((self.band_high_hz - self.band_low_hz) / self.subband_width_hz).ceil() as usize
    }

    /// DFT-grid frequencies inside the band and their sub-band indices.
    fn frequency_grid(&self) -> (Vec<f64>, Vec<usize>) {
        let t = self.samples_per_trial;
        let df = self.sample_rate_hz / t as f64;
        let nsb = self.n_subbands();
        let mut freqs = Vec::new();
        let mut sub = Vec::new();
        for k in 1..t.div_ceil(2) {
            let f = k as f64 * df;
            if f >= self.band_low_hz && f < self.band_high_hz {
                let j = ((f - self.band_low_hz) / self.subband_width_hz).floor() as usize;
                freqs.push(f);
                sub.push(j.min(nsb - 1));
            }
        }
        (freqs, sub)
    }
}

/// Generates `n_train_trials` unshifted trials in session
/// [`SYNTH_TRAIN_SESSION`] followed by `n_trials` test trials in session
/// [`SYNTH_TEST_SESSION`]. Trial indices run consecutively over both; shift
/// points refer to positions within the test stream. All trials are labelled.
pub fn generate_synthetic_stream(cfg: &SynthConfig) -> Result<TrialSet, IngestError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (freqs, sub) = cfg.frequency_grid();
    let nsb = cfg.n_subbands();
    let t_len = cfg.samples_per_trial;
    let nf = freqs.len();

    let mut cos_tab = DMatrix::zeros(nf, t_len);
    let mut sin_tab = DMatrix::zeros(nf, t_len);
    for (k, f) in freqs.iter().enumerate() {
        for s in 0..t_len {
            let ph = 2.0 * PI * f * s as f64 / cfg.sample_rate_hz;
            cos_tab[(k, s)] = ph.cos();
            sin_tab[(k, s)] = ph.sin();
        }
    }

    let profile: Vec<f64> = (0..nsb)
        .map(|j| {
            if nsb == 1 {
                0.0
            } else {
                -1.0 + 2.0 * j as f64 / (nsb - 1) as f64
            }
        })
        .collect();
    let half = cfg.class_separation / 2.0;
    let sd0: Vec<f64> = profile
        .iter()
        .map(|p| (cfg.jitter.powi(2) + (cfg.nuisance * p).powi(2) + half * half).sqrt())
        .collect();
    let sd1 = (cfg.jitter.powi(2) + half * half).sqrt();
    let floor_sd = cfg.noise_floor * (nf as f64).sqrt();

    let total = cfg.n_train_trials + cfg.n_trials;
    let mut trials = Vec::with_capacity(total);
    for idx in 0..total {
        let test_pos = idx.checked_sub(cfg.n_train_trials);
        let class = if rng.random::<bool>() {
            Class::One
        } else {
            Class::Two
        };
        let u = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let shifts = test_pos.map_or(0, |p| cfg.shift_points.iter().filter(|&&s| s <= p).count());
        let m = cfg.shift_magnitude * shifts as f64;

        let sign = if class == Class::One { -1.0 } else { 1.0 };
        let mut g = DMatrix::zeros(cfg.n_channels, nsb);
        for c in 0..cfg.n_channels {
            for j in 0..nsb {
                let mut v = cfg.jitter * rng.sample::<f64, _>(StandardNormal);
                match c {
                    0 => {
                        v += sign * half + cfg.nuisance * u * profile[j];
                        v += m * sd0[j] * signum0(profile[j]);
                    }
                    1 => {
                        v -= sign * half;
                        v -= m * sd1 * signum0(profile[j]);
                    }
                    _ => {}
                }
                g[(c, j)] = v;
            }
        }

        let mut a = DMatrix::zeros(cfg.n_channels, nf);
        let mut b = DMatrix::zeros(cfg.n_channels, nf);
        for coeffs in [&mut a, &mut b] {
            for c in 0..cfg.n_channels {
                for k in 0..nf {
                    let amp = (g[(c, sub[k])] / 2.0).exp();
                    coeffs[(c, k)] = amp * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let mut data = &a * &cos_tab + &b * &sin_tab;
        for v in data.iter_mut() {
            *v += floor_sd * rng.sample::<f64, _>(StandardNormal);
        }

        let session = if test_pos.is_some() {
            SYNTH_TEST_SESSION
        } else {
            SYNTH_TRAIN_SESSION
        };
        trials.push(Trial::new(
            data,
            Some(class),
            cfg.sample_rate_hz,
            cfg.subject_id.clone(),
            session.to_string(),
            idx,
        )?);
    }
    let names = (0..cfg.n_channels).map(|c| format!("ch{c}")).collect();
    TrialSet::new(trials, names)
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_trials: 6,
            n_train_trials: 4,
            samples_per_trial: 250,
            shift_points: vec![3],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_synthetic_stream(&small()).unwrap();
        let b = generate_synthetic_stream(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_stream(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.trials()[0].data, c.trials()[0].data);
    }

    #[test]
    fn sessions_and_indices() {
        let set = generate_synthetic_stream(&small()).unwrap();
        assert_eq!(set.len(), 10);
        let sessions: Vec<_> = set.trials().iter().map(|t| t.session_id.as_str()).collect();
        assert_eq!(&sessions[..4], &[SYNTH_TRAIN_SESSION; 4]);
        assert_eq!(&sessions[4..], &[SYNTH_TEST_SESSION; 6]);
        for (i, t) in set.trials().iter().enumerate() {
            assert_eq!(t.trial_index, i);
            assert!(t.label.is_some());
            assert_eq!(t.data.shape(), (4, 250));
        }
    }

    #[test]
    fn rejects_bad_shift_points() {
        for pts in [vec![3, 3], vec![4, 2], vec![6]] {
            let cfg = SynthConfig {
                shift_points: pts,
                ..small()
            };
            assert!(matches!(
                generate_synthetic_stream(&cfg),
                Err(IngestError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn frequency_grid_covers_band() {
        let cfg = SynthConfig::default();
        let (f, s) = cfg.frequency_grid();
        assert_eq!(f.len(), 88);
        assert_eq!(f[0], 8.0);
        assert!(*f.last().unwrap() < 30.0);
        assert_eq!(*s.last().unwrap(), 10);
    }
}
