//! Temporal filtering: Butterworth band-pass design as cascaded biquads,
//! zero-phase filtering, the filter bank and cue-aligned windowing.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Trial;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("invalid band [{low}, {high}] Hz at {rate} Hz sample rate")]
    InvalidBand { low: f64, high: f64, rate: f64 },
    #[error("filter order must be a positive even integer, got {0}")]
    InvalidOrder(usize),
    #[error("signal of {len} samples is too short for padding of {pad} samples")]
    SignalTooShort { len: usize, pad: usize },
    #[error("trial sampled at {trial} Hz but filter bank designed for {bank} Hz")]
    RateMismatch { trial: f64, bank: f64 },
    #[error("window [{start_s}, {end_s}) s exceeds trial duration {duration_s} s")]
    WindowOutOfRange {
        start_s: f64,
        end_s: f64,
        duration_s: f64,
    },
}

/// One second-order section, `a0` normalised to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z2) / (1.0 + self.a1 * z_inv + self.a2 * z2)
    }

    /// Magnitudes of the two poles.
    pub fn pole_magnitudes(&self) -> [f64; 2] {
        let disc = self.a1 * self.a1 - 4.0 * self.a2;
        if disc < 0.0 {
            let r = self.a2.sqrt();
            [r, r]
        } else {
            let s = disc.sqrt();
            [((-self.a1 + s) / 2.0).abs(), ((-self.a1 - s) / 2.0).abs()]
        }
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Transposed direct-form II state after a long run of input `u`.
    fn steady_state(&self, u: f64) -> [f64; 2] {
        let y = self.dc_gain() * u;
        let z2 = self.b2 * u - self.a2 * y;
        let z1 = self.b1 * u - self.a1 * y + z2;
        [z1, z2]
    }

    #[inline]
    fn tick(&self, x: f64, state: &mut [f64; 2]) -> f64 {
        let y = self.b0 * x + state[0];
        state[0] = self.b1 * x - self.a1 * y + state[1];
        state[1] = self.b2 * x - self.a2 * y;
        y
    }
}

/// A band-pass IIR filter realised as cascaded second-order sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IirFilter {
    pub sections: Vec<Biquad>,
    pub design_band_hz: (f64, f64),
    pub order: usize,
    pub sample_rate_hz: f64,
}

/// Designs a Butterworth band-pass filter of the given (even) order.
///
/// The analog low-pass prototype of order `order / 2` is transformed to a
/// band-pass around prewarped edge frequencies and mapped with the bilinear
/// transform, so the single-pass response is exactly −3 dB at `low_hz` and
/// `high_hz`. Gain is normalised to unity at the band centre.
pub fn design_butterworth_bandpass(
    order: usize,
    low_hz: f64,
    high_hz: f64,
    rate_hz: f64,
) -> Result<IirFilter, DspError> {
    if order == 0 || !order.is_multiple_of(2) {
        return Err(DspError::InvalidOrder(order));
    }
    let valid = rate_hz.is_finite()
        && rate_hz > 0.0
        && low_hz > 0.0
        && low_hz < high_hz
        && high_hz < rate_hz / 2.0;
    if !valid {
        return Err(DspError::InvalidBand {
            low: low_hz,
            high: high_hz,
            rate: rate_hz,
        });
    }
    let n = order / 2;
    let fs2 = 2.0 * rate_hz;
    let w1 = fs2 * (PI * low_hz / rate_hz).tan();
    let w2 = fs2 * (PI * high_hz / rate_hz).tan();
    let bw = w2 - w1;
    let w0 = (w1 * w2).sqrt();

    // Each prototype pole in the upper half plane (plus the real one for odd
    // n) yields one or two sections.
    let mut pole_pairs: Vec<(Complex64, Complex64)> = Vec::with_capacity(n);
    let bilinear = |s: Complex64| (fs2 + s) / (fs2 - s);
    for k in 0..n {
        let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
        let p = Complex64::from_polar(1.0, theta);
        if p.im < -1e-12 {
            continue;
        }
        let half = p * bw / 2.0;
        let root = (half * half - w0 * w0).sqrt();
        let (s1, s2) = (half + root, half - root);
        if p.im > 1e-12 {
            pole_pairs.push((bilinear(s1), bilinear(s1).conj()));
            pole_pairs.push((bilinear(s2), bilinear(s2).conj()));
        } else {
            // real prototype pole: s1 and s2 are a conjugate pair or both real
            pole_pairs.push((bilinear(s1), bilinear(s2)));
        }
    }

    let mut sections: Vec<Biquad> = pole_pairs
        .iter()
        .map(|(z1, z2)| Biquad {
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1: -(z1 + z2).re,
            a2: (z1 * z2).re,
        })
        .collect();

    let center = 2.0 * (w0 / fs2).atan();
    let z_inv = Complex64::from_polar(1.0, -center);
    let mag: f64 = sections.iter().map(|s| s.response(z_inv).norm()).product();
    let per_section = mag.powf(-1.0 / sections.len() as f64);
    for s in &mut sections {
        s.b0 *= per_section;
        s.b2 *= per_section;
    }

    Ok(IirFilter {
        sections,
        design_band_hz: (low_hz, high_hz),
        order,
        sample_rate_hz: rate_hz,
    })
}

impl IirFilter {
    /// Complex single-pass response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let omega = 2.0 * PI * freq_hz / self.sample_rate_hz;
        let z_inv = Complex64::from_polar(1.0, -omega);
        self.sections
            .iter()
            .map(|s| s.response(z_inv))
            .fold(Complex64::new(1.0, 0.0), |acc, h| acc * h)
    }

    pub fn gain_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.response(freq_hz).norm().log10()
    }

    pub fn is_stable(&self) -> bool {
        self.sections
            .iter()
            .all(|s| s.pole_magnitudes().iter().all(|&m| m < 1.0))
    }

    /// Causal single pass from rest.
    pub fn filter(&self, signal: &[f64]) -> Vec<f64> {
        let mut out = signal.to_vec();
        for s in &self.sections {
            let mut state = [0.0; 2];
            for v in out.iter_mut() {
                *v = s.tick(*v, &mut state);
            }
        }
        out
    }

    /// Causal pass with every section started from the steady state of a
    /// constant input equal to `signal[0]`.
    fn filter_from_steady_state(&self, signal: &mut [f64]) {
        let mut u = signal.first().copied().unwrap_or(0.0);
        for s in &self.sections {
            let mut state = s.steady_state(u);
            u *= s.dc_gain();
            for v in signal.iter_mut() {
                *v = s.tick(*v, &mut state);
            }
        }
    }

    pub fn padding_len(&self) -> usize {
        3 * self.order
    }

    /// Forward pass, then a pass over the time-reversed output, on an
    /// odd-reflected extension of the signal. Matches the conventional
    /// `sosfiltfilt(padtype="odd", padlen=3 * order)`.
    pub fn forward_backward(&self, signal: &[f64]) -> Result<Vec<f64>, DspError> {
        let pad = self.padding_len();
        let n = signal.len();
        if n <= pad {
            return Err(DspError::SignalTooShort { len: n, pad });
        }
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * signal[0] - signal[i]));
        ext.extend_from_slice(signal);
        ext.extend((1..=pad).map(|i| 2.0 * signal[n - 1] - signal[n - 1 - i]));

        self.filter_from_steady_state(&mut ext);
        ext.reverse();
        self.filter_from_steady_state(&mut ext);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }

    /// Zero-phase filtering.
    ///
    /// The forward-backward result depends slightly on which end of the
    /// signal is processed first; averaging both orders makes the operator
    /// commute exactly with time reversal.
    pub fn filtfilt(&self, signal: &[f64]) -> Result<Vec<f64>, DspError> {
        let fb = self.forward_backward(signal)?;
        let mut reversed = signal.to_vec();
        reversed.reverse();
        let mut bf = self.forward_backward(&reversed)?;
        bf.reverse();
        Ok(fb.iter().zip(&bf).map(|(a, b)| 0.5 * (a + b)).collect())
    }
}

/// The paper-default bands: ten overlapping 4 Hz bands from 8–12 to 26–30 Hz.
pub fn default_bands() -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let low = 8.0 + 2.0 * i as f64;
            (low, low + 4.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub bands_hz: Vec<(f64, f64)>,
    pub filters: Vec<IirFilter>,
}

impl FilterBank {
    pub fn design(bands_hz: &[(f64, f64)], order: usize, rate_hz: f64) -> Result<Self, DspError> {
        let filters = bands_hz
            .iter()
            .map(|&(lo, hi)| design_butterworth_bandpass(order, lo, hi, rate_hz))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FilterBank {
            bands_hz: bands_hz.to_vec(),
            filters,
        })
    }

    /// Eighth-order filters on the ten default bands.
    pub fn default_bank(rate_hz: f64) -> Result<Self, DspError> {
        Self::design(&default_bands(), 8, rate_hz)
    }

    pub fn empty() -> Self {
        FilterBank {
            bands_hz: Vec::new(),
            filters: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }
}

/// Filters every channel of `trial` through each band of the bank.
pub fn apply_filter_bank(bank: &FilterBank, trial: &Trial) -> Result<Vec<Trial>, DspError> {
    let mut out = Vec::with_capacity(bank.len());
    for (filter, &band) in bank.filters.iter().zip(&bank.bands_hz) {
        if (filter.sample_rate_hz - trial.sample_rate_hz).abs() > 1e-9 * filter.sample_rate_hz {
            return Err(DspError::RateMismatch {
                trial: trial.sample_rate_hz,
                bank: filter.sample_rate_hz,
            });
        }
        let (channels, samples) = trial.data.shape();
        let mut data = DMatrix::zeros(channels, samples);
        for c in 0..channels {
            let row: Vec<f64> = trial.data.row(c).iter().copied().collect();
            let filtered = filter.filtfilt(&row)?;
            for (s, v) in filtered.into_iter().enumerate() {
                data[(c, s)] = v;
            }
        }
        let mut t = trial.with_data(data);
        t.band_hz = Some(band);
        out.push(t);
    }
    Ok(out)
}

/// Returns samples `[round(start_s * rate), round((start_s + duration_s) * rate))`.
pub fn extract_window(trial: &Trial, start_s: f64, duration_s: f64) -> Result<Trial, DspError> {
    let rate = trial.sample_rate_hz;
    let end_s = start_s + duration_s;
    let out_of_range = DspError::WindowOutOfRange {
        start_s,
        end_s,
        duration_s: trial.duration_s(),
    };
    if !(start_s >= 0.0 && duration_s > 0.0 && end_s.is_finite()) {
        return Err(out_of_range);
    }
    let start = (start_s * rate).round() as usize;
    let end = (end_s * rate).round() as usize;
    if end > trial.n_samples() || end < start + 2 {
        return Err(out_of_range);
    }
    let data = trial.data.columns(start, end - start).into_owned();
    Ok(trial.with_data(data))
}
