//! Raw signal handling: windowing, band-power spectral features, the
//! [-1, 1] feature normalizer, and the two augmentations used at test time.
//!
//! The spectral estimate is a single periodogram per window: `PSD(f) =
//! |DFT(x)|^2 / N` over all N bins, so Parseval holds exactly
//! (`sum_f PSD(f) = sum_n x(n)^2`). Band power is the plain sum of PSD over
//! the DFT bins whose frequency lies inside the band, both ends inclusive.

pub mod filter;

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::Mat;
use crate::rngutil;

pub use filter::{bandpass, bandpass_with_order};

/// One windowed multi-channel excerpt: `samples` is channels x time.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSegment {
    samples: Mat,
    sample_rate: f64,
}

impl SignalSegment {
    pub fn new(samples: Mat, sample_rate: f64) -> Result<Self> {
        if samples.cols() < 2 {
            return Err(CoreError::InvalidSignal(format!(
                "segment needs at least 2 samples per channel, got {}",
                samples.cols()
            )));
        }
        if !(sample_rate > 0.0) {
            return Err(CoreError::InvalidSignal(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        if !samples.is_finite() {
            return Err(CoreError::NonFinite("signal segment".into()));
        }
        Ok(SignalSegment { samples, sample_rate })
    }

    pub fn samples(&self) -> &Mat {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn channel_count(&self) -> usize {
        self.samples.rows()
    }

    pub fn len(&self) -> usize {
        self.samples.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.cols() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandName {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
}

impl BandName {
    pub const ALL: [BandName; 5] = [
        BandName::Delta,
        BandName::Theta,
        BandName::Alpha,
        BandName::Beta,
        BandName::Gamma,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BandName::Delta => "delta",
            BandName::Theta => "theta",
            BandName::Alpha => "alpha",
            BandName::Beta => "beta",
            BandName::Gamma => "gamma",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(BandName::Delta),
            "theta" => Ok(BandName::Theta),
            "alpha" => Ok(BandName::Alpha),
            "beta" => Ok(BandName::Beta),
            "gamma" => Ok(BandName::Gamma),
            other => Err(CoreError::InvalidBand(format!("unknown band \"{other}\""))),
        }
    }
}

/// A frequency band `[f_low, f_high]` in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub name: BandName,
    pub f_low: f64,
    pub f_high: f64,
}

impl BandSpec {
    pub fn new(name: BandName, f_low: f64, f_high: f64) -> Result<Self> {
        if !(0.0 < f_low && f_low < f_high) {
            return Err(CoreError::InvalidBand(format!(
                "{}: need 0 < f_low < f_high, got [{f_low}, {f_high}]",
                name.as_str()
            )));
        }
        Ok(BandSpec { name, f_low, f_high })
    }

    /// The canonical range for a named band: delta 1-3, theta 4-7, alpha 8-13,
    /// beta 14-30, gamma 31-50 Hz.
    pub fn canonical(name: BandName) -> BandSpec {
        let (f_low, f_high) = match name {
            BandName::Delta => (1.0, 3.0),
            BandName::Theta => (4.0, 7.0),
            BandName::Alpha => (8.0, 13.0),
            BandName::Beta => (14.0, 30.0),
            BandName::Gamma => (31.0, 50.0),
        };
        BandSpec { name, f_low, f_high }
    }
}

/// All five canonical bands in fixed order delta, theta, alpha, beta, gamma.
pub fn default_bands() -> Vec<BandSpec> {
    BandName::ALL.iter().map(|&n| BandSpec::canonical(n)).collect()
}

pub fn bands_from_names(names: &[BandName]) -> Vec<BandSpec> {
    names.iter().map(|&n| BandSpec::canonical(n)).collect()
}

/// Band-power feature vector, channel-major: for each channel in order, one
/// value per band in band order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

/// Split a continuous record (channels x time) into fixed-length windows.
/// Windows start at 0, step, 2*step, ...; a trailing partial window is
/// discarded.
pub fn segment(
    record: &Mat,
    sample_rate: f64,
    window_s: f64,
    step_s: f64,
) -> Result<Vec<SignalSegment>> {
    if !(window_s > 0.0 && step_s > 0.0) {
        return Err(CoreError::InvalidSignal(
            "window and step must be positive".into(),
        ));
    }
    if !(sample_rate > 0.0) {
        return Err(CoreError::InvalidSignal("sample rate must be positive".into()));
    }
    let window = (window_s * sample_rate).round() as usize;
    let step = ((step_s * sample_rate).round() as usize).max(1);
    if window < 2 {
        return Err(CoreError::InvalidSignal(format!(
            "window of {window} samples is too short"
        )));
    }
    if record.cols() < window {
        return Err(CoreError::RecordTooShort {
            len: record.cols(),
            window,
        });
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= record.cols() {
        let mut m = Mat::zeros(record.rows(), window);
        for ch in 0..record.rows() {
            m.row_mut(ch).copy_from_slice(&record.row(ch)[start..start + window]);
        }
        out.push(SignalSegment::new(m, sample_rate)?);
        start += step;
    }
    Ok(out)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Periodogram over all N DFT bins: `PSD(f) = |X(f)|^2 / N`.
pub fn psd(samples: &[f64]) -> Result<Vec<f64>> {
    let n = samples.len();
    if n < 2 {
        return Err(CoreError::InvalidSignal(format!(
            "psd needs at least 2 samples, got {n}"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("psd input".into()));
    }
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
    PLANNER.with(|p| {
        let fft = p.borrow_mut().plan_fft_forward(n);
        fft.process(&mut buf);
    });
    Ok(buf.iter().map(|c| c.norm_sqr() / n as f64).collect())
}

/// Sum of PSD over the DFT bins whose frequency `i * rate / N` lies in
/// `[f_low, f_high]`, both ends inclusive. Returns 0 (with a warning) when no
/// bin falls inside the band.
pub fn band_power(spectrum: &[f64], band: &BandSpec, sample_rate: f64) -> f64 {
    let n = spectrum.len();
    let df = sample_rate / n as f64;
    let mut total = 0.0;
    let mut hits = 0usize;
    for (i, &p) in spectrum.iter().enumerate() {
        let f = i as f64 * df;
        if f > sample_rate / 2.0 {
            break; // mirrored half
        }
        if f >= band.f_low && f <= band.f_high {
            total += p;
            hits += 1;
        }
    }
    if hits == 0 {
        log::warn!(
            "band {} [{}, {}] Hz contains no DFT bin at resolution {:.4} Hz",
            band.name.as_str(),
            band.f_low,
            band.f_high,
            df
        );
    }
    total
}

/// Band-power features for one segment: for each channel, one `band_power`
/// per band, concatenated channel-major.
pub fn features(segment: &SignalSegment, bands: &[BandSpec]) -> Result<FeatureVector> {
    if bands.is_empty() {
        return Err(CoreError::InvalidBand("need at least one band".into()));
    }
    let nyquist = segment.sample_rate() / 2.0;
    for b in bands {
        if b.f_high > nyquist {
            return Err(CoreError::InvalidBand(format!(
                "band {} reaches {} Hz, above Nyquist {} Hz",
                b.name.as_str(),
                b.f_high,
                nyquist
            )));
        }
    }
    let mut values = Vec::with_capacity(segment.channel_count() * bands.len());
    for ch in 0..segment.channel_count() {
        let spectrum = psd(segment.samples().row(ch))?;
        for b in bands {
            values.push(band_power(&spectrum, b, segment.sample_rate()));
        }
    }
    Ok(FeatureVector { values })
}

/// Per-feature min/max affine map onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationTransform {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationTransform {
    /// Map one vector; values outside the fitted range clamp to [-1, 1], and a
    /// constant feature (max == min) maps to 0.
    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.min.len());
        v.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&x, (&lo, &hi))| {
                if hi > lo {
                    (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Inverse of `apply_vec` for in-range inputs (constant features map back
    /// to their fitted value).
    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&y, (&lo, &hi))| {
                if hi > lo {
                    lo + (y + 1.0) / 2.0 * (hi - lo)
                } else {
                    lo
                }
            })
            .collect()
    }
}

/// Per-column min/max over all rows.
pub fn fit_normalizer(features: &Mat) -> Result<NormalizationTransform> {
    if features.rows() == 0 {
        return Err(CoreError::ShapeMismatch(
            "cannot fit a normalizer on zero rows".into(),
        ));
    }
    let mut min = features.row(0).to_vec();
    let mut max = features.row(0).to_vec();
    for r in 1..features.rows() {
        for (c, &v) in features.row(r).iter().enumerate() {
            if v < min[c] {
                min[c] = v;
            }
            if v > max[c] {
                max[c] = v;
            }
        }
    }
    Ok(NormalizationTransform { min, max })
}

pub fn apply_normalizer(t: &NormalizationTransform, features: &Mat) -> Mat {
    let mut out = Mat::zeros(features.rows(), features.cols());
    for r in 0..features.rows() {
        out.row_mut(r).copy_from_slice(&t.apply_vec(features.row(r)));
    }
    out
}

/// Add i.i.d. zero-mean Gaussian noise, scaled per channel to `noise_std`
/// times that channel's sample standard deviation. Deterministic per seed.
pub fn augment_noise(segment: &SignalSegment, noise_std: f64, rng_seed: u64) -> SignalSegment {
    if noise_std == 0.0 {
        return segment.clone();
    }
    let mut rng = rngutil::stream(rng_seed, "augment-noise");
    let n = segment.len() as f64;
    let mut out = segment.samples().clone();
    for ch in 0..out.rows() {
        let row = out.row_mut(ch);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let scale = noise_std * var.sqrt();
        for v in row.iter_mut() {
            *v += scale * rngutil::standard_normal(&mut rng);
        }
    }
    SignalSegment {
        samples: out,
        sample_rate: segment.sample_rate(),
    }
}

fn lerp_resample(src: &[f64], m: usize) -> Vec<f64> {
    let n = src.len();
    if m == n {
        return src.to_vec();
    }
    let scale = (n - 1) as f64 / (m - 1) as f64;
    (0..m)
        .map(|i| {
            let t = i as f64 * scale;
            let j = (t.floor() as usize).min(n - 2);
            let frac = t - j as f64;
            src[j] * (1.0 - frac) + src[j + 1] * frac
        })
        .collect()
}

/// Linearly resample each channel to `round(len * factor)` samples and back,
/// a mild smoothing perturbation that preserves shape and duration.
pub fn augment_resample(segment: &SignalSegment, factor: f64) -> Result<SignalSegment> {
    if !(0.5..=2.0).contains(&factor) {
        return Err(CoreError::InvalidSignal(format!(
            "resample factor {factor} outside [0.5, 2]"
        )));
    }
    let n = segment.len();
    let m = ((n as f64 * factor).round() as usize).max(2);
    let mut out = Mat::zeros(segment.channel_count(), n);
    for ch in 0..segment.channel_count() {
        let down = lerp_resample(segment.samples().row(ch), m);
        out.row_mut(ch).copy_from_slice(&lerp_resample(&down, n));
    }
    SignalSegment::new(out, segment.sample_rate())
}

#[cfg(test)]
mod tests;
