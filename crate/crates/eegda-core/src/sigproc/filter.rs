//! Zero-phase Butterworth band-pass filtering, built as a cascade of
//! high-pass and low-pass biquads applied forward-backward.

use crate::error::{CoreError, Result};
use crate::linalg::Mat;

/// Normalized biquad (a0 = 1), direct form II transposed.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Filter with the state pre-loaded to its steady-state response for a
    /// constant input `level`, which removes the start-up step transient for
    /// signals sitting on a DC baseline.
    fn filter(&self, x: &[f64], level: f64, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(x.len());
        let h1 = self.dc_gain();
        let mut s1 = (h1 - self.b0) * level;
        let mut s2 = (self.b2 - self.a2 * h1) * level;
        for &xi in x {
            let y = self.b0 * xi + s1;
            s1 = self.b1 * xi - self.a1 * y + s2;
            s2 = self.b2 * xi - self.a2 * y;
            out.push(y);
        }
    }
}

/// Q factors of the second-order sections of an even-order Butterworth filter.
fn butterworth_qs(order: usize) -> Vec<f64> {
    (1..=order / 2)
        .map(|k| {
            let phi = std::f64::consts::PI * (2 * k - 1) as f64 / (2 * order) as f64;
            1.0 / (2.0 * phi.sin())
        })
        .collect()
}

fn lowpass_biquad(f0: f64, fs: f64, q: f64) -> Biquad {
    let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
    let (sinw, cosw) = w0.sin_cos();
    let alpha = sinw / (2.0 * q);
    let a0 = 1.0 + alpha;
    Biquad {
        b0: (1.0 - cosw) / 2.0 / a0,
        b1: (1.0 - cosw) / a0,
        b2: (1.0 - cosw) / 2.0 / a0,
        a1: -2.0 * cosw / a0,
        a2: (1.0 - alpha) / a0,
    }
}

fn highpass_biquad(f0: f64, fs: f64, q: f64) -> Biquad {
    let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
    let (sinw, cosw) = w0.sin_cos();
    let alpha = sinw / (2.0 * q);
    let a0 = 1.0 + alpha;
    Biquad {
        b0: (1.0 + cosw) / 2.0 / a0,
        b1: -(1.0 + cosw) / a0,
        b2: (1.0 + cosw) / 2.0 / a0,
        a1: -2.0 * cosw / a0,
        a2: (1.0 - alpha) / a0,
    }
}

fn sos_forward(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let mut cur = x.to_vec();
    let mut next = Vec::with_capacity(x.len());
    let mut level = mean;
    for s in sections {
        s.filter(&cur, level, &mut next);
        level *= s.dc_gain();
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Forward-backward filtering with symmetric reflection padding at both ends,
/// so the result has zero phase and edge transients stay small.
fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let pad = (3 * (2 * sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(x[i]);
    }
    ext.extend_from_slice(x);
    for i in (n - 1 - pad..n - 1).rev() {
        ext.push(x[i]);
    }
    let mut y = sos_forward(sections, &ext);
    y.reverse();
    y = sos_forward(sections, &y);
    y.reverse();
    y[pad..pad + n].to_vec()
}

/// Default filter order (per cutoff side, even). Forward-backward application
/// doubles the effective rolloff.
pub const DEFAULT_FILTER_ORDER: usize = 8;

/// Zero-phase band-pass over every channel of a record (channels x time).
pub fn bandpass(samples: &Mat, sample_rate: f64, f_low: f64, f_high: f64) -> Result<Mat> {
    bandpass_with_order(samples, sample_rate, f_low, f_high, DEFAULT_FILTER_ORDER)
}

pub fn bandpass_with_order(
    samples: &Mat,
    sample_rate: f64,
    f_low: f64,
    f_high: f64,
    order: usize,
) -> Result<Mat> {
    let nyquist = sample_rate / 2.0;
    if !(0.0 < f_low && f_low < f_high) {
        return Err(CoreError::InvalidBand(format!(
            "need 0 < f_low < f_high, got [{f_low}, {f_high}]"
        )));
    }
    if f_high >= nyquist {
        return Err(CoreError::InvalidBand(format!(
            "f_high {f_high} Hz must stay below Nyquist {nyquist} Hz"
        )));
    }
    if order < 2 || order % 2 != 0 {
        return Err(CoreError::Config(format!(
            "filter order must be even and >= 2, got {order}"
        )));
    }
    if samples.cols() < 2 {
        return Err(CoreError::InvalidSignal("record too short to filter".into()));
    }
    let mut sections = Vec::with_capacity(order);
    for q in butterworth_qs(order) {
        sections.push(highpass_biquad(f_low, sample_rate, q));
    }
    for q in butterworth_qs(order) {
        sections.push(lowpass_biquad(f_high, sample_rate, q));
    }
    let mut out = Mat::zeros(samples.rows(), samples.cols());
    for ch in 0..samples.rows() {
        out.row_mut(ch).copy_from_slice(&filtfilt(&sections, samples.row(ch)));
    }
    Ok(out)
}
