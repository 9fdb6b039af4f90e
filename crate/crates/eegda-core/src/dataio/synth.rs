//! Synthetic domain-shift benchmark: band-limited sinusoid mixtures whose
//! class identity lives in the band-power profile, with a controlled
//! source→target shift built from gain scaling, orthogonal channel mixing,
//! and extra noise. Features go through the real signal-processing path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DomainSet, DomainTag, SegmentStore};
use crate::error::{CoreError, Result};
use crate::linalg::{matmul, Mat};
use crate::rngutil;
use crate::sigproc::{self, BandName, SignalSegment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub channels: usize,
    pub sample_rate: f64,
    pub segment_seconds: f64,
    pub n_source: usize,
    pub n_target: usize,
    /// Per-class tone amplitude for each canonical band (classes x 5 rows).
    pub band_profiles: Vec<Vec<f64>>,
    /// Scales class differences around the mean profile: 0 erases class
    /// structure, larger values separate the classes further.
    pub contrast: f64,
    /// Strength of a fixed per-class spatial pattern (+/- modulation of each
    /// band's amplitude per channel). Spatial class structure is what the
    /// target-domain channel mixing disturbs.
    pub channel_pattern: f64,
    /// Per-channel amplitude variation, as a fraction of the tone amplitude.
    pub channel_jitter: f64,
    /// Additive white noise on every generated sample.
    pub noise_std: f64,
    /// Target-domain amplitude scale.
    pub target_gain: f64,
    /// Target-domain channel-mixing strength; 0 keeps channels unmixed.
    pub target_mix: f64,
    /// Additional white noise applied only to the target domain.
    pub target_extra_noise: f64,
    /// Fraction of target samples recorded at reduced signal amplitude
    /// (noise floor unchanged), simulating low-SNR trials.
    pub target_weak_fraction: f64,
    /// Tone-amplitude multiplier for those low-SNR target samples.
    pub target_weak_scale: f64,
    /// Restrict the low-SNR subpopulation to one class (None = both).
    pub target_weak_class: Option<usize>,
    /// Fraction of one target class generated with an ambiguous profile,
    /// blended toward the opposite class (mixed/indistinct trials).
    pub target_ambiguous_fraction: f64,
    /// The true class of the ambiguous trials.
    pub target_ambiguous_class: usize,
    /// Blend factor toward the opposite class's profile (0 = pure own
    /// class, 1 = the other class's profile).
    pub target_ambiguous_blend: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 2,
            channels: 8,
            sample_rate: 128.0,
            segment_seconds: 2.0,
            n_source: 4000,
            n_target: 4000,
            band_profiles: vec![
                vec![0.5, 0.5, 1.2, 0.6, 0.3],
                vec![0.5, 0.5, 0.6, 1.2, 0.3],
            ],
            contrast: 1.0,
            channel_pattern: 0.0,
            channel_jitter: 0.3,
            noise_std: 0.6,
            target_gain: 1.5,
            target_mix: 0.4,
            target_extra_noise: 0.4,
            target_weak_fraction: 0.0,
            target_weak_scale: 1.0,
            target_weak_class: None,
            target_ambiguous_fraction: 0.0,
            target_ambiguous_class: 0,
            target_ambiguous_blend: 0.0,
            seed: 42,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.channels == 0 || self.n_source == 0 || self.n_target == 0 {
            return Err(CoreError::Config("synth spec needs >= 2 classes and nonzero counts".into()));
        }
        if self.band_profiles.len() != self.classes
            || self.band_profiles.iter().any(|p| p.len() != BandName::ALL.len())
        {
            return Err(CoreError::Config(format!(
                "band_profiles must be {} rows of {} amplitudes",
                self.classes,
                BandName::ALL.len()
            )));
        }
        let nyquist = self.sample_rate / 2.0;
        if nyquist <= 50.0 {
            return Err(CoreError::Config(
                "sample rate must exceed 100 Hz so the gamma band stays below Nyquist".into(),
            ));
        }
        Ok(())
    }

    /// Effective per-class amplitudes after applying the contrast knob.
    fn effective_profiles(&self) -> Vec<Vec<f64>> {
        let bands = BandName::ALL.len();
        let mean: Vec<f64> = (0..bands)
            .map(|b| {
                self.band_profiles.iter().map(|p| p[b]).sum::<f64>() / self.classes as f64
            })
            .collect();
        self.band_profiles
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&mean)
                    .map(|(&v, &m)| (m + self.contrast * (v - m)).max(0.0))
                    .collect()
            })
            .collect()
    }
}

/// Random orthogonal channel-mixing matrix: Gram-Schmidt of `I + mix * G`.
/// `mix = 0` gives the identity exactly.
fn mixing_matrix(channels: usize, mix: f64, seed: u64) -> Mat {
    let mut m = Mat::zeros(channels, channels);
    if mix == 0.0 {
        for i in 0..channels {
            m.set(i, i, 1.0);
        }
        return m;
    }
    let mut rng = rngutil::stream(seed, "synth-mixing");
    for i in 0..channels {
        for j in 0..channels {
            let base = if i == j { 1.0 } else { 0.0 };
            m.set(i, j, base + mix * rngutil::standard_normal(&mut rng));
        }
    }
    // Gram-Schmidt over rows.
    for i in 0..channels {
        for prev in 0..i {
            let dot: f64 = m.row(i).iter().zip(m.row(prev)).map(|(a, b)| a * b).sum();
            let prev_row = m.row(prev).to_vec();
            for (v, p) in m.row_mut(i).iter_mut().zip(&prev_row) {
                *v -= dot * p;
            }
        }
        let norm: f64 = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in m.row_mut(i) {
            *v /= norm;
        }
    }
    m
}

/// Fixed +/-1 spatial pattern per (class, band, channel); part of the class
/// definition, shared by both domains.
fn spatial_pattern(spec: &SynthSpec) -> Vec<Vec<Vec<f64>>> {
    let mut rng = rngutil::stream(spec.seed, "synth-pattern");
    (0..spec.classes)
        .map(|_| {
            (0..BandName::ALL.len())
                .map(|_| {
                    (0..spec.channels)
                        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn generate_segment(
    spec: &SynthSpec,
    profile: &[f64],
    pattern: &[Vec<f64>],
    domain: u64,
    index: usize,
) -> SignalSegment {
    let mut rng = rngutil::substream(spec.seed, "synth-segment", &[domain, index as u64]);
    let n = (spec.segment_seconds * spec.sample_rate).round() as usize;
    let nyquist = spec.sample_rate / 2.0;
    let mut samples = Mat::zeros(spec.channels, n);
    for ch in 0..spec.channels {
        let gain = 1.0 + spec.channel_jitter * (2.0 * rng.random::<f64>() - 1.0);
        let row = samples.row_mut(ch);
        for (bi, (band, &amp)) in BandName::ALL.iter().zip(profile).enumerate() {
            let spatial = (1.0 + spec.channel_pattern * pattern[bi][ch]).max(0.0);
            let b = sigproc::BandSpec::canonical(*band);
            let hi = b.f_high.min(0.95 * nyquist);
            let freq = rng.random_range(b.f_low..hi);
            let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            let w = 2.0 * std::f64::consts::PI * freq / spec.sample_rate;
            for (t, v) in row.iter_mut().enumerate() {
                *v += amp * gain * spatial * (w * t as f64 + phase).sin();
            }
        }
        for v in row.iter_mut() {
            *v += spec.noise_std * rngutil::standard_normal(&mut rng);
        }
    }
    SignalSegment::new(samples, spec.sample_rate).expect("generated segment is valid")
}

fn shift_segment(spec: &SynthSpec, seg: &SignalSegment, mixing: &Mat, index: usize) -> SignalSegment {
    let mut rng = rngutil::substream(spec.seed, "synth-shift", &[index as u64]);
    let mut mixed = Mat::zeros(seg.channel_count(), seg.len());
    matmul(
        mixing.data(),
        seg.samples().data(),
        seg.channel_count(),
        seg.channel_count(),
        seg.len(),
        mixed.data_mut(),
    );
    for v in mixed.data_mut() {
        *v = spec.target_gain * *v + spec.target_extra_noise * rngutil::standard_normal(&mut rng);
    }
    SignalSegment::new(mixed, seg.sample_rate()).expect("shifted segment is valid")
}

fn build_domain(
    spec: &SynthSpec,
    n: usize,
    domain: u64,
    mixing: Option<&Mat>,
    tag: DomainTag,
) -> Result<(DomainSet, Vec<usize>)> {
    let profiles = spec.effective_profiles();
    let pattern = spatial_pattern(spec);
    let bands = sigproc::default_bands();
    let mut store = SegmentStore::new(spec.sample_rate);
    let mut labels = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes; // balanced by construction
        let mut profile = profiles[class].clone();
        if mixing.is_some()
            && spec.target_ambiguous_fraction > 0.0
            && class == spec.target_ambiguous_class
            && spec.classes == 2
        {
            let mut rng = rngutil::substream(spec.seed, "synth-ambiguous", &[i as u64]);
            if rng.random::<f64>() < spec.target_ambiguous_fraction {
                let other = &profiles[1 - class];
                let lam = spec.target_ambiguous_blend;
                for (amp, &o) in profile.iter_mut().zip(other) {
                    *amp = (1.0 - lam) * *amp + lam * o;
                }
            }
        }
        let weak_applies = mixing.is_some()
            && spec.target_weak_fraction > 0.0
            && spec.target_weak_class.map_or(true, |c| c == class);
        if weak_applies {
            let mut rng = rngutil::substream(spec.seed, "synth-weak", &[i as u64]);
            if rng.random::<f64>() < spec.target_weak_fraction {
                for amp in &mut profile {
                    *amp *= spec.target_weak_scale;
                }
            }
        }
        let mut seg = generate_segment(spec, &profile, &pattern[class], domain, i);
        if let Some(mixing) = mixing {
            seg = shift_segment(spec, &seg, mixing, i);
        }
        rows.push(sigproc::features(&seg, &bands)?.values);
        store.insert(i, seg)?;
        labels.push(class);
    }
    let raw = Mat::from_rows(&rows)?;
    let norm = sigproc::fit_normalizer(&raw)?;
    let features = sigproc::apply_normalizer(&norm, &raw);
    let set = DomainSet {
        features,
        labels: None, // caller decides whether labels ship with the set
        segments: Some(store),
        norm: Some(norm),
        bands: BandName::ALL.to_vec(),
        tag,
    };
    Ok((set, labels))
}

/// Generate the benchmark: a labeled source set, an unlabeled target set
/// (same class structure, shifted recording conditions), and the held-out
/// target labels for scoring. Deterministic per spec.
pub fn synth_benchmark(spec: &SynthSpec) -> Result<(DomainSet, DomainSet, Vec<usize>)> {
    spec.validate()?;
    let (mut source, source_labels) = build_domain(spec, spec.n_source, 0, None, DomainTag::Source)?;
    source.labels = Some(source_labels);
    source.validate()?;
    let mixing = mixing_matrix(spec.channels, spec.target_mix, spec.seed);
    let (target, target_labels) =
        build_domain(spec, spec.n_target, 1, Some(&mixing), DomainTag::Target)?;
    target.validate()?;
    Ok((source, target, target_labels))
}
