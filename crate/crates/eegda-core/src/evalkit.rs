//! Classification metrics and the ablation harnesses: component ablations
//! (pretrain-only, single-round selection, no augmentation) and per-band
//! feature ablations.

use serde::{Deserialize, Serialize};

use crate::clusterstats::ClusterStats;
use crate::dataio::{DomainSet, DomainTag};
use crate::error::{CoreError, Result};
use crate::linalg::Mat;
use crate::net::ModelParams;
use crate::pctta::{self, InferMode, TtaCostReport, TtaDecision};
use crate::pipeline::{self, PipelineConfig, RunTrace, TrainOptions};
use crate::sigproc::{self, BandName};

/// Integer confusion counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    /// Row-major `classes x classes` counts.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut counts = vec![0u64; classes * classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(CoreError::ShapeMismatch(format!(
                    "label pair ({t}, {p}) out of range for {classes} classes"
                )));
            }
            counts[t * classes + p] += 1;
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        trace as f64 / self.total().max(1) as f64
    }
}

/// Per-class rates; a zero denominator reports 0 with the `undefined` flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub sensitivity: f64,
    pub ppv: f64,
    pub f1: f64,
    pub undefined_sensitivity: bool,
    pub undefined_ppv: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<TtaCostReport>,
}

/// Accuracy, per-class sensitivity / positive predictive value / F1.
pub fn metrics(truth: &[usize], predicted: &[usize], classes: usize) -> Result<MetricsReport> {
    let confusion = ConfusionMatrix::new(truth, predicted, classes)?;
    let mut per_class = Vec::with_capacity(classes);
    for k in 0..classes {
        let tp = confusion.get(k, k) as f64;
        let fn_: f64 = (0..classes)
            .filter(|&j| j != k)
            .map(|j| confusion.get(k, j) as f64)
            .sum();
        let fp: f64 = (0..classes)
            .filter(|&j| j != k)
            .map(|j| confusion.get(j, k) as f64)
            .sum();
        let undefined_sensitivity = tp + fn_ == 0.0;
        let undefined_ppv = tp + fp == 0.0;
        let sensitivity = if undefined_sensitivity { 0.0 } else { tp / (tp + fn_) };
        let ppv = if undefined_ppv { 0.0 } else { tp / (tp + fp) };
        let f1 = if sensitivity + ppv > 0.0 {
            2.0 * sensitivity * ppv / (sensitivity + ppv)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            sensitivity,
            ppv,
            f1,
            undefined_sensitivity,
            undefined_ppv,
        });
    }
    Ok(MetricsReport {
        accuracy: confusion.accuracy(),
        per_class,
        confusion,
        cost: None,
    })
}

/// The component-ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Pre-training only, no augmentation at inference.
    A,
    /// Full pipeline with a single selection round.
    C,
    /// Full pipeline without confidence-gated augmentation.
    D,
    /// The complete method.
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::A,
        AblationVariant::C,
        AblationVariant::D,
        AblationVariant::Full,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationVariant::A => "A",
            AblationVariant::C => "C",
            AblationVariant::D => "D",
            AblationVariant::Full => "full",
        }
    }

    fn train_options(&self) -> TrainOptions {
        match self {
            AblationVariant::A => TrainOptions {
                run_cluster: false,
                run_adapt: false,
            },
            _ => TrainOptions::default(),
        }
    }

    fn infer_mode(&self) -> InferMode {
        match self {
            AblationVariant::A | AblationVariant::D => InferMode::NoTta,
            AblationVariant::C | AblationVariant::Full => InferMode::PcTta,
        }
    }

    fn configure(&self, cfg: &PipelineConfig) -> PipelineConfig {
        let mut cfg = cfg.clone();
        if *self == AblationVariant::C {
            cfg.train.max_itr = 1;
        }
        cfg
    }
}

/// One trained-and-scored pipeline instance.
pub struct RunResult {
    pub params: ModelParams,
    pub stats: Option<ClusterStats>,
    pub trace: RunTrace,
    pub predictions: Vec<usize>,
    pub decisions: Vec<TtaDecision>,
    pub report: MetricsReport,
}

/// Train with the given options, infer in the given mode, score against the
/// held-out truth.
pub fn run_and_score(
    source: &DomainSet,
    target: &DomainSet,
    truth: &[usize],
    cfg: &PipelineConfig,
    opts: TrainOptions,
    mode: InferMode,
) -> Result<RunResult> {
    let outcome = pipeline::run_training(source, target, cfg, opts)?;
    let bands = sigproc::bands_from_names(&target.bands);
    let (predictions, decisions, cost) = pctta::batch_infer(
        &target.features,
        target.segments.as_ref().map(|s| s.map()),
        &outcome.model.params,
        outcome.stats.as_ref(),
        &bands,
        target.norm.as_ref(),
        &cfg.tta,
        mode,
        cfg.seed,
    )?;
    let classes = outcome.model.params.arch().classes;
    let mut report = metrics(truth, &predictions, classes)?;
    report.cost = Some(cost);
    Ok(RunResult {
        params: outcome.model.params,
        stats: outcome.stats,
        trace: outcome.trace,
        predictions,
        decisions,
        report,
    })
}

/// Run every ablation variant with identical seeds. Variants share the same
/// pretrain trajectory (checked via the parameter hash in the trace).
pub fn ablate(
    source: &DomainSet,
    target: &DomainSet,
    truth: &[usize],
    cfg: &PipelineConfig,
) -> Result<Vec<(AblationVariant, RunResult)>> {
    AblationVariant::ALL
        .iter()
        .map(|&variant| {
            let vcfg = variant.configure(cfg);
            let result = run_and_score(
                source,
                target,
                truth,
                &vcfg,
                variant.train_options(),
                variant.infer_mode(),
            )?;
            Ok((variant, result))
        })
        .collect()
}

/// Refeaturize a domain from its stored raw segments with one band subset,
/// refit the normalizer, and keep the segments for TTA.
pub fn refeaturize(set: &DomainSet, bands: &[BandName]) -> Result<DomainSet> {
    let store = set
        .segments
        .as_ref()
        .ok_or_else(|| CoreError::Config("band ablation needs raw segments".into()))?;
    let specs = sigproc::bands_from_names(bands);
    let mut rows = Vec::with_capacity(store.len());
    for (_, seg) in store.map() {
        rows.push(sigproc::features(seg, &specs)?.values);
    }
    let raw = Mat::from_rows(&rows)?;
    let norm = sigproc::fit_normalizer(&raw)?;
    let features = sigproc::apply_normalizer(&norm, &raw);
    Ok(DomainSet {
        features,
        labels: set.labels.clone(),
        segments: set.segments.clone(),
        norm: Some(norm),
        bands: bands.to_vec(),
        tag: set.tag,
    })
}

/// Full pipeline once per single-band feature set plus the all-band run.
/// `None` keys the all-band entry.
pub fn band_ablation(
    source: &DomainSet,
    target: &DomainSet,
    truth: &[usize],
    cfg: &PipelineConfig,
) -> Result<Vec<(Option<BandName>, MetricsReport)>> {
    let mut out = Vec::new();
    for band in BandName::ALL {
        let s = refeaturize(source, &[band])?;
        let t = refeaturize(target, &[band])?;
        let result = run_and_score(&s, &t, truth, cfg, TrainOptions::default(), InferMode::PcTta)?;
        out.push((Some(band), result.report));
    }
    let s = refeaturize(source, &BandName::ALL)?;
    let t = refeaturize(target, &BandName::ALL)?;
    let result = run_and_score(&s, &t, truth, cfg, TrainOptions::default(), InferMode::PcTta)?;
    out.push((None, result.report));
    Ok(out)
}

/// Source and target of the band-ablation example: build both domains from
/// segment stores plus labels.
pub fn domain_from_segments(
    store: crate::dataio::SegmentStore,
    labels: Option<Vec<usize>>,
    bands: &[BandName],
    tag: DomainTag,
) -> Result<DomainSet> {
    let specs = sigproc::bands_from_names(bands);
    let mut rows = Vec::with_capacity(store.len());
    for (_, seg) in store.map() {
        rows.push(sigproc::features(seg, &specs)?.values);
    }
    let raw = Mat::from_rows(&rows)?;
    let norm = sigproc::fit_normalizer(&raw)?;
    let features = sigproc::apply_normalizer(&norm, &raw);
    let set = DomainSet {
        features,
        labels,
        segments: Some(store),
        norm: Some(norm),
        bands: bands.to_vec(),
        tag,
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil;
    use rand::Rng;

    #[test]
    fn metrics_hand_counted_cases() {
        // Perfect predictions.
        let r = metrics(&[0, 1, 0, 1], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for c in &r.per_class {
            assert_eq!((c.sensitivity, c.ppv, c.f1), (1.0, 1.0, 1.0));
        }

        // truth {0,0,1,1}, predicted {0,1,1,1}.
        let r = metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_class[1].sensitivity, 1.0);
        assert!((r.per_class[1].ppv - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 0.8).abs() < 1e-12);

        // Everything predicted as class 0 on balanced truth.
        let r = metrics(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(r.per_class[0].sensitivity, 1.0);
        assert_eq!(r.per_class[1].sensitivity, 0.0);
        assert!(r.per_class[1].undefined_ppv);
        assert_eq!(r.per_class[1].ppv, 0.0);

        assert!(metrics(&[0, 1], &[0], 2).is_err());
    }

    #[test]
    fn metrics_match_independent_confusion_oracle() {
        let mut rng = rngutil::stream(60, "metrics-oracle");
        for _ in 0..10 {
            let k = rng.random_range(2..5usize);
            let n = rng.random_range(10..200usize);
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let r = metrics(&truth, &pred, k).unwrap();

            // Independent oracle: count everything with nested loops.
            let mut counts = vec![vec![0u64; k]; k];
            for i in 0..n {
                counts[truth[i]][pred[i]] += 1;
            }
            let mut correct = 0u64;
            for c in 0..k {
                for p in 0..k {
                    assert_eq!(r.confusion.get(c, p), counts[c][p]);
                }
                correct += counts[c][c];
            }
            assert_eq!(r.confusion.total(), n as u64);
            assert!((r.accuracy - correct as f64 / n as f64).abs() < 1e-12);
            for c in 0..k {
                let tp = counts[c][c] as f64;
                let row: f64 = counts[c].iter().sum::<u64>() as f64;
                let col: f64 = (0..k).map(|t| counts[t][c]).sum::<u64>() as f64;
                let se = if row > 0.0 { tp / row } else { 0.0 };
                let ppv = if col > 0.0 { tp / col } else { 0.0 };
                assert!((r.per_class[c].sensitivity - se).abs() < 1e-12);
                assert!((r.per_class[c].ppv - ppv).abs() < 1e-12);
                if se + ppv > 0.0 {
                    let f1 = 2.0 * se * ppv / (se + ppv);
                    assert!((r.per_class[c].f1 - f1).abs() < 1e-12);
                } else {
                    assert_eq!(r.per_class[c].f1, 0.0);
                }
            }
        }
    }

    #[test]
    fn f1_is_harmonic_mean_when_defined() {
        let r = metrics(&[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0], 2).unwrap();
        for c in &r.per_class {
            if !c.undefined_sensitivity && !c.undefined_ppv && c.sensitivity + c.ppv > 0.0 {
                let hm = 2.0 * c.sensitivity * c.ppv / (c.sensitivity + c.ppv);
                assert!((c.f1 - hm).abs() < 1e-12);
            }
        }
    }
}
