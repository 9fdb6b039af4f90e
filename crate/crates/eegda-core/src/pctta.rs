//! Confidence-gated test-time augmentation. A sample is augmented only when
//! its prediction entropy reaches the threshold and the two classifiers
//! disagree more than they do on average over the source set; everything else
//! keeps its single-pass prediction.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clusterstats::{ClusterStats, Prediction};
use crate::error::{CoreError, Result};
use crate::linalg::{argmax, Mat};
use crate::net::{self, ModelParams};
use crate::rngutil;
use crate::sigproc::{self, BandSpec, NormalizationTransform, SignalSegment};

/// Prediction entropy in bits (base-2 logarithm, `0 log 0 = 0`). With base 2
/// a K=2 prediction spans [0, 1], which is the scale the gate threshold tau
/// is defined on.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.log2() } else { 0.0 })
        .sum()
}

/// Augment iff the model is uncertain (entropy >= tau, inclusive) AND the
/// classifiers disagree (discrepancy strictly above the source mean).
pub fn gate(pred: &Prediction, tau: f64, m_dis: f64) -> bool {
    pred.entropy_bits >= tau && pred.discrepancy > m_dis
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    /// Entropy gate threshold in bits.
    pub tau: f64,
    /// Gaussian-noise augmentations, as fractions of per-channel signal std.
    pub noise_stds: Vec<f64>,
    /// Resampling round-trip factors.
    pub resample_factors: Vec<f64>,
    /// Recompute the mean classifier discrepancy after adaptation instead of
    /// keeping the cluster-stage value.
    pub recompute_m_dis: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            tau: 0.9,
            noise_stds: vec![0.05, 0.1],
            resample_factors: vec![0.9, 1.1],
            recompute_m_dis: false,
        }
    }
}

impl TtaConfig {
    /// Number of augmented variants per gated sample.
    pub fn transform_count(&self) -> usize {
        self.noise_stds.len() + self.resample_factors.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteSource {
    Original,
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub label: usize,
    pub source: VoteSource,
}

/// Per-sample decision log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaDecision {
    pub gated: bool,
    pub entropy_bits: f64,
    pub discrepancy: f64,
    pub votes: Vec<Vote>,
    pub final_label: usize,
}

/// Exact augmentation accounting for one inference run. Wall time is
/// informational and excluded from serialized reports so artifacts stay
/// byte-identical across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaCostReport {
    pub total_samples: usize,
    pub gated_count: usize,
    pub augmented_passes: usize,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    PcTta,
    FullTta,
    NoTta,
}

impl InferMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pc_tta" => Ok(InferMode::PcTta),
            "full_tta" => Ok(InferMode::FullTta),
            "no_tta" => Ok(InferMode::NoTta),
            other => Err(CoreError::Config(format!(
                "unknown inference mode \"{other}\" (expected pc_tta, full_tta, or no_tta)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            InferMode::PcTta => "pc_tta",
            InferMode::FullTta => "full_tta",
            InferMode::NoTta => "no_tta",
        }
    }
}

/// Most frequent label among the votes; ties prefer the original prediction
/// when it is among the tied labels, otherwise the lowest class index.
pub fn majority_vote(votes: &[Vote], original: usize, classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for v in votes {
        counts[v.label] += 1;
    }
    let best = counts.iter().max().copied().unwrap_or(0);
    if counts.get(original) == Some(&best) {
        return original;
    }
    counts.iter().position(|&c| c == best).unwrap_or(original)
}

/// Everything needed to re-extract features from an augmented segment and
/// score it with the trained model.
pub struct TtaContext<'a> {
    pub params: &'a ModelParams,
    pub bands: &'a [BandSpec],
    /// The test domain's normalization transform, reused for augmented
    /// features.
    pub norm: &'a NormalizationTransform,
    pub m_dis: f64,
    pub cfg: &'a TtaConfig,
    pub seed: u64,
}

fn predict_label(params: &ModelParams, feature_row: &[f64]) -> Result<usize> {
    let x = Mat::from_rows(&[feature_row.to_vec()])?;
    let out = net::forward_eval(params, &x)?;
    Ok(argmax(out.probs_avg.row(0)))
}

/// Augmented variants of one segment, in config order: noise levels first,
/// then resampling factors. Noise seeds derive from (seed, sample, transform)
/// so results are independent of processing order and inference mode.
fn augmented_segments(
    ctx: &TtaContext,
    sample_idx: usize,
    segment: &SignalSegment,
) -> Result<Vec<SignalSegment>> {
    let mut out = Vec::with_capacity(ctx.cfg.transform_count());
    for (t, &std) in ctx.cfg.noise_stds.iter().enumerate() {
        let seed = rngutil::substream(ctx.seed, "tta-noise", &[sample_idx as u64, t as u64])
            .random::<u64>();
        out.push(sigproc::augment_noise(segment, std, seed));
    }
    for &factor in &ctx.cfg.resample_factors {
        out.push(sigproc::augment_resample(segment, factor)?);
    }
    Ok(out)
}

fn vote_with_augmentations(
    ctx: &TtaContext,
    sample_idx: usize,
    pred: &Prediction,
    segment: Option<&SignalSegment>,
) -> Result<TtaDecision> {
    let segment = segment.ok_or(CoreError::MissingSegment(sample_idx))?;
    let mut votes = vec![Vote {
        label: pred.label,
        source: VoteSource::Original,
    }];
    for aug in augmented_segments(ctx, sample_idx, segment)? {
        let fv = sigproc::features(&aug, ctx.bands)?;
        let normalized = ctx.norm.apply_vec(&fv.values);
        let label = predict_label(ctx.params, &normalized)?;
        votes.push(Vote {
            label,
            source: VoteSource::Augmented,
        });
    }
    let classes = pred.probs_avg.len();
    let final_label = majority_vote(&votes, pred.label, classes);
    Ok(TtaDecision {
        gated: true,
        entropy_bits: pred.entropy_bits,
        discrepancy: pred.discrepancy,
        votes,
        final_label,
    })
}

fn single_vote_decision(pred: &Prediction) -> TtaDecision {
    TtaDecision {
        gated: false,
        entropy_bits: pred.entropy_bits,
        discrepancy: pred.discrepancy,
        votes: vec![Vote {
            label: pred.label,
            source: VoteSource::Original,
        }],
        final_label: pred.label,
    }
}

/// Confidence-gated prediction for one sample. Ungated samples keep the
/// original label with zero augmented passes.
pub fn pc_tta_predict(
    ctx: &TtaContext,
    sample_idx: usize,
    pred: &Prediction,
    segment: Option<&SignalSegment>,
) -> Result<TtaDecision> {
    if ctx.cfg.transform_count() == 0 {
        return Err(CoreError::Config(
            "TTA needs at least one augmentation".into(),
        ));
    }
    if gate(pred, ctx.cfg.tau, ctx.m_dis) {
        vote_with_augmentations(ctx, sample_idx, pred, segment)
    } else {
        Ok(single_vote_decision(pred))
    }
}

/// Inference over a whole test set in one of the three modes. Returns final
/// labels in sample order, the per-sample decision log, and the exact
/// augmentation cost accounting.
#[allow(clippy::too_many_arguments)]
pub fn batch_infer(
    features: &Mat,
    segments: Option<&BTreeMap<usize, SignalSegment>>,
    params: &ModelParams,
    stats: Option<&ClusterStats>,
    bands: &[BandSpec],
    norm: Option<&NormalizationTransform>,
    cfg: &TtaConfig,
    mode: InferMode,
    seed: u64,
) -> Result<(Vec<usize>, Vec<TtaDecision>, TtaCostReport)> {
    let start = Instant::now();
    let preds = crate::clusterstats::predict_all(params, features)?;
    let decisions: Vec<TtaDecision> = match mode {
        InferMode::NoTta => preds.iter().map(single_vote_decision).collect(),
        InferMode::FullTta | InferMode::PcTta => {
            let m_dis = match mode {
                InferMode::PcTta => {
                    stats
                        .ok_or_else(|| {
                            CoreError::Config(
                                "pc_tta needs cluster statistics (mean classifier discrepancy)"
                                    .into(),
                            )
                        })?
                        .m_dis
                }
                _ => 0.0,
            };
            let norm = norm.ok_or_else(|| {
                CoreError::Config("TTA needs the domain's normalization transform".into())
            })?;
            let ctx = TtaContext {
                params,
                bands,
                norm,
                m_dis,
                cfg,
                seed,
            };
            let mut out = Vec::with_capacity(preds.len());
            for (i, p) in preds.iter().enumerate() {
                let segment = segments.and_then(|s| s.get(&i));
                let decision = match mode {
                    InferMode::FullTta => vote_with_augmentations(&ctx, i, p, segment)?,
                    InferMode::PcTta => pc_tta_predict(&ctx, i, p, segment)?,
                    InferMode::NoTta => unreachable!(),
                };
                out.push(decision);
            }
            out
        }
    };
    let gated_count = decisions.iter().filter(|d| d.gated).count();
    let report = TtaCostReport {
        total_samples: decisions.len(),
        gated_count,
        augmented_passes: cfg.transform_count() * gated_count,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let labels = decisions.iter().map(|d| d.final_label).collect();
    Ok((labels, decisions, report))
}
