//! The staged training pipeline: group-robust pre-training, cluster shaping,
//! and the gradual proximity-guided adaptation loop that admits target
//! samples iteratively as the domains draw together.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clusterstats::{self, ClusterStats};
use crate::dataio::{DomainSet, SynthSpec};
use crate::error::{CoreError, Result};
use crate::linalg::{euclidean, Mat};
use crate::losses::{self, GroupDroState, LossSpec, LossWeights, StageTerms};
use crate::net::{self, ModelParams, NetArch, OptimizerState, TrainBatch};
use crate::pctta::TtaConfig;
use crate::rngutil;
use crate::sigproc::BandName;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epoch_1: usize,
    pub max_epoch_2: usize,
    pub max_epoch_3: usize,
    pub max_itr: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            weight_decay: 0.0005,
            batch_size: 64,
            max_epoch_1: 30,
            max_epoch_2: 10,
            max_epoch_3: 5,
            max_itr: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DroConfig {
    /// Exponentiated-gradient step size for the group weights.
    pub eta: f64,
}

impl Default for DroConfig {
    fn default() -> Self {
        DroConfig { eta: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    /// Confident-prediction probability threshold (strict).
    pub softmax_threshold: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            softmax_threshold: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConfig {
    /// Reuse the source domain's min/max when featurizing a target domain
    /// instead of refitting per domain.
    pub share_source_stats: bool,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            share_source_stats: false,
        }
    }
}

/// Featurization settings for raw records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub enabled: bool,
    pub f_low: f64,
    pub f_high: f64,
    pub order: usize,
    pub window_seconds: f64,
    pub step_seconds: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            enabled: true,
            f_low: 0.3,
            f_high: 50.0,
            order: 8,
            window_seconds: 2.0,
            step_seconds: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// 0 means "take the width from the data".
    pub input_dim: usize,
    pub extractor: [usize; 2],
    pub classifier: [usize; 2],
    pub classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        let arch = NetArch::default();
        NetConfig {
            input_dim: 0,
            extractor: arch.extractor,
            classifier: arch.classifier,
            classes: arch.classes,
        }
    }
}

impl NetConfig {
    pub fn resolve(&self, data_dim: usize) -> Result<NetArch> {
        let input = if self.input_dim == 0 { data_dim } else { self.input_dim };
        if input != data_dim {
            return Err(CoreError::Config(format!(
                "configured input width {input} does not match data width {data_dim}"
            )));
        }
        Ok(NetArch {
            input,
            extractor: self.extractor,
            classifier: self.classifier,
            classes: self.classes,
        })
    }
}

/// Every knob of a run; addressable as flat dotted keys in the TOML config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub bands: Vec<BandName>,
    pub net: NetConfig,
    pub loss: LossWeights,
    pub dro: DroConfig,
    pub train: TrainConfig,
    pub select: SelectConfig,
    pub tta: TtaConfig,
    pub norm: NormConfig,
    pub filter: FilterConfig,
    pub synth: SynthSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            bands: BandName::ALL.to_vec(),
            net: NetConfig::default(),
            loss: LossWeights::default(),
            dro: DroConfig::default(),
            train: TrainConfig::default(),
            select: SelectConfig::default(),
            tta: TtaConfig::default(),
            norm: NormConfig::default(),
            filter: FilterConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train.batch_size < 2 {
            return Err(CoreError::Config("batch_size must be at least 2".into()));
        }
        if self.train.max_itr < 1 {
            return Err(CoreError::Config("max_itr must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.select.softmax_threshold) {
            return Err(CoreError::Config("softmax_threshold must lie in [0, 1]".into()));
        }
        if self.bands.is_empty() {
            return Err(CoreError::Config("band subset must not be empty".into()));
        }
        Ok(())
    }
}

/// Model plus the training state that travels with it across stages.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub dro: GroupDroState,
    pub class_weights: Vec<f64>,
}

/// Mean loss terms over one epoch's batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub iteration: usize,
    pub epoch: usize,
    pub batches: usize,
    pub mean_total: f64,
    pub mean_terms: BTreeMap<String, f64>,
}

/// One adaptation round: what was selected and how training went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub candidates: usize,
    pub selected: usize,
    pub selected_per_class: Vec<usize>,
    pub pool_remaining: usize,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    pub iterations: Vec<IterationRecord>,
}

/// Unselected target samples, remembering their original sample indices.
#[derive(Debug, Clone)]
pub struct TargetPool {
    pub features: Mat,
    pub indices: Vec<usize>,
}

impl TargetPool {
    pub fn new(target: &DomainSet) -> Self {
        TargetPool {
            features: target.features.clone(),
            indices: (0..target.features.rows()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn remove_positions(&mut self, positions: &[usize]) {
        let keep: Vec<usize> = (0..self.indices.len())
            .filter(|p| !positions.contains(p))
            .collect();
        self.features = self.features.select_rows(&keep);
        self.indices = keep.iter().map(|&p| self.indices[p]).collect();
    }
}

/// One gradual-selection round over the remaining pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Positions within the pool (not original indices).
    pub pool_positions: Vec<usize>,
    /// Original target sample indices with frozen pseudo-labels.
    pub samples: Vec<(usize, usize)>,
    /// How many pool samples passed the proximity condition.
    pub candidates: usize,
}

fn terms_map(terms: &StageTerms) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    match *terms {
        StageTerms::Pretrain { l_cls, l_dis } => {
            m.insert("l_cls".into(), l_cls);
            m.insert("l_dis".into(), l_dis);
        }
        StageTerms::Cluster { l_cls, l_comp, l_sep } => {
            m.insert("l_cls".into(), l_cls);
            m.insert("l_comp".into(), l_comp);
            m.insert("l_sep".into(), l_sep);
        }
        StageTerms::Adapt {
            l_cls,
            l_comp_s,
            l_comp_t,
            l_sep_s,
            l_sep_t,
            l_cd,
            l_cmb,
        } => {
            m.insert("l_cls".into(), l_cls);
            m.insert("l_comp_s".into(), l_comp_s);
            m.insert("l_comp_t".into(), l_comp_t);
            m.insert("l_sep_s".into(), l_sep_s);
            m.insert("l_sep_t".into(), l_sep_t);
            m.insert("l_cd".into(), l_cd);
            m.insert("l_cmb".into(), l_cmb);
        }
    }
    m
}

/// Batch index ranges for one epoch: full batches plus a trailing partial
/// batch when it still meets the batch-norm minimum of 2 rows.
fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let stop = (start + batch_size).min(n);
        if stop - start >= 2 {
            out.push((start, stop));
        }
        start = stop;
    }
    out
}

struct EpochStats {
    total: f64,
    terms: BTreeMap<String, f64>,
    batches: usize,
}

impl EpochStats {
    fn new() -> Self {
        EpochStats {
            total: 0.0,
            terms: BTreeMap::new(),
            batches: 0,
        }
    }

    fn add(&mut self, total: f64, terms: &StageTerms) {
        self.total += total;
        for (k, v) in terms_map(terms) {
            *self.terms.entry(k).or_insert(0.0) += v;
        }
        self.batches += 1;
    }

    fn record(self, stage: &str, iteration: usize, epoch: usize) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        EpochRecord {
            stage: stage.into(),
            iteration,
            epoch,
            batches: self.batches,
            mean_total: self.total / n,
            mean_terms: self.terms.into_iter().map(|(k, v)| (k, v / n)).collect(),
        }
    }
}

/// One optimizer step: joint forward, DRO weight update from this batch's
/// per-group losses, gradients with the updated weights, Adam.
fn train_step(
    model: &mut TrainedModel,
    batch: &TrainBatch,
    make_spec: &dyn Fn(Vec<f64>) -> LossSpec,
    context: &str,
) -> Result<(f64, StageTerms)> {
    let joint = batch.x_src.vstack(&batch.x_tgt)?;
    let (output, cache, running) = net::forward_train_cached(&model.params, &joint)?;
    let src_rows: Vec<usize> = (0..batch.y_src.len()).collect();
    let src_probs = output.probs_avg.select_rows(&src_rows);
    let ce = losses::weighted_ce(&src_probs, &batch.y_src, &model.class_weights)?;
    losses::group_dro(&ce.group_means, &mut model.dro);
    let spec = make_spec(model.dro.weights().to_vec());
    let (total, terms, grads) =
        net::backward_from_cache(&model.params, batch, &spec, &output, &cache).map_err(|e| {
            match e {
                CoreError::NonFinite(what) => CoreError::NonFinite(format!("{what} ({context})")),
                other => other,
            }
        })?;
    model.params.set_running(running);
    net::adam_step(&mut model.params, &grads, &mut model.opt);
    Ok((total, terms))
}

fn shuffled_order(n: usize, seed: u64, label: &str, parts: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rngutil::substream(seed, label, parts));
    order
}

fn require_labels<'a>(set: &'a DomainSet) -> Result<&'a [usize]> {
    set.labels
        .as_deref()
        .ok_or_else(|| CoreError::Config("source set has no labels".into()))
}

/// Stage 1: group-robust pre-training on the labeled source set.
pub fn pretrain(source: &DomainSet, cfg: &PipelineConfig) -> Result<(TrainedModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    source.validate()?;
    let labels = require_labels(source)?;
    let arch = cfg.net.resolve(source.features.cols())?;
    let class_weights = losses::inverse_frequency_weights(labels, arch.classes)?;
    let params = ModelParams::init(arch, cfg.seed)?;
    let opt = OptimizerState::new(
        params.theta().len(),
        cfg.train.learning_rate,
        cfg.train.weight_decay,
    );
    let mut model = TrainedModel {
        params,
        opt,
        dro: GroupDroState::new(arch.classes, cfg.dro.eta),
        class_weights,
    };

    let weights = cfg.loss;
    let mut records = Vec::new();
    for epoch in 1..=cfg.train.max_epoch_1 {
        let order = shuffled_order(source.len(), cfg.seed, "pretrain-shuffle", &[epoch as u64]);
        let mut stats = EpochStats::new();
        for (lo, hi) in batch_ranges(order.len(), cfg.train.batch_size) {
            let rows = &order[lo..hi];
            let batch = TrainBatch::source_only(
                source.features.select_rows(rows),
                rows.iter().map(|&i| labels[i]).collect(),
            );
            let cw = model.class_weights.clone();
            let (total, terms) = train_step(
                &mut model,
                &batch,
                &|q| LossSpec::Pretrain {
                    weights,
                    class_weights: cw.clone(),
                    q,
                },
                &format!("pretrain epoch {epoch}"),
            )?;
            stats.add(total, &terms);
        }
        records.push(stats.record("pretrain", 0, epoch));
    }
    Ok((model, records))
}

/// Stage 2: cluster shaping. Computes the pre-stage source centroids, trains
/// against them, then recomputes the full cluster statistics (fresh mean
/// classifier discrepancy) and the confident-target centroids.
pub fn cluster_stage(
    source: &DomainSet,
    target: &DomainSet,
    model: &mut TrainedModel,
    cfg: &PipelineConfig,
) -> Result<(ClusterStats, Vec<EpochRecord>)> {
    let labels = require_labels(source)?;
    let classes = model.params.arch().classes;

    let preds = clusterstats::predict_all(&model.params, &source.features)?;
    let feats = Mat::from_rows(&preds.iter().map(|p| p.feature.clone()).collect::<Vec<_>>())?;
    let anchors = clusterstats::centroids(&feats, labels, classes)?;

    let weights = cfg.loss;
    let mut records = Vec::new();
    for epoch in 1..=cfg.train.max_epoch_2 {
        let order = shuffled_order(source.len(), cfg.seed, "cluster-shuffle", &[epoch as u64]);
        let mut stats = EpochStats::new();
        for (lo, hi) in batch_ranges(order.len(), cfg.train.batch_size) {
            let rows = &order[lo..hi];
            let batch = TrainBatch::source_only(
                source.features.select_rows(rows),
                rows.iter().map(|&i| labels[i]).collect(),
            );
            let cw = model.class_weights.clone();
            let anchors_ref = anchors.clone();
            let (total, terms) = train_step(
                &mut *model,
                &batch,
                &|q| LossSpec::Cluster {
                    weights,
                    class_weights: cw.clone(),
                    q,
                    anchors: anchors_ref.clone(),
                },
                &format!("cluster epoch {epoch}"),
            )?;
            stats.add(total, &terms);
        }
        records.push(stats.record("cluster", 0, epoch));
    }

    let stats = clusterstats::compute_stats(
        &model.params,
        &source.features,
        labels,
        &target.features,
        classes,
        cfg.select.softmax_threshold,
        None,
    )?;
    Ok((stats, records))
}

/// The proximity condition: a target feature is a training candidate when it
/// sits strictly within `m_ctr + sigma/2` of its predicted class's source
/// centroid.
pub fn proximity_candidate(feature: &[f64], predicted: usize, stats: &ClusterStats) -> bool {
    let radius = stats.m_ctr[predicted] + stats.sigma[predicted] / 2.0;
    euclidean(feature, stats.cc_s.row(predicted)) < radius
}

/// Gradual proximity-guided selection over the remaining pool: a sample is a
/// candidate when it passes [`proximity_candidate`], and is selected when it
/// additionally passes all three confident-prediction criteria.
pub fn gptds_select(
    pool: &TargetPool,
    params: &ModelParams,
    stats: &ClusterStats,
    cfg: &PipelineConfig,
) -> Result<Selection> {
    if pool.is_empty() {
        return Ok(Selection {
            pool_positions: Vec::new(),
            samples: Vec::new(),
            candidates: 0,
        });
    }
    let preds = clusterstats::predict_all(params, &pool.features)?;
    let mut candidate_positions = Vec::new();
    for (pos, p) in preds.iter().enumerate() {
        if proximity_candidate(&p.feature, p.label, stats) {
            candidate_positions.push(pos);
        }
    }
    let mut pool_positions = Vec::new();
    let mut samples = Vec::new();
    for &pos in &candidate_positions {
        let p = &preds[pos];
        let k = p.label;
        let sure = p.max_prob > cfg.select.softmax_threshold;
        let close = euclidean(&p.feature, stats.cc_s.row(k)) < stats.m_ctr[k];
        let agreeing = p.discrepancy < stats.m_dis;
        if sure && close && agreeing {
            pool_positions.push(pos);
            samples.push((pool.indices[pos], k));
        }
    }
    Ok(Selection {
        pool_positions,
        samples,
        candidates: candidate_positions.len(),
    })
}

/// Stage 3: the adaptation loop. Each iteration selects reliable target
/// samples, removes them from the pool, trains on source batches with the
/// cumulative selected-target set appended round-robin, then refreshes the
/// centroid statistics (mean classifier discrepancy stays frozen).
pub fn adapt(
    source: &DomainSet,
    target: &DomainSet,
    model: &mut TrainedModel,
    stats: &mut ClusterStats,
    cfg: &PipelineConfig,
) -> Result<AdaptationTrace> {
    let labels = require_labels(source)?;
    let classes = model.params.arch().classes;
    let weights = cfg.loss;

    let mut pool = TargetPool::new(target);
    let mut cumulative_x: Vec<Vec<f64>> = Vec::new();
    let mut cumulative_y: Vec<usize> = Vec::new();
    let mut trace = AdaptationTrace::default();

    for iteration in 1..=cfg.train.max_itr {
        let selection = gptds_select(&pool, &model.params, stats, cfg)?;
        let mut per_class = vec![0usize; classes];
        for &(_, k) in &selection.samples {
            per_class[k] += 1;
        }
        if selection.samples.is_empty() {
            trace.iterations.push(IterationRecord {
                iteration,
                candidates: selection.candidates,
                selected: 0,
                selected_per_class: per_class,
                pool_remaining: pool.len(),
                epochs: Vec::new(),
            });
            break;
        }
        for &pos in &selection.pool_positions {
            cumulative_x.push(pool.features.row(pos).to_vec());
        }
        cumulative_y.extend(selection.samples.iter().map(|&(_, k)| k));
        pool.remove_positions(&selection.pool_positions);

        let mut epochs = Vec::new();
        for epoch in 1..=cfg.train.max_epoch_3 {
            let order = shuffled_order(
                source.len(),
                cfg.seed,
                "adapt-shuffle",
                &[iteration as u64, epoch as u64],
            );
            let ranges = batch_ranges(order.len(), cfg.train.batch_size);
            let n_batches = ranges.len().max(1);
            let mut stats_epoch = EpochStats::new();
            for (b, (lo, hi)) in ranges.iter().enumerate() {
                let rows = &order[*lo..*hi];
                // Every cumulative target sample appears in exactly one batch
                // per epoch, dealt round-robin.
                let tgt_rows: Vec<usize> = (0..cumulative_x.len())
                    .filter(|j| j % n_batches == b)
                    .collect();
                let x_tgt = if tgt_rows.is_empty() {
                    Mat::zeros(0, source.features.cols())
                } else {
                    Mat::from_rows(
                        &tgt_rows.iter().map(|&j| cumulative_x[j].clone()).collect::<Vec<_>>(),
                    )?
                };
                let batch = TrainBatch {
                    x_src: source.features.select_rows(rows),
                    y_src: rows.iter().map(|&i| labels[i]).collect(),
                    x_tgt,
                    y_tgt: tgt_rows.iter().map(|&j| cumulative_y[j]).collect(),
                };
                let cw = model.class_weights.clone();
                let (cc_s, cc_t, cc_m) = (stats.cc_s.clone(), stats.cc_t.clone(), stats.cc_m.clone());
                let (total, terms) = train_step(
                    &mut *model,
                    &batch,
                    &|q| LossSpec::Adapt {
                        weights,
                        class_weights: cw.clone(),
                        q,
                        cc_s: cc_s.clone(),
                        cc_t: cc_t.clone(),
                        cc_m: cc_m.clone(),
                    },
                    &format!("adapt iteration {iteration} epoch {epoch}"),
                )?;
                stats_epoch.add(total, &terms);
            }
            epochs.push(stats_epoch.record("adapt", iteration, epoch));
        }

        // Refresh centroid geometry for the next selection round; the mean
        // classifier discrepancy stays frozen at its cluster-stage value.
        *stats = clusterstats::compute_stats(
            &model.params,
            &source.features,
            labels,
            &target.features,
            classes,
            cfg.select.softmax_threshold,
            Some(stats.m_dis),
        )?;

        trace.iterations.push(IterationRecord {
            iteration,
            candidates: selection.candidates,
            selected: selection.samples.len(),
            selected_per_class: per_class,
            pool_remaining: pool.len(),
            epochs,
        });
    }
    Ok(trace)
}

/// FNV-1a over the parameter bits; used to compare checkpoints cheaply.
pub fn params_hash(params: &ModelParams) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |v: f64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for &v in params.theta() {
        eat(v);
    }
    let r = params.running();
    for vec in [&r.bn1_mean, &r.bn1_var, &r.bn2_mean, &r.bn2_var] {
        for &v in vec.iter() {
            eat(v);
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainOptions {
    pub run_cluster: bool,
    pub run_adapt: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            run_cluster: true,
            run_adapt: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub pretrain: Vec<EpochRecord>,
    pub cluster: Vec<EpochRecord>,
    pub adapt: AdaptationTrace,
    pub pretrain_params_hash: u64,
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub stats: Option<ClusterStats>,
    pub trace: RunTrace,
}

/// Stages 1-3 end to end, honoring the options (ablations switch stages off).
pub fn run_training(
    source: &DomainSet,
    target: &DomainSet,
    cfg: &PipelineConfig,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    let (mut model, pretrain_trace) = pretrain(source, cfg)?;
    let pretrain_params_hash = params_hash(&model.params);
    let mut trace = RunTrace {
        pretrain: pretrain_trace,
        pretrain_params_hash,
        ..RunTrace::default()
    };
    let mut stats = None;
    if opts.run_cluster {
        let (s, cluster_trace) = cluster_stage(source, target, &mut model, cfg)?;
        trace.cluster = cluster_trace;
        let mut s = s;
        if opts.run_adapt {
            trace.adapt = adapt(source, target, &mut model, &mut s, cfg)?;
        }
        stats = Some(s);
    }
    Ok(TrainOutcome {
        model,
        stats,
        trace,
    })
}
