//! Subcommand implementations.

use std::path::Path;

use eegda_core::dataio::{self, Checkpoint, DomainSet, DomainTag};
use eegda_core::error::{CoreError, Result};
use eegda_core::evalkit;
use eegda_core::linalg::Mat;
use eegda_core::pctta::{self, InferMode};
use eegda_core::pipeline::{self, EpochRecord, IterationRecord, PipelineConfig, TrainOptions, TrainedModel};
use eegda_core::sigproc::{self, BandName};
use serde::Serialize;

use crate::manifest::ManifestWriter;
use crate::CommonArgs;

fn load_cfg(common: &CommonArgs) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => dataio::load_config(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sidecar(path: &Path, ext: &str) -> std::path::PathBuf {
    path.with_extension(ext)
}

/// Load a feature file plus whatever sidecars (.segs, .norm) sit next to it.
fn load_domain(path: &Path, tag: DomainTag) -> Result<DomainSet> {
    let mut set = dataio::load_features(path, tag)?;
    let segs = sidecar(path, "segs");
    if segs.exists() {
        set.segments = Some(dataio::load_segments(&segs)?);
    }
    let norm = sidecar(path, "norm");
    if norm.exists() {
        set.norm = Some(dataio::load_norm(&norm)?);
    }
    set.validate()?;
    Ok(set)
}

fn write_domain(set: &DomainSet, prefix: &Path) -> Result<Vec<String>> {
    let feat = sidecar(prefix, "feat");
    dataio::save_features(set, &feat)?;
    let mut written = vec![feat.file_name().unwrap().to_string_lossy().into_owned()];
    if let Some(store) = &set.segments {
        let p = sidecar(prefix, "segs");
        dataio::save_segments(store, &p)?;
        written.push(p.file_name().unwrap().to_string_lossy().into_owned());
    }
    if let Some(norm) = &set.norm {
        let p = sidecar(prefix, "norm");
        dataio::save_norm(norm, &p)?;
        written.push(p.file_name().unwrap().to_string_lossy().into_owned());
    }
    Ok(written)
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine<'a> {
    PretrainHash { hash: u64 },
    Epoch(&'a EpochRecord),
    Iteration(&'a IterationRecord),
}

fn write_trace(trace: &pipeline::RunTrace, path: &Path) -> Result<()> {
    let mut lines = vec![TraceLine::PretrainHash {
        hash: trace.pretrain_params_hash,
    }];
    lines.extend(trace.pretrain.iter().map(TraceLine::Epoch));
    lines.extend(trace.cluster.iter().map(TraceLine::Epoch));
    lines.extend(trace.adapt.iterations.iter().map(TraceLine::Iteration));
    dataio::save_jsonl(&lines, path)
}

fn parse_bands(spec: &str) -> Result<Vec<BandName>> {
    spec.split(',')
        .map(|s| BandName::parse(s.trim()))
        .collect()
}

pub fn featurize(
    common: &CommonArgs,
    input: &Path,
    out: &Path,
    bands: Option<&str>,
    norm_from: Option<&Path>,
    no_segments: bool,
    target: bool,
) -> Result<()> {
    let mut cfg = load_cfg(common)?;
    if let Some(spec) = bands {
        cfg.bands = parse_bands(spec)?;
        cfg.validate()?;
    }
    if cfg.norm.share_source_stats && norm_from.is_none() {
        return Err(CoreError::Config(
            "norm.share_source_stats is set: pass --norm-from with the source transform".into(),
        ));
    }
    let records = dataio::load_records(input)?;
    if records.is_empty() {
        return Err(CoreError::Config(format!(
            "{}: no records to featurize",
            input.display()
        )));
    }
    let labeled = records.iter().filter(|r| r.label.is_some()).count();
    if labeled != 0 && labeled != records.len() {
        return Err(CoreError::Config(format!(
            "{labeled} of {} records are labeled; label all or none",
            records.len()
        )));
    }

    let band_specs = sigproc::bands_from_names(&cfg.bands);
    let rate = records[0].sample_rate;
    let mut store = dataio::SegmentStore::new(rate);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (ri, record) in records.iter().enumerate() {
        if (record.sample_rate - rate).abs() > 1e-9 {
            return Err(CoreError::InvalidSignal(format!(
                "record {ri} has rate {}, expected {rate}",
                record.sample_rate
            )));
        }
        let filtered = if cfg.filter.enabled {
            sigproc::bandpass_with_order(
                &record.samples,
                record.sample_rate,
                cfg.filter.f_low,
                cfg.filter.f_high,
                cfg.filter.order,
            )?
        } else {
            record.samples.clone()
        };
        let segments = sigproc::segment(
            &filtered,
            record.sample_rate,
            cfg.filter.window_seconds,
            cfg.filter.step_seconds,
        )
        .map_err(|e| match e {
            CoreError::RecordTooShort { len, window } => CoreError::InvalidSignal(format!(
                "{}: record {ri}: record too short ({len} samples, window {window})",
                input.display()
            )),
            other => other,
        })?;
        for seg in segments {
            let idx = rows.len();
            rows.push(sigproc::features(&seg, &band_specs)?.values);
            if !no_segments {
                store.insert(idx, seg)?;
            }
            if let Some(y) = record.label {
                labels.push(y);
            }
        }
    }

    let raw = Mat::from_rows(&rows)?;
    let norm = match norm_from {
        Some(p) => dataio::load_norm(p)?,
        None => sigproc::fit_normalizer(&raw)?,
    };
    let features = sigproc::apply_normalizer(&norm, &raw);
    let set = DomainSet {
        features,
        labels: (labeled > 0).then_some(labels),
        segments: (!no_segments).then_some(store),
        norm: Some(norm),
        bands: cfg.bands.clone(),
        tag: if target { DomainTag::Target } else { DomainTag::Source },
    };
    set.validate()?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::Io {
                path: dir.display().to_string(),
                source: e,
            })?;
        }
    }
    write_domain(&set, out)?;
    println!(
        "featurized {} records into {} x {} features ({})",
        records.len(),
        set.features.rows(),
        set.features.cols(),
        sidecar(out, "feat").display()
    );
    Ok(())
}

pub fn synth(common: &CommonArgs, out: &Path) -> Result<()> {
    let cfg = load_cfg(common)?;
    let mut writer = ManifestWriter::start(out, "synth", &cfg, &[])?;
    let (source, target, truth) = dataio::synth_benchmark(&cfg.synth)?;
    let mut artifacts = write_domain(&source, &writer.path("source"))?;
    artifacts.extend(write_domain(&target, &writer.path("target"))?);
    dataio::save_labels(&truth, &writer.path("target_truth.json"))?;
    artifacts.push("target_truth.json".into());
    writer.mark("generate");
    println!(
        "synthetic benchmark: {} source / {} target samples, {} features",
        source.len(),
        target.len(),
        source.features.cols()
    );
    let refs: Vec<&str> = artifacts.iter().map(|s| s.as_str()).collect();
    writer.finish(&refs)
}

fn save_model_checkpoint(
    model: &TrainedModel,
    stats: Option<&eegda_core::clusterstats::ClusterStats>,
    path: &Path,
) -> Result<()> {
    dataio::save_checkpoint(
        &Checkpoint {
            params: model.params.clone(),
            opt: Some(model.opt.clone()),
            dro: Some(model.dro.clone()),
            stats: stats.cloned(),
        },
        path,
    )
}

fn infer_and_report(
    writer: &ManifestWriter,
    target: &DomainSet,
    truth: Option<&[usize]>,
    params: &eegda_core::net::ModelParams,
    stats: Option<&eegda_core::clusterstats::ClusterStats>,
    cfg: &PipelineConfig,
    mode: InferMode,
    artifacts: &mut Vec<String>,
) -> Result<()> {
    let bands = sigproc::bands_from_names(&target.bands);
    let (labels, decisions, cost) = pctta::batch_infer(
        &target.features,
        target.segments.as_ref().map(|s| s.map()),
        params,
        stats,
        &bands,
        target.norm.as_ref(),
        &cfg.tta,
        mode,
        cfg.seed,
    )?;
    dataio::save_labels(&labels, &writer.path("predictions.json"))?;
    dataio::save_jsonl(&decisions, &writer.path("decisions.jsonl"))?;
    artifacts.push("predictions.json".into());
    artifacts.push("decisions.jsonl".into());
    println!(
        "inference ({}): {} samples, {} gated, {} augmented passes ({:.2}s)",
        mode.as_str(),
        cost.total_samples,
        cost.gated_count,
        cost.augmented_passes,
        cost.wall_time_s
    );
    if let Some(truth) = truth {
        let classes = params.arch().classes;
        let mut report = evalkit::metrics(truth, &labels, classes)?;
        report.cost = Some(cost);
        dataio::save_json(&report, &writer.path("metrics.json"))?;
        artifacts.push("metrics.json".into());
        println!("accuracy: {:.4}", report.accuracy);
    }
    Ok(())
}

pub fn run(
    common: &CommonArgs,
    source: &Path,
    target: &Path,
    truth: Option<&Path>,
    out: &Path,
    mode: &str,
) -> Result<()> {
    let cfg = load_cfg(common)?;
    let mode = InferMode::parse(mode)?;
    let mut inputs = vec![("source", source), ("target", target)];
    if let Some(t) = truth {
        inputs.push(("truth", t));
    }
    let mut writer = ManifestWriter::start(out, "run", &cfg, &inputs)?;

    let source_set = load_domain(source, DomainTag::Source)?;
    let target_set = load_domain(target, DomainTag::Target)?;
    let truth_labels = truth.map(dataio::load_labels).transpose()?;
    writer.mark("load");

    let outcome = pipeline::run_training(&source_set, &target_set, &cfg, TrainOptions::default())?;
    writer.mark("train");

    let mut artifacts = vec!["checkpoint.ckpt".into(), "trace.jsonl".into()];
    save_model_checkpoint(&outcome.model, outcome.stats.as_ref(), &writer.path("checkpoint.ckpt"))?;
    write_trace(&outcome.trace, &writer.path("trace.jsonl"))?;
    infer_and_report(
        &writer,
        &target_set,
        truth_labels.as_deref(),
        &outcome.model.params,
        outcome.stats.as_ref(),
        &cfg,
        mode,
        &mut artifacts,
    )?;
    writer.mark("infer");
    let refs: Vec<&str> = artifacts.iter().map(|s| s.as_str()).collect();
    writer.finish(&refs)
}

pub fn pretrain(common: &CommonArgs, source: &Path, out: &Path) -> Result<()> {
    let cfg = load_cfg(common)?;
    let mut writer = ManifestWriter::start(out, "pretrain", &cfg, &[("source", source)])?;
    let source_set = load_domain(source, DomainTag::Source)?;
    let (model, epochs) = pipeline::pretrain(&source_set, &cfg)?;
    writer.mark("pretrain");
    save_model_checkpoint(&model, None, &writer.path("checkpoint.ckpt"))?;
    let trace = pipeline::RunTrace {
        pretrain: epochs,
        pretrain_params_hash: pipeline::params_hash(&model.params),
        ..Default::default()
    };
    write_trace(&trace, &writer.path("trace.jsonl"))?;
    println!("pretrained on {} samples", source_set.len());
    writer.finish(&["checkpoint.ckpt", "trace.jsonl"])
}

fn model_from_checkpoint(ckpt: Checkpoint, source: &DomainSet, cfg: &PipelineConfig) -> Result<TrainedModel> {
    let labels = source
        .labels
        .as_deref()
        .ok_or_else(|| CoreError::Config("source set has no labels".into()))?;
    let classes = ckpt.params.arch().classes;
    let class_weights = eegda_core::losses::inverse_frequency_weights(labels, classes)?;
    let theta_len = ckpt.params.theta().len();
    Ok(TrainedModel {
        opt: ckpt
            .opt
            .unwrap_or_else(|| eegda_core::net::OptimizerState::new(theta_len, cfg.train.learning_rate, cfg.train.weight_decay)),
        dro: ckpt
            .dro
            .unwrap_or_else(|| eegda_core::losses::GroupDroState::new(classes, cfg.dro.eta)),
        params: ckpt.params,
        class_weights,
    })
}

pub fn adapt(
    common: &CommonArgs,
    source: &Path,
    target: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = load_cfg(common)?;
    let mut writer = ManifestWriter::start(
        out,
        "adapt",
        &cfg,
        &[("source", source), ("target", target), ("checkpoint", checkpoint)],
    )?;
    let source_set = load_domain(source, DomainTag::Source)?;
    let target_set = load_domain(target, DomainTag::Target)?;
    let ckpt = dataio::load_checkpoint(checkpoint)?;
    let mut model = model_from_checkpoint(ckpt, &source_set, &cfg)?;
    let (mut stats, cluster_epochs) =
        pipeline::cluster_stage(&source_set, &target_set, &mut model, &cfg)?;
    writer.mark("cluster");
    let adapt_trace = pipeline::adapt(&source_set, &target_set, &mut model, &mut stats, &cfg)?;
    writer.mark("adapt");
    let selected: usize = adapt_trace.iterations.iter().map(|i| i.selected).sum();
    println!(
        "adaptation: {} iterations, {} target samples admitted",
        adapt_trace.iterations.len(),
        selected
    );
    save_model_checkpoint(&model, Some(&stats), &writer.path("checkpoint.ckpt"))?;
    let trace = pipeline::RunTrace {
        cluster: cluster_epochs,
        adapt: adapt_trace,
        pretrain_params_hash: 0,
        ..Default::default()
    };
    write_trace(&trace, &writer.path("trace.jsonl"))?;
    writer.finish(&["checkpoint.ckpt", "trace.jsonl"])
}

pub fn infer(
    common: &CommonArgs,
    target: &Path,
    checkpoint: &Path,
    truth: Option<&Path>,
    out: &Path,
    mode: &str,
) -> Result<()> {
    let cfg = load_cfg(common)?;
    let mode = InferMode::parse(mode)?;
    let mut inputs = vec![("target", target), ("checkpoint", checkpoint)];
    if let Some(t) = truth {
        inputs.push(("truth", t));
    }
    let mut writer = ManifestWriter::start(out, "infer", &cfg, &inputs)?;
    let target_set = load_domain(target, DomainTag::Target)?;
    let truth_labels = truth.map(dataio::load_labels).transpose()?;
    let ckpt = dataio::load_checkpoint(checkpoint)?;
    let mut artifacts = Vec::new();
    infer_and_report(
        &writer,
        &target_set,
        truth_labels.as_deref(),
        &ckpt.params,
        ckpt.stats.as_ref(),
        &cfg,
        mode,
        &mut artifacts,
    )?;
    writer.mark("infer");
    let refs: Vec<&str> = artifacts.iter().map(|s| s.as_str()).collect();
    writer.finish(&refs)
}

#[derive(Serialize)]
struct AblationEntry {
    variant: String,
    report: evalkit::MetricsReport,
    adapt_iterations: usize,
    selected_total: usize,
    pretrain_params_hash: u64,
}

pub fn ablate(
    common: &CommonArgs,
    source: &Path,
    target: &Path,
    truth: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = load_cfg(common)?;
    let mut writer = ManifestWriter::start(
        out,
        "ablate",
        &cfg,
        &[("source", source), ("target", target), ("truth", truth)],
    )?;
    let source_set = load_domain(source, DomainTag::Source)?;
    let target_set = load_domain(target, DomainTag::Target)?;
    let truth_labels = dataio::load_labels(truth)?;
    writer.mark("load");
    let results = evalkit::ablate(&source_set, &target_set, &truth_labels, &cfg)?;
    writer.mark("ablate");
    let entries: Vec<AblationEntry> = results
        .iter()
        .map(|(variant, r)| AblationEntry {
            variant: variant.as_str().to_string(),
            report: r.report.clone(),
            adapt_iterations: r.trace.adapt.iterations.len(),
            selected_total: r.trace.adapt.iterations.iter().map(|i| i.selected).sum(),
            pretrain_params_hash: r.trace.pretrain_params_hash,
        })
        .collect();
    dataio::save_json(&entries, &writer.path("ablation_report.json"))?;
    for e in &entries {
        let cost = e.report.cost.as_ref().unwrap();
        println!(
            "model {:>4}: accuracy {:.4}, augmented passes {}",
            e.variant, e.report.accuracy, cost.augmented_passes
        );
    }
    writer.finish(&["ablation_report.json"])
}

pub fn eval(common: &CommonArgs, pred: &Path, truth: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_cfg(common)?;
    let predictions = dataio::load_labels(pred)?;
    let truth_labels = dataio::load_labels(truth)?;
    let classes = predictions
        .iter()
        .chain(&truth_labels)
        .max()
        .map(|&m| m + 1)
        .unwrap_or(cfg.net.classes)
        .max(cfg.net.classes);
    let report = evalkit::metrics(&truth_labels, &predictions, classes)?;
    println!("accuracy: {:.4}", report.accuracy);
    for (k, c) in report.per_class.iter().enumerate() {
        println!(
            "class {k}: sensitivity {:.4}, ppv {:.4}, f1 {:.4}",
            c.sensitivity, c.ppv, c.f1
        );
    }
    if let Some(path) = out {
        dataio::save_json(&report, path)?;
    }
    Ok(())
}
