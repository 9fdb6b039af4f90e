//! Cross-module behavior on small synthetic benchmarks: inference-mode
//! agreement and cost accounting, ablation wiring, band ablations, and
//! checkpoint resume identity.

use eegda_core::clusterstats::ClusterStats;
use eegda_core::dataio::{self, synth_benchmark, Checkpoint, DomainTag, SynthSpec};
use eegda_core::evalkit::{self, AblationVariant};
use eegda_core::linalg::Mat;
use eegda_core::losses::LossWeights;
use eegda_core::net::ModelParams;
use eegda_core::pctta::{self, InferMode};
use eegda_core::pipeline::{
    self, NetConfig, PipelineConfig, SelectConfig, TrainConfig, TrainOptions, TrainedModel,
};
use eegda_core::sigproc;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        channels: 4,
        n_source: 320,
        n_target: 320,
        seed,
        ..SynthSpec::default()
    }
}

fn small_cfg(seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        net: NetConfig {
            input_dim: 0,
            extractor: [16, 8],
            classifier: [8, 4],
            classes: 2,
        },
        train: TrainConfig {
            batch_size: 32,
            max_epoch_1: 8,
            max_epoch_2: 3,
            max_epoch_3: 2,
            max_itr: 3,
            ..TrainConfig::default()
        },
        loss: LossWeights {
            t_m: 3.0,
            ..LossWeights::default()
        },
        select: SelectConfig {
            softmax_threshold: 0.95,
        },
        ..PipelineConfig::default()
    }
}

#[test]
fn inference_modes_agree_where_specified_and_account_exactly() {
    let (source, target, truth) = synth_benchmark(&small_spec(5)).unwrap();
    let cfg = small_cfg(5);
    let outcome = pipeline::run_training(&source, &target, &cfg, TrainOptions::default()).unwrap();
    let bands = sigproc::bands_from_names(&target.bands);
    let n = cfg.tta.transform_count();

    let infer = |mode: InferMode| {
        pctta::batch_infer(
            &target.features,
            target.segments.as_ref().map(|s| s.map()),
            &outcome.model.params,
            outcome.stats.as_ref(),
            &bands,
            target.norm.as_ref(),
            &cfg.tta,
            mode,
            cfg.seed,
        )
        .unwrap()
    };

    let (no_labels, no_decisions, no_cost) = infer(InferMode::NoTta);
    assert_eq!(no_cost.augmented_passes, 0);
    assert_eq!(no_cost.gated_count, 0);
    assert!(no_decisions.iter().all(|d| !d.gated && d.votes.len() == 1));

    let (full_labels, full_decisions, full_cost) = infer(InferMode::FullTta);
    assert_eq!(full_cost.gated_count, target.len());
    assert_eq!(full_cost.augmented_passes, n * target.len());
    assert!(full_decisions.iter().all(|d| d.votes.len() == n + 1));

    let (pc_labels, pc_decisions, pc_cost) = infer(InferMode::PcTta);
    assert_eq!(pc_cost.augmented_passes, n * pc_cost.gated_count);
    assert!(pc_cost.gated_count <= target.len());

    for i in 0..target.len() {
        if pc_decisions[i].gated {
            // Gated samples see exactly the full-TTA votes.
            assert_eq!(pc_decisions[i].votes, full_decisions[i].votes);
            assert_eq!(pc_labels[i], full_labels[i]);
        } else {
            assert_eq!(pc_labels[i], no_labels[i]);
        }
    }

    // Deterministic per seed: repeating pc_tta reproduces every decision.
    let (again_labels, again_decisions, again_cost) = infer(InferMode::PcTta);
    assert_eq!(pc_labels, again_labels);
    assert_eq!(pc_decisions, again_decisions);
    assert_eq!(pc_cost.gated_count, again_cost.gated_count);

    let _ = truth;
}

#[test]
fn gated_sample_without_segment_is_an_error() {
    let (source, target, _) = synth_benchmark(&small_spec(6)).unwrap();
    let cfg = small_cfg(6);
    let (model, _) = pipeline::pretrain(&source, &cfg).unwrap();
    // Force the gate open for anything with nonzero disagreement.
    let dim = model.params.arch().feature_dim();
    let stats = ClusterStats {
        cc_s: Mat::zeros(2, dim),
        m_ctr: vec![1.0, 1.0],
        sigma: vec![1.0, 1.0],
        m_dis: 0.0,
        cc_t: Mat::zeros(2, dim),
        cc_m: Mat::zeros(2, dim),
    };
    let mut tta = cfg.tta.clone();
    tta.tau = 0.0;
    let bands = sigproc::bands_from_names(&target.bands);
    let err = pctta::batch_infer(
        &target.features,
        None, // no raw segments
        &model.params,
        Some(&stats),
        &bands,
        target.norm.as_ref(),
        &tta,
        InferMode::PcTta,
        cfg.seed,
    )
    .unwrap_err();
    assert!(err.to_string().contains("raw segments"), "{err}");
}

#[test]
fn ablation_variants_wire_the_stages_as_specified() {
    let (source, target, truth) = synth_benchmark(&small_spec(7)).unwrap();
    let cfg = small_cfg(7);
    let results = evalkit::ablate(&source, &target, &truth, &cfg).unwrap();
    assert_eq!(results.len(), 4);

    let get = |v: AblationVariant| results.iter().find(|(x, _)| *x == v).map(|(_, r)| r).unwrap();

    let a = get(AblationVariant::A);
    // Model A never runs adaptation or TTA code paths.
    assert!(a.trace.cluster.is_empty());
    assert!(a.trace.adapt.iterations.is_empty());
    assert!(a.stats.is_none());
    assert_eq!(a.report.cost.as_ref().unwrap().augmented_passes, 0);

    let c = get(AblationVariant::C);
    assert!(c.trace.adapt.iterations.len() <= 1);

    let d = get(AblationVariant::D);
    assert_eq!(d.report.cost.as_ref().unwrap().augmented_passes, 0);
    assert!(!d.trace.cluster.is_empty());

    // Identical seeds: every variant shares the pretrain checkpoint.
    let full = get(AblationVariant::Full);
    for r in [a, c, d] {
        assert_eq!(r.trace.pretrain_params_hash, full.trace.pretrain_params_hash);
    }

    // Metrics are internally consistent.
    for (_, r) in &results {
        assert_eq!(r.report.confusion.total() as usize, truth.len());
        assert_eq!(r.predictions.len(), truth.len());
    }
}

#[test]
fn band_ablation_finds_the_informative_band() {
    // Class signal lives solely in the beta band.
    let spec = SynthSpec {
        channels: 4,
        n_source: 240,
        n_target: 240,
        band_profiles: vec![
            vec![0.5, 0.5, 0.8, 0.4, 0.3],
            vec![0.5, 0.5, 0.8, 1.2, 0.3],
        ],
        target_gain: 1.2,
        target_mix: 0.2,
        target_extra_noise: 0.2,
        seed: 8,
        ..SynthSpec::default()
    };
    let (source, target, truth) = synth_benchmark(&spec).unwrap();
    let mut cfg = small_cfg(8);
    cfg.net.extractor = [12, 6];
    cfg.net.classifier = [6, 4];
    cfg.train.max_epoch_1 = 6;
    cfg.train.max_epoch_2 = 2;
    cfg.train.max_epoch_3 = 1;
    cfg.train.max_itr = 2;

    let reports = evalkit::band_ablation(&source, &target, &truth, &cfg).unwrap();
    assert_eq!(reports.len(), 6);
    let acc = |band: Option<sigproc::BandName>| {
        reports
            .iter()
            .find(|(b, _)| *b == band)
            .map(|(_, r)| r.accuracy)
            .unwrap()
    };
    let beta = acc(Some(sigproc::BandName::Beta));
    let delta = acc(Some(sigproc::BandName::Delta));
    assert!(
        beta > delta,
        "beta-band accuracy {beta} should beat delta-band {delta}"
    );
    // Single-band runs use width channels x 1; all-band runs channels x 5.
    let (_, all_report) = reports.last().unwrap();
    assert_eq!(all_report.confusion.total() as usize, truth.len());
}

#[test]
fn restored_checkpoint_continues_to_identical_results() {
    let (source, target, _) = synth_benchmark(&small_spec(9)).unwrap();
    let cfg = small_cfg(9);

    // Uninterrupted run.
    let direct = pipeline::run_training(&source, &target, &cfg, TrainOptions::default()).unwrap();

    // Interrupted run: pretrain, checkpoint to disk, restore, continue.
    let (model, _) = pipeline::pretrain(&source, &cfg).unwrap();
    let dir = tempfile::TempDir::new().unwrap();
    let path = dir.path().join("mid.ckpt");
    dataio::save_checkpoint(
        &Checkpoint {
            params: model.params.clone(),
            opt: Some(model.opt.clone()),
            dro: Some(model.dro.clone()),
            stats: None,
        },
        &path,
    )
    .unwrap();
    let restored = dataio::load_checkpoint(&path).unwrap();
    let mut resumed = TrainedModel {
        params: restored.params,
        opt: restored.opt.unwrap(),
        dro: restored.dro.unwrap(),
        class_weights: model.class_weights.clone(),
    };
    let (mut stats, _) =
        pipeline::cluster_stage(&source, &target, &mut resumed, &cfg).unwrap();
    pipeline::adapt(&source, &target, &mut resumed, &mut stats, &cfg).unwrap();

    assert_eq!(
        pipeline::params_hash(&direct.model.params),
        pipeline::params_hash(&resumed.params),
        "resumed run diverged from the uninterrupted run"
    );
    assert_eq!(direct.model.params.theta(), resumed.params.theta());
}

#[test]
fn share_source_normalization_flag_round_trips_through_featurization() {
    // With shared statistics the target features are normalized by the
    // source min/max instead of their own.
    let (source, target, _) = synth_benchmark(&small_spec(10)).unwrap();
    let src_norm = source.norm.clone().unwrap();

    let store = target.segments.clone().unwrap();
    let bands = sigproc::bands_from_names(&target.bands);
    let mut rows = Vec::new();
    for (_, seg) in store.map() {
        rows.push(sigproc::features(seg, &bands).unwrap().values);
    }
    let raw = Mat::from_rows(&rows).unwrap();
    let shared = sigproc::apply_normalizer(&src_norm, &raw);
    let refit = sigproc::apply_normalizer(&sigproc::fit_normalizer(&raw).unwrap(), &raw);
    assert_ne!(shared, refit);
    // Shared-stat features still clamp into [-1, 1].
    assert!(shared.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}
