//! Dataset containers, file formats, checkpoints, and the synthetic
//! domain-shift benchmark.
//!
//! Formats are little-endian and self-describing:
//! - feature files: magic `FEAT`, version, flags, band mask, n, d, then
//!   row-major f32 features and an optional trailing block of u16 labels;
//! - segment stores: magic `SEGS`, keyed by sample index;
//! - normalizer sidecars: magic `NORM`, per-feature f64 min/max;
//! - raw records: magic `RECS`, per-record label/rate/channel data;
//! - checkpoints: magic `CKPT`, versioned, bit-exact f64 state.

mod bytes;
pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use bytes::{Reader, Writer};

use crate::clusterstats::ClusterStats;
use crate::error::{CoreError, Result};
use crate::linalg::Mat;
use crate::losses::GroupDroState;
use crate::net::{ModelParams, NetArch, OptimizerState, RunningStats};
use crate::pipeline::PipelineConfig;
use crate::sigproc::{BandName, NormalizationTransform, SignalSegment};

pub use synth::{synth_benchmark, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

/// Raw segments keyed by sample index; all segments share one sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStore {
    sample_rate: f64,
    map: BTreeMap<usize, SignalSegment>,
}

impl SegmentStore {
    pub fn new(sample_rate: f64) -> Self {
        SegmentStore {
            sample_rate,
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, index: usize, segment: SignalSegment) -> Result<()> {
        if (segment.sample_rate() - self.sample_rate).abs() > 1e-9 {
            return Err(CoreError::InvalidSignal(format!(
                "segment rate {} differs from store rate {}",
                segment.sample_rate(),
                self.sample_rate
            )));
        }
        self.map.insert(index, segment);
        Ok(())
    }

    pub fn get(&self, index: usize) -> Option<&SignalSegment> {
        self.map.get(&index)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn map(&self) -> &BTreeMap<usize, SignalSegment> {
        &self.map
    }
}

/// One domain's data: normalized features, optional labels, optional raw
/// segments for TTA, and the normalization transform that produced the
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSet {
    pub features: Mat,
    pub labels: Option<Vec<usize>>,
    pub segments: Option<SegmentStore>,
    pub norm: Option<NormalizationTransform>,
    pub bands: Vec<BandName>,
    pub tag: DomainTag,
}

impl DomainSet {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(labels) = &self.labels {
            if labels.len() != self.features.rows() {
                return Err(CoreError::ShapeMismatch(format!(
                    "{} labels vs {} feature rows",
                    labels.len(),
                    self.features.rows()
                )));
            }
        }
        if let Some(segs) = &self.segments {
            if let Some((&k, _)) = segs.map.iter().next_back() {
                if k >= self.features.rows() {
                    return Err(CoreError::ShapeMismatch(format!(
                        "segment key {k} outside {} samples",
                        self.features.rows()
                    )));
                }
            }
        }
        if !self.features.is_finite() {
            return Err(CoreError::NonFinite("feature matrix".into()));
        }
        Ok(())
    }
}

const FEAT_MAGIC: &[u8; 4] = b"FEAT";
const SEGS_MAGIC: &[u8; 4] = b"SEGS";
const NORM_MAGIC: &[u8; 4] = b"NORM";
const RECS_MAGIC: &[u8; 4] = b"RECS";
const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const FORMAT_VERSION: u16 = 1;

fn band_mask(bands: &[BandName]) -> u8 {
    bands.iter().fold(0u8, |m, b| {
        m | (1 << BandName::ALL.iter().position(|x| x == b).unwrap())
    })
}

fn bands_from_mask(mask: u8) -> Vec<BandName> {
    BandName::ALL
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, &b)| b)
        .collect()
}

/// Write features (and labels, when present) to the binary feature format.
/// Values are stored as f32.
pub fn save_features(set: &DomainSet, path: &Path) -> Result<()> {
    set.validate()?;
    let mut w = Writer::new();
    w.bytes(FEAT_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(set.labels.is_some() as u8);
    w.u8(band_mask(&set.bands));
    w.u32(set.features.rows() as u32);
    w.u32(set.features.cols() as u32);
    for &v in set.features.data() {
        w.f32(v as f32);
    }
    if let Some(labels) = &set.labels {
        for &y in labels {
            if y > u16::MAX as usize {
                return Err(CoreError::ShapeMismatch(format!("label {y} exceeds u16")));
            }
            w.u16(y as u16);
        }
    }
    w.write_to(path)
}

/// Read a feature file. Errors name the byte offset of the first malformed
/// row or label.
pub fn load_features(path: &Path, tag: DomainTag) -> Result<DomainSet> {
    let mut r = Reader::open(path)?;
    r.expect_magic(FEAT_MAGIC)?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(r.err(format!(
            "feature format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let has_labels = r.u8()? != 0;
    let bands = bands_from_mask(r.u8()?);
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut data = Vec::with_capacity(n * d);
    for row in 0..n {
        for col in 0..d {
            let v = r.f32().map_err(|_| {
                r.err(format!(
                    "row {row} ends after {col} of {d} declared values"
                ))
            })?;
            data.push(v as f64);
        }
    }
    let features = Mat::from_vec(n, d, data)?;
    let labels = if has_labels {
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = r
                .u16()
                .map_err(|_| r.err(format!("label block ends at entry {i} of {n}")))?;
            labels.push(y as usize);
        }
        Some(labels)
    } else {
        None
    };
    r.expect_eof()?;
    let set = DomainSet {
        features,
        labels,
        segments: None,
        norm: None,
        bands,
        tag,
    };
    set.validate()?;
    Ok(set)
}

pub fn save_segments(store: &SegmentStore, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(SEGS_MAGIC);
    w.u16(FORMAT_VERSION);
    w.f64(store.sample_rate);
    w.u32(store.map.len() as u32);
    for (&idx, seg) in &store.map {
        w.u32(idx as u32);
        w.u16(seg.channel_count() as u16);
        w.u32(seg.len() as u32);
        for &v in seg.samples().data() {
            w.f32(v as f32);
        }
    }
    w.write_to(path)
}

pub fn load_segments(path: &Path) -> Result<SegmentStore> {
    let mut r = Reader::open(path)?;
    r.expect_magic(SEGS_MAGIC)?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(r.err(format!(
            "segment format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let rate = r.f64()?;
    let count = r.u32()? as usize;
    let mut store = SegmentStore::new(rate);
    for e in 0..count {
        let idx = r.u32()? as usize;
        let channels = r.u16()? as usize;
        let len = r.u32()? as usize;
        let mut data = Vec::with_capacity(channels * len);
        for _ in 0..channels * len {
            data.push(
                r.f32()
                    .map_err(|_| r.err(format!("segment entry {e} is truncated")))?
                    as f64,
            );
        }
        store.insert(idx, SignalSegment::new(Mat::from_vec(channels, len, data)?, rate)?)?;
    }
    r.expect_eof()?;
    Ok(store)
}

pub fn save_norm(norm: &NormalizationTransform, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(NORM_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u32(norm.min.len() as u32);
    for &v in &norm.min {
        w.f64(v);
    }
    for &v in &norm.max {
        w.f64(v);
    }
    w.write_to(path)
}

pub fn load_norm(path: &Path) -> Result<NormalizationTransform> {
    let mut r = Reader::open(path)?;
    r.expect_magic(NORM_MAGIC)?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(r.err(format!("norm format version {version}")));
    }
    let d = r.u32()? as usize;
    let mut min = Vec::with_capacity(d);
    let mut max = Vec::with_capacity(d);
    for _ in 0..d {
        min.push(r.f64()?);
    }
    for _ in 0..d {
        max.push(r.f64()?);
    }
    r.expect_eof()?;
    Ok(NormalizationTransform { min, max })
}

/// One continuous multi-channel recording, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub samples: Mat,
    pub sample_rate: f64,
    pub label: Option<usize>,
}

pub fn save_records(records: &[RawRecord], path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(RECS_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u32(records.len() as u32);
    for rec in records {
        w.u8(rec.label.is_some() as u8);
        w.u16(rec.label.unwrap_or(0) as u16);
        w.u16(rec.samples.rows() as u16);
        w.u32(rec.samples.cols() as u32);
        w.f64(rec.sample_rate);
        for &v in rec.samples.data() {
            w.f32(v as f32);
        }
    }
    w.write_to(path)
}

pub fn load_records(path: &Path) -> Result<Vec<RawRecord>> {
    let mut r = Reader::open(path)?;
    r.expect_magic(RECS_MAGIC)?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(r.err(format!("record format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for e in 0..count {
        let has_label = r.u8()? != 0;
        let label = r.u16()? as usize;
        let channels = r.u16()? as usize;
        let samples = r.u32()? as usize;
        let rate = r.f64()?;
        let mut data = Vec::with_capacity(channels * samples);
        for _ in 0..channels * samples {
            data.push(
                r.f32()
                    .map_err(|_| r.err(format!("record {e} is truncated")))? as f64,
            );
        }
        out.push(RawRecord {
            samples: Mat::from_vec(channels, samples, data)?,
            sample_rate: rate,
            label: has_label.then_some(label),
        });
    }
    r.expect_eof()?;
    Ok(out)
}

/// Full training state: model, optimizer, DRO weights, cluster statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: Option<OptimizerState>,
    pub dro: Option<GroupDroState>,
    pub stats: Option<ClusterStats>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(CKPT_MAGIC);
    w.u16(FORMAT_VERSION);
    let arch = ckpt.params.arch();
    for v in [
        arch.input,
        arch.extractor[0],
        arch.extractor[1],
        arch.classifier[0],
        arch.classifier[1],
        arch.classes,
    ] {
        w.u32(v as u32);
    }
    w.u32(ckpt.params.theta().len() as u32);
    w.f64_slice(ckpt.params.theta());
    let run = ckpt.params.running();
    for vec in [&run.bn1_mean, &run.bn1_var, &run.bn2_mean, &run.bn2_var] {
        w.u32(vec.len() as u32);
        w.f64_slice(vec);
    }
    w.u8(ckpt.opt.is_some() as u8);
    if let Some(opt) = &ckpt.opt {
        w.u64(opt.step);
        for v in [opt.lr, opt.weight_decay, opt.beta1, opt.beta2, opt.eps] {
            w.f64(v);
        }
        w.f64_slice(&opt.m);
        w.f64_slice(&opt.v);
    }
    w.u8(ckpt.dro.is_some() as u8);
    if let Some(dro) = &ckpt.dro {
        w.u32(dro.weights().len() as u32);
        w.f64(dro.eta());
        w.f64_slice(dro.weights());
    }
    w.u8(ckpt.stats.is_some() as u8);
    if let Some(stats) = &ckpt.stats {
        w.u32(stats.cc_s.rows() as u32);
        w.u32(stats.cc_s.cols() as u32);
        w.f64_slice(stats.cc_s.data());
        w.f64_slice(&stats.m_ctr);
        w.f64_slice(&stats.sigma);
        w.f64(stats.m_dis);
        w.f64_slice(stats.cc_t.data());
        w.f64_slice(stats.cc_m.data());
    }
    w.write_to(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::open(path)?;
    r.expect_magic(CKPT_MAGIC)?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(r.err(format!(
            "checkpoint version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let dims: Vec<usize> = (0..6)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let arch = NetArch {
        input: dims[0],
        extractor: [dims[1], dims[2]],
        classifier: [dims[3], dims[4]],
        classes: dims[5],
    };
    let theta_len = r.u32()? as usize;
    let theta = r.f64_vec(theta_len)?;
    let mut vecs = Vec::with_capacity(4);
    for _ in 0..4 {
        let len = r.u32()? as usize;
        vecs.push(r.f64_vec(len)?);
    }
    let running = RunningStats {
        bn2_var: vecs.pop().unwrap(),
        bn2_mean: vecs.pop().unwrap(),
        bn1_var: vecs.pop().unwrap(),
        bn1_mean: vecs.pop().unwrap(),
    };
    let params = ModelParams::from_parts(arch, theta, running)?;

    let opt = if r.u8()? != 0 {
        let step = r.u64()?;
        let lr = r.f64()?;
        let weight_decay = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let m = r.f64_vec(theta_len)?;
        let v = r.f64_vec(theta_len)?;
        Some(OptimizerState {
            m,
            v,
            step,
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        })
    } else {
        None
    };
    let dro = if r.u8()? != 0 {
        let k = r.u32()? as usize;
        let eta = r.f64()?;
        let q = r.f64_vec(k)?;
        Some(GroupDroState::from_weights(q, eta)?)
    } else {
        None
    };
    let stats = if r.u8()? != 0 {
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let cc_s = Mat::from_vec(k, dim, r.f64_vec(k * dim)?)?;
        let m_ctr = r.f64_vec(k)?;
        let sigma = r.f64_vec(k)?;
        let m_dis = r.f64()?;
        let cc_t = Mat::from_vec(k, dim, r.f64_vec(k * dim)?)?;
        let cc_m = Mat::from_vec(k, dim, r.f64_vec(k * dim)?)?;
        Some(ClusterStats {
            cc_s,
            m_ctr,
            sigma,
            m_dis,
            cc_t,
            cc_m,
        })
    } else {
        None
    };
    r.expect_eof()?;
    Ok(Checkpoint {
        params,
        opt,
        dro,
        stats,
    })
}

/// Label vectors (predictions, held-out truth) as a small JSON document.
pub fn save_labels(labels: &[usize], path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        labels: &'a [usize],
    }
    save_json(&Doc { labels }, path)
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    #[derive(Deserialize)]
    struct Doc {
        labels: Vec<usize>,
    }
    let doc: Doc = load_json(path)?;
    Ok(doc.labels)
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(value).map_err(|e| CoreError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    std::fs::write(path, body + "\n").map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = std::fs::read_to_string(path).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&body).map_err(|e| CoreError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Line-delimited JSON records (run traces, decision logs).
pub fn save_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut body = String::new();
    for item in items {
        body.push_str(&serde_json::to_string(item).map_err(|e| CoreError::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Parse a TOML pipeline configuration with flat dotted keys
/// (`loss.alpha = 0.5`, `tta.tau = 0.9`, ...). Unknown keys are errors.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let body = std::fs::read_to_string(path).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config(&body).map_err(|e| match e {
        CoreError::Config(msg) => CoreError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config(body: &str) -> Result<PipelineConfig> {
    toml::from_str(body).map_err(|e| CoreError::Config(e.to_string()))
}
