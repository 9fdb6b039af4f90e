//! The fixed architecture: a two-layer fully connected feature extractor with
//! batch normalization, followed by two parallel three-layer classifiers.
//! Forward passes, exact reverse-mode gradients for every stage objective,
//! and Adam updates with decoupled weight decay.
//!
//! Parameters live in one flat `theta` vector (see [`Layout`]); gradients,
//! optimizer moments, and checkpoints all share that layout.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::{euclidean, matmul, matmul_nt, matmul_tn, Mat};
use crate::losses::{self, LossSpec, StageTerms};
use crate::rngutil;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const NORM_GUARD: f64 = 1e-12;

/// Layer widths. The defaults are sized so the total trainable parameter
/// count is exactly 34,288 for a 160-dimensional input and 2 classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetArch {
    pub input: usize,
    pub extractor: [usize; 2],
    pub classifier: [usize; 2],
    pub classes: usize,
}

impl Default for NetArch {
    fn default() -> Self {
        NetArch {
            input: 160,
            extractor: [126, 64],
            classifier: [32, 19],
            classes: 2,
        }
    }
}

const fn dense_params(inputs: usize, outputs: usize) -> usize {
    inputs * outputs + outputs
}

impl NetArch {
    pub fn feature_dim(&self) -> usize {
        self.extractor[1]
    }

    /// Trainable scalars: dense weights and biases plus batch-norm scale and
    /// shift (running statistics are buffers, not parameters).
    pub fn parameter_count(&self) -> usize {
        let [h1, h2] = self.extractor;
        let [c1, c2] = self.classifier;
        dense_params(self.input, h1)
            + 2 * h1
            + dense_params(h1, h2)
            + 2 * h2
            + 2 * (dense_params(h2, c1) + dense_params(c1, c2) + dense_params(c2, self.classes))
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.input,
            self.extractor[0],
            self.extractor[1],
            self.classifier[0],
            self.classifier[1],
            self.classes,
        ];
        if all.iter().any(|&w| w == 0) {
            return Err(CoreError::Config("network widths must be nonzero".into()));
        }
        if self.classes < 2 {
            return Err(CoreError::Config("need at least 2 classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct DenseSlot {
    w: (usize, usize), // (offset, len); shape inputs x outputs, row-major
    b: (usize, usize),
    inputs: usize,
    outputs: usize,
}

/// Offsets of every trainable slot inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    ext1: DenseSlot,
    bn1_gamma: Range<usize>,
    bn1_beta: Range<usize>,
    ext2: DenseSlot,
    bn2_gamma: Range<usize>,
    bn2_beta: Range<usize>,
    cls: [[DenseSlot; 3]; 2],
    total: usize,
}

impl Layout {
    fn new(arch: &NetArch) -> Layout {
        let mut cursor = 0usize;
        let mut dense = |inputs: usize, outputs: usize| {
            let w = (cursor, inputs * outputs);
            cursor += inputs * outputs;
            let b = (cursor, outputs);
            cursor += outputs;
            DenseSlot {
                w,
                b,
                inputs,
                outputs,
            }
        };
        let [h1, h2] = arch.extractor;
        let [c1, c2] = arch.classifier;
        let ext1 = dense(arch.input, h1);
        let mut range = |len: usize| {
            let r = cursor..cursor + len;
            cursor += len;
            r
        };
        let bn1_gamma = range(h1);
        let bn1_beta = range(h1);
        let mut dense = |inputs: usize, outputs: usize| {
            let w = (cursor, inputs * outputs);
            cursor += inputs * outputs;
            let b = (cursor, outputs);
            cursor += outputs;
            DenseSlot {
                w,
                b,
                inputs,
                outputs,
            }
        };
        let ext2 = dense(h1, h2);
        let mut range = |len: usize| {
            let r = cursor..cursor + len;
            cursor += len;
            r
        };
        let bn2_gamma = range(h2);
        let bn2_beta = range(h2);
        let mut dense = |inputs: usize, outputs: usize| {
            let w = (cursor, inputs * outputs);
            cursor += inputs * outputs;
            let b = (cursor, outputs);
            cursor += outputs;
            DenseSlot {
                w,
                b,
                inputs,
                outputs,
            }
        };
        let cls = [0, 1].map(|_| {
            [
                dense(h2, c1),
                dense(c1, c2),
                dense(c2, arch.classes),
            ]
        });
        Layout {
            ext1,
            bn1_gamma,
            bn1_beta,
            ext2,
            bn2_gamma,
            bn2_beta,
            cls,
            total: cursor,
        }
    }
}

/// Batch-norm running statistics (buffers, not trainable).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub bn1_mean: Vec<f64>,
    pub bn1_var: Vec<f64>,
    pub bn2_mean: Vec<f64>,
    pub bn2_var: Vec<f64>,
}

impl RunningStats {
    fn fresh(arch: &NetArch) -> Self {
        RunningStats {
            bn1_mean: vec![0.0; arch.extractor[0]],
            bn1_var: vec![1.0; arch.extractor[0]],
            bn2_mean: vec![0.0; arch.extractor[1]],
            bn2_var: vec![1.0; arch.extractor[1]],
        }
    }
}

/// All weights, biases, and batch-norm state of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: NetArch,
    theta: Vec<f64>,
    running: RunningStats,
}

impl ModelParams {
    /// He-style uniform fan-in initialization from a seeded generator;
    /// biases zero, batch-norm scale 1 / shift 0.
    pub fn init(arch: NetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut theta = vec![0.0; layout.total];
        let mut rng = rngutil::stream(seed, "net-init");
        let mut fill_dense = |theta: &mut [f64], slot: &DenseSlot| {
            let bound = (6.0 / slot.inputs as f64).sqrt();
            for v in &mut theta[slot.w.0..slot.w.0 + slot.w.1] {
                *v = rngutil_uniform(&mut rng, -bound, bound);
            }
        };
        fill_dense(&mut theta, &layout.ext1);
        fill_dense(&mut theta, &layout.ext2);
        for c in &layout.cls {
            for slot in c {
                fill_dense(&mut theta, slot);
            }
        }
        theta[layout.bn1_gamma.clone()].fill(1.0);
        theta[layout.bn2_gamma.clone()].fill(1.0);
        Ok(ModelParams {
            running: RunningStats::fresh(&arch),
            arch,
            theta,
        })
    }

    pub fn from_parts(arch: NetArch, theta: Vec<f64>, running: RunningStats) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if theta.len() != layout.total {
            return Err(CoreError::ShapeMismatch(format!(
                "theta has {} values, architecture needs {}",
                theta.len(),
                layout.total
            )));
        }
        if running.bn1_mean.len() != arch.extractor[0]
            || running.bn1_var.len() != arch.extractor[0]
            || running.bn2_mean.len() != arch.extractor[1]
            || running.bn2_var.len() != arch.extractor[1]
        {
            return Err(CoreError::ShapeMismatch("running stats shape".into()));
        }
        if running.bn1_var.iter().chain(&running.bn2_var).any(|&v| v <= 0.0) {
            return Err(CoreError::InvalidSignal(
                "running variances must be positive".into(),
            ));
        }
        Ok(ModelParams {
            arch,
            theta,
            running,
        })
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn running(&self) -> &RunningStats {
        &self.running
    }

    pub fn set_running(&mut self, running: RunningStats) {
        self.running = running;
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.arch)
    }
}

fn rngutil_uniform<R: rand::Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Every trainable scalar of the model.
pub fn parameter_count(params: &ModelParams) -> usize {
    params.theta.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

/// Per-batch network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub features: Mat,
    pub logits1: Mat,
    pub logits2: Mat,
    pub probs1: Mat,
    pub probs2: Mat,
    pub probs_avg: Mat,
}

struct ClsCache {
    u1: Mat,
    au1: Mat,
    u2: Mat,
    au2: Mat,
    probs: Mat,
}

pub(crate) struct Cache {
    x: Mat,
    xhat1: Mat,
    inv_std1: Vec<f64>,
    y1: Mat,
    a1: Mat,
    xhat2: Mat,
    inv_std2: Vec<f64>,
    y2: Mat,
    a2: Mat,
    cls: [ClsCache; 2],
}

fn dense_fwd(x: &Mat, theta: &[f64], slot: &DenseSlot) -> Mat {
    let mut out = Mat::zeros(x.rows(), slot.outputs);
    matmul(
        x.data(),
        &theta[slot.w.0..slot.w.0 + slot.w.1],
        x.rows(),
        slot.inputs,
        slot.outputs,
        out.data_mut(),
    );
    let bias = &theta[slot.b.0..slot.b.0 + slot.b.1];
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    out
}

fn relu(m: &Mat) -> Mat {
    let mut out = m.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn column_mean_var(m: &Mat) -> (Vec<f64>, Vec<f64>) {
    let b = m.rows() as f64;
    let mut mean = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (s, &v) in mean.iter_mut().zip(m.row(r)) {
            *s += v;
        }
    }
    for s in &mut mean {
        *s /= b;
    }
    let mut var = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for ((s, &v), &mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    for s in &mut var {
        *s /= b;
    }
    (mean, var)
}

fn bn_normalize(z: &Mat, mean: &[f64], var: &[f64]) -> (Mat, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = z.clone();
    for r in 0..xhat.rows() {
        for ((v, &mu), &is) in xhat.row_mut(r).iter_mut().zip(mean).zip(&inv_std) {
            *v = (*v - mu) * is;
        }
    }
    (xhat, inv_std)
}

fn bn_scale_shift(xhat: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    let mut y = xhat.clone();
    for r in 0..y.rows() {
        for ((v, &g), &b) in y.row_mut(r).iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    }
    y
}

fn classifier_fwd(features: &Mat, theta: &[f64], slots: &[DenseSlot; 3]) -> (ClsCache, Mat) {
    let u1 = dense_fwd(features, theta, &slots[0]);
    let au1 = relu(&u1);
    let u2 = dense_fwd(&au1, theta, &slots[1]);
    let au2 = relu(&u2);
    let logits = dense_fwd(&au2, theta, &slots[2]);
    let probs = softmax_rows(&logits);
    (
        ClsCache {
            u1,
            au1,
            u2,
            au2,
            probs,
        },
        logits,
    )
}

fn check_batch(params: &ModelParams, batch: &Mat, mode: ForwardMode) -> Result<()> {
    if batch.cols() != params.arch.input {
        return Err(CoreError::ShapeMismatch(format!(
            "batch has {} columns, network input is {}",
            batch.cols(),
            params.arch.input
        )));
    }
    if mode == ForwardMode::Train && batch.rows() < 2 {
        return Err(CoreError::InvalidSignal(
            "train-mode forward needs a batch of at least 2 (batch-norm statistics)".into(),
        ));
    }
    if batch.rows() == 0 {
        return Err(CoreError::ShapeMismatch("empty batch".into()));
    }
    if !batch.is_finite() {
        return Err(CoreError::NonFinite("network input".into()));
    }
    Ok(())
}

fn avg_probs(p1: &Mat, p2: &Mat) -> Mat {
    let mut avg = p1.clone();
    for (a, &b) in avg.data_mut().iter_mut().zip(p2.data()) {
        *a = (*a + b) / 2.0;
    }
    avg
}

/// Train-mode forward with batch statistics. Returns the proposed running-
/// statistic update without committing it.
pub(crate) fn forward_train_cached(
    params: &ModelParams,
    batch: &Mat,
) -> Result<(ForwardOutput, Cache, RunningStats)> {
    check_batch(params, batch, ForwardMode::Train)?;
    let layout = params.layout();
    let theta = &params.theta;

    let z1 = dense_fwd(batch, theta, &layout.ext1);
    let (mean1, var1) = column_mean_var(&z1);
    let (xhat1, inv_std1) = bn_normalize(&z1, &mean1, &var1);
    let y1 = bn_scale_shift(&xhat1, &theta[layout.bn1_gamma.clone()], &theta[layout.bn1_beta.clone()]);
    let a1 = relu(&y1);

    let z2 = dense_fwd(&a1, theta, &layout.ext2);
    let (mean2, var2) = column_mean_var(&z2);
    let (xhat2, inv_std2) = bn_normalize(&z2, &mean2, &var2);
    let y2 = bn_scale_shift(&xhat2, &theta[layout.bn2_gamma.clone()], &theta[layout.bn2_beta.clone()]);
    let a2 = relu(&y2);

    let (c1, logits1) = classifier_fwd(&a2, theta, &layout.cls[0]);
    let (c2, logits2) = classifier_fwd(&a2, theta, &layout.cls[1]);
    let probs_avg = avg_probs(&c1.probs, &c2.probs);

    let mut running = params.running.clone();
    let blend = |run: &mut [f64], batch_stat: &[f64]| {
        for (r, &b) in run.iter_mut().zip(batch_stat) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    };
    blend(&mut running.bn1_mean, &mean1);
    blend(&mut running.bn1_var, &var1);
    blend(&mut running.bn2_mean, &mean2);
    blend(&mut running.bn2_var, &var2);

    let output = ForwardOutput {
        features: a2.clone(),
        logits1,
        logits2,
        probs1: c1.probs.clone(),
        probs2: c2.probs.clone(),
        probs_avg,
    };
    let cache = Cache {
        x: batch.clone(),
        xhat1,
        inv_std1,
        y1,
        a1,
        xhat2,
        inv_std2,
        y2,
        a2,
        cls: [c1, c2],
    };
    Ok((output, cache, running))
}

/// Eval-mode forward using running statistics. Pure: no state is touched.
pub fn forward_eval(params: &ModelParams, batch: &Mat) -> Result<ForwardOutput> {
    check_batch(params, batch, ForwardMode::Eval)?;
    let layout = params.layout();
    let theta = &params.theta;
    let run = &params.running;

    let z1 = dense_fwd(batch, theta, &layout.ext1);
    let (xhat1, _) = bn_normalize(&z1, &run.bn1_mean, &run.bn1_var);
    let y1 = bn_scale_shift(&xhat1, &theta[layout.bn1_gamma.clone()], &theta[layout.bn1_beta.clone()]);
    let a1 = relu(&y1);

    let z2 = dense_fwd(&a1, theta, &layout.ext2);
    let (xhat2, _) = bn_normalize(&z2, &run.bn2_mean, &run.bn2_var);
    let y2 = bn_scale_shift(&xhat2, &theta[layout.bn2_gamma.clone()], &theta[layout.bn2_beta.clone()]);
    let a2 = relu(&y2);

    let (c1, logits1) = classifier_fwd(&a2, theta, &layout.cls[0]);
    let (c2, logits2) = classifier_fwd(&a2, theta, &layout.cls[1]);
    let probs_avg = avg_probs(&c1.probs, &c2.probs);

    Ok(ForwardOutput {
        features: a2,
        logits1,
        logits2,
        probs1: c1.probs,
        probs2: c2.probs,
        probs_avg,
    })
}

/// Forward pass in the requested mode; train mode commits the running-
/// statistic update.
pub fn forward(params: &mut ModelParams, batch: &Mat, mode: ForwardMode) -> Result<ForwardOutput> {
    match mode {
        ForwardMode::Eval => forward_eval(params, batch),
        ForwardMode::Train => {
            let (out, _, running) = forward_train_cached(params, batch)?;
            params.running = running;
            Ok(out)
        }
    }
}

/// One training batch: labeled source rows plus (during adaptation)
/// pseudo-labeled target rows. The forward pass runs on all rows jointly.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x_src: Mat,
    pub y_src: Vec<usize>,
    pub x_tgt: Mat,
    pub y_tgt: Vec<usize>,
}

impl TrainBatch {
    pub fn source_only(x_src: Mat, y_src: Vec<usize>) -> Self {
        let d = x_src.cols();
        TrainBatch {
            x_src,
            y_src,
            x_tgt: Mat::zeros(0, d),
            y_tgt: Vec::new(),
        }
    }
}

pub struct BackwardOutcome {
    pub total: f64,
    pub terms: StageTerms,
    pub grads: Vec<f64>,
    pub running: RunningStats,
    pub output: ForwardOutput,
}

struct Seeds {
    d_probs1: Mat,
    d_probs2: Mat,
    d_features: Mat,
    terms: StageTerms,
    total: f64,
}

/// Per-class batch centroids over the rows `rows..rows+len` of `features`
/// whose label is `k`; returns (centroid, member row indices) per class.
fn batch_class_centroids(
    features: &Mat,
    labels: &[usize],
    row_offset: usize,
    classes: usize,
) -> Vec<Option<(Vec<f64>, Vec<usize>)>> {
    let mut out: Vec<Option<(Vec<f64>, Vec<usize>)>> = vec![None; classes];
    for (i, &y) in labels.iter().enumerate() {
        let row = features.row(row_offset + i);
        let entry = out[y].get_or_insert_with(|| (vec![0.0; features.cols()], Vec::new()));
        for (s, &v) in entry.0.iter_mut().zip(row) {
            *s += v;
        }
        entry.1.push(row_offset + i);
    }
    for e in out.iter_mut().flatten() {
        let n = e.1.len() as f64;
        for s in &mut e.0 {
            *s /= n;
        }
    }
    out
}

/// Weighted-CE seed: group-DRO weighted cross-entropy on the averaged
/// classifier output over the source rows. Returns the scalar term and adds
/// seeds into both probability adjoints.
fn seed_classification(
    probs_avg: &Mat,
    y_src: &[usize],
    class_weights: &[f64],
    q: &[f64],
    d_probs1: &mut Mat,
    d_probs2: &mut Mat,
) -> Result<f64> {
    let k = class_weights.len();
    let mut group_sum = vec![0.0; k];
    let mut group_n = vec![0usize; k];
    for (i, &y) in y_src.iter().enumerate() {
        if y >= k {
            return Err(CoreError::ShapeMismatch(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let p = probs_avg.get(i, y).max(losses::PROB_CLAMP);
        group_sum[y] += -class_weights[y] * p.ln();
        group_n[y] += 1;
    }
    let mut l_cls = 0.0;
    for g in 0..k {
        if group_n[g] > 0 {
            l_cls += q[g] * group_sum[g] / group_n[g] as f64;
        }
    }
    for (i, &y) in y_src.iter().enumerate() {
        let p = probs_avg.get(i, y);
        if p < losses::PROB_CLAMP {
            continue; // clamped: flat region, zero gradient
        }
        let coeff = q[y] / group_n[y] as f64 * (-class_weights[y] / p);
        // probs_avg = (p1 + p2) / 2
        *d_probs1.row_mut(i).get_mut(y).unwrap() += 0.5 * coeff;
        *d_probs2.row_mut(i).get_mut(y).unwrap() += 0.5 * coeff;
    }
    Ok(l_cls)
}

/// Compacting seed: sum over the given rows of the distance between the
/// feature and its (frozen) anchor centroid.
fn seed_compacting(
    features: &Mat,
    labels: &[usize],
    row_offset: usize,
    anchors: &Mat,
    weight: f64,
    d_features: &mut Mat,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= anchors.rows() {
            return Err(CoreError::MissingCentroid(y));
        }
        let r = row_offset + i;
        let d = euclidean(features.row(r), anchors.row(y));
        total += d;
        if d > NORM_GUARD {
            let anchor = anchors.row(y).to_vec();
            for ((g, &f), &a) in d_features.row_mut(r).iter_mut().zip(features.row(r)).zip(&anchor)
            {
                *g += weight * (f - a) / d;
            }
        }
    }
    Ok(total)
}

/// Separating seed: hinge over ordered pairs of the per-class batch
/// centroids; the gradient flows through the centroids into the features.
fn seed_separating(
    features: &Mat,
    centroids: &[Option<(Vec<f64>, Vec<usize>)>],
    t_m: f64,
    weight: f64,
    d_features: &mut Mat,
) -> f64 {
    let present: Vec<usize> = (0..centroids.len())
        .filter(|&k| centroids[k].is_some())
        .collect();
    let dim = features.cols();
    let mut total = 0.0;
    let mut d_cents: Vec<Vec<f64>> = vec![vec![0.0; dim]; centroids.len()];
    for (ai, &a) in present.iter().enumerate() {
        for &b in &present[ai + 1..] {
            let ca = &centroids[a].as_ref().unwrap().0;
            let cb = &centroids[b].as_ref().unwrap().0;
            let d = euclidean(ca, cb);
            if d < t_m {
                total += 2.0 * (t_m - d); // both ordered pairs
                if d > NORM_GUARD {
                    for j in 0..dim {
                        let g = (ca[j] - cb[j]) / d;
                        d_cents[a][j] -= 2.0 * weight * g;
                        d_cents[b][j] += 2.0 * weight * g;
                    }
                }
            }
        }
    }
    for &k in &present {
        let (_, members) = centroids[k].as_ref().unwrap();
        let n = members.len() as f64;
        for &r in members {
            for (g, &dc) in d_features.row_mut(r).iter_mut().zip(&d_cents[k]) {
                *g += dc / n;
            }
        }
    }
    total
}

/// Distributes a gradient on a batch centroid back onto its member rows.
fn spread_centroid_grad(
    d_cent: &[f64],
    members: &[usize],
    scale: f64,
    d_features: &mut Mat,
) {
    let n = members.len() as f64;
    for &r in members {
        for (g, &dc) in d_features.row_mut(r).iter_mut().zip(d_cent) {
            *g += scale * dc / n;
        }
    }
}

fn eval_loss_and_seeds(
    arch: &NetArch,
    output: &ForwardOutput,
    batch: &TrainBatch,
    spec: &LossSpec,
) -> Result<Seeds> {
    let b_total = output.probs_avg.rows();
    let b_src = batch.y_src.len();
    let k = arch.classes;
    let mut d_probs1 = Mat::zeros(b_total, k);
    let mut d_probs2 = Mat::zeros(b_total, k);
    let mut d_features = Mat::zeros(b_total, arch.feature_dim());

    let seeds = match spec {
        LossSpec::Pretrain {
            weights,
            class_weights,
            q,
        } => {
            let l_cls = seed_classification(
                &output.probs_avg,
                &batch.y_src,
                class_weights,
                q,
                &mut d_probs1,
                &mut d_probs2,
            )?;
            // Mean classifier discrepancy over the whole batch.
            let mut l_dis = 0.0;
            for i in 0..b_total {
                let d = euclidean(output.probs1.row(i), output.probs2.row(i));
                l_dis += d;
                if d > NORM_GUARD {
                    let coeff = weights.alpha / (b_total as f64 * d);
                    for j in 0..k {
                        let diff = output.probs1.get(i, j) - output.probs2.get(i, j);
                        *d_probs1.row_mut(i).get_mut(j).unwrap() += coeff * diff;
                        *d_probs2.row_mut(i).get_mut(j).unwrap() -= coeff * diff;
                    }
                }
            }
            l_dis /= b_total as f64;
            let terms = StageTerms::Pretrain { l_cls, l_dis };
            Seeds {
                total: losses::stage_total(&terms, weights),
                terms,
                d_probs1,
                d_probs2,
                d_features,
            }
        }
        LossSpec::Cluster {
            weights,
            class_weights,
            q,
            anchors,
        } => {
            let l_cls = seed_classification(
                &output.probs_avg,
                &batch.y_src,
                class_weights,
                q,
                &mut d_probs1,
                &mut d_probs2,
            )?;
            let l_comp = seed_compacting(
                &output.features,
                &batch.y_src,
                0,
                anchors,
                weights.gamma1,
                &mut d_features,
            )?;
            let cents = batch_class_centroids(&output.features, &batch.y_src, 0, k);
            let l_sep =
                seed_separating(&output.features, &cents, weights.t_m, weights.gamma2, &mut d_features);
            let terms = StageTerms::Cluster { l_cls, l_comp, l_sep };
            Seeds {
                total: losses::stage_total(&terms, weights),
                terms,
                d_probs1,
                d_probs2,
                d_features,
            }
        }
        LossSpec::Adapt {
            weights,
            class_weights,
            q,
            cc_s,
            cc_t,
            cc_m,
        } => {
            let l_cls = seed_classification(
                &output.probs_avg,
                &batch.y_src,
                class_weights,
                q,
                &mut d_probs1,
                &mut d_probs2,
            )?;
            let l_comp_s = seed_compacting(
                &output.features,
                &batch.y_src,
                0,
                cc_s,
                weights.beta1,
                &mut d_features,
            )?;
            let l_comp_t = seed_compacting(
                &output.features,
                &batch.y_tgt,
                b_src,
                cc_t,
                weights.beta1,
                &mut d_features,
            )?;
            let cents_s = batch_class_centroids(&output.features, &batch.y_src, 0, k);
            let cents_t = batch_class_centroids(&output.features, &batch.y_tgt, b_src, k);
            let l_sep_s =
                seed_separating(&output.features, &cents_s, weights.t_m, weights.beta2, &mut d_features);
            let l_sep_t =
                seed_separating(&output.features, &cents_t, weights.t_m, weights.beta2, &mut d_features);

            // Inter-domain discrepancy on the batch-level domain centroids;
            // classes absent from either side of the batch contribute zero.
            let dim = output.features.cols();
            let mut l_cd = 0.0;
            for c in 0..k {
                if let (Some((bs, ms)), Some((bt, mt))) = (&cents_s[c], &cents_t[c]) {
                    let d = euclidean(bs, bt);
                    l_cd += d;
                    if d > NORM_GUARD {
                        let mut g = vec![0.0; dim];
                        for j in 0..dim {
                            g[j] = weights.beta3 * (bs[j] - bt[j]) / d;
                        }
                        spread_centroid_grad(&g, ms, 1.0, &mut d_features);
                        spread_centroid_grad(&g, mt, -1.0, &mut d_features);
                    }
                }
            }

            // Running combined loss: batch combined centroid (mean of the
            // available per-domain batch centroids) vs the frozen global one.
            let mut l_cmb = 0.0;
            for c in 0..k {
                let combined: Option<Vec<f64>> = match (&cents_s[c], &cents_t[c]) {
                    (Some((bs, _)), Some((bt, _))) => {
                        Some(bs.iter().zip(bt).map(|(a, b)| (a + b) / 2.0).collect())
                    }
                    (Some((bs, _)), None) => Some(bs.clone()),
                    (None, Some((bt, _))) => Some(bt.clone()),
                    (None, None) => None,
                };
                let Some(bc) = combined else { continue };
                let d = euclidean(&bc, cc_m.row(c));
                l_cmb += d;
                if d > NORM_GUARD {
                    let mut g = vec![0.0; dim];
                    for j in 0..dim {
                        g[j] = weights.beta4 * (bc[j] - cc_m.get(c, j)) / d;
                    }
                    match (&cents_s[c], &cents_t[c]) {
                        (Some((_, ms)), Some((_, mt))) => {
                            spread_centroid_grad(&g, ms, 0.5, &mut d_features);
                            spread_centroid_grad(&g, mt, 0.5, &mut d_features);
                        }
                        (Some((_, ms)), None) => spread_centroid_grad(&g, ms, 1.0, &mut d_features),
                        (None, Some((_, mt))) => spread_centroid_grad(&g, mt, 1.0, &mut d_features),
                        (None, None) => unreachable!(),
                    }
                }
            }

            let terms = StageTerms::Adapt {
                l_cls,
                l_comp_s,
                l_comp_t,
                l_sep_s,
                l_sep_t,
                l_cd,
                l_cmb,
            };
            Seeds {
                total: losses::stage_total(&terms, weights),
                terms,
                d_probs1,
                d_probs2,
                d_features,
            }
        }
    };
    Ok(seeds)
}

fn softmax_bwd(probs: &Mat, d_probs: &Mat) -> Mat {
    let mut d_logits = Mat::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = d_probs.row(r);
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for (out, (&pi, &dpi)) in d_logits.row_mut(r).iter_mut().zip(p.iter().zip(dp)) {
            *out = pi * (dpi - dot);
        }
    }
    d_logits
}

fn relu_bwd(pre: &Mat, upstream: &Mat) -> Mat {
    let mut out = upstream.clone();
    for (g, &z) in out.data_mut().iter_mut().zip(pre.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

/// dW = x^T dy, db = column sums of dy, dx = dy W^T.
fn dense_bwd(
    x: &Mat,
    theta: &[f64],
    slot: &DenseSlot,
    dy: &Mat,
    grads: &mut [f64],
) -> Mat {
    matmul_tn(
        x.data(),
        dy.data(),
        x.rows(),
        slot.inputs,
        slot.outputs,
        &mut grads[slot.w.0..slot.w.0 + slot.w.1],
    );
    let db = &mut grads[slot.b.0..slot.b.0 + slot.b.1];
    for r in 0..dy.rows() {
        for (g, &v) in db.iter_mut().zip(dy.row(r)) {
            *g += v;
        }
    }
    let mut dx = Mat::zeros(x.rows(), slot.inputs);
    matmul_nt(
        dy.data(),
        &theta[slot.w.0..slot.w.0 + slot.w.1],
        dy.rows(),
        slot.outputs,
        slot.inputs,
        dx.data_mut(),
    );
    dx
}

/// Batch-norm backward for biased batch statistics.
fn bn_bwd(
    xhat: &Mat,
    inv_std: &[f64],
    gamma: &[f64],
    dy: &Mat,
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Mat {
    let b = xhat.rows() as f64;
    let cols = xhat.cols();
    let mut sum_dxhat = vec![0.0; cols];
    let mut sum_dxhat_xhat = vec![0.0; cols];
    for r in 0..xhat.rows() {
        for (j, (&dyv, &xh)) in dy.row(r).iter().zip(xhat.row(r)).enumerate() {
            d_gamma[j] += dyv * xh;
            d_beta[j] += dyv;
            let dxh = dyv * gamma[j];
            sum_dxhat[j] += dxh;
            sum_dxhat_xhat[j] += dxh * xh;
        }
    }
    let mut dz = Mat::zeros(xhat.rows(), cols);
    for r in 0..xhat.rows() {
        let dz_row = dz.row_mut(r);
        for (j, (&dyv, &xh)) in dy.row(r).iter().zip(xhat.row(r)).enumerate() {
            let dxh = dyv * gamma[j];
            dz_row[j] = inv_std[j] / b * (b * dxh - sum_dxhat[j] - xh * sum_dxhat_xhat[j]);
        }
    }
    dz
}

fn classifier_bwd(
    features: &Mat,
    theta: &[f64],
    slots: &[DenseSlot; 3],
    cache: &ClsCache,
    d_probs: &Mat,
    grads: &mut [f64],
) -> Mat {
    let d_logits = softmax_bwd(&cache.probs, d_probs);
    let d_au2 = dense_bwd(&cache.au2, theta, &slots[2], &d_logits, grads);
    let d_u2 = relu_bwd(&cache.u2, &d_au2);
    let d_au1 = dense_bwd(&cache.au1, theta, &slots[1], &d_u2, grads);
    let d_u1 = relu_bwd(&cache.u1, &d_au1);
    dense_bwd(features, theta, &slots[0], &d_u1, grads)
}

/// Gradient of the stage loss with respect to every trainable parameter,
/// computed from an existing train-mode forward cache.
pub(crate) fn backward_from_cache(
    params: &ModelParams,
    batch: &TrainBatch,
    spec: &LossSpec,
    output: &ForwardOutput,
    cache: &Cache,
) -> Result<(f64, StageTerms, Vec<f64>)> {
    let layout = params.layout();
    let theta = &params.theta;
    let seeds = eval_loss_and_seeds(&params.arch, output, batch, spec)?;
    if !seeds.total.is_finite() {
        let name = match seeds.terms {
            StageTerms::Pretrain { l_cls, .. } if !l_cls.is_finite() => "l_cls",
            StageTerms::Pretrain { .. } => "l_dis",
            StageTerms::Cluster { l_cls, .. } if !l_cls.is_finite() => "l_cls",
            StageTerms::Cluster { l_comp, .. } if !l_comp.is_finite() => "l_comp",
            StageTerms::Cluster { .. } => "l_sep",
            StageTerms::Adapt { l_cls, .. } if !l_cls.is_finite() => "l_cls",
            StageTerms::Adapt { l_comp_s, l_comp_t, .. }
                if !(l_comp_s + l_comp_t).is_finite() =>
            {
                "l_comp"
            }
            StageTerms::Adapt { l_cd, .. } if !l_cd.is_finite() => "l_cd",
            StageTerms::Adapt { .. } => "l_sep/l_cmb",
        };
        return Err(CoreError::NonFinite(format!("stage loss term {name}")));
    }

    let mut grads = vec![0.0; theta.len()];

    let mut d_features =
        classifier_bwd(&cache.a2, theta, &layout.cls[0], &cache.cls[0], &seeds.d_probs1, &mut grads);
    let d_f2 =
        classifier_bwd(&cache.a2, theta, &layout.cls[1], &cache.cls[1], &seeds.d_probs2, &mut grads);
    for (a, &b) in d_features.data_mut().iter_mut().zip(d_f2.data()) {
        *a += b;
    }
    for (a, &b) in d_features.data_mut().iter_mut().zip(seeds.d_features.data()) {
        *a += b;
    }

    // Extractor layer 2.
    let d_y2 = relu_bwd(&cache.y2, &d_features);
    let (g2_range, b2_range) = (layout.bn2_gamma.clone(), layout.bn2_beta.clone());
    let mut d_gamma2 = vec![0.0; g2_range.len()];
    let mut d_beta2 = vec![0.0; b2_range.len()];
    let d_z2 = bn_bwd(
        &cache.xhat2,
        &cache.inv_std2,
        &theta[g2_range.clone()],
        &d_y2,
        &mut d_gamma2,
        &mut d_beta2,
    );
    grads[g2_range].copy_from_slice(&d_gamma2);
    grads[b2_range].copy_from_slice(&d_beta2);
    let d_a1 = dense_bwd(&cache.a1, theta, &layout.ext2, &d_z2, &mut grads);

    // Extractor layer 1.
    let d_y1 = relu_bwd(&cache.y1, &d_a1);
    let (g1_range, b1_range) = (layout.bn1_gamma.clone(), layout.bn1_beta.clone());
    let mut d_gamma1 = vec![0.0; g1_range.len()];
    let mut d_beta1 = vec![0.0; b1_range.len()];
    let d_z1 = bn_bwd(
        &cache.xhat1,
        &cache.inv_std1,
        &theta[g1_range.clone()],
        &d_y1,
        &mut d_gamma1,
        &mut d_beta1,
    );
    grads[g1_range].copy_from_slice(&d_gamma1);
    grads[b1_range].copy_from_slice(&d_beta1);
    let _ = dense_bwd(&cache.x, theta, &layout.ext1, &d_z1, &mut grads);

    Ok((seeds.total, seeds.terms, grads))
}

/// Full backward pass: train-mode forward plus exact gradients of the stage
/// loss for every trainable parameter.
pub fn backward(params: &ModelParams, batch: &TrainBatch, spec: &LossSpec) -> Result<BackwardOutcome> {
    let joint = batch.x_src.vstack(&batch.x_tgt)?;
    if batch.x_src.rows() != batch.y_src.len() || batch.x_tgt.rows() != batch.y_tgt.len() {
        return Err(CoreError::ShapeMismatch(
            "label count does not match batch rows".into(),
        ));
    }
    if let Some(&y) = batch
        .y_src
        .iter()
        .chain(&batch.y_tgt)
        .find(|&&y| y >= params.arch.classes)
    {
        return Err(CoreError::ShapeMismatch(format!(
            "label {y} out of range for {} classes",
            params.arch.classes
        )));
    }
    let (output, cache, running) = forward_train_cached(params, &joint)?;
    let (total, terms, grads) = backward_from_cache(params, batch, spec, &output, &cache)?;
    Ok(BackwardOutcome {
        total,
        terms,
        grads,
        running,
        output,
    })
}

/// Train-mode stage loss only (no gradients, no state commit). This is what
/// the finite-difference oracle evaluates.
pub fn stage_loss(params: &ModelParams, batch: &TrainBatch, spec: &LossSpec) -> Result<f64> {
    let joint = batch.x_src.vstack(&batch.x_tgt)?;
    let (output, _, _) = forward_train_cached(params, &joint)?;
    Ok(eval_loss_and_seeds(&params.arch, &output, batch, spec)?.total)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update over a flat parameter vector.
pub fn adam_step_raw(theta: &mut [f64], grads: &[f64], st: &mut OptimizerState) {
    debug_assert_eq!(theta.len(), grads.len());
    debug_assert_eq!(theta.len(), st.m.len());
    st.step += 1;
    let bc1 = 1.0 - st.beta1.powi(st.step as i32);
    let bc2 = 1.0 - st.beta2.powi(st.step as i32);
    for i in 0..theta.len() {
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i] * grads[i];
        let m_hat = st.m[i] / bc1;
        let v_hat = st.v[i] / bc2;
        theta[i] -= st.lr * (m_hat / (v_hat.sqrt() + st.eps) + st.weight_decay * theta[i]);
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &[f64], st: &mut OptimizerState) {
    adam_step_raw(&mut params.theta, grads, st);
}
