//! Source/target cluster centroids in the extractor's feature space, the
//! per-class spread statistics, the mean classifier discrepancy, and the
//! confident-prediction selection rule built on them.

use crate::error::{CoreError, Result};
use crate::linalg::{argmax, euclidean, Mat};
use crate::net::{self, ModelParams};
use crate::pctta;

/// Everything the selection and adaptation stages need to know about the
/// cluster geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    /// Per-class source centroids (one row per class).
    pub cc_s: Mat,
    /// Per-class mean distance between source samples and their centroid.
    pub m_ctr: Vec<f64>,
    /// Population standard deviation of those distances, per class.
    pub sigma: Vec<f64>,
    /// Mean classifier discrepancy over the whole source set.
    pub m_dis: f64,
    /// Per-class target centroids (falls back to `cc_s` rows when a class has
    /// no confident target sample).
    pub cc_t: Mat,
    /// Combined centroids: midpoint of `cc_s` and `cc_t` per class.
    pub cc_m: Mat,
}

impl ClusterStats {
    pub fn classes(&self) -> usize {
        self.cc_s.rows()
    }
}

/// One eval-mode model response.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs_avg: Vec<f64>,
    /// argmax of `probs_avg`.
    pub label: usize,
    pub max_prob: f64,
    pub entropy_bits: f64,
    /// Euclidean distance between the two classifiers' probability rows.
    pub discrepancy: f64,
    /// F(x), the extractor output.
    pub feature: Vec<f64>,
}

const PREDICT_CHUNK: usize = 512;

/// Eval-mode predictions for every row, in row order.
pub fn predict_all(params: &ModelParams, x: &Mat) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(x.rows());
    let mut start = 0;
    while start < x.rows() {
        let stop = (start + PREDICT_CHUNK).min(x.rows());
        let chunk = x.select_rows(&(start..stop).collect::<Vec<_>>());
        let fwd = net::forward_eval(params, &chunk)?;
        for r in 0..chunk.rows() {
            let probs = fwd.probs_avg.row(r);
            let label = argmax(probs);
            let max_prob = probs[label];
            out.push(Prediction {
                probs_avg: probs.to_vec(),
                label,
                max_prob,
                entropy_bits: pctta::entropy(probs),
                discrepancy: euclidean(fwd.probs1.row(r), fwd.probs2.row(r)),
                feature: fwd.features.row(r).to_vec(),
            });
        }
        start = stop;
    }
    Ok(out)
}

/// Arithmetic mean of the features per class; every class must be present.
pub fn centroids(features: &Mat, labels: &[usize], classes: usize) -> Result<Mat> {
    if features.rows() != labels.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} feature rows vs {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut sums = Mat::zeros(classes, features.cols());
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(CoreError::ShapeMismatch(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        for (s, &v) in sums.row_mut(y).iter_mut().zip(features.row(i)) {
            *s += v;
        }
        counts[y] += 1;
    }
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(CoreError::EmptyClass(k));
        }
        for s in sums.row_mut(k) {
            *s /= n as f64;
        }
    }
    Ok(sums)
}

/// Mean intra-cluster distance and its population standard deviation
/// (divisor n) per class.
pub fn intra_stats(
    features: &Mat,
    labels: &[usize],
    centroids: &Mat,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let classes = centroids.rows();
    let mut dists: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(CoreError::MissingCentroid(y));
        }
        dists[y].push(euclidean(features.row(i), centroids.row(y)));
    }
    let mut m_ctr = vec![0.0; classes];
    let mut sigma = vec![0.0; classes];
    for (k, d) in dists.iter().enumerate() {
        if d.is_empty() {
            return Err(CoreError::EmptyClass(k));
        }
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        m_ctr[k] = mean;
        sigma[k] = (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    }
    Ok((m_ctr, sigma))
}

/// Mean per-sample classifier discrepancy over a prediction set.
pub fn mean_discrepancy(preds: &[Prediction]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().map(|p| p.discrepancy).sum::<f64>() / preds.len() as f64
}

/// Confident predictions: predicted-class probability strictly above the
/// threshold, feature strictly closer to its class centroid than that class's
/// mean intra-cluster distance, and discrepancy strictly below the source
/// mean. Returns `(sample index, pseudo-label)` pairs in index order.
pub fn confident_subset(
    preds: &[Prediction],
    stats: &ClusterStats,
    softmax_threshold: f64,
) -> Vec<(usize, usize)> {
    preds
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let k = p.label;
            let close = euclidean(&p.feature, stats.cc_s.row(k)) < stats.m_ctr[k];
            let sure = p.max_prob > softmax_threshold;
            let agreeing = p.discrepancy < stats.m_dis;
            (sure && close && agreeing).then_some((i, k))
        })
        .collect()
}

/// Target centroids from confident predictions; classes with no confident
/// sample fall back to the source centroid. Returns `(cc_t, cc_m)` with
/// `cc_m` the per-class midpoint of `cc_s` and `cc_t`.
pub fn target_centroids(
    preds: &[Prediction],
    confident: &[(usize, usize)],
    cc_s: &Mat,
) -> (Mat, Mat) {
    let classes = cc_s.rows();
    let dim = cc_s.cols();
    let mut cc_t = Mat::zeros(classes, dim);
    let mut counts = vec![0usize; classes];
    for &(i, k) in confident {
        for (s, &v) in cc_t.row_mut(k).iter_mut().zip(&preds[i].feature) {
            *s += v;
        }
        counts[k] += 1;
    }
    for k in 0..classes {
        if counts[k] == 0 {
            cc_t.row_mut(k).copy_from_slice(cc_s.row(k));
        } else {
            for s in cc_t.row_mut(k) {
                *s /= counts[k] as f64;
            }
        }
    }
    let mut cc_m = Mat::zeros(classes, dim);
    for k in 0..classes {
        for ((m, &s), &t) in cc_m.row_mut(k).iter_mut().zip(cc_s.row(k)).zip(cc_t.row(k)) {
            *m = (s + t) / 2.0;
        }
    }
    (cc_t, cc_m)
}

/// Full statistics pass: source geometry from eval-mode predictions over the
/// whole source set, then confident-target centroids. `frozen_m_dis` keeps an
/// earlier mean-discrepancy value instead of recomputing it.
pub fn compute_stats(
    params: &ModelParams,
    source_x: &Mat,
    source_y: &[usize],
    target_x: &Mat,
    classes: usize,
    softmax_threshold: f64,
    frozen_m_dis: Option<f64>,
) -> Result<ClusterStats> {
    let source_preds = predict_all(params, source_x)?;
    let features = Mat::from_rows(
        &source_preds.iter().map(|p| p.feature.clone()).collect::<Vec<_>>(),
    )?;
    let cc_s = centroids(&features, source_y, classes)?;
    let (m_ctr, sigma) = intra_stats(&features, source_y, &cc_s)?;
    let m_dis = frozen_m_dis.unwrap_or_else(|| mean_discrepancy(&source_preds));

    let mut stats = ClusterStats {
        cc_t: cc_s.clone(),
        cc_m: cc_s.clone(),
        cc_s,
        m_ctr,
        sigma,
        m_dis,
    };
    if target_x.rows() > 0 {
        let target_preds = predict_all(params, target_x)?;
        let confident = confident_subset(&target_preds, &stats, softmax_threshold);
        let (cc_t, cc_m) = target_centroids(&target_preds, &confident, &stats.cc_s);
        stats.cc_t = cc_t;
        stats.cc_m = cc_m;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil;
    use rand::Rng;

    fn mat(rows: &[Vec<f64>]) -> Mat {
        Mat::from_rows(rows).unwrap()
    }

    fn pred(feature: Vec<f64>, label: usize, max_prob: f64, discrepancy: f64) -> Prediction {
        let probs = if label == 0 {
            vec![max_prob, 1.0 - max_prob]
        } else {
            vec![1.0 - max_prob, max_prob]
        };
        Prediction {
            entropy_bits: pctta::entropy(&probs),
            probs_avg: probs,
            label,
            max_prob,
            discrepancy,
            feature,
        }
    }

    #[test]
    fn centroids_trivial_and_brute_force() {
        let f = mat(&[vec![1.0, 2.0], vec![0.0, 0.0], vec![2.0, 2.0]]);
        let c = centroids(&f, &[1, 0, 0], 2).unwrap();
        assert_eq!(c.row(0), &[1.0, 1.0]);
        assert_eq!(c.row(1), &[1.0, 2.0]);

        let mut rng = rngutil::stream(31, "centroid-oracle");
        let n = 40;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| if i < 3 { i } else { rng.random_range(0..3) }).collect();
        let c = centroids(&mat(&rows), &labels, 3).unwrap();
        for k in 0..3 {
            let members: Vec<&Vec<f64>> =
                rows.iter().zip(&labels).filter(|(_, &y)| y == k).map(|(r, _)| r).collect();
            for j in 0..3 {
                let mean = members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64;
                assert!((c.get(k, j) - mean).abs() < 1e-12);
            }
        }

        assert!(matches!(
            centroids(&f, &[0, 0, 0], 2),
            Err(CoreError::EmptyClass(1))
        ));
    }

    #[test]
    fn intra_stats_hand_and_oracle() {
        // Distances 1 and 3 from the centroid: mean 2, population std 1.
        let f = mat(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![5.0, 5.0]]);
        let c = mat(&[vec![0.0, 0.0], vec![5.0, 5.0]]);
        let (m, s) = intra_stats(&f, &[0, 0, 1], &c).unwrap();
        assert!((m[0] - 2.0).abs() < 1e-12 && (s[0] - 1.0).abs() < 1e-12);
        assert_eq!((m[1], s[1]), (0.0, 0.0));

        // Brute-force two-pass oracle on random data.
        let mut rng = rngutil::stream(32, "intra-oracle");
        for _ in 0..20 {
            let n = rng.random_range(2..50usize);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let labels = vec![0usize; n];
            let c = centroids(&mat(&rows), &labels, 1).unwrap();
            let (m, s) = intra_stats(&mat(&rows), &labels, &c).unwrap();
            let dists: Vec<f64> = rows
                .iter()
                .map(|r| {
                    r.iter()
                        .zip(c.row(0))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let mean = dists.iter().sum::<f64>() / n as f64;
            let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
            assert!((m[0] - mean).abs() < 1e-10);
            assert!((s[0] - var.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_discrepancy_hand_cases() {
        let p0 = pred(vec![0.0], 0, 0.9, 0.0);
        let p1 = pred(vec![0.0], 0, 0.9, 2.0f64.sqrt());
        assert_eq!(mean_discrepancy(&[p0.clone(), p0.clone()]), 0.0);
        assert!((mean_discrepancy(&[p0, p1]) - 2.0f64.sqrt() / 2.0).abs() < 1e-15);
    }

    fn toy_stats() -> ClusterStats {
        ClusterStats {
            cc_s: mat(&[vec![0.0, 0.0], vec![10.0, 0.0]]),
            m_ctr: vec![2.0, 2.0],
            sigma: vec![1.0, 1.0],
            m_dis: 0.5,
            cc_t: mat(&[vec![0.0, 0.0], vec![10.0, 0.0]]),
            cc_m: mat(&[vec![0.0, 0.0], vec![10.0, 0.0]]),
        }
    }

    #[test]
    fn confident_subset_applies_all_three_strict_criteria() {
        let stats = toy_stats();
        let preds = vec![
            // All three hold.
            pred(vec![1.0, 0.0], 0, 0.995, 0.25),
            // Probability at/below the threshold.
            pred(vec![1.0, 0.0], 0, 0.98, 0.25),
            // Distance exactly m_ctr: rejected (strict).
            pred(vec![2.0, 0.0], 0, 0.995, 0.25),
            // Discrepancy exactly m_dis: rejected (strict).
            pred(vec![1.0, 0.0], 0, 0.995, 0.5),
            // Confident for class 1.
            pred(vec![9.5, 0.0], 1, 0.9991, 0.1),
        ];
        let sel = confident_subset(&preds, &stats, 0.99);
        assert_eq!(sel, vec![(0, 0), (4, 1)]);

        // Threshold exactly at max_prob: rejected (strict).
        let sel = confident_subset(&preds, &stats, 0.995);
        assert_eq!(sel, vec![(4, 1)]);
    }

    #[test]
    fn confident_subset_is_monotone_in_threshold() {
        let stats = toy_stats();
        let mut rng = rngutil::stream(33, "confident-mono");
        let preds: Vec<Prediction> = (0..60)
            .map(|_| {
                let label = rng.random_range(0..2usize);
                let base = if label == 0 { 0.0 } else { 10.0 };
                pred(
                    vec![base + rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)],
                    label,
                    rng.random_range(0.5..1.0),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        let mut prev: Option<Vec<(usize, usize)>> = None;
        for thr in [0.5, 0.7, 0.9, 0.99, 0.999] {
            let sel = confident_subset(&preds, &stats, thr);
            if let Some(p) = prev {
                // Raising the threshold never adds samples.
                assert!(sel.iter().all(|x| p.contains(x)));
            }
            prev = Some(sel);
        }
    }

    #[test]
    fn target_centroids_means_fallback_and_midpoint() {
        let stats = toy_stats();
        let preds = vec![
            pred(vec![0.0, 0.0], 0, 0.999, 0.1),
            pred(vec![2.0, 0.0], 0, 0.999, 0.1),
        ];
        // Both confident for class 0; class 1 empty and falls back.
        let confident = vec![(0, 0), (1, 0)];
        let (cc_t, cc_m) = target_centroids(&preds, &confident, &stats.cc_s);
        assert_eq!(cc_t.row(0), &[1.0, 0.0]);
        assert_eq!(cc_m.row(0), &[0.5, 0.0]);
        assert_eq!(cc_t.row(1), stats.cc_s.row(1));
        assert_eq!(cc_m.row(1), stats.cc_s.row(1));

        // No confident samples at all: cc_t = cc_m = cc_s.
        let (cc_t, cc_m) = target_centroids(&preds, &[], &stats.cc_s);
        assert_eq!(cc_t, stats.cc_s);
        assert_eq!(cc_m, stats.cc_s);

        // cc_m is always the midpoint.
        for k in 0..2 {
            for j in 0..2 {
                assert!(
                    (cc_m.get(k, j) - (stats.cc_s.get(k, j) + cc_t.get(k, j)) / 2.0).abs() < 1e-15
                );
            }
        }
    }

    #[test]
    fn predict_all_is_consistent_with_forward_eval() {
        use crate::net::{forward_eval, ModelParams, NetArch};
        let arch = NetArch {
            input: 6,
            extractor: [5, 4],
            classifier: [3, 3],
            classes: 2,
        };
        let params = ModelParams::init(arch, 9).unwrap();
        let mut rng = rngutil::stream(34, "predict-all");
        let mut x = Mat::zeros(700, 6); // spans multiple chunks
        for v in x.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let preds = predict_all(&params, &x).unwrap();
        let fwd = forward_eval(&params, &x).unwrap();
        assert_eq!(preds.len(), 700);
        for (i, p) in preds.iter().enumerate() {
            assert_eq!(p.label, if fwd.probs_avg.get(i, 0) >= fwd.probs_avg.get(i, 1) { 0 } else { 1 });
            for j in 0..2 {
                assert!((p.probs_avg[j] - fwd.probs_avg.get(i, j)).abs() < 1e-12);
            }
            assert!((p.feature[0] - fwd.features.get(i, 0)).abs() < 1e-12);
            assert!(p.entropy_bits >= 0.0 && p.entropy_bits <= 1.0 + 1e-12);
        }
    }
}
