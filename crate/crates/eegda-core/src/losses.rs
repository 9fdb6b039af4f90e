//! Objective terms for the three training stages: group-robust weighted
//! cross-entropy, classifier discrepancy, cluster compacting/separating,
//! inter-domain cluster discrepancy, and the running combined-centroid loss.
//!
//! Every function here is a plain scalar evaluation; the matching gradients
//! live in [`crate::net::backward`], which differentiates exactly these
//! expressions (checked against finite differences in the tests).

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::{euclidean, Mat};

/// Hyperparameters weighting the stage objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    /// Margin of the cluster-separating hinge, in normalized-feature units.
    pub t_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            gamma1: 0.1,
            gamma2: 0.1,
            beta1: 0.1,
            beta2: 0.1,
            beta3: 0.5,
            beta4: 0.1,
            t_m: 10.0,
        }
    }
}

/// Exponentiated-gradient weights over sample groups (one weight per class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDroState {
    q: Vec<f64>,
    eta: f64,
}

impl GroupDroState {
    pub fn new(groups: usize, eta: f64) -> Self {
        assert!(groups >= 1);
        GroupDroState {
            q: vec![1.0 / groups as f64; groups],
            eta,
        }
    }

    pub fn from_weights(q: Vec<f64>, eta: f64) -> Result<Self> {
        let sum: f64 = q.iter().sum();
        if q.is_empty() || q.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(
                "group weights must be a probability vector".into(),
            ));
        }
        Ok(GroupDroState { q, eta })
    }

    pub fn weights(&self) -> &[f64] {
        &self.q
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

/// Weighted cross-entropy of the averaged classifier output.
#[derive(Debug, Clone, PartialEq)]
pub struct CeReport {
    /// Mean of `-w_y * ln p(y)` over all samples.
    pub mean: f64,
    /// Same mean restricted to each group; `None` when the group is absent.
    pub group_means: Vec<Option<f64>>,
}

/// Probability floor: a zero probability at the true class clamps here
/// instead of producing an infinite loss.
pub const PROB_CLAMP: f64 = 1e-12;

pub fn weighted_ce(probs_avg: &Mat, labels: &[usize], class_weights: &[f64]) -> Result<CeReport> {
    if probs_avg.rows() != labels.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} probability rows vs {} labels",
            probs_avg.rows(),
            labels.len()
        )));
    }
    let k = class_weights.len();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(CoreError::ShapeMismatch(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let p = probs_avg.get(i, y).max(PROB_CLAMP);
        let ce = -class_weights[y] * p.ln();
        total += ce;
        sums[y] += ce;
        counts[y] += 1;
    }
    Ok(CeReport {
        mean: total / labels.len().max(1) as f64,
        group_means: sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c > 0 { Some(s / c as f64) } else { None })
            .collect(),
    })
}

/// Inverse-class-frequency weights, renormalized to mean 1.
pub fn inverse_frequency_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(CoreError::ShapeMismatch(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        counts[y] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(CoreError::EmptyClass(k));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| labels.len() as f64 / c as f64)
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.iter().map(|w| w * classes as f64 / sum).collect())
}

/// One exponentiated-gradient step: `q_g <- q_g * exp(eta * loss_g)` for the
/// observed groups, renormalize, then return `sum_g q_g * loss_g` over the
/// observed groups.
pub fn group_dro(per_group: &[Option<f64>], state: &mut GroupDroState) -> f64 {
    debug_assert_eq!(per_group.len(), state.q.len());
    // Shift every exponent by the largest one; normalization cancels the
    // shift and the update stays finite for any eta.
    let shift = per_group
        .iter()
        .flatten()
        .fold(0.0f64, |m, &l| m.max(state.eta * l));
    for (qg, lg) in state.q.iter_mut().zip(per_group) {
        let e = lg.map(|l| state.eta * l).unwrap_or(0.0);
        *qg *= (e - shift).exp();
    }
    let z: f64 = state.q.iter().sum();
    for qg in state.q.iter_mut() {
        *qg /= z;
    }
    state
        .q
        .iter()
        .zip(per_group)
        .map(|(&qg, lg)| qg * lg.unwrap_or(0.0))
        .sum()
}

/// Mean Euclidean distance between the two classifiers' output rows.
pub fn l_dis(probs1: &Mat, probs2: &Mat) -> f64 {
    debug_assert_eq!(probs1.rows(), probs2.rows());
    if probs1.rows() == 0 {
        return 0.0;
    }
    (0..probs1.rows())
        .map(|i| euclidean(probs1.row(i), probs2.row(i)))
        .sum::<f64>()
        / probs1.rows() as f64
}

/// Cluster-compacting loss: sum over samples of the distance to their class
/// centroid (a sum, not a mean).
pub fn l_comp(features: &Mat, labels: &[usize], centroids: &Mat) -> Result<f64> {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= centroids.rows() {
            return Err(CoreError::MissingCentroid(y));
        }
        total += euclidean(features.row(i), centroids.row(y));
    }
    Ok(total)
}

/// Cluster-separating hinge over ordered centroid pairs:
/// `sum_{k != l} max(t_m - D(cc_l, cc_k), 0)`.
pub fn l_sep(centroids: &Mat, t_m: f64) -> f64 {
    let k = centroids.rows();
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                total += (t_m - euclidean(centroids.row(a), centroids.row(b))).max(0.0);
            }
        }
    }
    total
}

/// Inter-domain cluster discrepancy: per-class distance between source and
/// target centroids. Classes present on one side only are skipped with a
/// warning.
pub fn l_cd(cc_s: &[Option<Vec<f64>>], cc_t: &[Option<Vec<f64>>]) -> f64 {
    debug_assert_eq!(cc_s.len(), cc_t.len());
    let mut total = 0.0;
    for (k, (s, t)) in cc_s.iter().zip(cc_t).enumerate() {
        match (s, t) {
            (Some(s), Some(t)) => total += euclidean(s, t),
            (None, None) => {}
            _ => log::warn!("class {k} present in one domain only; skipping its l_cd term"),
        }
    }
    total
}

/// Running combined loss: distance between each batch-level combined centroid
/// and the global combined centroid. Classes absent from the batch contribute
/// zero.
pub fn l_cmb(batch_combined: &[Option<Vec<f64>>], global_combined: &Mat) -> f64 {
    debug_assert_eq!(batch_combined.len(), global_combined.rows());
    batch_combined
        .iter()
        .enumerate()
        .map(|(k, c)| match c {
            Some(c) => euclidean(c, global_combined.row(k)),
            None => 0.0,
        })
        .sum()
}

/// Unweighted term values for one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageTerms {
    Pretrain {
        l_cls: f64,
        l_dis: f64,
    },
    Cluster {
        l_cls: f64,
        l_comp: f64,
        l_sep: f64,
    },
    Adapt {
        l_cls: f64,
        l_comp_s: f64,
        l_comp_t: f64,
        l_sep_s: f64,
        l_sep_t: f64,
        l_cd: f64,
        l_cmb: f64,
    },
}

/// Weighted stage objective.
pub fn stage_total(terms: &StageTerms, w: &LossWeights) -> f64 {
    match *terms {
        StageTerms::Pretrain { l_cls, l_dis } => l_cls + w.alpha * l_dis,
        StageTerms::Cluster {
            l_cls,
            l_comp,
            l_sep,
        } => l_cls + w.gamma1 * l_comp + w.gamma2 * l_sep,
        StageTerms::Adapt {
            l_cls,
            l_comp_s,
            l_comp_t,
            l_sep_s,
            l_sep_t,
            l_cd,
            l_cmb,
        } => {
            l_cls
                + w.beta1 * (l_comp_s + l_comp_t)
                + w.beta2 * (l_sep_s + l_sep_t)
                + w.beta3 * l_cd
                + w.beta4 * l_cmb
        }
    }
}

/// Frozen per-step inputs that turn the network output into a stage loss.
/// Centroid anchors and DRO weights are constants with respect to the
/// gradient of a single step.
#[derive(Debug, Clone)]
pub enum LossSpec {
    Pretrain {
        weights: LossWeights,
        class_weights: Vec<f64>,
        q: Vec<f64>,
    },
    Cluster {
        weights: LossWeights,
        class_weights: Vec<f64>,
        q: Vec<f64>,
        /// Frozen anchor centroids (one row per class), from before the stage.
        anchors: Mat,
    },
    Adapt {
        weights: LossWeights,
        class_weights: Vec<f64>,
        q: Vec<f64>,
        cc_s: Mat,
        cc_t: Mat,
        cc_m: Mat,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil;
    use rand::Rng;

    fn mat(rows: &[Vec<f64>]) -> Mat {
        Mat::from_rows(rows).unwrap()
    }

    #[test]
    fn weighted_ce_matches_hand_values() {
        // Perfect prediction: zero loss.
        let p = mat(&[vec![1.0, 0.0]]);
        let r = weighted_ce(&p, &[0], &[1.0, 1.0]).unwrap();
        assert!(r.mean.abs() < 1e-15);

        // Uniform binary prediction: ln 2.
        let p = mat(&[vec![0.5, 0.5]]);
        let r = weighted_ce(&p, &[1], &[1.0, 1.0]).unwrap();
        assert!((r.mean - std::f64::consts::LN_2).abs() < 1e-12);

        // Class weight 2 doubles the loss.
        let p = mat(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let r = weighted_ce(&p, &[0, 0], &[2.0, 1.0]).unwrap();
        assert!((r.mean - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(r.group_means[1].is_none());
    }

    #[test]
    fn weighted_ce_clamps_zero_probability() {
        let p = mat(&[vec![0.0, 1.0]]);
        let r = weighted_ce(&p, &[0], &[1.0, 1.0]).unwrap();
        assert!((r.mean - -(PROB_CLAMP.ln())).abs() < 1e-6);
    }

    #[test]
    fn group_dro_single_group_equals_weighted_ce() {
        let mut st = GroupDroState::new(1, 0.01);
        for loss in [0.3, 1.7, 0.0] {
            let robust = group_dro(&[Some(loss)], &mut st);
            assert!((robust - loss).abs() < 1e-12);
            assert!((st.weights()[0] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn group_dro_large_eta_approaches_worst_group() {
        let mut st = GroupDroState::new(2, 1000.0);
        let robust = group_dro(&[Some(1.0), Some(3.0)], &mut st);
        assert!((robust - 3.0).abs() < 1e-9, "robust {robust}");
    }

    #[test]
    fn group_dro_update_matches_closed_form() {
        let mut st = GroupDroState::new(2, 0.01);
        let robust = group_dro(&[Some(1.0), Some(3.0)], &mut st);
        // Hand-evaluated exponentiated-gradient step from uniform weights.
        let e1 = 0.5 * (0.01f64 * 1.0).exp();
        let e2 = 0.5 * (0.01f64 * 3.0).exp();
        let z = e1 + e2;
        assert!((st.weights()[0] - e1 / z).abs() < 1e-15);
        assert!((st.weights()[1] - e2 / z).abs() < 1e-15);
        assert!((robust - (e1 / z * 1.0 + e2 / z * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn group_dro_bounds_and_monotone_weight_growth() {
        let mut rng = rngutil::stream(3, "dro-bounds");
        for _ in 0..100 {
            let k = rng.random_range(2..6usize);
            let losses: Vec<Option<f64>> =
                (0..k).map(|_| Some(rng.random_range(0.0..5.0))).collect();
            let mut st = GroupDroState::new(k, 0.1);
            let robust = group_dro(&losses, &mut st);
            let vals: Vec<f64> = losses.iter().map(|l| l.unwrap()).collect();
            let mean = vals.iter().sum::<f64>() / k as f64;
            let max = vals.iter().cloned().fold(f64::MIN, f64::max);
            assert!(robust >= mean - 1e-12, "robust {robust} < mean {mean}");
            assert!(robust <= max + 1e-12, "robust {robust} > max {max}");
        }

        // A strictly maximal group's weight strictly increases every update.
        let mut st = GroupDroState::new(3, 0.05);
        let losses = [Some(0.5), Some(2.0), Some(1.0)];
        let mut prev = st.weights()[1];
        for _ in 0..10 {
            group_dro(&losses, &mut st);
            assert!(st.weights()[1] > prev);
            prev = st.weights()[1];
        }
    }

    #[test]
    fn l_dis_hand_cases() {
        let a = mat(&[vec![1.0, 0.0]]);
        assert_eq!(l_dis(&a, &a), 0.0);
        let b = mat(&[vec![0.0, 1.0]]);
        assert!((l_dis(&a, &b) - 2.0f64.sqrt()).abs() < 1e-15);

        let p1 = mat(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let p2 = mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((l_dis(&p1, &p2) - 2.0f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn l_comp_hand_cases_and_missing_centroid() {
        let c = mat(&[vec![0.0, 0.0], vec![5.0, 5.0]]);
        let f = mat(&[vec![0.0, 0.0], vec![5.0, 5.0]]);
        assert_eq!(l_comp(&f, &[0, 1], &c).unwrap(), 0.0);

        let f = mat(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        assert!((l_comp(&f, &[0, 0], &c).unwrap() - 3.0).abs() < 1e-15);

        assert!(matches!(
            l_comp(&f, &[0, 2], &c),
            Err(CoreError::MissingCentroid(2))
        ));
    }

    #[test]
    fn l_sep_hand_cases() {
        let far = mat(&[vec![0.0, 0.0], vec![20.0, 0.0]]);
        assert_eq!(l_sep(&far, 10.0), 0.0);

        let same = mat(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(l_sep(&same, 10.0), 20.0); // both ordered pairs contribute t_m

        let single = mat(&[vec![1.0, 1.0]]);
        assert_eq!(l_sep(&single, 10.0), 0.0);
    }

    #[test]
    fn l_cd_hand_cases() {
        let s = vec![Some(vec![0.0, 0.0])];
        let t = vec![Some(vec![3.0, 4.0])];
        assert!((l_cd(&s, &t) - 5.0).abs() < 1e-15);
        assert_eq!(l_cd(&s, &s.clone()), 0.0);
        // One-sided class is skipped.
        let t_missing = vec![None];
        assert_eq!(l_cd(&s, &t_missing), 0.0);
    }

    #[test]
    fn l_cmb_hand_cases() {
        let global = mat(&[vec![1.0, 1.0], vec![2.0, 2.0]]);
        let batch = vec![Some(vec![1.0, 1.0]), Some(vec![2.0, 2.0])];
        assert_eq!(l_cmb(&batch, &global), 0.0);
        let batch = vec![Some(vec![2.0, 1.0]), None];
        assert_eq!(l_cmb(&batch, &global), 1.0);
    }

    #[test]
    fn brute_force_oracle_equivalence() {
        // Independent double-loop implementations of every cluster loss.
        let mut rng = rngutil::stream(4, "loss-oracle");
        for _ in 0..20 {
            let n = rng.random_range(2..=50usize);
            let d = rng.random_range(1..=6usize);
            let k = rng.random_range(1..=4usize);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let f = mat(&rows);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let cents: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let c = mat(&cents);

            // l_comp oracle
            let mut expect = 0.0;
            for i in 0..n {
                let mut sq = 0.0;
                for j in 0..d {
                    let diff = rows[i][j] - cents[labels[i]][j];
                    sq += diff * diff;
                }
                expect += sq.sqrt();
            }
            assert!((l_comp(&f, &labels, &c).unwrap() - expect).abs() < 1e-10);

            // l_sep oracle
            let t_m = rng.random_range(0.5..10.0);
            let mut expect = 0.0;
            for a in 0..k {
                for b in 0..k {
                    if a == b {
                        continue;
                    }
                    let mut sq = 0.0;
                    for j in 0..d {
                        let diff = cents[a][j] - cents[b][j];
                        sq += diff * diff;
                    }
                    let h = t_m - sq.sqrt();
                    if h > 0.0 {
                        expect += h;
                    }
                }
            }
            assert!((l_sep(&c, t_m) - expect).abs() < 1e-10);

            // l_cd / l_cmb oracle
            let other: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let s_opt: Vec<Option<Vec<f64>>> = cents.iter().cloned().map(Some).collect();
            let t_opt: Vec<Option<Vec<f64>>> = other.iter().cloned().map(Some).collect();
            let mut expect = 0.0;
            for a in 0..k {
                let mut sq = 0.0;
                for j in 0..d {
                    let diff = cents[a][j] - other[a][j];
                    sq += diff * diff;
                }
                expect += sq.sqrt();
            }
            assert!((l_cd(&s_opt, &t_opt) - expect).abs() < 1e-10);
            assert!((l_cmb(&t_opt, &c) - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn stage_total_hand_values_and_linearity() {
        let w = LossWeights::default();
        assert_eq!(
            stage_total(&StageTerms::Pretrain { l_cls: 0.0, l_dis: 0.0 }, &w),
            0.0
        );
        assert!(
            (stage_total(&StageTerms::Pretrain { l_cls: 1.0, l_dis: 2.0 }, &w) - 2.0).abs()
                < 1e-15
        );
        // Unit terms with the default betas: 1 + 0.1*2 + 0.1*2 + 0.5 + 0.1 = 2.0
        let adapt = StageTerms::Adapt {
            l_cls: 1.0,
            l_comp_s: 1.0,
            l_comp_t: 1.0,
            l_sep_s: 1.0,
            l_sep_t: 1.0,
            l_cd: 1.0,
            l_cmb: 1.0,
        };
        assert!((stage_total(&adapt, &w) - 2.0).abs() < 1e-15);

        // Perturbing one term moves the total by exactly its coefficient.
        let perturbed = StageTerms::Adapt {
            l_cls: 1.0,
            l_comp_s: 1.0,
            l_comp_t: 1.0,
            l_sep_s: 1.0,
            l_sep_t: 1.0,
            l_cd: 2.0,
            l_cmb: 1.0,
        };
        assert!((stage_total(&perturbed, &w) - stage_total(&adapt, &w) - w.beta3).abs() < 1e-15);
    }

    #[test]
    fn inverse_frequency_weights_mean_one() {
        let w = inverse_frequency_weights(&[0, 0, 0, 1], 2).unwrap();
        // raw: [4/3, 4]; mean-1 normalization: * 2 / (16/3)
        assert!((w[0] - 0.5).abs() < 1e-12);
        assert!((w[1] - 1.5).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-12);
        assert!(matches!(
            inverse_frequency_weights(&[0, 0], 2),
            Err(CoreError::EmptyClass(1))
        ));
    }
}
