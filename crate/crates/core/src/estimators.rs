//! Finite-sample mutual-information estimators.
//!
//! All three estimators share the same final step: given observed entries
//! with (possibly aggregated) probabilities, normalize by the observed mass
//! `Z`, build the empirical product of marginals from observed entries only,
//! and sum `mu_hat ln((mu_hat + g1) / (mu_hat_prod + g2))`.
//!
//! Estimates are not clipped at zero.

use std::collections::HashMap;
use std::fmt::Debug;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{cluster, dedupe};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilizationParams {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl StabilizationParams {
    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self> {
        if !(gamma1 >= 0.0 && gamma2 >= 0.0) || !gamma1.is_finite() || !gamma2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "stabilization parameters must be finite and nonnegative, got ({gamma1}, {gamma2})"
            )));
        }
        Ok(Self { gamma1, gamma2 })
    }

    pub const fn zero() -> Self {
        Self {
            gamma1: 0.0,
            gamma2: 0.0,
        }
    }

    /// `g1 = g2 = 1/k`.
    pub fn inverse_k(k: usize) -> Self {
        let g = 1.0 / k.max(1) as f64;
        Self {
            gamma1: g,
            gamma2: g,
        }
    }
}

/// Empirical joint and product-of-marginals over observed entries.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmpiricalJoint<A> {
    pub entries: Vec<Vec<A>>,
    pub mu_hat: Vec<f64>,
    pub mu_hat_product: Vec<f64>,
    /// Observed probability mass before normalization.
    pub z: f64,
}

impl<A: Eq + Hash + Clone> EmpiricalJoint<A> {
    /// `entries` must be distinct tuples of equal arity; `mass[i]` is the
    /// (aggregated) probability of `entries[i]`.
    pub fn from_weighted(entries: Vec<Vec<A>>, mass: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("samples"));
        }
        let n = entries[0].len();
        if n == 0 || entries.iter().any(|e| e.len() != n) {
            return Err(Error::InvalidArgument(
                "tuples must share a positive arity".into(),
            ));
        }
        if let Some(p) = mass.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid probability {p}")));
        }
        let z: f64 = mass.iter().sum();
        if z <= 0.0 {
            return Err(Error::NoMassObserved);
        }
        let mu_hat: Vec<f64> = mass.iter().map(|m| m / z).collect();

        // per-coordinate marginals restricted to observed entries
        let marginals: Vec<HashMap<&A, f64>> = (0..n)
            .map(|j| {
                let mut m: HashMap<&A, f64> = HashMap::new();
                for (e, w) in entries.iter().zip(&mu_hat) {
                    *m.entry(&e[j]).or_default() += w;
                }
                m
            })
            .collect();
        let mu_hat_product = entries
            .iter()
            .map(|e| {
                marginals
                    .iter()
                    .zip(e)
                    .map(|(m, a)| m[a])
                    .product::<f64>()
                    .min(1.0)
            })
            .collect();
        Ok(Self {
            entries,
            mu_hat,
            mu_hat_product,
            z,
        })
    }

    pub fn arity(&self) -> usize {
        self.entries[0].len()
    }

    pub fn estimate_value(&self, params: StabilizationParams) -> f64 {
        stabilized_sum(
            self.mu_hat
                .iter()
                .copied()
                .zip(self.mu_hat_product.iter().copied()),
            params,
        )
    }
}

fn stabilized_sum(pairs: impl Iterator<Item = (f64, f64)>, params: StabilizationParams) -> f64 {
    pairs
        .filter(|(p, _)| *p > 0.0)
        .map(|(p, q)| p * ((p + params.gamma1) / (q + params.gamma2)).ln())
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value: f64,
    /// Sample size.
    pub k: usize,
    /// Tuple arity.
    pub n: usize,
    /// Observed (aggregated) probability mass.
    pub z: f64,
    /// Number of distinct entries (after clustering, where applicable).
    pub support: usize,
    pub params: StabilizationParams,
}

fn unique_entries<A, F>(samples: &[Vec<A>], prob_of: F) -> Result<(Vec<Vec<A>>, Vec<f64>)>
where
    A: Eq + Hash + Clone,
    F: Fn(&[A]) -> f64,
{
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let uniques: Vec<Vec<A>> = dedupe(samples)
        .into_iter()
        .map(|i| samples[i].clone())
        .collect();
    let probs = uniques.iter().map(|u| prob_of(u)).collect();
    Ok((uniques, probs))
}

/// Empirical joint of the deduplicated sample (steps 3-4 of the basic
/// estimator).
pub fn empirical_joint<A, F>(samples: &[Vec<A>], prob_of: F) -> Result<EmpiricalJoint<A>>
where
    A: Eq + Hash + Clone,
    F: Fn(&[A]) -> f64,
{
    let (uniques, probs) = unique_entries(samples, prob_of)?;
    EmpiricalJoint::from_weighted(uniques, probs)
}

/// Basic estimator: deduplicate, renormalize true probabilities over the
/// observed tuples and compare with the observed product of marginals.
pub fn estimate_mi_alg1<A, F>(
    samples: &[Vec<A>],
    prob_of: F,
    params: StabilizationParams,
) -> Result<MiEstimate>
where
    A: Eq + Hash + Clone,
    F: Fn(&[A]) -> f64,
{
    let joint = empirical_joint(samples, prob_of)?;
    Ok(estimate_from_joint(&joint, samples.len(), params))
}

pub fn estimate_from_joint<A: Eq + Hash + Clone>(
    joint: &EmpiricalJoint<A>,
    k: usize,
    params: StabilizationParams,
) -> MiEstimate {
    MiEstimate {
        value: joint.estimate_value(params),
        k,
        n: joint.arity(),
        z: joint.z,
        support: joint.entries.len(),
        params,
    }
}

/// Semantic variant: unique tuples are clustered with `sim` over whole
/// tuples, cluster probabilities are aggregated, and the estimator runs on
/// cluster centers with exact per-coordinate equality.
pub fn estimate_mi_alg2<A, F, S>(
    samples: &[Vec<A>],
    prob_of: F,
    params: StabilizationParams,
    sim: S,
    tau: f64,
) -> Result<MiEstimate>
where
    A: Eq + Hash + Clone,
    F: Fn(&[A]) -> f64,
    S: Fn(&Vec<A>, &Vec<A>) -> f64,
{
    let (uniques, probs) = unique_entries(samples, prob_of)?;
    let clusters = cluster(&uniques, &probs, sim, tau);
    let centers = clusters
        .centers
        .iter()
        .map(|&c| uniques[c].clone())
        .collect();
    let joint = EmpiricalJoint::from_weighted(centers, clusters.mass)?;
    Ok(estimate_from_joint(&joint, samples.len(), params))
}

/// Output of the alternative (marginal x conditional) estimator.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Alg3Estimate<T> {
    pub estimate: MiEstimate,
    pub centers: Vec<T>,
    /// `mu_hat_1` per center.
    pub marginal: Vec<f64>,
    /// `conditional[i][t] = mu_hat_2(center_t | center_i)`.
    pub conditional: Vec<Vec<f64>>,
    /// `Z_i` per center.
    pub cond_normalizers: Vec<f64>,
    pub joint: Vec<Vec<f64>>,
    pub product: Vec<Vec<f64>>,
}

impl<T> Alg3Estimate<T> {
    /// Index of the center with the largest marginal of the empirical joint.
    pub fn default_center(&self) -> usize {
        argmax(&self.marginal)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Alternative estimator for `n = 2` using the model's marginal and
/// conditional likelihoods directly. `cond_prob(given, of)` must return
/// `Q(of | F_1(x, given))`.
pub fn estimate_mi_alg3<T, F, G, S>(
    samples: &[T],
    marginal_prob: F,
    cond_prob: G,
    params: StabilizationParams,
    sim: S,
    tau: f64,
) -> Result<Alg3Estimate<T>>
where
    T: Eq + Hash + Clone + Debug,
    F: Fn(&T) -> Result<f64>,
    G: Fn(&T, &T) -> Result<f64>,
    S: Fn(&T, &T) -> f64,
{
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let uniques: Vec<T> = dedupe(samples)
        .into_iter()
        .map(|i| samples[i].clone())
        .collect();
    let probs = uniques
        .iter()
        .map(&marginal_prob)
        .collect::<Result<Vec<_>>>()?;
    let clusters = cluster(&uniques, &probs, sim, tau);
    let m = clusters.len();
    let centers: Vec<T> = clusters
        .centers
        .iter()
        .map(|&c| uniques[c].clone())
        .collect();

    let z: f64 = clusters.mass.iter().sum();
    if z <= 0.0 {
        return Err(Error::NoMassObserved);
    }
    let marginal: Vec<f64> = clusters.mass.iter().map(|p| p / z).collect();

    let mut conditional = vec![vec![0.0; m]; m];
    let mut cond_normalizers = vec![0.0; m];
    for (i, given) in centers.iter().enumerate() {
        for (t, members) in clusters.members.iter().enumerate() {
            for &j in members {
                conditional[i][t] += cond_prob(given, &uniques[j])?;
            }
        }
        let zi: f64 = conditional[i].iter().sum();
        if zi <= 0.0 {
            return Err(Error::ZeroConditionalMass {
                center: format!("{given:?}"),
            });
        }
        cond_normalizers[i] = zi;
        for v in &mut conditional[i] {
            *v /= zi;
        }
    }

    // second-coordinate marginal of the empirical joint
    let second: Vec<f64> = (0..m)
        .map(|t| (0..m).map(|j| marginal[j] * conditional[j][t]).sum())
        .collect();
    let joint: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|t| marginal[i] * conditional[i][t]).collect())
        .collect();
    let product: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|t| marginal[i] * second[t]).collect())
        .collect();
    let value = stabilized_sum(
        joint
            .iter()
            .flatten()
            .copied()
            .zip(product.iter().flatten().copied()),
        params,
    );
    Ok(Alg3Estimate {
        estimate: MiEstimate {
            value,
            k: samples.len(),
            n: 2,
            z,
            support: m,
            params,
        },
        centers,
        marginal,
        conditional,
        cond_normalizers,
        joint,
        product,
    })
}

/// Which support assumption the certificate uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "branch", rename_all = "snake_case")]
pub enum SupportBranch {
    /// Finite alphabet `X` of size `alphabet_size`; tuples live in `X^n`.
    Full { alphabet_size: usize, n: usize },
    /// Effective support of `support_size` tuples holding at least
    /// `1 - delta_supp` of the mass.
    Effective {
        support_size: usize,
        delta_supp: f64,
    },
}

impl SupportBranch {
    /// Prescribed `gamma1` for sample size `k`.
    pub fn gamma1(&self, k: usize) -> f64 {
        match *self {
            SupportBranch::Full { alphabet_size, n } => {
                1.0 / (k as f64 * (alphabet_size as f64).powi(n as i32))
            }
            SupportBranch::Effective { support_size, .. } => 1.0 / (k as f64 * support_size as f64),
        }
    }

    /// Prescribed `gamma1` and the smallest admissible `gamma2` for an
    /// arity-`n` sample of size `k` with observed mass `z`.
    pub fn params(&self, k: usize, n: usize, z: f64) -> StabilizationParams {
        let gamma1 = self.gamma1(k);
        StabilizationParams {
            gamma1,
            gamma2: gamma1 + n as f64 * (1.0 - z).max(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// High-probability lower bound on the true mutual information.
    pub lower_bound: f64,
    pub epsilon_k: f64,
    pub delta: f64,
    pub emk_upper: f64,
    pub branch: SupportBranch,
    pub estimate: MiEstimate,
}

/// Lower-bound certificate on `I(mu)` holding with probability `1 - delta`.
pub fn thm2_lower_bound(
    est: &MiEstimate,
    delta: f64,
    emk_upper: f64,
    branch: SupportBranch,
) -> Result<BoundReport> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0,1), got {delta}"
        )));
    }
    if !(0.0..=1.0).contains(&emk_upper) {
        return Err(Error::InvalidArgument(format!(
            "expected missing mass bound must lie in [0,1], got {emk_upper}"
        )));
    }
    if est.k == 0 {
        return Err(Error::InvalidArgument("sample size must be >= 1".into()));
    }
    match branch {
        SupportBranch::Full { alphabet_size, n } => {
            if alphabet_size == 0 || n != est.n {
                return Err(Error::InvalidArgument(format!(
                    "full-support branch needs |X| >= 1 and n = {} (got |X| = {alphabet_size}, n = {n})",
                    est.n
                )));
            }
        }
        SupportBranch::Effective {
            support_size,
            delta_supp,
        } => {
            if support_size == 0 || !(0.0..1.0).contains(&delta_supp) {
                return Err(Error::InvalidArgument(
                    "effective branch needs |X~| >= 1 and delta_supp in [0,1)".into(),
                ));
            }
        }
    }
    let required = branch.params(est.k, est.n, est.z);
    let g1_ok = (est.params.gamma1 - required.gamma1).abs() <= 1e-9 * required.gamma1;
    let g2_ok = est.params.gamma2 >= required.gamma2 * (1.0 - 1e-12);
    if !g1_ok || !g2_ok {
        return Err(Error::GammaPrecondition {
            gamma1: est.params.gamma1,
            gamma2: est.params.gamma2,
            required_gamma1: required.gamma1,
            required_gamma2: required.gamma2,
        });
    }

    let k = est.k as f64;
    let eps = emk_upper + ((1.0 / delta).ln() / k).sqrt();
    let penalty = match branch {
        SupportBranch::Full { alphabet_size, n } => {
            1.0 / k + (1.0 + n as f64 * (1.0 + k * alphabet_size as f64).ln()) * eps
        }
        SupportBranch::Effective {
            support_size,
            delta_supp,
        } => 1.0 / k + (1.0 + (1.0 + k * support_size as f64).ln()) * (delta_supp + eps),
    };
    Ok(BoundReport {
        lower_bound: (1.0 - eps) * est.value - penalty,
        epsilon_k: eps,
        delta,
        emk_upper,
        branch,
        estimate: est.clone(),
    })
}

/// Runs the basic estimator with the certificate's prescribed
/// stabilization and returns the bound.
pub fn certified_estimate<A, F>(
    samples: &[Vec<A>],
    prob_of: F,
    delta: f64,
    emk_upper: f64,
    branch: SupportBranch,
) -> Result<BoundReport>
where
    A: Eq + Hash + Clone,
    F: Fn(&[A]) -> f64,
{
    let joint = empirical_joint(samples, prob_of)?;
    let params = branch.params(samples.len(), joint.arity(), joint.z);
    let est = estimate_from_joint(&joint, samples.len(), params);
    thm2_lower_bound(&est, delta, emk_upper, branch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::make_gibbs;
    use crate::similarity::{f1_text, DEFAULT_TAU};
    use approx::assert_abs_diff_eq;

    fn never(_: &Vec<usize>, _: &Vec<usize>) -> f64 {
        0.0
    }

    #[test]
    fn collapses_to_exact_mi_on_full_support() {
        let g = make_gibbs(3, 0.7).unwrap();
        let samples: Vec<Vec<usize>> = (0..g.space().size())
            .map(|f| g.space().unravel(f))
            .collect();
        let est = estimate_mi_alg1(
            &samples,
            |t| g.prob(g.space().ravel(t)),
            StabilizationParams::zero(),
        )
        .unwrap();
        assert_abs_diff_eq!(est.value, g.mutual_information_exact(), epsilon = 1e-12);
        assert_abs_diff_eq!(est.z, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn product_distribution_estimates_zero() {
        let a = [0.3, 0.7];
        let b = [0.6, 0.4];
        let samples = vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1], vec![1, 1]];
        let est = estimate_mi_alg1(
            &samples,
            |t: &[usize]| a[t[0]] * b[t[1]],
            StabilizationParams::zero(),
        )
        .unwrap();
        assert_abs_diff_eq!(est.value, 0.0, epsilon = 1e-15);
        assert_eq!(est.support, 4);
        assert_eq!(est.k, 5);
    }

    #[test]
    fn zero_mass_is_an_error() {
        let samples = vec![vec![0, 0]];
        let r = estimate_mi_alg1(&samples, |_: &[usize]| 0.0, StabilizationParams::zero());
        assert!(matches!(r, Err(Error::NoMassObserved)));
    }

    #[test]
    fn alg2_without_merges_matches_alg1() {
        let g = make_gibbs(4, 0.5).unwrap();
        let samples: Vec<Vec<usize>> = g
            .sample_indices(200, 11)
            .into_iter()
            .map(|f| g.space().unravel(f))
            .collect();
        let p = |t: &[usize]| g.prob(g.space().ravel(t));
        let params = StabilizationParams::inverse_k(200);
        let a = estimate_mi_alg1(&samples, p, params).unwrap();
        let b = estimate_mi_alg2(&samples, p, params, never, 0.5).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn alg2_single_cluster() {
        let samples = vec![vec![0, 1], vec![1, 0], vec![1, 1]];
        let params = StabilizationParams::new(0.1, 0.3).unwrap();
        let est = estimate_mi_alg2(&samples, |_: &[usize]| 0.2, params, |_, _| 1.0, 0.5).unwrap();
        assert_abs_diff_eq!(est.value, (1.1f64 / 1.3).ln(), epsilon = 1e-15);
        let est0 = estimate_mi_alg2(
            &samples,
            |_: &[usize]| 0.2,
            StabilizationParams::zero(),
            |_, _| 1.0,
            0.5,
        )
        .unwrap();
        assert_eq!(est0.value, 0.0);
    }

    #[test]
    fn alg2_two_cluster_hand_enumeration() {
        // Six samples over (first, second) words. Tuples whose first word
        // starts with the same letter are merged.
        let samples: Vec<Vec<&str>> = vec![
            vec!["a1", "x"],
            vec!["a2", "x"],
            vec!["a1", "x"],
            vec!["b1", "y"],
            vec!["b2", "x"],
            vec!["b1", "y"],
        ];
        let prob = |t: &[&str]| match (t[0], t[1]) {
            ("a1", "x") => 0.3,
            ("a2", "x") => 0.1,
            ("b1", "y") => 0.2,
            ("b2", "x") => 0.05,
            _ => unreachable!(),
        };
        let sim = |a: &Vec<&str>, b: &Vec<&str>| {
            if a[0].as_bytes()[0] == b[0].as_bytes()[0] {
                1.0
            } else {
                0.0
            }
        };
        let est = estimate_mi_alg2(&samples, prob, StabilizationParams::zero(), sim, 0.5).unwrap();
        // centers (a1,x) with mass 0.4 and (b1,y) with mass 0.25, Z = 0.65.
        // mu_hat = (8/13, 5/13); coordinates differ on both axes so the
        // product equals mu_hat^2 and I = sum p ln(1/p) = H(8/13, 5/13).
        let p: f64 = 8.0 / 13.0;
        let q: f64 = 5.0 / 13.0;
        assert_abs_diff_eq!(est.z, 0.65, epsilon = 1e-15);
        assert_eq!(est.support, 2);
        assert_abs_diff_eq!(est.value, -(p * p.ln() + q * q.ln()), epsilon = 1e-12);
    }

    #[test]
    fn stabilization_is_monotone() {
        let g = make_gibbs(2, 0.5).unwrap();
        let samples: Vec<Vec<usize>> = g
            .sample_indices(30, 5)
            .into_iter()
            .map(|f| g.space().unravel(f))
            .collect();
        let joint = empirical_joint(&samples, |t| g.prob(g.space().ravel(t))).unwrap();
        let mut prev = f64::INFINITY;
        for g2 in [0.0, 0.01, 0.1, 1.0] {
            let v = joint.estimate_value(StabilizationParams::new(0.05, g2).unwrap());
            assert!(v <= prev);
            prev = v;
        }
        let mut prev = f64::NEG_INFINITY;
        for g1 in [0.0, 0.01, 0.1, 1.0] {
            let v = joint.estimate_value(StabilizationParams::new(g1, 0.05).unwrap());
            assert!(v >= prev);
            prev = v;
        }
    }

    fn capitals_cond(given: &&str, of: &&str) -> Result<f64> {
        Ok(match (*given, *of) {
            ("London", "London") => 0.6,
            ("London", "London, UK") => 0.15,
            ("London", "Paris") => 0.05,
            ("London", "Berlin") => 0.04,
            ("Paris", "Paris") => 0.5,
            ("Paris", _) => 0.1,
            ("Berlin", "Berlin") => 0.5,
            ("Berlin", _) => 0.1,
            _ => unreachable!(),
        })
    }

    fn capitals_marginal(x: &&str) -> Result<f64> {
        Ok(match *x {
            "London" => 0.5,
            "London, UK" => 0.2,
            "Paris" => 0.1,
            "Berlin" => 0.05,
            _ => unreachable!(),
        })
    }

    #[test]
    fn alg3_capitals_example() {
        let samples = ["London", "London", "London, UK", "Paris", "Berlin"];
        let r = estimate_mi_alg3(
            &samples,
            capitals_marginal,
            capitals_cond,
            StabilizationParams::zero(),
            |a: &&str, b: &&str| f1_text(a, b),
            DEFAULT_TAU,
        )
        .unwrap();
        assert_eq!(r.centers, vec!["London", "Paris", "Berlin"]);
        assert_abs_diff_eq!(r.estimate.z, 0.85, epsilon = 1e-12);
        assert_abs_diff_eq!(r.marginal[0], 0.82, epsilon = 0.005);
        assert_abs_diff_eq!(r.marginal[1], 2.0 / 17.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.marginal[2], 1.0 / 17.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.conditional[0][2], 0.04 / 0.84, epsilon = 1e-12);
        assert_abs_diff_eq!(r.cond_normalizers[0], 0.84, epsilon = 1e-12);
        assert_abs_diff_eq!(r.conditional[0][0], 0.89, epsilon = 0.005);
        assert_abs_diff_eq!(r.conditional[0][1], 0.06, epsilon = 0.005);
        assert_eq!(r.default_center(), 0);
        for row in &r.conditional {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn alg3_independent_conditionals_give_zero() {
        let samples = ["London", "London, UK", "Paris", "Berlin"];
        let r = estimate_mi_alg3(
            &samples,
            capitals_marginal,
            |_: &&str, of: &&str| capitals_marginal(of),
            StabilizationParams::zero(),
            |a: &&str, b: &&str| f1_text(a, b),
            DEFAULT_TAU,
        )
        .unwrap();
        assert_abs_diff_eq!(r.estimate.value, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn alg3_zero_conditional_names_center() {
        let samples = ["Paris", "Rome"];
        let r = estimate_mi_alg3(
            &samples,
            |_: &&str| Ok(0.5),
            |g: &&str, _: &&str| Ok(if *g == "Rome" { 0.0 } else { 0.5 }),
            StabilizationParams::zero(),
            |a: &&str, b: &&str| f1_text(a, b),
            DEFAULT_TAU,
        );
        match r {
            Err(Error::ZeroConditionalMass { center }) => assert!(center.contains("Rome")),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn est(value: f64, k: usize, n: usize, z: f64, params: StabilizationParams) -> MiEstimate {
        MiEstimate {
            value,
            k,
            n,
            z,
            support: 1,
            params,
        }
    }

    #[test]
    fn bound_plug_in_limit() {
        let branch = SupportBranch::Full {
            alphabet_size: 2,
            n: 2,
        };
        let e = est(0.4, 1000, 2, 1.0, branch.params(1000, 2, 1.0));
        let r = thm2_lower_bound(&e, 1.0 - 1e-15, 0.0, branch).unwrap();
        assert_abs_diff_eq!(r.lower_bound, 0.4 - 1e-3, epsilon = 1e-6);
    }

    #[test]
    fn bound_full_branch_arithmetic() {
        // eps = 0.01 + sqrt(ln 20 / 1000)
        // bound = (1 - eps) * 0.5 - (0.001 + (1 + 2 ln 2001) * eps)
        let branch = SupportBranch::Full {
            alphabet_size: 2,
            n: 2,
        };
        let e = est(0.5, 1000, 2, 0.99, branch.params(1000, 2, 0.99));
        let r = thm2_lower_bound(&e, 0.05, 0.01, branch).unwrap();
        assert_abs_diff_eq!(r.epsilon_k, 0.06473328305111974, epsilon = 1e-12);
        assert_abs_diff_eq!(r.lower_bound, -0.5822273823967818, epsilon = 1e-12);
    }

    #[test]
    fn effective_branch_is_tighter_at_chosen_numbers() {
        let full = SupportBranch::Full {
            alphabet_size: 50,
            n: 2,
        };
        let eff = SupportBranch::Effective {
            support_size: 20,
            delta_supp: 0.0,
        };
        let a = thm2_lower_bound(
            &est(0.5, 1000, 2, 0.99, full.params(1000, 2, 0.99)),
            0.05,
            0.01,
            full,
        )
        .unwrap();
        let b = thm2_lower_bound(
            &est(0.5, 1000, 2, 0.99, eff.params(1000, 2, 0.99)),
            0.05,
            0.01,
            eff,
        )
        .unwrap();
        assert!((1.0f64 + 1000.0 * 20.0).ln() <= 2.0 * (1.0f64 + 1000.0 * 50.0).ln());
        assert!(b.lower_bound >= a.lower_bound);
    }

    #[test]
    fn bound_rejects_small_gamma2() {
        let branch = SupportBranch::Full {
            alphabet_size: 2,
            n: 2,
        };
        let mut params = branch.params(100, 2, 0.9);
        params.gamma2 *= 0.5;
        let r = thm2_lower_bound(&est(0.5, 100, 2, 0.9, params), 0.05, 0.1, branch);
        match r {
            Err(Error::GammaPrecondition {
                required_gamma2, ..
            }) => {
                assert_abs_diff_eq!(required_gamma2, 1.0 / 400.0 + 0.2, epsilon = 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
