//! Missing mass of a finite sample: exact value, expectation, Good-Turing,
//! and the upper bounds on the expected missing mass that feed the MI
//! certificate.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dist::{Atom, Categorical, TupleSpace};
use crate::error::{Error, Result};
use crate::prompt::{ConditionalModel, PromptFamily};
use crate::rng::derive_seed;

/// A bound reported both raw and clamped to `[0, 1]`. Consumers should use
/// `clamped`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub raw: f64,
    pub clamped: f64,
}

impl Bound {
    pub fn new(raw: f64) -> Self {
        Self {
            raw,
            clamped: raw.clamp(0.0, 1.0),
        }
    }
}

/// `U_k`: total probability of the tuples absent from `sample` (flat indices).
/// Observed mass is summed in first-occurrence order.
pub fn missing_mass_exact(dist: &Categorical, sample: &[usize]) -> f64 {
    let observed: f64 = crate::similarity::dedupe(sample)
        .into_iter()
        .map(|i| dist.prob(sample[i]))
        .sum();
    (1.0 - observed).max(0.0)
}

/// `E[U_k] = sum mu(x) (1 - mu(x))^k`.
pub fn expected_missing_mass_exact(dist: &Categorical, k: usize) -> f64 {
    expected_missing_mass(dist.weights(), k)
}

pub fn expected_missing_mass(weights: &[f64], k: usize) -> f64 {
    let k = k as f64;
    weights
        .iter()
        .filter(|w| **w > 0.0)
        .map(|&w| {
            if w >= 1.0 {
                if k == 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                w * (k * (-w).ln_1p()).exp()
            }
        })
        .sum()
}

/// `Var(U_k)` from `E[U_k^2] = sum_x mu_x^2 (1-mu_x)^k + sum_{x != y} mu_x mu_y (1-mu_x-mu_y)^k`.
/// Quadratic in the support size.
pub fn variance_missing_mass(weights: &[f64], k: usize) -> f64 {
    let w: Vec<f64> = weights.iter().copied().filter(|w| *w > 0.0).collect();
    let k = k as i32;
    let mut second = 0.0;
    for (i, &a) in w.iter().enumerate() {
        second += a * a * (1.0 - a).powi(k);
        for &b in &w[i + 1..] {
            second += 2.0 * a * b * (1.0 - a - b).max(0.0).powi(k);
        }
    }
    let mean = expected_missing_mass(weights, k as usize);
    (second - mean * mean).max(0.0)
}

/// Good-Turing estimate `M / k`, `M` the number of elements seen exactly once.
pub fn good_turing<T: Eq + Hash>(sample: &[T]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::Empty("sample"));
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for s in sample {
        *counts.entry(s).or_default() += 1;
    }
    let singletons = counts.values().filter(|c| **c == 1).count();
    Ok(singletons as f64 / sample.len() as f64)
}

/// Finite-support bound: `exp(-k/N)` for `k <= N`, `N / (e k)` otherwise.
pub fn bound_finite(support: usize, k: usize) -> Result<Bound> {
    if support == 0 || k == 0 {
        return Err(Error::InvalidArgument(
            "bound_finite needs N >= 1 and k >= 1".into(),
        ));
    }
    let (n, k) = (support as f64, k as f64);
    let raw = if k <= n {
        (-k / n).exp()
    } else {
        n / (std::f64::consts::E * k)
    };
    Ok(Bound::new(raw))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyBound {
    /// `min(1, h / H_k)` with `H_k` the k-th harmonic number.
    pub harmonic: Bound,
    /// The looser `h / ln k`; absent for `k < 2`.
    pub log_form: Option<Bound>,
}

/// Bounded-entropy bound on the expected missing mass.
pub fn bound_entropy(h: f64, k: usize) -> Result<EntropyBound> {
    if h.is_nan() || h < 0.0 || k == 0 {
        return Err(Error::InvalidArgument(
            "bound_entropy needs h >= 0 and k >= 1".into(),
        ));
    }
    let harmonic_number: f64 = (1..=k).map(|i| 1.0 / i as f64).sum();
    let log_form = (k >= 2).then(|| Bound::new(h / (k as f64).ln()));
    Ok(EntropyBound {
        harmonic: Bound::new(h / harmonic_number),
        log_form,
    })
}

/// `mu(i) = i^-alpha / H(alpha, N)` over atoms `1..=N`.
pub fn make_zipf(n_atoms: usize, alpha: f64) -> Result<Categorical> {
    if n_atoms == 0 {
        return Err(Error::InvalidArgument("zipf needs N >= 1".into()));
    }
    if alpha.is_nan() || alpha <= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "zipf exponent must exceed 1, got {alpha}"
        )));
    }
    let weights = zipf_weights(n_atoms, alpha);
    let atoms = (1..=n_atoms as i64).map(Atom::Int).collect();
    Categorical::new(Arc::new(TupleSpace::single(atoms)?), weights)
}

pub(crate) fn zipf_weights(n_atoms: usize, alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n_atoms).map(|i| (i as f64).powf(-alpha)).collect();
    let h: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / h).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZipfDecay {
    pub alpha: f64,
    pub n_atoms: usize,
    /// `(k, E[U_k])` pairs.
    pub curve: Vec<(usize, f64)>,
    /// Least-squares slope of `ln E[U_k]` against `ln k`.
    pub slope: f64,
    /// `-(alpha - 1) / alpha`.
    pub target: f64,
    /// Set when the grid reaches `k > N`, where finite-support exponential
    /// decay dominates and the slope is not meaningful.
    pub finite_support_regime: bool,
}

/// Decay rate of the exact expected missing mass of a Zipf distribution.
pub fn zipf_decay_check(alpha: f64, n_atoms: usize, k_grid: &[usize]) -> Result<ZipfDecay> {
    if k_grid.len() < 2 || k_grid.windows(2).any(|w| w[0] >= w[1]) || k_grid[0] == 0 {
        return Err(Error::InvalidArgument(
            "k grid must be increasing with >= 2 positive points".into(),
        ));
    }
    let dist = make_zipf(n_atoms, alpha)?;
    let curve: Vec<(usize, f64)> = k_grid
        .iter()
        .map(|&k| (k, expected_missing_mass_exact(&dist, k)))
        .collect();
    let finite_support_regime = *k_grid.last().unwrap() > n_atoms;
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .filter(|(_, e)| *e > 0.0)
        .map(|&(k, e)| ((k as f64).ln(), e.ln()))
        .collect();
    let slope = least_squares_slope(&pts);
    Ok(ZipfDecay {
        alpha,
        n_atoms,
        curve,
        slope,
        target: -(alpha - 1.0) / alpha,
        finite_support_regime,
    })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// `eps_k = emk_upper + sqrt(ln(1/delta) / k)`.
pub fn epsilon_k(emk_upper: f64, k: usize, delta: f64) -> Result<Bound> {
    if !(delta > 0.0 && delta < 1.0) || k == 0 {
        return Err(Error::InvalidArgument(
            "epsilon_k needs delta in (0,1) and k >= 1".into(),
        ));
    }
    Ok(Bound::new(emk_upper + concentration_term(k, delta)))
}

/// `sqrt(ln(1/delta) / k)`.
pub fn concentration_term(k: usize, delta: f64) -> f64 {
    ((1.0 / delta).ln() / k as f64).sqrt()
}

/// Data-dependent bound `U~_k + 1 - P(X~) + sqrt(ln(1/delta)/k)`.
pub fn data_dependent_emk_bound(
    missing_on_support: f64,
    support_mass: f64,
    k: usize,
    delta: f64,
) -> Result<Bound> {
    if !(0.0..=1.0).contains(&missing_on_support) || !(0.0..=1.0).contains(&support_mass) {
        return Err(Error::InvalidArgument(
            "missing mass and support mass must lie in [0,1]".into(),
        ));
    }
    if !(delta > 0.0 && delta < 1.0) || k == 0 {
        return Err(Error::InvalidArgument(
            "needs delta in (0,1) and k >= 1".into(),
        ));
    }
    Ok(Bound::new(
        missing_on_support + 1.0 - support_mass + concentration_term(k, delta),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EffectiveSupport {
    /// Distinct responses with their model probabilities, in discovery order.
    pub responses: Vec<(String, f64)>,
    pub mass: f64,
    /// Number of draws taken.
    pub draws: usize,
    /// False when the cap was hit before reaching the mass target.
    pub reached_target: bool,
}

impl EffectiveSupport {
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Missing mass on this support for a sample of response texts,
    /// i.e. the support mass not covered by `sample`.
    pub fn missing_on_support<S: AsRef<str>>(&self, sample: &[S]) -> f64 {
        let seen: HashSet<&str> = sample.iter().map(|s| s.as_ref()).collect();
        self.responses
            .iter()
            .filter(|(r, _)| !seen.contains(r.as_str()))
            .map(|(_, p)| p)
            .sum()
    }
}

/// Sample responses one at a time until their distinct probability mass
/// reaches `mass_target` or `cap` draws have been made.
pub fn discover_effective_support<M: ConditionalModel + ?Sized>(
    model: &M,
    query: &str,
    mass_target: f64,
    cap: usize,
    temperature: f64,
    seed: u64,
) -> Result<EffectiveSupport> {
    let prompt = PromptFamily::new(query).render::<&str>(&[]);
    let mut seen = HashSet::new();
    let mut out = EffectiveSupport {
        responses: Vec::new(),
        mass: 0.0,
        draws: 0,
        reached_target: false,
    };
    while out.draws < cap {
        let draw = model
            .sample(&prompt, 1, temperature, derive_seed(seed, out.draws as u64))?
            .pop()
            .ok_or_else(|| Error::MalformedResponse("empty sample".into()))?;
        out.draws += 1;
        if seen.insert(draw.text.clone()) {
            out.mass += draw.prob;
            out.responses.push((draw.text, draw.prob));
        }
        if out.mass >= mass_target {
            out.reached_target = true;
            break;
        }
    }
    Ok(out)
}

/// One CSV row of a missing-mass report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingMassReport {
    pub k: usize,
    pub u_k: f64,
    pub expected_u_k: Option<f64>,
    pub bound_name: String,
    pub bound: f64,
    pub epsilon_k: f64,
    pub delta: f64,
}
