//! Seeded experiment runners. Every runner is deterministic given its
//! config; parallel work is merged back in grid order.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionHead;
use crate::backend::{ContextPolicy, OracleEntry, SyntheticOracle};
use crate::dist::{make_gibbs, Atom, Categorical, TupleSpace};
use crate::error::{Error, Result};
use crate::estimators::{certified_estimate, estimate_mi_alg1, StabilizationParams, SupportBranch};
use crate::missing_mass::{
    bound_entropy, bound_finite, expected_missing_mass_exact, good_turing, make_zipf,
    missing_mass_exact, variance_missing_mass,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scores::{
    calibrate_threshold, evaluate, AbstentionPolicy, Metrics, QueryRecord, ScoreName, ScoredQuery,
    Threshold,
};

/// `count` integers evenly spaced from `lo` to `hi` inclusive, rounded down.
pub fn linspace_usize(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let steps = count - 1;
            (0..count)
                .map(|i| (lo * steps + (hi - lo) * i) / steps)
                .collect()
        }
    }
}

/// Sample mean and sample standard deviation (`n - 1` denominator; 0 for a
/// single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn tuples_of(dist: &Categorical, indices: &[usize]) -> Vec<Vec<usize>> {
    indices.iter().map(|&i| dist.space().unravel(i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceConfig {
    pub ns: Vec<usize>,
    pub temps: Vec<f64>,
    pub ks: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            ns: vec![2, 4, 8],
            temps: vec![0.01, 0.1, 1.0, 10.0],
            ks: linspace_usize(10, 1000, 20),
            replicates: 1,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub temp: f64,
    pub k: usize,
    pub replicate: usize,
    pub estimate: f64,
    pub exact: f64,
    pub z: f64,
}

/// For each `(n, temp)` cell: exact MI of the Gibbs family, then the basic
/// estimator with `gamma1 = gamma2 = 1/k` on fresh samples of every size.
pub fn run_convergence(cfg: &ConvergenceConfig) -> Result<Vec<ConvergenceRow>> {
    if cfg.ns.is_empty() || cfg.temps.is_empty() || cfg.ks.is_empty() || cfg.replicates == 0 {
        return Err(Error::InvalidArgument("convergence grid is empty".into()));
    }
    if cfg.ks.contains(&0) {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let cells: Vec<(usize, f64)> = cfg
        .ns
        .iter()
        .flat_map(|&n| cfg.temps.iter().map(move |&t| (n, t)))
        .collect();
    let dists = cells
        .par_iter()
        .map(|&(n, t)| {
            let d = make_gibbs(n, t)?;
            let exact = d.mutual_information_exact();
            Ok((d, exact))
        })
        .collect::<Result<Vec<_>>>()?;
    let tasks: Vec<(usize, usize, usize)> = (0..cells.len())
        .flat_map(|c| {
            (0..cfg.replicates).flat_map(move |r| (0..cfg.ks.len()).map(move |ki| (c, r, ki)))
        })
        .collect();
    tasks
        .par_iter()
        .map(|&(c, r, ki)| {
            let (dist, exact) = &dists[c];
            let k = cfg.ks[ki];
            let seed = derive_seed(
                derive_seed(derive_seed(cfg.seed, c as u64), r as u64),
                k as u64,
            );
            let samples = tuples_of(dist, &dist.sample_indices(k, seed));
            let space = dist.space();
            let est = estimate_mi_alg1(
                &samples,
                |t: &[usize]| dist.prob(space.ravel(t)),
                StabilizationParams::inverse_k(k),
            )?;
            Ok(ConvergenceRow {
                n: cells[c].0,
                temp: cells[c].1,
                k,
                replicate: r,
                estimate: est.value,
                exact: *exact,
                z: est.z,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MassFamily {
    Uniform { n: usize },
    Zipf { n: usize, alpha: f64 },
    Gibbs { n: usize, temp: f64 },
}

impl MassFamily {
    pub fn build(&self) -> Result<Categorical> {
        match *self {
            MassFamily::Uniform { n } => {
                if n == 0 {
                    return Err(Error::InvalidArgument("uniform family needs N >= 1".into()));
                }
                let atoms = (1..=n as i64).map(Atom::Int).collect();
                Ok(Categorical::uniform(Arc::new(TupleSpace::single(atoms)?)))
            }
            MassFamily::Zipf { n, alpha } => make_zipf(n, alpha),
            MassFamily::Gibbs { n, temp } => make_gibbs(n, temp),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MissingMassConfig {
    pub family: MassFamily,
    pub ks: Vec<usize>,
    pub trials: usize,
    pub delta: f64,
    pub seed: u64,
}

impl Default for MissingMassConfig {
    fn default() -> Self {
        Self {
            family: MassFamily::Uniform { n: 100 },
            ks: vec![10, 100, 1000],
            trials: 10_000,
            delta: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingMassRow {
    pub k: usize,
    pub support: usize,
    pub expected_u_k: f64,
    pub bound_finite: f64,
    pub bound_entropy: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    /// `sqrt(Var(U_k) / trials)` from the exact variance; only for supports
    /// of at most 5000 atoms.
    pub exact_se: Option<f64>,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub good_turing_mean: f64,
    /// `E[GT] - E[U_k]`, i.e. the expected singleton mass divided by `k`.
    pub good_turing_bias: f64,
    /// Fraction of trials with `U_k < E[U_k] - sqrt(ln(1/delta)/k)`.
    pub lower_tail_freq: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Exact expectation, closed-form bounds and Monte Carlo statistics of the
/// missing mass for every `k`.
pub fn run_missing_mass(cfg: &MissingMassConfig) -> Result<Vec<MissingMassRow>> {
    if cfg.ks.is_empty() || cfg.trials < 2 {
        return Err(Error::InvalidArgument(
            "need a nonempty k grid and >= 2 trials".into(),
        ));
    }
    if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0,1), got {}",
            cfg.delta
        )));
    }
    let dist = cfg.family.build()?;
    let support = dist.support_size();
    let h = dist.entropy();
    cfg.ks
        .iter()
        .enumerate()
        .map(|(ki, &k)| {
            if k == 0 {
                return Err(Error::InvalidArgument("k must be >= 1".into()));
            }
            let expected = expected_missing_mass_exact(&dist, k);
            let draws: Vec<(f64, f64)> = (0..cfg.trials)
                .into_par_iter()
                .map(|trial| {
                    let s = dist.sample_indices(
                        k,
                        derive_seed(derive_seed(cfg.seed, ki as u64), trial as u64),
                    );
                    Ok((missing_mass_exact(&dist, &s), good_turing(&s)?))
                })
                .collect::<Result<_>>()?;
            let mut u: Vec<f64> = draws.iter().map(|d| d.0).collect();
            let gt: Vec<f64> = draws.iter().map(|d| d.1).collect();
            let (mean, sd) = mean_sd(&u);
            let cut = expected - crate::missing_mass::concentration_term(k, cfg.delta);
            let lower = u.iter().filter(|&&x| x < cut).count();
            u.sort_by(f64::total_cmp);
            let bias: f64 = dist
                .weights()
                .iter()
                .map(|&w| w * w * (1.0 - w).powi(k as i32 - 1))
                .sum();
            Ok(MissingMassRow {
                k,
                support,
                expected_u_k: expected,
                bound_finite: bound_finite(support, k)?.clamped,
                bound_entropy: bound_entropy(h, k)?.harmonic.clamped,
                mc_mean: mean,
                mc_se: sd / (cfg.trials as f64).sqrt(),
                exact_se: (support <= 5000)
                    .then(|| (variance_missing_mass(dist.weights(), k) / cfg.trials as f64).sqrt()),
                q05: quantile(&u, 0.05),
                q50: quantile(&u, 0.5),
                q95: quantile(&u, 0.95),
                good_turing_mean: mean_sd(&gt).0,
                good_turing_bias: bias,
                lower_tail_freq: lower as f64 / cfg.trials as f64,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageConfig {
    pub n: usize,
    pub temps: Vec<f64>,
    pub k: usize,
    pub trials: usize,
    pub delta: f64,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            n: 2,
            temps: vec![0.1, 1.0, 10.0],
            k: 100,
            trials: 1000,
            delta: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub temp: f64,
    pub k: usize,
    pub trials: usize,
    pub exact: f64,
    pub covered: usize,
    pub coverage: f64,
    pub mean_estimate: f64,
    pub mean_lower_bound: f64,
}

/// Fraction of seeded trials in which the full-support certificate, run with
/// its prescribed stabilization and the exact `E[U_k]`, stays below the
/// exact mutual information.
pub fn run_coverage(cfg: &CoverageConfig) -> Result<Vec<CoverageRow>> {
    if cfg.trials == 0 || cfg.k == 0 || cfg.temps.is_empty() {
        return Err(Error::InvalidArgument(
            "coverage needs trials, k and temps".into(),
        ));
    }
    cfg.temps
        .iter()
        .enumerate()
        .map(|(ti, &temp)| {
            let dist = make_gibbs(cfg.n, temp)?;
            let exact = dist.mutual_information_exact();
            let emk = expected_missing_mass_exact(&dist, cfg.k);
            let branch = SupportBranch::Full {
                alphabet_size: 2,
                n: cfg.n,
            };
            let space = dist.space();
            let reports: Vec<(f64, f64)> = (0..cfg.trials)
                .into_par_iter()
                .map(|trial| {
                    let idx = dist.sample_indices(
                        cfg.k,
                        derive_seed(derive_seed(cfg.seed, ti as u64), trial as u64),
                    );
                    let samples = tuples_of(&dist, &idx);
                    let r = certified_estimate(
                        &samples,
                        |t: &[usize]| dist.prob(space.ravel(t)),
                        cfg.delta,
                        emk,
                        branch,
                    )?;
                    Ok((r.estimate.value, r.lower_bound))
                })
                .collect::<Result<_>>()?;
            let covered = reports.iter().filter(|r| r.1 <= exact).count();
            Ok(CoverageRow {
                temp,
                k: cfg.k,
                trials: cfg.trials,
                exact,
                covered,
                coverage: covered as f64 / cfg.trials as f64,
                mean_estimate: mean_sd(&reports.iter().map(|r| r.0).collect::<Vec<_>>()).0,
                mean_lower_bound: mean_sd(&reports.iter().map(|r| r.1).collect::<Vec<_>>()).0,
            })
        })
        .collect()
}

pub const TAG_SINGLE: &str = "single";
pub const TAG_MULTI: &str = "multi";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub n_single: usize,
    pub n_multi: usize,
    /// Share of single-answer queries the model knows.
    pub known_fraction: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_single: 500,
            n_multi: 500,
            known_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Synthetic stand-in for a mixed single/multi-answer QA set, with the
/// oracle that answers it.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub oracle: SyntheticOracle,
    pub records: Vec<QueryRecord>,
}

fn split_mass(rng: &mut impl Rng, total: f64, parts: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..parts).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|r| total * r / s).collect()
}

/// Single-answer queries are either known (the correct answer carries most
/// of the mass and the context barely matters) or hallucinated (the mass is
/// spread over wrong answers and the model copies its context). Multi-answer
/// queries are uniform over 2 to 5 correct answers and ignore the context.
/// Every answer is a distinct single token.
pub fn synthetic_mixed_benchmark(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    if cfg.n_single + cfg.n_multi == 0 || !(0.0..=1.0).contains(&cfg.known_fraction) {
        return Err(Error::InvalidArgument(
            "benchmark needs queries and a known fraction in [0,1]".into(),
        ));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut entries = Vec::new();
    let mut records = Vec::new();
    for q in 0..cfg.n_single {
        let query = format!("single question {q}");
        let answer = |j: usize| format!("s{q}a{j}");
        let known = rng.random_bool(cfg.known_fraction);
        let (responses, policy) = if known {
            let p = rng.random_range(0.85..0.97);
            let wrong = rng.random_range(1..=2);
            let mut r = vec![(answer(0), p)];
            r.extend(
                split_mass(&mut rng, 1.0 - p, wrong)
                    .into_iter()
                    .enumerate()
                    .map(|(j, m)| (answer(j + 1), m)),
            );
            (
                r,
                ContextPolicy::Copier {
                    strength: rng.random_range(0.0..0.15),
                },
            )
        } else {
            let candidates = rng.random_range(2..=4);
            // below the smallest possible top wrong answer, 0.8 / 3
            let p = rng.random_range(0.05..0.2);
            let mut r = vec![(answer(0), p)];
            r.extend(
                split_mass(&mut rng, 1.0 - p, candidates - 1)
                    .into_iter()
                    .enumerate()
                    .map(|(j, m)| (answer(j + 1), m)),
            );
            (
                r,
                ContextPolicy::Copier {
                    strength: rng.random_range(0.6..0.9),
                },
            )
        };
        entries.push(OracleEntry::new(query.clone(), responses).with_policy(policy));
        records.push(QueryRecord::new(query, [answer(0)], Some(TAG_SINGLE))?);
    }
    for q in 0..cfg.n_multi {
        let query = format!("multi question {q}");
        let m = rng.random_range(2..=5);
        let answers: Vec<String> = (0..m).map(|j| format!("m{q}a{j}")).collect();
        entries.push(OracleEntry::new(
            query.clone(),
            answers.iter().map(|a| (a.clone(), 1.0 / m as f64)),
        ));
        records.push(QueryRecord::new(query, answers, Some(TAG_MULTI))?);
    }
    let oracle = SyntheticOracle::new(normalize_entries(entries), derive_seed(cfg.seed, 1))?;
    Ok(Benchmark { oracle, records })
}

fn normalize_entries(entries: Vec<OracleEntry>) -> Vec<OracleEntry> {
    entries
        .into_iter()
        .map(|mut e| {
            let total: f64 = e.responses.iter().map(|r| r.prob).sum();
            for r in &mut e.responses {
                r.prob /= total;
            }
            e
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub target_loss: f64,
    pub repetitions: usize,
    pub calibration_fraction: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            target_loss: 0.05,
            repetitions: 10,
            calibration_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub repetition: usize,
    pub score: ScoreName,
    pub threshold: Threshold,
    pub overall: Metrics,
    /// Test metrics restricted to each tag.
    pub by_tag: BTreeMap<String, Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub score: ScoreName,
    /// `all` or a tag.
    pub stratum: String,
    pub recall_mean: f64,
    pub recall_2sd: f64,
    pub error_mean: f64,
    pub error_2sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub runs: Vec<RepetitionResult>,
    pub summary: Vec<SummaryRow>,
}

impl CalibrationReport {
    pub fn summary_for(&self, score: ScoreName, stratum: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.score == score && s.stratum == stratum)
    }
}

/// Repeatedly split into calibration and test halves, calibrate every score
/// to the target loss and evaluate on the test half.
pub fn calibrate_evaluate(
    scored: &[ScoredQuery],
    cfg: &CalibrationConfig,
) -> Result<CalibrationReport> {
    if scored.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two scored queries".into(),
        ));
    }
    if cfg.repetitions == 0 || !(cfg.calibration_fraction > 0.0 && cfg.calibration_fraction < 1.0) {
        return Err(Error::InvalidArgument(
            "need repetitions >= 1 and a calibration fraction in (0,1)".into(),
        ));
    }
    let n_cal = ((scored.len() as f64 * cfg.calibration_fraction).round() as usize)
        .clamp(1, scored.len() - 1);
    let mut tags: Vec<String> = scored.iter().filter_map(|q| q.tag.clone()).collect();
    tags.sort();
    tags.dedup();
    let runs = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| {
            let mut order: Vec<usize> = (0..scored.len()).collect();
            order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, rep as u64)));
            let cal: Vec<ScoredQuery> = order[..n_cal].iter().map(|&i| scored[i].clone()).collect();
            let test: Vec<ScoredQuery> =
                order[n_cal..].iter().map(|&i| scored[i].clone()).collect();
            ScoreName::ALL
                .iter()
                .map(|&name| {
                    let policy = calibrate_threshold(&cal, name, cfg.target_loss)?;
                    let mut by_tag = BTreeMap::new();
                    for tag in &tags {
                        let subset: Vec<ScoredQuery> = test
                            .iter()
                            .filter(|q| q.tag.as_deref() == Some(tag))
                            .cloned()
                            .collect();
                        if !subset.is_empty() {
                            by_tag.insert(tag.clone(), evaluate(&subset, &policy)?);
                        }
                    }
                    Ok(RepetitionResult {
                        repetition: rep,
                        score: name,
                        threshold: policy.threshold,
                        overall: evaluate(&test, &policy)?,
                        by_tag,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();

    let mut summary = Vec::new();
    for name in ScoreName::ALL {
        let mine: Vec<&RepetitionResult> = runs.iter().filter(|r| r.score == name).collect();
        let strata = std::iter::once("all".to_owned()).chain(tags.iter().cloned());
        for stratum in strata {
            let metrics: Vec<Metrics> = mine
                .iter()
                .filter_map(|r| {
                    if stratum == "all" {
                        Some(r.overall)
                    } else {
                        r.by_tag.get(&stratum).copied()
                    }
                })
                .collect();
            if metrics.is_empty() {
                continue;
            }
            let (rm, rs) = mean_sd(&metrics.iter().map(|m| m.recall).collect::<Vec<_>>());
            let (em, es) = mean_sd(&metrics.iter().map(|m| m.error_rate).collect::<Vec<_>>());
            summary.push(SummaryRow {
                score: name,
                stratum,
                recall_mean: rm,
                recall_2sd: 2.0 * rs,
                error_mean: em,
                error_2sd: 2.0 * es,
            });
        }
    }
    Ok(CalibrationReport { runs, summary })
}

/// Re-evaluate a fixed policy; handy when the threshold comes from elsewhere.
pub fn evaluate_fixed(scored: &[ScoredQuery], policy: &AbstentionPolicy) -> Result<Metrics> {
    evaluate(scored, policy)
}

/// Identity head of width `d >= 2` where the query row has logit `gap` and
/// the repeated row has logit 0.
pub fn demo_attention(d: usize, gap: f64) -> Result<(AttentionHead, DVector<f64>, DVector<f64>)> {
    if d < 2 {
        return Err(Error::InvalidArgument("demo head needs d >= 2".into()));
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let mut e = DVector::zeros(d);
    e[0] = 1.0;
    let head = AttentionHead::new(eye.clone(), eye.clone(), eye, e)?;
    let mut x = DVector::zeros(d);
    x[0] = gap * (d as f64).sqrt();
    x[d - 1] = 1.0;
    let mut y = DVector::zeros(d);
    y[1] = 1.0;
    Ok((head, x, y))
}
