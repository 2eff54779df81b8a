//! Exact finite categorical distributions over product spaces.
//!
//! A [`TupleSpace`] is the product `Z_1 x ... x Z_n` of finite atom lists and a
//! [`Categorical`] assigns a weight to every tuple in lexicographic
//! enumeration order (last coordinate varies fastest). All logarithms are
//! natural, with `0 ln 0 = 0` and `a ln(a/0) = +inf`.

use std::fmt;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Tolerance on the total weight accepted at construction.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Weights below this are treated as exact zeros.
pub const WEIGHT_FLOOR: f64 = 1e-300;

/// An opaque, comparable atom of a coordinate space.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Atom {
    Int(i64),
    Text(String),
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Int(v) => write!(f, "{v}"),
            Atom::Text(s) => f.write_str(s),
        }
    }
}

impl From<i64> for Atom {
    fn from(v: i64) -> Self {
        Atom::Int(v)
    }
}

impl From<&str> for Atom {
    fn from(s: &str) -> Self {
        Atom::Text(s.to_owned())
    }
}

impl From<String> for Atom {
    fn from(s: String) -> Self {
        Atom::Text(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TupleSpace {
    coords: Vec<Vec<Atom>>,
    #[serde(skip)]
    strides: Vec<usize>,
}

impl TupleSpace {
    pub fn new(coords: Vec<Vec<Atom>>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidDistribution(
                "tuple space needs arity >= 1".into(),
            ));
        }
        for (i, atoms) in coords.iter().enumerate() {
            if atoms.is_empty() {
                return Err(Error::InvalidDistribution(format!(
                    "coordinate {i} has no atoms"
                )));
            }
            let mut sorted: Vec<&Atom> = atoms.iter().collect();
            sorted.sort();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidDistribution(format!(
                    "coordinate {i} has duplicate atoms"
                )));
            }
        }
        let mut strides = vec![1usize; coords.len()];
        for i in (0..coords.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1]
                .checked_mul(coords[i + 1].len())
                .ok_or_else(|| Error::InvalidDistribution("tuple space too large".into()))?;
        }
        strides[0]
            .checked_mul(coords[0].len())
            .ok_or_else(|| Error::InvalidDistribution("tuple space too large".into()))?;
        Ok(Self { coords, strides })
    }

    /// `{-1, +1}^n`, atoms ordered `[-1, +1]`.
    pub fn binary(n: usize) -> Result<Self> {
        Self::new(vec![vec![Atom::Int(-1), Atom::Int(1)]; n])
    }

    /// A single coordinate with the given atoms.
    pub fn single(atoms: Vec<Atom>) -> Result<Self> {
        Self::new(vec![atoms])
    }

    pub fn arity(&self) -> usize {
        self.coords.len()
    }

    pub fn size(&self) -> usize {
        self.strides[0] * self.coords[0].len()
    }

    pub fn coord(&self, i: usize) -> &[Atom] {
        &self.coords[i]
    }

    pub fn coords(&self) -> &[Vec<Atom>] {
        &self.coords
    }

    /// Flat index to per-coordinate atom indices.
    pub fn unravel(&self, flat: usize) -> Vec<usize> {
        self.strides
            .iter()
            .zip(&self.coords)
            .map(|(s, c)| (flat / s) % c.len())
            .collect()
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Atom index of coordinate `coord` in the tuple at `flat`.
    pub fn coord_index(&self, flat: usize, coord: usize) -> usize {
        (flat / self.strides[coord]) % self.coords[coord].len()
    }

    pub fn tuple(&self, flat: usize) -> Vec<Atom> {
        self.unravel(flat)
            .into_iter()
            .enumerate()
            .map(|(c, i)| self.coords[c][i].clone())
            .collect()
    }

    /// Flat index of a tuple given by its atoms.
    pub fn index_of(&self, tuple: &[Atom]) -> Option<usize> {
        if tuple.len() != self.arity() {
            return None;
        }
        let idx = tuple
            .iter()
            .zip(&self.coords)
            .map(|(a, c)| c.iter().position(|b| b == a))
            .collect::<Option<Vec<_>>>()?;
        Some(self.ravel(&idx))
    }
}

impl<'de> Deserialize<'de> for TupleSpace {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            coords: Vec<Vec<Atom>>,
        }
        let raw = Raw::deserialize(d)?;
        TupleSpace::new(raw.coords).map_err(serde::de::Error::custom)
    }
}

/// A probability distribution over a [`TupleSpace`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CategoricalDoc", into = "CategoricalDoc")]
pub struct Categorical {
    space: Arc<TupleSpace>,
    weights: Vec<f64>,
}

/// On-disk form: `{ "space": [[atoms], ...], "weights": [...] }`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CategoricalDoc {
    pub space: Vec<Vec<Atom>>,
    pub weights: Vec<f64>,
}

impl TryFrom<CategoricalDoc> for Categorical {
    type Error = Error;

    fn try_from(doc: CategoricalDoc) -> Result<Self> {
        Categorical::new(Arc::new(TupleSpace::new(doc.space)?), doc.weights)
    }
}

impl From<Categorical> for CategoricalDoc {
    fn from(c: Categorical) -> Self {
        CategoricalDoc {
            space: c.space.coords.clone(),
            weights: c.weights,
        }
    }
}

impl Categorical {
    /// Validates and normalizes `weights`. The sum must already be within
    /// [`SUM_TOLERANCE`] of one.
    pub fn new(space: Arc<TupleSpace>, weights: Vec<f64>) -> Result<Self> {
        let total = validate_weights(&space, &weights)?;
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self::from_valid(space, weights, total))
    }

    /// Like [`Categorical::new`] but accepts any positive total.
    pub fn from_unnormalized(space: Arc<TupleSpace>, weights: Vec<f64>) -> Result<Self> {
        let total = validate_weights(&space, &weights)?;
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        Ok(Self::from_valid(space, weights, total))
    }

    /// Builds the distribution from unnormalized log-weights via log-sum-exp.
    pub fn from_log_weights(space: Arc<TupleSpace>, log_weights: &[f64]) -> Result<Self> {
        if log_weights.len() != space.size() {
            return Err(Error::InvalidDistribution(format!(
                "expected {} log-weights, got {}",
                space.size(),
                log_weights.len()
            )));
        }
        let max = log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidDistribution(
                "log-weights have no finite maximum".into(),
            ));
        }
        let lse = max
            + log_weights
                .iter()
                .map(|l| (l - max).exp())
                .sum::<f64>()
                .ln();
        let weights = log_weights.iter().map(|l| (l - lse).exp()).collect();
        Self::from_unnormalized(space, weights)
    }

    fn from_valid(space: Arc<TupleSpace>, mut weights: Vec<f64>, total: f64) -> Self {
        for w in &mut weights {
            *w /= total;
            if *w < WEIGHT_FLOOR {
                *w = 0.0;
            }
        }
        Self { space, weights }
    }

    pub fn uniform(space: Arc<TupleSpace>) -> Self {
        let n = space.size();
        Self {
            space,
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// Single-coordinate distribution over the given atoms.
    pub fn over_atoms(atoms: Vec<Atom>, weights: Vec<f64>) -> Result<Self> {
        Self::new(Arc::new(TupleSpace::single(atoms)?), weights)
    }

    pub fn space(&self) -> &TupleSpace {
        &self.space
    }

    pub fn shared_space(&self) -> Arc<TupleSpace> {
        Arc::clone(&self.space)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn prob(&self, flat: usize) -> f64 {
        self.weights[flat]
    }

    pub fn prob_of(&self, tuple: &[Atom]) -> f64 {
        self.space.index_of(tuple).map_or(0.0, |i| self.weights[i])
    }

    pub fn support_size(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.weights)
    }

    pub fn kl_divergence(&self, other: &Categorical) -> Result<f64> {
        if self.space != other.space {
            return Err(Error::SpaceMismatch);
        }
        Ok(kl_divergence(&self.weights, &other.weights))
    }

    /// Marginal weights of coordinate `coord`, indexed like `space.coord(coord)`.
    pub fn marginal_weights(&self, coord: usize) -> Result<Vec<f64>> {
        let arity = self.space.arity();
        if coord >= arity {
            return Err(Error::CoordinateOutOfRange {
                index: coord,
                arity,
            });
        }
        let mut out = vec![0.0; self.space.coord(coord).len()];
        for (flat, w) in self.weights.iter().enumerate() {
            out[self.space.coord_index(flat, coord)] += w;
        }
        Ok(out)
    }

    pub fn marginal(&self, coord: usize) -> Result<Categorical> {
        let weights = self.marginal_weights(coord)?;
        let space = Arc::new(TupleSpace::single(self.space.coord(coord).to_vec())?);
        Categorical::from_unnormalized(space, weights)
    }

    pub fn product_of_marginals(&self) -> Categorical {
        let marginals = self.all_marginals();
        let weights = (0..self.space.size())
            .map(|flat| self.product_weight(&marginals, flat))
            .collect();
        Self {
            space: Arc::clone(&self.space),
            weights,
        }
    }

    /// `I(mu) = D_KL(mu, mu^prod)`, summed directly over the support.
    pub fn mutual_information_exact(&self) -> f64 {
        let marginals = self.all_marginals();
        let mut total = 0.0;
        for (flat, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                total += w * (w / self.product_weight(&marginals, flat)).ln();
            }
        }
        total
    }

    fn all_marginals(&self) -> Vec<Vec<f64>> {
        (0..self.space.arity())
            .map(|c| self.marginal_weights(c).expect("coordinate in range"))
            .collect()
    }

    fn product_weight(&self, marginals: &[Vec<f64>], flat: usize) -> f64 {
        marginals
            .iter()
            .enumerate()
            .map(|(c, m)| m[self.space.coord_index(flat, c)])
            .product()
    }

    /// `k` i.i.d. flat indices, reproducible for a given seed.
    pub fn sample_indices(&self, k: usize, seed: u64) -> Vec<usize> {
        let index = WeightedIndex::new(&self.weights).expect("validated weights");
        let mut rng = rng_from_seed(seed);
        (0..k).map(|_| index.sample(&mut rng)).collect()
    }

    pub fn sample_tuples(&self, k: usize, seed: u64) -> Vec<Vec<Atom>> {
        self.sample_indices(k, seed)
            .into_iter()
            .map(|i| self.space.tuple(i))
            .collect()
    }
}

fn validate_weights(space: &TupleSpace, weights: &[f64]) -> Result<f64> {
    if weights.len() != space.size() {
        return Err(Error::InvalidDistribution(format!(
            "expected {} weights, got {}",
            space.size(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidDistribution(format!("invalid weight {w}")));
    }
    Ok(weights.iter().sum())
}

/// Synthetic Gibbs family on `{-1,+1}^n`: weight proportional to
/// `exp(mean_{i<j} x_i x_j / temp)`.
pub fn make_gibbs(n: usize, temp: f64) -> Result<Categorical> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "gibbs family needs n >= 2, got {n}"
        )));
    }
    if !(temp.is_finite() && temp > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temp}"
        )));
    }
    let space = Arc::new(TupleSpace::binary(n)?);
    let pairs = (n * (n - 1) / 2) as f64;
    let log_weights: Vec<f64> = (0..space.size())
        .map(|flat| {
            let x: Vec<f64> = space
                .unravel(flat)
                .into_iter()
                .map(|i| if i == 0 { -1.0 } else { 1.0 })
                .collect();
            let mut sum = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    sum += x[i] * x[j];
                }
            }
            sum / pairs / temp
        })
        .collect();
    Categorical::from_log_weights(space, &log_weights)
}

/// `H(p) = sum p ln(1/p)` over a weight vector.
pub fn entropy(weights: &[f64]) -> f64 {
    weights
        .iter()
        .filter(|w| **w > 0.0)
        .fold(0.0, |acc, w| acc - w * w.ln())
}

/// `D_KL(p, q)` over aligned weight vectors; `+inf` when `p` is not
/// absolutely continuous with respect to `q`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            total += a * (a / b).ln();
        }
    }
    total
}
