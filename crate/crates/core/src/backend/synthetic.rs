//! Table-driven conditional model with configurable context sensitivity.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{parse_prompt, ConditionalModel, ParsedPrompt, Response};
use crate::rng::{derive_seed, hash_str, rng_from_seed};
use crate::similarity::{f1_text, DEFAULT_TAU};

/// How in-context answers shift the response distribution.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextPolicy {
    /// The prompt context is ignored.
    #[default]
    Independent,
    /// `(1 - s) * base + s * (empirical distribution of the context answers)`.
    Copier { strength: f64 },
    /// Like `Copier`, but each context answer adds its own `rate`, so the
    /// copied share is `1 - (1 - rate)^t` and grows with the context length.
    Accumulating { rate: f64 },
    /// Each of the `t` context answers moves `weight / t` of the mass onto
    /// the responses that F1-match it, split evenly among them.
    Sticky {
        weight: f64,
        #[serde(default = "default_tau")]
        tau: f64,
    },
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl ContextPolicy {
    fn validate(&self) -> Result<()> {
        let w = match *self {
            ContextPolicy::Independent => return Ok(()),
            ContextPolicy::Copier { strength } => strength,
            ContextPolicy::Accumulating { rate } => rate,
            ContextPolicy::Sticky { weight, .. } => weight,
        };
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::InvalidArgument(format!(
                "context policy weight must lie in [0, 1], got {w}"
            )));
        }
        Ok(())
    }
}

/// Base distribution and context policy for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub query: String,
    pub responses: Vec<Response>,
    #[serde(default)]
    pub policy: ContextPolicy,
    /// Probability of "True" on the verification prompt. When absent the
    /// verifier reports the base mass of the responses matching the candidate.
    #[serde(default)]
    pub p_true: Option<f64>,
}

impl OracleEntry {
    pub fn new<S: Into<String>>(
        query: impl Into<String>,
        responses: impl IntoIterator<Item = (S, f64)>,
    ) -> Self {
        Self {
            query: query.into(),
            responses: responses
                .into_iter()
                .map(|(t, p)| Response::new(t, p))
                .collect(),
            policy: ContextPolicy::Independent,
            p_true: None,
        }
    }

    pub fn with_policy(mut self, policy: ContextPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_p_true(mut self, p: f64) -> Self {
        self.p_true = Some(p);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.responses.is_empty() {
            return Err(Error::InvalidDistribution(format!(
                "query {:?} has no responses",
                self.query
            )));
        }
        let mut total = 0.0;
        for r in &self.responses {
            if !r.prob.is_finite() || r.prob < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "response {:?} has probability {}",
                    r.text, r.prob
                )));
            }
            total += r.prob;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "base distribution of {:?} sums to {total}",
                self.query
            )));
        }
        for (i, r) in self.responses.iter().enumerate() {
            if self.responses[..i].iter().any(|o| o.text == r.text) {
                return Err(Error::InvalidDistribution(format!(
                    "duplicate response {:?}",
                    r.text
                )));
            }
        }
        if let Some(p) = self.p_true {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "p_true must lie in [0, 1], got {p}"
                )));
            }
        }
        self.policy.validate()
    }

    /// Response distribution given the in-context answers. The support is
    /// the base support followed by any new context answers.
    pub fn distribution<S: AsRef<str>>(&self, context: &[S]) -> Vec<(String, f64)> {
        let mut support: Vec<(String, f64)> = self
            .responses
            .iter()
            .map(|r| (r.text.clone(), r.prob))
            .collect();
        let t = context.len();
        let weight = match self.policy {
            ContextPolicy::Independent => return support,
            _ if t == 0 => return support,
            ContextPolicy::Copier { strength } => strength,
            ContextPolicy::Accumulating { rate } => 1.0 - (1.0 - rate).powi(t as i32),
            ContextPolicy::Sticky { weight, .. } => weight,
        };
        for c in context {
            if !support.iter().any(|(s, _)| s == c.as_ref()) {
                support.push((c.as_ref().to_owned(), 0.0));
            }
        }
        for (_, p) in support.iter_mut() {
            *p *= 1.0 - weight;
        }
        let share = weight / t as f64;
        match self.policy {
            ContextPolicy::Copier { .. } | ContextPolicy::Accumulating { .. } => {
                for c in context {
                    let slot = support.iter_mut().find(|(s, _)| s == c.as_ref());
                    if let Some((_, p)) = slot {
                        *p += share;
                    }
                }
            }
            ContextPolicy::Sticky { tau, .. } => {
                for c in context {
                    let hits: Vec<usize> = (0..support.len())
                        .filter(|&i| f1_text(&support[i].0, c.as_ref()) >= tau)
                        .collect();
                    if hits.is_empty() {
                        let i = support
                            .iter()
                            .position(|(s, _)| s == c.as_ref())
                            .unwrap_or(0);
                        support[i].1 += share;
                    } else {
                        let each = share / hits.len() as f64;
                        for i in hits {
                            support[i].1 += each;
                        }
                    }
                }
            }
            ContextPolicy::Independent => unreachable!(),
        }
        support
    }

    /// Probability of "True" on the verification prompt for `candidate`.
    pub fn verify_true(&self, candidate: &str) -> f64 {
        self.p_true.unwrap_or_else(|| {
            self.responses
                .iter()
                .filter(|r| f1_text(&r.text, candidate) >= DEFAULT_TAU)
                .map(|r| r.prob)
                .sum::<f64>()
                .min(1.0)
        })
    }
}

/// Deterministic conditional model over a fixed set of queries.
///
/// Sampling at temperature `T > 0` draws from `p^(1/T)` renormalized;
/// `T = 0` returns the most probable response. Reported probabilities are
/// always the untempered model probabilities.
#[derive(Clone, Debug)]
pub struct SyntheticOracle {
    entries: HashMap<String, OracleEntry>,
    seed: u64,
}

impl SyntheticOracle {
    pub fn new(entries: impl IntoIterator<Item = OracleEntry>, seed: u64) -> Result<Self> {
        let mut map = HashMap::new();
        for e in entries {
            e.validate()?;
            if map.contains_key(&e.query) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate query {:?}",
                    e.query
                )));
            }
            map.insert(e.query.clone(), e);
        }
        Ok(Self { entries: map, seed })
    }

    pub fn single(entry: OracleEntry, seed: u64) -> Result<Self> {
        Self::new([entry], seed)
    }

    pub fn entry(&self, query: &str) -> Result<&OracleEntry> {
        self.entries
            .get(query)
            .ok_or_else(|| Error::UnknownQuery(query.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Full response distribution for a prompt.
    pub fn prompt_distribution(&self, prompt: &str) -> Result<Vec<(String, f64)>> {
        match parse_prompt(prompt)? {
            ParsedPrompt::Answer { query, context } => {
                Ok(self.entry(&query)?.distribution(&context))
            }
            ParsedPrompt::Verify { query, candidate } => {
                let p = self.entry(&query)?.verify_true(&candidate);
                Ok(vec![("True".to_owned(), p), ("False".to_owned(), 1.0 - p)])
            }
        }
    }

    /// `Q(response | prompt)`; zero outside the support.
    pub fn oracle_probability(&self, prompt: &str, response: &str) -> Result<f64> {
        Ok(self
            .prompt_distribution(prompt)?
            .into_iter()
            .find(|(s, _)| s == response)
            .map_or(0.0, |(_, p)| p))
    }
}

impl ConditionalModel for SyntheticOracle {
    fn sample(&self, prompt: &str, k: usize, temperature: f64, seed: u64) -> Result<Vec<Response>> {
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be finite and >= 0, got {temperature}"
            )));
        }
        let dist = self.prompt_distribution(prompt)?;
        if temperature == 0.0 {
            let (text, prob) = dist
                .iter()
                .fold(None::<&(String, f64)>, |best, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                })
                .cloned()
                .ok_or(Error::NoMassObserved)?;
            return Ok(vec![Response::new(text, prob); k]);
        }
        let max = dist.iter().map(|(_, p)| *p).fold(0.0, f64::max);
        let weights: Vec<f64> = dist
            .iter()
            .map(|(_, p)| {
                if *p > 0.0 {
                    (p / max).powf(1.0 / temperature)
                } else {
                    0.0
                }
            })
            .collect();
        let index = WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidDistribution(format!("cannot sample: {e}")))?;
        let mut rng = rng_from_seed(derive_seed(derive_seed(self.seed, hash_str(prompt)), seed));
        Ok((0..k)
            .map(|_| {
                let (text, prob) = &dist[index.sample(&mut rng)];
                Response::new(text.clone(), *prob)
            })
            .collect())
    }

    fn probability(&self, prompt: &str, response: &str) -> Result<f64> {
        self.oracle_probability(prompt, response)
    }
}
