//! Hallucination scores, threshold abstention policies, calibration to a
//! target loss and precision/recall evaluation.
//!
//! Four scores are supported: the greedy-response probability (T0), semantic
//! entropy (SE), self-verification (SV) and the mutual-information score
//! (MI). T0 and SV are confidences; SE and MI are uncertainties.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::entropy;
use crate::error::{Error, Result};
use crate::estimators::{estimate_mi_alg3, Alg3Estimate, StabilizationParams};
use crate::prompt::{ConditionalModel, PromptFamily, Response};
use crate::rng::{derive_seed, hash_str};
use crate::similarity::{cluster_texts, dedupe, f1_text, tokenize, DEFAULT_TAU};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreName {
    T0,
    Se,
    Sv,
    Mi,
}

impl ScoreName {
    pub const ALL: [ScoreName; 4] = [ScoreName::T0, ScoreName::Se, ScoreName::Sv, ScoreName::Mi];

    pub fn direction(self) -> Direction {
        match self {
            ScoreName::T0 | ScoreName::Sv => Direction::Confidence,
            ScoreName::Se | ScoreName::Mi => Direction::Uncertainty,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreName::T0 => "t0",
            ScoreName::Se => "se",
            ScoreName::Sv => "sv",
            ScoreName::Mi => "mi",
        }
    }
}

impl fmt::Display for ScoreName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t0" => Ok(ScoreName::T0),
            "se" => Ok(ScoreName::Se),
            "sv" => Ok(ScoreName::Sv),
            "mi" => Ok(ScoreName::Mi),
            other => Err(Error::InvalidArgument(format!("unknown score {other:?}"))),
        }
    }
}

/// Which side of the threshold abstains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Abstain when `score >= lambda`.
    Uncertainty,
    /// Abstain when `score <= lambda`.
    Confidence,
}

impl Direction {
    /// Whether `a` signals at least as much confidence as `b`.
    fn at_least_as_confident(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Uncertainty => a <= b,
            Direction::Confidence => a >= b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Answer,
    Abstain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Threshold {
    At(f64),
    /// No threshold met the target on the calibration set.
    AlwaysAbstain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbstentionPolicy {
    pub score: ScoreName,
    pub threshold: Threshold,
    pub direction: Direction,
}

impl AbstentionPolicy {
    pub fn new(score: ScoreName, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "threshold must be finite, got {lambda}"
            )));
        }
        Ok(Self {
            score,
            threshold: Threshold::At(lambda),
            direction: score.direction(),
        })
    }

    pub fn always_abstain(score: ScoreName) -> Self {
        Self {
            score,
            threshold: Threshold::AlwaysAbstain,
            direction: score.direction(),
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self.threshold {
            Threshold::At(l) => Some(l),
            Threshold::AlwaysAbstain => None,
        }
    }

    /// Non-finite scores abstain.
    pub fn apply(&self, score: f64) -> Decision {
        let Threshold::At(lambda) = self.threshold else {
            return Decision::Abstain;
        };
        if !score.is_finite() {
            return Decision::Abstain;
        }
        let abstain = match self.direction {
            Direction::Uncertainty => score >= lambda,
            Direction::Confidence => score <= lambda,
        };
        if abstain {
            Decision::Abstain
        } else {
            Decision::Answer
        }
    }
}

pub fn apply_policy(policy: &AbstentionPolicy, score: f64) -> Decision {
    policy.apply(score)
}

/// One evaluation query with its accepted answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl QueryRecord {
    pub fn new<S: Into<String>>(
        query: impl Into<String>,
        answers: impl IntoIterator<Item = S>,
        tag: Option<&str>,
    ) -> Result<Self> {
        let r = Self {
            query: query.into(),
            answers: answers.into_iter().map(Into::into).collect(),
            tag: tag.map(str::to_owned),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query.trim().is_empty() {
            return Err(Error::InvalidArgument("query is empty".into()));
        }
        if self.answers.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "query {:?} has no accepted answers",
                self.query
            )));
        }
        Ok(())
    }

    /// Whether `prediction` F1-matches any accepted answer at `tau`.
    pub fn is_correct(&self, prediction: &str, tau: f64) -> bool {
        let p = tokenize(prediction);
        self.answers
            .iter()
            .any(|a| crate::similarity::f1_score(&p, &tokenize(a)) >= tau)
    }
}

/// Parse JSON lines of `{query, answers, tag}`. Blank lines are skipped;
/// errors carry the 1-based line number.
pub fn parse_query_records(text: &str) -> Result<Vec<QueryRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(line)
            .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", i + 1)))?;
        rec.validate()
            .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(out)
}

/// A score together with the default answer that score would give.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub value: f64,
    pub prediction: String,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredQuery {
    pub query: String,
    #[serde(default)]
    pub tag: Option<String>,
    pub scores: BTreeMap<ScoreName, ScoreEntry>,
}

impl ScoredQuery {
    pub fn get(&self, name: ScoreName) -> Option<&ScoreEntry> {
        self.scores.get(&name)
    }

    fn require(&self, name: ScoreName) -> Result<&ScoreEntry> {
        self.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!("query {:?} has no {name} score", self.query))
        })
    }
}

/// Sampling settings shared by the sampling-based scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub k: usize,
    pub temperature: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            k: 10,
            temperature: 0.9,
            tau: DEFAULT_TAU,
            seed: 0,
        }
    }
}

/// Greedy response to `F_0` and its probability.
pub fn score_t0<M: ConditionalModel + ?Sized>(
    model: &M,
    family: &PromptFamily,
) -> Result<Response> {
    model.greedy(&family.render::<&str>(&[]))
}

/// Entropy of the renormalized cluster masses of `k` sampled responses,
/// with the heaviest cluster's center as the default answer.
pub fn score_semantic_entropy<M: ConditionalModel + ?Sized>(
    model: &M,
    family: &PromptFamily,
    k: usize,
    temperature: f64,
    tau: f64,
    seed: u64,
) -> Result<(String, f64)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let samples = model.sample(&family.render::<&str>(&[]), k, temperature, seed)?;
    semantic_entropy_of(&samples, tau)
}

pub(crate) fn semantic_entropy_of(samples: &[Response], tau: f64) -> Result<(String, f64)> {
    let texts: Vec<&str> = samples.iter().map(|r| r.text.as_str()).collect();
    let idx = dedupe(&texts);
    let uniques: Vec<&str> = idx.iter().map(|&i| texts[i]).collect();
    let probs: Vec<f64> = idx.iter().map(|&i| samples[i].prob).collect();
    let c = cluster_texts(&uniques, &probs, tau);
    let total = c.total_mass();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::NoMassObserved);
    }
    let normalized: Vec<f64> = c.mass.iter().map(|m| m / total).collect();
    let best = crate::estimators::argmax(&normalized);
    Ok((uniques[c.centers[best]].to_owned(), entropy(&normalized)))
}

/// `p(True) / (p(True) + p(False))` on the verification prompt.
pub fn score_self_verification<M: ConditionalModel + ?Sized>(
    model: &M,
    family: &PromptFamily,
    candidate: &str,
) -> Result<f64> {
    let prompt = family.verification_prompt(candidate);
    let t = model.probability(&prompt, "True")?;
    let f = model.probability(&prompt, "False")?;
    if t + f <= 0.0 {
        return Err(Error::DegenerateNormalization);
    }
    Ok(t / (t + f))
}

/// The mutual-information score: the marginal x conditional estimator on
/// `k` responses with `n = 2`.
pub fn score_mi<M: ConditionalModel + ?Sized>(
    model: &M,
    family: &PromptFamily,
    k: usize,
    temperature: f64,
    tau: f64,
    params: StabilizationParams,
    seed: u64,
) -> Result<(String, f64)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let samples = model.sample(&family.render::<&str>(&[]), k, temperature, seed)?;
    let r = mi_of(model, family, &samples, tau, params)?;
    Ok((r.centers[r.default_center()].clone(), r.estimate.value))
}

fn mi_of<M: ConditionalModel + ?Sized>(
    model: &M,
    family: &PromptFamily,
    samples: &[Response],
    tau: f64,
    params: StabilizationParams,
) -> Result<Alg3Estimate<String>> {
    let reported: HashMap<&str, f64> = samples.iter().map(|r| (r.text.as_str(), r.prob)).collect();
    let texts: Vec<String> = samples.iter().map(|r| r.text.clone()).collect();
    estimate_mi_alg3(
        &texts,
        |t: &String| Ok(reported[t.as_str()]),
        |given: &String, of: &String| model.probability(&family.render(&[given]), of),
        params,
        |a: &String, b: &String| f1_text(a, b),
        tau,
    )
}

/// Compute all four scores for one query. SE and MI share one sample set;
/// SV verifies the greedy response.
pub fn score_query<M: ConditionalModel + ?Sized>(
    model: &M,
    record: &QueryRecord,
    config: &ScoringConfig,
) -> Result<ScoredQuery> {
    let family = PromptFamily::new(record.query.clone());
    let seed = derive_seed(config.seed, hash_str(&record.query));
    let entry = |value: f64, prediction: String| ScoreEntry {
        correct: record.is_correct(&prediction, config.tau),
        value,
        prediction,
    };
    let greedy = score_t0(model, &family)?;
    let sv = score_self_verification(model, &family, &greedy.text)?;
    let samples = model.sample(
        &family.render::<&str>(&[]),
        config.k,
        config.temperature,
        seed,
    )?;
    let (se_default, se) = semantic_entropy_of(&samples, config.tau)?;
    let mi = mi_of(
        model,
        &family,
        &samples,
        config.tau,
        StabilizationParams::zero(),
    )?;
    let mut scores = BTreeMap::new();
    scores.insert(ScoreName::T0, entry(greedy.prob, greedy.text.clone()));
    scores.insert(ScoreName::Sv, entry(sv, greedy.text));
    scores.insert(ScoreName::Se, entry(se, se_default));
    scores.insert(
        ScoreName::Mi,
        entry(mi.estimate.value, mi.centers[mi.default_center()].clone()),
    );
    Ok(ScoredQuery {
        query: record.query.clone(),
        tag: record.tag.clone(),
        scores,
    })
}

/// Score every record in parallel; output order follows input order.
pub fn score_dataset<M: ConditionalModel + ?Sized>(
    model: &M,
    records: &[QueryRecord],
    config: &ScoringConfig,
) -> Result<Vec<ScoredQuery>> {
    records
        .par_iter()
        .map(|r| score_query(model, r, config))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub total: usize,
    pub answered: usize,
    pub correct_answered: usize,
    pub recall: f64,
    pub precision: f64,
    pub error_rate: f64,
    /// Set when nothing was answered and precision defaults to 1.
    pub degenerate: bool,
}

impl Metrics {
    fn from_counts(total: usize, answered: usize, correct_answered: usize) -> Self {
        let degenerate = answered == 0;
        let precision = if degenerate {
            1.0
        } else {
            correct_answered as f64 / answered as f64
        };
        Self {
            total,
            answered,
            correct_answered,
            recall: answered as f64 / total as f64,
            precision,
            error_rate: 1.0 - precision,
            degenerate,
        }
    }
}

/// Recall, precision and error rate of `policy` on `scored`.
pub fn evaluate(scored: &[ScoredQuery], policy: &AbstentionPolicy) -> Result<Metrics> {
    if scored.is_empty() {
        return Err(Error::Empty("scored queries"));
    }
    let mut answered = 0;
    let mut correct = 0;
    for q in scored {
        let e = q.require(policy.score)?;
        if policy.apply(e.value) == Decision::Answer {
            answered += 1;
            correct += usize::from(e.correct);
        }
    }
    Ok(Metrics::from_counts(scored.len(), answered, correct))
}

fn column(scored: &[ScoredQuery], name: ScoreName) -> Result<Vec<(f64, bool)>> {
    if scored.is_empty() {
        return Err(Error::Empty("scored queries"));
    }
    scored
        .iter()
        .map(|q| {
            let e = q.require(name)?;
            Ok((e.value, e.correct))
        })
        .collect()
}

fn distinct_sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Loosest threshold whose error rate among answered calibration queries
/// does not exceed `target_loss`. Ties in recall go to the more
/// conservative threshold.
pub fn calibrate_threshold(
    scored: &[ScoredQuery],
    name: ScoreName,
    target_loss: f64,
) -> Result<AbstentionPolicy> {
    if !(0.0..=1.0).contains(&target_loss) {
        return Err(Error::InvalidArgument(format!(
            "target loss must lie in [0, 1], got {target_loss}"
        )));
    }
    let col = column(scored, name)?;
    let values = distinct_sorted(col.iter().map(|x| x.0));
    if values.is_empty() {
        return Ok(AbstentionPolicy::always_abstain(name));
    }
    let direction = name.direction();
    // most conservative candidate first
    let mut candidates = values.clone();
    match direction {
        Direction::Uncertainty => candidates.push(values[values.len() - 1].next_up()),
        Direction::Confidence => {
            candidates.reverse();
            candidates.push(values[0].next_down());
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for lambda in candidates {
        let policy = AbstentionPolicy::new(name, lambda)?;
        let (mut answered, mut wrong) = (0usize, 0usize);
        for &(v, ok) in &col {
            if policy.apply(v) == Decision::Answer {
                answered += 1;
                wrong += usize::from(!ok);
            }
        }
        if answered == 0 || wrong as f64 > target_loss * answered as f64 {
            continue;
        }
        if best.is_none_or(|(a, _)| answered > a) {
            best = Some((answered, lambda));
        }
    }
    Ok(match best {
        Some((_, lambda)) => AbstentionPolicy::new(name, lambda)?,
        None => AbstentionPolicy::always_abstain(name),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// One point per distinct score value `v`: answer every query whose score
/// is at least as confident as `v`. Sorted by recall.
pub fn pr_curve(scored: &[ScoredQuery], name: ScoreName) -> Result<Vec<PrPoint>> {
    let col = column(scored, name)?;
    let direction = name.direction();
    let mut points: Vec<PrPoint> = distinct_sorted(col.iter().map(|x| x.0))
        .into_iter()
        .map(|v| {
            let (mut answered, mut correct) = (0usize, 0usize);
            for &(s, ok) in &col {
                if s.is_finite() && direction.at_least_as_confident(s, v) {
                    answered += 1;
                    correct += usize::from(ok);
                }
            }
            let m = Metrics::from_counts(col.len(), answered, correct);
            PrPoint {
                threshold: v,
                recall: m.recall,
                precision: m.precision,
            }
        })
        .collect();
    points.sort_by(|a, b| a.recall.total_cmp(&b.recall));
    Ok(points)
}
