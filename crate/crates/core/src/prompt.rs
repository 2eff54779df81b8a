//! Iterative prompt family, the conditional-model interface, chain sampling
//! and pseudo-joint probabilities.
//!
//! Prompt layout for `t` previous answers (every line ends with `\n` except
//! the last; there is no trailing whitespace):
//!
//! ```text
//! Consider the following question:
//! Q: <query>
//!
//! One answer to question Q is <Y_1>.
//! Another answer to question Q is <Y_2>.
//! ...
//!
//! Provide an answer to the following question:
//!
//! Q: <query>. A:
//! ```
//!
//! With `t = 0` the answer block and the blank line after it are omitted.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dist::{Atom, Categorical, TupleSpace};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

const HEADER: &str = "Consider the following question:\nQ: ";
const FIRST: &str = "One answer to question Q is ";
const ANOTHER: &str = "Another answer to question Q is ";
const FOOTER: &str = "Provide an answer to the following question:\n\nQ: ";
const VERIFY_PREFIX: &str = "Consider the following question: Q: ";
const VERIFY_MIDDLE: &str = ". One answer to question Q is ";
const VERIFY_SUFFIX: &str = ". Is the above answer to question Q correct? Answer True or False. A:";

/// A sampled response with its probability under the model that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    pub prob: f64,
}

impl Response {
    pub fn new(text: impl Into<String>, prob: f64) -> Self {
        Self {
            text: text.into(),
            prob,
        }
    }
}

/// A conditional distribution over response texts given a prompt.
///
/// Implementations must be safe to call concurrently.
pub trait ConditionalModel: Send + Sync {
    /// Draw `k` responses at `temperature`; each carries its probability
    /// under the model (not the tempered sampling distribution).
    fn sample(&self, prompt: &str, k: usize, temperature: f64, seed: u64) -> Result<Vec<Response>>;

    /// Probability of `response` as the completion of `prompt`.
    fn probability(&self, prompt: &str, response: &str) -> Result<f64>;

    /// Temperature-zero decoding.
    fn greedy(&self, prompt: &str) -> Result<Response> {
        self.sample(prompt, 1, 0.0, 0)?
            .pop()
            .ok_or_else(|| Error::MalformedResponse("greedy decoding returned nothing".into()))
    }
}

impl<M: ConditionalModel + ?Sized> ConditionalModel for &M {
    fn sample(&self, prompt: &str, k: usize, temperature: f64, seed: u64) -> Result<Vec<Response>> {
        (**self).sample(prompt, k, temperature, seed)
    }
    fn probability(&self, prompt: &str, response: &str) -> Result<f64> {
        (**self).probability(prompt, response)
    }
    fn greedy(&self, prompt: &str) -> Result<Response> {
        (**self).greedy(prompt)
    }
}

impl<M: ConditionalModel + ?Sized> ConditionalModel for Arc<M> {
    fn sample(&self, prompt: &str, k: usize, temperature: f64, seed: u64) -> Result<Vec<Response>> {
        (**self).sample(prompt, k, temperature, seed)
    }
    fn probability(&self, prompt: &str, response: &str) -> Result<f64> {
        (**self).probability(prompt, response)
    }
    fn greedy(&self, prompt: &str) -> Result<Response> {
        (**self).greedy(prompt)
    }
}

/// Prompt templates for one query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFamily {
    pub query: String,
}

impl PromptFamily {
    pub fn new(query: impl Into<String>) -> Self {
        Self {
            query: query.into(),
        }
    }

    /// `F_t(x, Y_1..Y_t)` with `t = answers.len()`.
    pub fn render<S: AsRef<str>>(&self, answers: &[S]) -> String {
        let sentences = answers.iter().enumerate().map(|(i, a)| {
            let lead = if i == 0 { FIRST } else { ANOTHER };
            format!("{lead}{}.", a.as_ref())
        });
        self.assemble(sentences)
    }

    /// Checked form of [`PromptFamily::render`].
    pub fn build_prompt<S: AsRef<str>>(&self, t: usize, answers: &[S]) -> Result<String> {
        if answers.len() != t {
            return Err(Error::InvalidArgument(format!(
                "prompt F_{t} needs {t} answers, got {}",
                answers.len()
            )));
        }
        Ok(self.render(answers))
    }

    /// Prompt with `repeated` inserted `t` times, every sentence phrased as
    /// "Another answer to question Q is ...".
    pub fn render_repeated(&self, repeated: &str, t: usize) -> String {
        self.assemble((0..t).map(|_| format!("{ANOTHER}{repeated}.")))
    }

    /// Self-verification prompt asking whether `candidate` is correct.
    pub fn verification_prompt(&self, candidate: &str) -> String {
        format!(
            "{VERIFY_PREFIX}{}{VERIFY_MIDDLE}{candidate}{VERIFY_SUFFIX}",
            self.query
        )
    }

    fn assemble(&self, sentences: impl Iterator<Item = String>) -> String {
        let mut out = String::with_capacity(256);
        out.push_str(HEADER);
        out.push_str(&self.query);
        out.push_str("\n\n");
        let mut any = false;
        for s in sentences {
            out.push_str(&s);
            out.push('\n');
            any = true;
        }
        if any {
            out.push('\n');
        }
        out.push_str(FOOTER);
        out.push_str(&self.query);
        out.push_str(". A:");
        out
    }
}

/// A prompt recovered from its text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParsedPrompt {
    Answer { query: String, context: Vec<String> },
    Verify { query: String, candidate: String },
}

/// Inverse of [`PromptFamily::render`], [`PromptFamily::render_repeated`]
/// and [`PromptFamily::verification_prompt`].
pub fn parse_prompt(prompt: &str) -> Result<ParsedPrompt> {
    if let Some(rest) = prompt.strip_prefix(VERIFY_PREFIX) {
        let body = rest
            .strip_suffix(VERIFY_SUFFIX)
            .ok_or_else(|| Error::Prompt("verification prompt without suffix".into()))?;
        let (query, candidate) = body
            .split_once(VERIFY_MIDDLE)
            .ok_or_else(|| Error::Prompt("verification prompt without candidate".into()))?;
        return Ok(ParsedPrompt::Verify {
            query: query.to_owned(),
            candidate: candidate.to_owned(),
        });
    }
    let rest = prompt
        .strip_prefix(HEADER)
        .ok_or_else(|| Error::Prompt("missing header".into()))?;
    let (query, rest) = rest
        .split_once("\n\n")
        .ok_or_else(|| Error::Prompt("missing query terminator".into()))?;
    let (block, tail) = match rest.strip_prefix(FOOTER) {
        Some(tail) => ("", tail),
        None => {
            let split = rest
                .find(&format!("\n\n{FOOTER}"))
                .ok_or_else(|| Error::Prompt("missing footer".into()))?;
            (&rest[..split], &rest[split + 2 + FOOTER.len()..])
        }
    };
    if tail != format!("{query}. A:") {
        return Err(Error::Prompt("footer query does not match header".into()));
    }
    let mut context = Vec::new();
    for line in block.lines() {
        let answer = line
            .strip_prefix(FIRST)
            .or_else(|| line.strip_prefix(ANOTHER))
            .and_then(|a| a.strip_suffix('.'))
            .ok_or_else(|| Error::Prompt(format!("unrecognized answer line {line:?}")))?;
        context.push(answer.to_owned());
    }
    Ok(ParsedPrompt::Answer {
        query: query.to_owned(),
        context,
    })
}

/// One draw `(Y_1..Y_n)` from the pseudo-joint distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseChain {
    pub query: String,
    pub responses: Vec<String>,
    pub step_probs: Vec<f64>,
}

impl ResponseChain {
    /// Pseudo-joint probability of the chain: the product of step probabilities.
    pub fn probability(&self) -> f64 {
        self.step_probs.iter().product()
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Chain-rule sampling: `Y_t ~ Q(. | F_{t-1}(x, Y_1..Y_{t-1}))`.
pub fn sample_chain<M: ConditionalModel + ?Sized>(
    model: &M,
    family: &PromptFamily,
    n: usize,
    seed: u64,
) -> Result<ResponseChain> {
    if n == 0 {
        return Err(Error::InvalidArgument("chain length must be >= 1".into()));
    }
    let mut responses: Vec<String> = Vec::with_capacity(n);
    let mut step_probs = Vec::with_capacity(n);
    for step in 0..n {
        let prompt = family.render(&responses);
        let draw = model
            .sample(&prompt, 1, 1.0, derive_seed(seed, step as u64))
            .and_then(|mut v| {
                v.pop()
                    .ok_or_else(|| Error::MalformedResponse("empty sample".into()))
            })
            .map_err(|e| Error::ChainStep {
                step: step + 1,
                source: Box::new(e),
            })?;
        responses.push(draw.text);
        step_probs.push(draw.prob);
    }
    Ok(ResponseChain {
        query: family.query.clone(),
        responses,
        step_probs,
    })
}

/// `Q(Y_1 | F_0) Q(Y_2 | F_1(Y_1)) ... Q(Y_n | F_{n-1}(Y_1..Y_{n-1}))`.
pub fn pseudo_joint_probability<M, S>(
    model: &M,
    family: &PromptFamily,
    responses: &[S],
) -> Result<f64>
where
    M: ConditionalModel + ?Sized,
    S: AsRef<str>,
{
    if responses.is_empty() {
        return Err(Error::Empty("responses"));
    }
    let mut p = 1.0;
    for t in 0..responses.len() {
        let prompt = family.render(&responses[..t]);
        p *= model
            .probability(&prompt, responses[t].as_ref())
            .map_err(|e| Error::ChainStep {
                step: t + 1,
                source: Box::new(e),
            })?;
        if p == 0.0 {
            break;
        }
    }
    Ok(p)
}

/// Materialize the pseudo-joint over `atoms^n` as a [`Categorical`].
/// The model must put all of its mass on `atoms` for every prompt reachable
/// from them.
pub fn pseudo_joint_distribution<M: ConditionalModel + ?Sized>(
    model: &M,
    family: &PromptFamily,
    atoms: &[String],
    n: usize,
) -> Result<Categorical> {
    let space = Arc::new(TupleSpace::new(vec![
        atoms
            .iter()
            .cloned()
            .map(Atom::Text)
            .collect();
        n
    ])?);
    let weights = (0..space.size())
        .map(|flat| {
            let tuple: Vec<&str> = space
                .unravel(flat)
                .into_iter()
                .map(|i| atoms[i].as_str())
                .collect();
            pseudo_joint_probability(model, family, &tuple)
        })
        .collect::<Result<Vec<_>>>()?;
    Categorical::new(space, weights)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AmplificationPoint {
    pub t: usize,
    pub p_target: f64,
    pub p_repeated: f64,
    /// `p_target / (p_target + p_repeated)`.
    pub normalized: f64,
}

/// Conditional normalized probability of `target` against `repeated` as the
/// latter is repeated `t` times in the prompt.
pub fn amplification_curve<M: ConditionalModel + ?Sized>(
    model: &M,
    query: &str,
    target: &str,
    repeated: &str,
    t_values: &[usize],
) -> Result<Vec<AmplificationPoint>> {
    if target == repeated {
        return Err(Error::InvalidArgument(
            "target and repeated response must differ".into(),
        ));
    }
    let family = PromptFamily::new(query);
    t_values
        .iter()
        .map(|&t| {
            let prompt = family.render_repeated(repeated, t);
            let p_target = model.probability(&prompt, target)?;
            let p_repeated = model.probability(&prompt, repeated)?;
            let total = p_target + p_repeated;
            if total <= 0.0 {
                return Err(Error::DegenerateNormalization);
            }
            Ok(AmplificationPoint {
                t,
                p_target,
                p_repeated,
                normalized: p_target / total,
            })
        })
        .collect()
}
