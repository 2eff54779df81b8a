//! Token-inclusion F1 similarity, exact deduplication and greedy semantic
//! clustering with probability aggregation.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

/// Default match threshold for F1 similarity.
pub const DEFAULT_TAU: f64 = 0.25;

/// Normalized token sequence of a response text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub text: String,
    pub tokens: Vec<String>,
}

/// Lowercase, split on whitespace, trim non-alphanumeric characters from
/// both ends of each token and drop empty tokens.
pub fn tokenize(text: &str) -> TokenSeq {
    let tokens = text
        .split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect();
    TokenSeq {
        text: text.to_owned(),
        tokens,
    }
}

/// F1 over multiset token inclusion. Zero when either side is empty or
/// nothing overlaps.
pub fn f1_score(a: &TokenSeq, b: &TokenSeq) -> f64 {
    if a.tokens.is_empty() || b.tokens.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &a.tokens {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &b.tokens {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / a.tokens.len() as f64;
    let r = common as f64 / b.tokens.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn f1_text(a: &str, b: &str) -> f64 {
    f1_score(&tokenize(a), &tokenize(b))
}

/// Tuple similarity: the weakest coordinate-wise F1 match.
pub fn tuple_f1<S: AsRef<str>>(a: &[S], b: &[S]) -> f64 {
    if a.len() != b.len() {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| f1_text(x.as_ref(), y.as_ref()))
        .fold(1.0, f64::min)
}

/// Indices (0-based, in sample order) of the first occurrence of every
/// distinct element.
pub fn dedupe<T: Eq + Hash>(samples: &[T]) -> Vec<usize> {
    let mut seen = HashMap::with_capacity(samples.len());
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if seen.insert(s, ()).is_none() {
            out.push(i);
        }
    }
    out
}

/// Result of greedy clustering. All indices refer to the `uniques` slice
/// passed to [`cluster`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusteredSample {
    /// Cluster centers in order of creation.
    pub centers: Vec<usize>,
    /// Members of each cluster, center first.
    pub members: Vec<Vec<usize>>,
    /// Cluster id of every unique element.
    pub assignment: Vec<usize>,
    /// Aggregated probability of each cluster.
    pub mass: Vec<f64>,
}

impl ClusteredSample {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }
}

/// Greedy first-come clustering: each element joins the earliest center
/// whose similarity reaches `tau`, otherwise it opens a new cluster.
pub fn cluster<T, F>(uniques: &[T], probs: &[f64], sim: F, tau: f64) -> ClusteredSample
where
    F: Fn(&T, &T) -> f64,
{
    assert_eq!(
        uniques.len(),
        probs.len(),
        "probabilities must align with uniques"
    );
    let mut out = ClusteredSample {
        centers: Vec::new(),
        members: Vec::new(),
        assignment: Vec::with_capacity(uniques.len()),
        mass: Vec::new(),
    };
    for (i, item) in uniques.iter().enumerate() {
        let hit = out
            .centers
            .iter()
            .position(|&c| sim(&uniques[c], item) >= tau);
        match hit {
            Some(cid) => {
                out.members[cid].push(i);
                out.mass[cid] += probs[i];
                out.assignment.push(cid);
            }
            None => {
                out.assignment.push(out.centers.len());
                out.centers.push(i);
                out.members.push(vec![i]);
                out.mass.push(probs[i]);
            }
        }
    }
    out
}

/// Cluster texts with F1 similarity.
pub fn cluster_texts<S: AsRef<str>>(uniques: &[S], probs: &[f64], tau: f64) -> ClusteredSample {
    let tokens: Vec<TokenSeq> = uniques.iter().map(|s| tokenize(s.as_ref())).collect();
    cluster(&tokens, probs, f1_score, tau)
}
