//! ROUGE-L and embedding-based BERTScore.
//!
//! Both metrics tokenize by lowercasing, splitting on whitespace and
//! stripping punctuation from token edges. BERTScore here embeds each token
//! independently through an embedding provider ("provider-embedded
//! BERTScore"): greedy max cosine matching, no IDF weighting, no baseline
//! rescaling.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::providers::{dot, embed_batch, EmbedRole, Provider, Vector};

pub const TOKENIZATION: &str = "lowercase+whitespace+edge-punct-strip";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Harmonic mean, or zero when `p + r <= 0`.
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let sum = precision + recall;
        let f1 = if sum > 0.0 { 2.0 * precision * recall / sum } else { 0.0 };
        Self { precision, recall, f1 }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_control()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    const STACK: usize = 64;
    if short.len() < STACK {
        let (mut prev, mut cur) = ([0usize; STACK], [0usize; STACK]);
        lcs_rows(long, short, &mut prev, &mut cur)
    } else {
        let (mut prev, mut cur) = (vec![0usize; short.len() + 1], vec![0usize; short.len() + 1]);
        lcs_rows(long, short, &mut prev, &mut cur)
    }
}

/// Two-row DP; `prev` and `cur` hold at least `short.len() + 1` zeros.
fn lcs_rows<'a, T: PartialEq>(long: &[T], short: &[T], mut prev: &'a mut [usize], mut cur: &'a mut [usize]) -> usize {
    for x in long {
        for (j, y) in short.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

pub fn rouge_l_tokens(candidate: &[String], reference: &[String]) -> Prf {
    if candidate.is_empty() || reference.is_empty() {
        return Prf::default();
    }
    let lcs = lcs_length(candidate, reference) as f64;
    Prf::from_pr(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

fn cosine(a: &[f32], b: &[f32], norm_a: f64, norm_b: f64) -> f64 {
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    dot(a, b) / (norm_a * norm_b)
}

/// Greedy-matching BERTScore over precomputed token vectors.
pub fn bert_score_vectors(candidate: &[Vector], reference: &[Vector]) -> Prf {
    if candidate.is_empty() || reference.is_empty() {
        return Prf::default();
    }
    let cn: Vec<f64> = candidate.iter().map(Vector::norm).collect();
    let rn: Vec<f64> = reference.iter().map(Vector::norm).collect();
    let sim: Vec<Vec<f64>> = candidate
        .iter()
        .zip(&cn)
        .map(|(c, &nc)| {
            reference
                .iter()
                .zip(&rn)
                .map(|(r, &nr)| cosine(c.values(), r.values(), nc, nr))
                .collect()
        })
        .collect();
    let precision = sim
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / candidate.len() as f64;
    let recall = (0..reference.len())
        .map(|j| sim.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / reference.len() as f64;
    Prf::from_pr(precision, recall)
}

/// BERTScore with per-token embeddings from `embedder` (document role).
/// Each distinct token is embedded once.
pub fn bert_score(candidate: &[String], reference: &[String], embedder: &dyn Provider) -> Result<Prf> {
    if candidate.is_empty() || reference.is_empty() {
        return Ok(Prf::default());
    }
    let mut vocab: Vec<String> = candidate.iter().chain(reference).cloned().collect();
    vocab.sort();
    vocab.dedup();
    let vectors = embed_batch(embedder, &vocab, EmbedRole::Document)?;
    let table: HashMap<&str, &Vector> = vocab.iter().map(String::as_str).zip(&vectors).collect();
    let lookup = |tokens: &[String]| tokens.iter().map(|t| table[t.as_str()].clone()).collect::<Vec<_>>();
    Ok(bert_score_vectors(&lookup(candidate), &lookup(reference)))
}

/// One `{"candidate", "reference"}` line of a metrics input file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextPair {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub candidate: String,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub id: String,
    pub rouge_l: Prf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bert_score: Option<Prf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tokenization: String,
    pub n_pairs: usize,
    pub mean_rouge_l: Prf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_bert_score: Option<Prf>,
    pub pairs: Vec<PairScores>,
}

fn mean(scores: &[Prf]) -> Prf {
    if scores.is_empty() {
        return Prf::default();
    }
    let n = scores.len() as f64;
    Prf {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

/// ROUGE-L for every pair, plus BERTScore when an embedder is given.
pub fn score_pairs(pairs: &[TextPair], embedder: Option<&dyn Provider>) -> Result<MetricsReport> {
    let mut out = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let bert = match embedder {
            Some(e) => Some(bert_score(&tokenize(&p.candidate), &tokenize(&p.reference), e)?),
            None => None,
        };
        out.push(PairScores {
            id: p.id.clone().unwrap_or_else(|| (i + 1).to_string()),
            rouge_l: rouge_l(&p.candidate, &p.reference),
            bert_score: bert,
        });
    }
    let rouge: Vec<Prf> = out.iter().map(|p| p.rouge_l).collect();
    let bert: Option<Vec<Prf>> = out.iter().map(|p| p.bert_score).collect();
    Ok(MetricsReport {
        tokenization: TOKENIZATION.to_string(),
        n_pairs: out.len(),
        mean_rouge_l: mean(&rouge),
        mean_bert_score: embedder.and(bert).map(|b| mean(&b)),
        pairs: out,
    })
}
