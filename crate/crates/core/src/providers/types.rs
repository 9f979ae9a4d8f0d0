use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: u32,
    /// Greedy decoding by default.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl GenerationRequest {
    pub fn greedy(prompt: impl Into<String>, max_tokens: u32) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            temperature: 0.0,
            stop: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < 1 {
            return Err(Error::invalid("max_tokens must be at least 1"));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid("temperature must be a finite value >= 0"));
        }
        Ok(())
    }
}

/// Natural-log probabilities of the target tokens of a scored prompt.
///
/// `context_len` counts the conditioning tokens the backend scored but which
/// are excluded here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub context_len: usize,
}

impl ScoredSequence {
    pub fn new(tokens: Vec<String>, logprobs: Vec<f64>, context_len: usize) -> Result<Self> {
        let seq = Self {
            tokens,
            logprobs,
            context_len,
        };
        seq.check()?;
        Ok(seq)
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.tokens.len() != self.logprobs.len() {
            return Err(Error::protocol(format!(
                "{} tokens but {} logprobs",
                self.tokens.len(),
                self.logprobs.len()
            )));
        }
        if let Some(lp) = self.logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return Err(Error::protocol(format!("logprob {lp} is not <= 0")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sum_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// A dense embedding. Values are always finite and non-empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("vector must have dim > 0"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("vector contains non-finite values"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    pub fn dot(&self, other: &[f32]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }
}

impl TryFrom<Vec<f32>> for Vector {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f32> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Inner product accumulated in f64, left to right.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Which encoder an embedding request targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedRole {
    Query,
    Document,
}

impl EmbedRole {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedRole::Query => "query",
            EmbedRole::Document => "document",
        }
    }
}
