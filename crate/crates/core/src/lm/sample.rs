use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::TokenId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Candidate count for top-k sampling.
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Generation stops after emitting this token, if set.
    pub stop_token: Option<TokenId>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TopK,
            k: 10,
            temperature: 1.0,
            max_new_tokens: 20,
            seed: 0,
            stop_token: None,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("top-k needs k >= 1".into()));
        }
        Ok(())
    }
}

/// Index of the largest logit; ties go to the lowest token id.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Picks the next token from one row of logits.
pub fn sample_next<T: Scalar, R: Rng + ?Sized>(logits: &[T], decode: &DecodeConfig, rng: &mut R) -> Result<TokenId> {
    if logits.is_empty() {
        return Err(Error::Shape("empty logits row".into()));
    }
    if logits.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN in logits".into()));
    }
    decode.validate()?;
    let id = match decode.strategy {
        Strategy::Greedy => argmax(logits),
        Strategy::TopK => {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            // Stable sort keeps lower ids first among equal logits.
            order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).expect("no NaN"));
            order.truncate(decode.k.min(logits.len()));
            let scaled: Vec<f64> = order.iter().map(|&i| logits[i].as_f64() / decode.temperature).collect();
            let probs = crate::tape::softmax(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = order[order.len() - 1];
            for (&i, &p) in order.iter().zip(&probs) {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        }
    };
    Ok(id as TokenId)
}
