//! Next-token cross-entropy pretraining.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ForwardInput, LanguageModel, TokenId};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, Adam};
use crate::scalar::Scalar;
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Documents per step.
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 4,
            lr: 3e-3,
            clip_norm: 1.0,
            log_every: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainStep {
    pub step: usize,
    pub loss: f64,
}

/// Mean next-token loss of `lm` over `docs`.
pub fn sequence_loss<T: Scalar>(lm: &LanguageModel<T>, docs: &[Vec<TokenId>]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for doc in docs.iter().filter(|d| d.len() >= 2) {
        let (logits, _) = lm.view().forward(&doc[..doc.len() - 1])?;
        for (i, &next) in doc[1..].iter().enumerate() {
            let row = logits.row(i);
            total += (crate::tape::logsumexp(row) - row[next as usize]).as_f64();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("no document with at least two tokens".into()));
    }
    Ok(total / count as f64)
}

/// Entropy in nats of the unigram distribution of next tokens in `docs`.
pub fn unigram_entropy(docs: &[Vec<TokenId>], vocab_size: usize) -> f64 {
    let mut counts = vec![0usize; vocab_size];
    for doc in docs {
        for &t in doc.iter().skip(1) {
            counts[t as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Trains every parameter of `lm` in place with Adam. Returns the logged
/// mean batch loss.
pub fn pretrain<T: Scalar>(
    lm: &mut LanguageModel<T>,
    docs: &[Vec<TokenId>],
    cfg: &PretrainConfig,
) -> Result<Vec<PretrainStep>> {
    let usable: Vec<&Vec<TokenId>> = docs.iter().filter(|d| d.len() >= 2).collect();
    if usable.is_empty() && cfg.steps > 0 {
        return Err(Error::Data("no document with at least two tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::new();
    let mut window = 0.0;
    let mut window_n = 0;
    for step in 0..cfg.steps {
        let mut grads: Vec<Vec<T>> = Vec::new();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch.max(1) {
            let doc = *usable.choose(&mut rng).expect("nonempty");
            let mut tape = Tape::new();
            let bound = lm.bind_with(&mut tape, true);
            let out = bound.forward(
                &mut tape,
                &ForwardInput {
                    tokens: &doc[..doc.len() - 1],
                    ..Default::default()
                },
            )?;
            let targets: Vec<usize> = doc[1..].iter().map(|&t| t as usize).collect();
            let loss = tape.cross_entropy_rows(out.logits.expect("logits"), &targets)?;
            batch_loss += tape.item(loss).as_f64();
            tape.backward(loss)?;
            for (i, v) in bound.params.iter().enumerate() {
                let g = tape.grad(*v).expect("parameter gradient");
                match grads.get_mut(i) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    None => grads.push(g.to_vec()),
                }
            }
        }
        let scale = T::one() / T::lit(cfg.batch.max(1) as f64);
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        clip_global_norm(&mut grads, T::lit(cfg.clip_norm));
        let refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
        opt.step(&mut lm.params_mut(), &refs)?;
        window += batch_loss / cfg.batch.max(1) as f64;
        window_n += 1;
        if (step + 1) % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            let loss = window / window_n as f64;
            log::debug!("pretrain step {}: loss {loss:.4}", step + 1);
            log.push(PretrainStep { step: step + 1, loss });
            window = 0.0;
            window_n = 0;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LMConfig;

    fn cfg() -> LMConfig {
        LMConfig {
            vocab_size: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            context_len: 12,
            prefix_len: 2,
            d_ff: 16,
        }
    }

    #[test]
    fn zero_steps_leaves_model() {
        let mut lm = LanguageModel::<f64>::init(cfg(), 0).unwrap();
        let before = lm.clone();
        let log = pretrain(
            &mut lm,
            &[vec![1, 2, 3]],
            &PretrainConfig {
                steps: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(log.is_empty());
        assert_eq!(lm, before);
    }

    #[test]
    fn learns_a_cycle() {
        let mut lm = LanguageModel::<f64>::init(cfg(), 0).unwrap();
        let docs = vec![vec![1, 2, 3, 4, 5, 1, 2, 3, 4, 5]];
        let before = sequence_loss(&lm, &docs).unwrap();
        pretrain(
            &mut lm,
            &docs,
            &PretrainConfig {
                steps: 60,
                batch: 1,
                lr: 1e-2,
                ..Default::default()
            },
        )
        .unwrap();
        let after = sequence_loss(&lm, &docs).unwrap();
        assert!(after < 0.2 * before, "{before} -> {after}");
    }

    #[test]
    fn entropy_of_uniform_tokens() {
        let h = unigram_entropy(&[vec![0, 1, 2, 3, 4]], 6);
        assert!((h - 4f64.ln()).abs() < 1e-12);
    }
}
