//! Plain autoregressive decoding, with and without a key/value cache.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{ForwardInput, LogitsMode, ModelView, TokenId};
use super::sample::{sample_next, DecodeConfig};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Decoder that keeps per-layer keys and values of everything seen so far
/// and only runs new positions through the model.
pub struct IncrementalDecoder<'a, T> {
    view: ModelView<'a, T>,
    past: Option<Vec<(Tensor<T>, Tensor<T>)>>,
    content_len: usize,
}

impl<'a, T: Scalar> IncrementalDecoder<'a, T> {
    pub fn new(view: ModelView<'a, T>) -> Self {
        let past = view.prefix.filter(|p| !p.is_empty()).map(|p| {
            (0..p.n_layers())
                .map(|l| (p.slot(l, 0).clone(), p.slot(l, 1).clone()))
                .collect()
        });
        Self {
            view,
            past,
            content_len: 0,
        }
    }

    pub fn content_len(&self) -> usize {
        self.content_len
    }

    /// Appends `tokens` and returns the logits for the following position.
    pub fn feed(&mut self, tokens: &[TokenId]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.view.bind(&mut tape);
        let past_vars: Option<Vec<_>> = self.past.as_ref().map(|past| {
            past.iter()
                .map(|(k, v)| (tape.constant(k.clone()), tape.constant(v.clone())))
                .collect()
        });
        let out = bound.forward(
            &mut tape,
            &ForwardInput {
                tokens,
                past: past_vars.as_deref(),
                pos_offset: self.content_len,
                soft_next: None,
                logits: LogitsMode::Last,
            },
        )?;
        self.past = Some(
            out.kv
                .iter()
                .map(|(k, v)| (tape.value(*k).clone(), tape.value(*v).clone()))
                .collect(),
        );
        self.content_len += tokens.len();
        Ok(tape.value(out.logits.expect("logits requested")).data().to_vec())
    }
}

/// Unsteered generation via the key/value cache.
pub fn generate_cached<T: Scalar>(
    view: ModelView<'_, T>,
    prompt: &[TokenId],
    decode: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(decode.seed);
    let mut dec = IncrementalDecoder::new(view);
    let mut seq = prompt.to_vec();
    let mut logits = dec.feed(prompt)?;
    for step in 0..decode.max_new_tokens {
        let next = sample_next(&logits, decode, &mut rng)?;
        seq.push(next);
        if decode.stop_token == Some(next) || step + 1 == decode.max_new_tokens {
            break;
        }
        logits = dec.feed(&[next])?;
    }
    Ok(seq)
}

/// Unsteered generation that reruns the whole sequence every step.
pub fn generate_full<T: Scalar>(
    view: ModelView<'_, T>,
    prompt: &[TokenId],
    decode: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(decode.seed);
    let mut seq = prompt.to_vec();
    for _ in 0..decode.max_new_tokens {
        let logits = view.next_logits(&seq)?;
        let next = sample_next(&logits, decode, &mut rng)?;
        seq.push(next);
        if decode.stop_token == Some(next) {
            break;
        }
    }
    Ok(seq)
}
