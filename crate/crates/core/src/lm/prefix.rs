use rand::Rng;

use super::config::LMConfig;
use super::model::{LanguageModel, TokenId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Trainable per-layer key/value activations occupying the first
/// `prefix_len` attention slots, shape `(n_layers, 2, prefix_len, d_model)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState<T> {
    prefix_len: usize,
    d_model: usize,
    /// Per layer `[keys, values]`, each `prefix_len x d_model`; empty when
    /// `prefix_len == 0`.
    slots: Vec<[Tensor<T>; 2]>,
    n_layers: usize,
}

impl<T: Scalar> PrefixState<T> {
    pub fn zeros(config: &LMConfig) -> Self {
        Self::build(config, |shape| Tensor::zeros(shape))
    }

    /// Slots drawn i.i.d. from `N(0, std^2)`.
    pub fn random<R: Rng + ?Sized>(config: &LMConfig, std: f64, rng: &mut R) -> Self {
        Self::build(config, |shape| Tensor::randn(shape, std, rng))
    }

    fn build(config: &LMConfig, mut make: impl FnMut(&[usize]) -> Tensor<T>) -> Self {
        let shape = [config.prefix_len, config.d_model];
        let slots = if config.prefix_len == 0 {
            Vec::new()
        } else {
            (0..config.n_layers).map(|_| [make(&shape), make(&shape)]).collect()
        };
        Self {
            prefix_len: config.prefix_len,
            d_model: config.d_model,
            slots,
            n_layers: config.n_layers,
        }
    }

    /// Keys and values the model itself produces for `tokens`, usable as a
    /// starting prefix that the base model already understands.
    pub fn from_activations(model: &LanguageModel<T>, tokens: &[TokenId]) -> Result<Self> {
        let cfg = model.config();
        if tokens.len() != cfg.prefix_len {
            return Err(Error::Config(format!(
                "need {} tokens to seed the prefix, got {}",
                cfg.prefix_len,
                tokens.len()
            )));
        }
        if tokens.is_empty() {
            return Ok(Self::zeros(cfg));
        }
        let (_, cache) = model.view().forward(tokens)?;
        let slots = cache.keys.into_iter().zip(cache.values).map(|(k, v)| [k, v]).collect();
        Ok(Self {
            prefix_len: cfg.prefix_len,
            d_model: cfg.d_model,
            slots,
            n_layers: cfg.n_layers,
        })
    }

    pub fn len(&self) -> usize {
        self.prefix_len
    }

    pub fn is_empty(&self) -> bool {
        self.prefix_len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n_layers, 2, self.prefix_len, self.d_model]
    }

    pub fn check_against(&self, config: &LMConfig) -> Result<()> {
        let expected = [config.n_layers, 2, config.prefix_len, config.d_model];
        if self.shape() != expected {
            return Err(Error::Config(format!(
                "prefix shape {:?} does not match model {:?}",
                self.shape(),
                expected
            )));
        }
        Ok(())
    }

    /// Key (`kind == 0`) or value (`kind == 1`) slots of one layer.
    pub fn slot(&self, layer: usize, kind: usize) -> &Tensor<T> {
        &self.slots[layer][kind]
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.slots.iter().flat_map(|p| p.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.slots.iter_mut().flat_map(|p| p.iter_mut())
    }

    /// Records the slots as leaves; `None` for an empty prefix.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Option<Vec<(Var, Var)>> {
        if self.is_empty() {
            return None;
        }
        Some(
            self.slots
                .iter()
                .map(|[k, v]| {
                    (
                        tape.leaf(k.clone().with_requires_grad(trainable)),
                        tape.leaf(v.clone().with_requires_grad(trainable)),
                    )
                })
                .collect(),
        )
    }

    /// Flattened copy of all slot values in layer, key/value, row order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites all slots from a flattened buffer.
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        let total: usize = self.tensors().map(Tensor::numel).sum();
        if flat.len() != total {
            return Err(Error::Shape(format!("prefix holds {total} values, got {}", flat.len())));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn norm(&self) -> T {
        self.tensors()
            .flat_map(|t| t.data().iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_follows_config() {
        let cfg = LMConfig::default();
        let p = PrefixState::<f64>::zeros(&cfg);
        assert_eq!(p.shape(), [2, 2, 10, 64]);
        p.check_against(&cfg).unwrap();
        let other = LMConfig { prefix_len: 4, ..cfg };
        assert!(p.check_against(&other).is_err());
    }

    #[test]
    fn empty_prefix_binds_to_nothing() {
        let cfg = LMConfig {
            prefix_len: 0,
            ..LMConfig::default()
        };
        let p = PrefixState::<f64>::zeros(&cfg);
        let mut tape = Tape::new();
        assert!(p.bind(&mut tape, true).is_none());
        assert!(p.is_empty());
    }
}
