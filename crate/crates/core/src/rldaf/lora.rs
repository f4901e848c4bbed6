use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::{AdapterVars, LMConfig, LanguageModel, ModelView, Projection};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Low-rank factors added to every attention projection:
/// `W -> W + scale * A * B`, `A: d x r`, `B: r x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    rank: usize,
    d_model: usize,
    pub scale: T,
    /// Per layer, per [`Projection`], the `[A, B]` pair.
    pub factors: Vec<[[Tensor<T>; 2]; 4]>,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A` Gaussian, `B` zero, so the adapted model starts as the base model.
    pub fn new(config: &LMConfig, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 || rank > config.d_model {
            return Err(Error::Config(format!(
                "adapter rank {rank} must be in 1..={}",
                config.d_model
            )));
        }
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d as f64).sqrt();
        let factors = (0..config.n_layers)
            .map(|_| Projection::ALL.map(|_| [Tensor::randn(&[d, rank], std, &mut rng), Tensor::zeros(&[rank, d])]))
            .collect();
        Ok(Self {
            rank,
            d_model: d,
            scale: T::one(),
            factors,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn check_against(&self, config: &LMConfig) -> Result<()> {
        if self.factors.len() != config.n_layers || self.d_model != config.d_model {
            return Err(Error::Config(format!(
                "adapter built for {} layers x d={} does not fit model {} x d={}",
                self.factors.len(),
                self.d_model,
                config.n_layers,
                config.d_model
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.factors.iter().flat_map(|l| l.iter().flat_map(|p| p.iter()))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.factors
            .iter_mut()
            .flat_map(|l| l.iter_mut().flat_map(|p| p.iter_mut()))
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.factors.iter().enumerate() {
            for (proj, [a, b]) in Projection::ALL.iter().zip(layer) {
                out.push((format!("lora.{i}.{}.a", proj.name()), a));
                out.push((format!("lora.{i}.{}.b", proj.name()), b));
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> AdapterVars<T> {
        let factors = self
            .factors
            .iter()
            .map(|layer| {
                let mut slots = [None; 4];
                for (slot, [a, b]) in slots.iter_mut().zip(layer) {
                    let av = tape.leaf(a.clone().with_requires_grad(trainable));
                    let bv = tape.leaf(b.clone().with_requires_grad(trainable));
                    *slot = Some((av, bv));
                }
                slots
            })
            .collect();
        AdapterVars {
            scale: self.scale,
            factors,
        }
    }
}

/// Frozen base weights plus trainable low-rank adapter factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel<T> {
    pub base: LanguageModel<T>,
    pub adapter: LoraAdapter<T>,
}

impl<T: Scalar> AdaptedModel<T> {
    pub fn view(&self) -> ModelView<'_, T> {
        ModelView {
            model: &self.base,
            adapter: Some(&self.adapter),
            prefix: None,
        }
    }
}

/// Wraps a model with a zero-initialized adapter of the given rank.
pub fn lora_wrap<T: Scalar>(lm: LanguageModel<T>, rank: usize, seed: u64) -> Result<AdaptedModel<T>> {
    let adapter = LoraAdapter::new(lm.config(), rank, seed)?;
    Ok(AdaptedModel { base: lm, adapter })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_bounds() {
        let cfg = LMConfig::default();
        assert!(LoraAdapter::<f64>::new(&cfg, 0, 0).is_err());
        assert!(LoraAdapter::<f64>::new(&cfg, 65, 0).is_err());
        assert!(LoraAdapter::<f64>::new(&cfg, 64, 0).is_ok());
    }

    #[test]
    fn parameter_count_from_shapes() {
        let cfg = LMConfig::default();
        let a = LoraAdapter::<f64>::new(&cfg, 4, 0).unwrap();
        // 4 projections per layer, each with two d x r factors.
        assert_eq!(a.param_count(), cfg.n_layers * 4 * 2 * cfg.d_model * 4);
    }
}
