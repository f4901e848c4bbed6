use crate::error::{Error, Result};
use crate::lm::{LanguageModel, ModelView, PrefixState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::lora::{lora_wrap, AdaptedModel};

/// The trainable policy: a frozen base model with adapter factors plus one
/// starting prefix per steering target. `reference_prefix` is the untrained
/// starting point; the frozen base conditioned on it is the reference policy
/// the fluency reward measures drift against.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy<T> {
    pub model: AdaptedModel<T>,
    pub prefix_bank: Vec<PrefixState<T>>,
    pub reference_prefix: PrefixState<T>,
}

impl<T: Scalar> Policy<T> {
    /// Wraps `lm` with a zero-initialized adapter; every target starts from
    /// `prefix_init`.
    pub fn new(
        lm: LanguageModel<T>,
        rank: usize,
        seed: u64,
        prefix_init: &PrefixState<T>,
        targets: usize,
    ) -> Result<Self> {
        prefix_init.check_against(lm.config())?;
        if targets == 0 {
            return Err(Error::Config("policy needs at least one target".into()));
        }
        Ok(Self {
            model: lora_wrap(lm, rank, seed)?,
            prefix_bank: vec![prefix_init.clone(); targets],
            reference_prefix: prefix_init.clone(),
        })
    }

    pub fn base(&self) -> &LanguageModel<T> {
        &self.model.base
    }

    pub fn view(&self) -> ModelView<'_, T> {
        self.model.view()
    }

    /// Next-token logits of the reference policy.
    pub fn reference_logits(&self, context: &[crate::lm::TokenId]) -> Result<Vec<T>> {
        self.base()
            .view()
            .with_prefix(&self.reference_prefix)?
            .next_logits(context)
    }

    pub fn prefix(&self, target: usize) -> Result<&PrefixState<T>> {
        self.prefix_bank.get(target).ok_or(Error::Index {
            what: "prefix bank target",
            index: target,
            bound: self.prefix_bank.len(),
        })
    }

    /// Every trainable tensor: adapter factors, then the prefix bank.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.model.adapter.tensors_mut().collect();
        for p in &mut self.prefix_bank {
            out.extend(p.tensors_mut());
        }
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.model.adapter.tensors().collect();
        for p in &self.prefix_bank {
            out.extend(p.tensors());
        }
        out
    }
}
