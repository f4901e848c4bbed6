//! Attribute models: the bag-of-words likelihood and a linear classifier
//! over mean-pooled final hidden states.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledSequence;
use crate::error::{Error, Result};
use crate::lm::{HiddenCache, LanguageModel, TokenId};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Log-mass floor used when a bag receives no probability at all.
pub const BOW_FLOOR: f64 = 1e-12;

/// A named, duplicate-free set of vocabulary ids characterizing a topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordBag {
    name: String,
    ids: Vec<TokenId>,
}

impl WordBag {
    pub fn new(name: impl Into<String>, ids: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Domain("word bag must not be empty".into()));
        }
        let unique: BTreeSet<TokenId> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(Error::Domain("word bag contains duplicate ids".into()));
        }
        if let Some(&bad) = unique.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::Index {
                what: "word bag id",
                index: bad as usize,
                bound: vocab_size,
            });
        }
        Ok(Self {
            name: name.into(),
            ids: unique.into_iter().collect(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Sorted ids.
    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    pub(crate) fn indices(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

/// What generation is steered towards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeTarget {
    Topic(WordBag),
    Class(usize),
}

impl AttributeTarget {
    pub fn label(&self) -> String {
        match self {
            AttributeTarget::Topic(bag) => bag.name().to_string(),
            AttributeTarget::Class(c) => format!("class-{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BowScore<T> {
    pub value: T,
    /// True when the bag mass was exactly zero and the floor was used.
    pub underflow: bool,
}

/// `log(sum of next-token probability over the bag)`.
pub fn bow_log_likelihood<T: Scalar>(probs: &[T], bag: &WordBag) -> Result<BowScore<T>> {
    if bag.is_empty() {
        return Err(Error::Domain("empty word bag".into()));
    }
    let total: T = probs.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(1e-6) {
        return Err(Error::Domain(format!("probabilities sum to {total}, expected 1")));
    }
    let mut mass = T::zero();
    for &id in bag.ids() {
        let p = *probs.get(id as usize).ok_or(Error::Index {
            what: "bag id",
            index: id as usize,
            bound: probs.len(),
        })?;
        mass += p;
    }
    if mass <= T::zero() {
        return Ok(BowScore {
            value: T::lit(BOW_FLOOR).ln(),
            underflow: true,
        });
    }
    Ok(BowScore {
        value: mass.min(T::one()).ln(),
        underflow: false,
    })
}

/// Differentiable bag log-likelihood of a `1 x vocab` logits row, computed
/// in log space: `logsumexp(log_softmax(logits)[bag])`.
pub fn bow_log_likelihood_var<T: Scalar>(tape: &mut Tape<T>, logits: Var, bag: &WordBag) -> Result<Var> {
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.select_cols(logp, &bag.indices())?;
    tape.logsumexp_rows(picked)
}

/// Linear head over mean-pooled final-layer hidden states of the content
/// positions. Prefix slots never enter the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    /// `d_model x classes`.
    pub weight: Tensor<T>,
    /// `classes`.
    pub bias: Tensor<T>,
    pub class_names: Vec<String>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, class_names: Vec<String>) -> Result<Self> {
        let classes = class_names.len();
        if weight.shape().len() != 2 || weight.cols() != classes || bias.numel() != classes {
            return Err(Error::Dimension {
                op: "discriminator head",
                left: weight.shape().to_vec(),
                right: vec![classes],
            });
        }
        Ok(Self {
            weight,
            bias,
            class_names,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn d_model(&self) -> usize {
        self.weight.rows()
    }

    fn logits_from_pooled(&self, pooled: &[T]) -> Vec<T> {
        (0..self.classes())
            .map(|c| {
                let mut acc = self.bias.data()[c];
                for (j, &x) in pooled.iter().enumerate() {
                    acc += x * self.weight.at(j, c);
                }
                acc
            })
            .collect()
    }

    /// Class distribution from hidden states of content positions
    /// `1..=upto`.
    pub fn classify(&self, cache: &HiddenCache<T>, upto: usize) -> Result<Vec<T>> {
        let pooled = mean_pool(&cache.hidden, upto)?;
        if pooled.len() != self.d_model() {
            return Err(Error::Dimension {
                op: "classify",
                left: vec![pooled.len()],
                right: self.weight.shape().to_vec(),
            });
        }
        Ok(crate::tape::softmax(&self.logits_from_pooled(&pooled)))
    }

    /// Head logits (pre-softmax) for the first `upto` rows of a hidden-state
    /// node, recorded on the tape.
    pub fn logits_var(&self, tape: &mut Tape<T>, hidden: Var, upto: usize) -> Result<Var> {
        let rows = tape.value(hidden).rows();
        if upto == 0 || upto > rows {
            return Err(Error::Index {
                what: "classify position",
                index: upto,
                bound: rows,
            });
        }
        let h = if upto == rows {
            hidden
        } else {
            tape.slice(hidden, crate::tape::Axis::Rows, 0, upto)?
        };
        let pooled = tape.mean_rows(h)?;
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let z = tape.matmul(pooled, w)?;
        tape.add_row(z, b)
    }

    /// Pools final hidden states of `tokens` under the frozen `lm` and
    /// classifies them.
    pub fn classify_tokens(&self, lm: &LanguageModel<T>, tokens: &[TokenId]) -> Result<Vec<T>> {
        let (_, cache) = lm.view().forward(tokens)?;
        self.classify(&cache, tokens.len())
    }
}

/// Mean of rows `0..upto` of a hidden-state matrix.
pub fn mean_pool<T: Scalar>(hidden: &Tensor<T>, upto: usize) -> Result<Vec<T>> {
    if upto == 0 || upto > hidden.rows() {
        return Err(Error::Index {
            what: "classify position",
            index: upto,
            bound: hidden.rows(),
        });
    }
    let d = hidden.cols();
    let mut pooled = vec![T::zero(); d];
    for i in 0..upto {
        pooled.iter_mut().zip(hidden.row(i)).for_each(|(p, &x)| *p += x);
    }
    let n = T::lit(upto as f64);
    pooled.iter_mut().for_each(|p| *p /= n);
    Ok(pooled)
}

/// `-log d[target]` for a class-label target.
pub fn discriminator_loss<T: Scalar>(d: &[T], target: &AttributeTarget) -> Result<T> {
    match target {
        AttributeTarget::Class(c) => {
            let p = *d.get(*c).ok_or(Error::Index {
                what: "target class",
                index: *c,
                bound: d.len(),
            })?;
            Ok(-p.ln())
        }
        AttributeTarget::Topic(_) => Err(Error::Domain("discriminator loss needs a class-label target".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of the corpus held out for accuracy.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for DiscTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            weight_decay: 0.0,
            holdout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscTrainReport {
    pub curve: Vec<DiscEpoch>,
    pub heldout_accuracy: f64,
    pub train_size: usize,
    pub heldout_size: usize,
}

/// Pooled final hidden state of each sequence under the frozen model.
pub fn pooled_features<T: Scalar>(lm: &LanguageModel<T>, corpus: &[LabeledSequence]) -> Result<Vec<Vec<T>>> {
    corpus
        .par_iter()
        .map(|s| {
            let (_, cache) = lm.view().forward(&s.tokens)?;
            mean_pool(&cache.hidden, s.tokens.len())
        })
        .collect()
}

fn accuracy<T: Scalar>(disc: &Discriminator<T>, feats: &[&Vec<T>], labels: &[usize]) -> f64 {
    if feats.is_empty() {
        return 0.0;
    }
    let hits = feats
        .iter()
        .zip(labels)
        .filter(|(f, &y)| crate::lm::argmax(&disc.logits_from_pooled(f)) == y)
        .count();
    hits as f64 / feats.len() as f64
}

/// Fits a softmax-regression head on pooled features of the frozen model.
pub fn train_discriminator<T: Scalar>(
    lm: &LanguageModel<T>,
    corpus: &[LabeledSequence],
    class_names: Vec<String>,
    cfg: &DiscTrainConfig,
) -> Result<(Discriminator<T>, DiscTrainReport)> {
    let classes = class_names.len();
    let present: BTreeSet<usize> = corpus.iter().map(|s| s.label).collect();
    if present.len() < 2 {
        return Err(Error::Data(format!(
            "discriminator training needs at least 2 classes, found {}",
            present.len()
        )));
    }
    if let Some(&bad) = present.iter().find(|&&c| c >= classes) {
        return Err(Error::Index {
            what: "corpus label",
            index: bad,
            bound: classes,
        });
    }
    let feats = pooled_features(lm, corpus)?;
    let d = lm.config().d_model;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let n_hold = ((corpus.len() as f64) * cfg.holdout).round() as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold.min(corpus.len().saturating_sub(1)));

    let x: Vec<T> = train_idx.iter().flat_map(|&i| feats[i].clone()).collect();
    let y: Vec<usize> = train_idx.iter().map(|&i| corpus[i].label).collect();
    let x = Tensor::new(&[train_idx.len(), d], x)?;

    let mut weight = Tensor::randn(&[d, classes], 0.01, &mut rng);
    let mut bias = Tensor::zeros(&[classes]);
    let mut opt = Adam::new(cfg.lr);
    opt.weight_decay = T::lit(cfg.weight_decay);
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(weight.clone());
        let bv = tape.param(bias.clone());
        let z = tape.matmul(xv, wv)?;
        let z = tape.add_row(z, bv)?;
        let loss = tape.cross_entropy_rows(z, &y)?;
        tape.backward(loss)?;
        let gw = tape.grad(wv).expect("weight grad").to_vec();
        let gb = tape.grad(bv).expect("bias grad").to_vec();
        let loss_value = tape.item(loss).as_f64();
        opt.step(&mut [&mut weight, &mut bias], &[&gw, &gb])?;
        if epoch % 10 == 0 || epoch + 1 == cfg.epochs {
            let probe = Discriminator::new(weight.clone(), bias.clone(), class_names.clone())?;
            let tf: Vec<&Vec<T>> = train_idx.iter().map(|&i| &feats[i]).collect();
            let train_accuracy = accuracy(&probe, &tf, &y);
            log::debug!("disc epoch {epoch}: loss {loss_value:.4} train acc {train_accuracy:.3}");
            curve.push(DiscEpoch {
                epoch,
                loss: loss_value,
                train_accuracy,
            });
        }
    }
    let disc = Discriminator::new(weight, bias, class_names)?;
    let hf: Vec<&Vec<T>> = hold_idx.iter().map(|&i| &feats[i]).collect();
    let hy: Vec<usize> = hold_idx.iter().map(|&i| corpus[i].label).collect();
    let heldout_accuracy = accuracy(&disc, &hf, &hy);
    log::info!(
        "discriminator trained: held-out accuracy {heldout_accuracy:.3} on {} sequences",
        hold_idx.len()
    );
    Ok((
        disc,
        DiscTrainReport {
            curve,
            heldout_accuracy,
            train_size: train_idx.len(),
            heldout_size: hold_idx.len(),
        },
    ))
}
