//! Generation metrics: oracle-label perplexity, distinct n-grams, topic
//! coverage and judged sentiment accuracy.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::attribute::{Discriminator, WordBag};
use crate::corpus::CorpusStats;
use crate::error::{Error, Result};
use crate::lm::{argmax, LanguageModel, ModelView, TokenId};
use crate::scalar::Scalar;
use crate::tape::log_softmax;

/// Greedy next-token labels of the judge for positions `start..text.len()`.
pub fn judge_labels<T: Scalar>(judge: &ModelView<'_, T>, text: &[TokenId], start: usize) -> Result<Vec<usize>> {
    check_ppl_input(text, start)?;
    let (logits, _) = judge.forward(&text[..text.len() - 1])?;
    Ok((start..text.len()).map(|i| argmax(logits.row(i - 1))).collect())
}

fn check_ppl_input(text: &[TokenId], start: usize) -> Result<()> {
    if text.len() < 2 {
        return Err(Error::Domain(format!(
            "oracle perplexity needs at least 2 tokens, got {}",
            text.len()
        )));
    }
    if start == 0 || start >= text.len() {
        return Err(Error::Index {
            what: "first scored position",
            index: start,
            bound: text.len(),
        });
    }
    Ok(())
}

fn ppl_from_rows<T: Scalar>(labels: &[usize], rows: &[&[T]]) -> Result<f64> {
    let mut nll = 0.0;
    for (&label, row) in labels.iter().zip(rows) {
        let lp = log_softmax(row);
        let v = lp.get(label).ok_or(Error::Index {
            what: "judge label",
            index: label,
            bound: lp.len(),
        })?;
        nll -= v.as_f64();
    }
    Ok((nll / labels.len() as f64).exp().max(1.0))
}

/// `exp(mean_i -log P_eval(L_i | x_<i))` over positions `start..`, where
/// `L_i` is the judge's greedy prediction.
pub fn oracle_ppl<T: Scalar>(
    judge: &ModelView<'_, T>,
    evaluated: &ModelView<'_, T>,
    text: &[TokenId],
    start: usize,
) -> Result<f64> {
    let labels = judge_labels(judge, text, start)?;
    let (logits, _) = evaluated.forward(&text[..text.len() - 1])?;
    let rows: Vec<&[T]> = (start..text.len()).map(|i| logits.row(i - 1)).collect();
    ppl_from_rows(&labels, &rows)
}

/// Oracle perplexity against distributions recorded while generating, one
/// logits row per generated position `prompt_len..text.len()`.
pub fn oracle_ppl_recorded<T: Scalar>(
    judge: &ModelView<'_, T>,
    text: &[TokenId],
    prompt_len: usize,
    step_logits: &[Vec<T>],
) -> Result<f64> {
    let labels = judge_labels(judge, text, prompt_len)?;
    if step_logits.len() != labels.len() {
        return Err(Error::Dimension {
            op: "oracle_ppl_recorded",
            left: vec![labels.len()],
            right: vec![step_logits.len()],
        });
    }
    let rows: Vec<&[T]> = step_logits.iter().map(Vec::as_slice).collect();
    ppl_from_rows(&labels, &rows)
}

/// Distinct n-grams over total n-grams.
pub fn dist_n(text: &[TokenId], n: usize) -> Result<f64> {
    if n == 0 || text.len() < n {
        return Err(Error::Domain(format!(
            "dist-{n} needs at least {n} tokens, got {}",
            text.len()
        )));
    }
    let grams: Vec<&[TokenId]> = text.windows(n).collect();
    let unique: HashSet<&[TokenId]> = grams.iter().copied().collect();
    Ok(unique.len() as f64 / grams.len() as f64)
}

/// Fraction of tokens belonging to `bag`.
pub fn topic_score(text: &[TokenId], bag: &WordBag) -> Result<f64> {
    if text.is_empty() {
        return Err(Error::Domain("topic score of empty text".into()));
    }
    let hits = text.iter().filter(|t| bag.contains(**t)).count();
    Ok(hits as f64 / text.len() as f64)
}

/// Fraction of texts whose judged class equals the target.
pub fn sentiment_accuracy<T: Scalar>(
    lm: &LanguageModel<T>,
    judge: &Discriminator<T>,
    texts: &[Vec<TokenId>],
    targets: &[usize],
) -> Result<f64> {
    if texts.len() != targets.len() || texts.is_empty() {
        return Err(Error::Domain(format!(
            "{} texts vs {} targets",
            texts.len(),
            targets.len()
        )));
    }
    let mut hits = 0;
    for (text, &target) in texts.iter().zip(targets) {
        if argmax(&judge.classify_tokens(lm, text)?) == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / texts.len() as f64)
}

/// Grows `bag` with every token whose sentences contain a member of the
/// current set at a rate above `threshold`, repeating until nothing joins.
pub fn build_test_bag(bag: &WordBag, stats: &CorpusStats, threshold: f64, vocab_size: usize) -> WordBag {
    let mut set: BTreeSet<TokenId> = bag.ids().iter().copied().collect();
    loop {
        let joining: Vec<TokenId> = stats
            .tokens()
            .filter(|t| !set.contains(t) && stats.cooccurrence_rate(*t, &set) > threshold)
            .collect();
        if joining.is_empty() {
            break;
        }
        set.extend(joining);
    }
    WordBag::new(bag.name(), set.into_iter().collect(), vocab_size).expect("expansion of a valid bag stays valid")
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub oracle_ppl: f64,
    /// Dist-n for n = 1, 2, 3.
    pub dist: BTreeMap<usize, f64>,
    /// Topic score or sentiment accuracy.
    pub attribute_score: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        if !(self.oracle_ppl >= 1.0) {
            return Err(Error::Domain(format!("oracle ppl {} below 1", self.oracle_ppl)));
        }
        if self.dist.values().any(|d| !(*d > 0.0 && *d <= 1.0)) {
            return Err(Error::Domain("dist values must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.attribute_score) {
            return Err(Error::Domain("attribute score must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mean Dist-1..3 over samples.
pub fn mean_dist(samples: &[&[TokenId]]) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for n in 1..=3 {
        let scores = samples.iter().map(|s| dist_n(s, n)).collect::<Result<Vec<_>>>()?;
        out.insert(n, scores.iter().sum::<f64>() / scores.len().max(1) as f64);
    }
    Ok(out)
}
