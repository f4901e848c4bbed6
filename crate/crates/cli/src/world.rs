//! Deterministic experiment state rebuilt from a config: corpora, prompts,
//! targets and the trained models that depend on them.

use anyhow::Result;
use serde::{Deserialize, Serialize};

use ppc_core::attribute::{train_discriminator, AttributeTarget, DiscTrainReport, WordBag};
use ppc_core::corpus::{
    generate_sentiment_corpus, generate_topic_corpus, make_prompts, pack_documents, CorpusStats, LabeledSequence,
    Vocab, BOS_ID, SENTIMENT_CLASSES,
};
use ppc_core::eval::build_test_bag;
use ppc_core::lm::{pretrain, sequence_loss, unigram_entropy, PretrainStep, TokenId};
use ppc_core::rldaf::{train, EpisodeLog, Policy};
use ppc_core::{Disc, Model, Prefix, RlPolicy};

use crate::config::{ExperimentConfig, Task};

/// Corpora and evaluation inputs; cheap to rebuild from the config.
#[derive(Debug, Clone)]
pub struct Data {
    pub vocab: Vocab,
    pub topics: Vec<LabeledSequence>,
    pub sentiment: Vec<LabeledSequence>,
    pub train_docs: Vec<Vec<TokenId>>,
    pub heldout_docs: Vec<Vec<TokenId>>,
    /// Steering targets of the configured task.
    pub targets: Vec<AttributeTarget>,
    /// Expanded bags used to score topic coverage, one per topic.
    pub test_bags: Vec<WordBag>,
    pub train_prompts: Vec<Vec<TokenId>>,
    pub eval_prompts: Vec<Vec<TokenId>>,
}

impl Data {
    /// `cfg` must already be resolved.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let c = &cfg.corpus;
        let vocab = c.spec.build_vocab()?;
        if vocab.len() != cfg.lm.vocab_size {
            anyhow::bail!(ppc_core::Error::Config(format!(
                "lm.vocab_size is {} but the corpus vocabulary has {} words",
                cfg.lm.vocab_size,
                vocab.len()
            )));
        }
        let topics = generate_topic_corpus(&c.spec, &vocab, c.topic_sentences)?;
        let sentiment = generate_sentiment_corpus(&c.spec, &vocab, c.sentiment_sentences)?;
        let mut all = topics.clone();
        all.extend(sentiment.iter().cloned());
        let docs = pack_documents(&all, c.doc_len, cfg.stream("pack"));
        let n_held = ((docs.len() as f64) * c.heldout).round() as usize;
        let (heldout_docs, train_docs) = docs.split_at(n_held.min(docs.len().saturating_sub(1)));

        let bags = c.spec.bags(&vocab)?;
        let stats = CorpusStats::from_sequences(topics.iter().map(|s| s.tokens.as_slice()));
        let test_bags = bags
            .iter()
            .map(|b| build_test_bag(b, &stats, cfg.eval.test_bag_threshold, vocab.len()))
            .collect();
        let targets = match cfg.task {
            Task::Topic => bags.into_iter().map(AttributeTarget::Topic).collect(),
            Task::Sentiment => (0..SENTIMENT_CLASSES.len()).map(AttributeTarget::Class).collect(),
        };
        let len = cfg.eval.prompt_len;
        Ok(Self {
            train_prompts: make_prompts(
                &c.spec,
                &vocab,
                cfg.eval.train_prompts,
                len,
                cfg.stream("train-prompts"),
            )?,
            eval_prompts: make_prompts(&c.spec, &vocab, cfg.eval.samples, len, cfg.stream("eval-prompts"))?,
            vocab,
            topics,
            sentiment,
            train_docs: train_docs.to_vec(),
            heldout_docs: heldout_docs.to_vec(),
            targets,
            test_bags,
        })
    }

    /// Labeled sentences the steering discriminator and the judge learn
    /// from: disjoint halves of the task corpus.
    pub fn disc_splits(&self, task: Task) -> (&[LabeledSequence], &[LabeledSequence]) {
        let corpus = match task {
            Task::Topic => &self.topics,
            Task::Sentiment => &self.sentiment,
        };
        corpus.split_at(corpus.len() / 2)
    }

    pub fn class_names(&self, cfg: &ExperimentConfig) -> Vec<String> {
        match cfg.task {
            Task::Topic => cfg.corpus.spec.topic_names(),
            Task::Sentiment => SENTIMENT_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub log: Vec<PretrainStep>,
    pub heldout_loss: f64,
    pub unigram_entropy: f64,
}

pub fn pretrain_lm(cfg: &ExperimentConfig, data: &Data) -> Result<(Model, PretrainSummary)> {
    let mut lm = Model::init(cfg.lm, cfg.stream("init"))?;
    let log = pretrain(&mut lm, &data.train_docs, &cfg.pretrain)?;
    let heldout = if data.heldout_docs.is_empty() {
        &data.train_docs
    } else {
        &data.heldout_docs
    };
    let summary = PretrainSummary {
        log,
        heldout_loss: sequence_loss(&lm, heldout)?,
        unigram_entropy: unigram_entropy(&data.train_docs, cfg.lm.vocab_size),
    };
    Ok((lm, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscSummary {
    pub steering: DiscTrainReport,
    pub judge: DiscTrainReport,
}

/// The steering discriminator and an independent judge trained on the
/// other half of the corpus with a different seed.
pub fn train_discs(cfg: &ExperimentConfig, data: &Data, lm: &Model) -> Result<(Disc, Disc, DiscSummary)> {
    let (a, b) = data.disc_splits(cfg.task);
    let names = data.class_names(cfg);
    let (disc, steering) = train_discriminator(lm, a, names.clone(), &cfg.disc)?;
    let judge_cfg = ppc_core::attribute::DiscTrainConfig {
        seed: cfg.stream("judge"),
        ..cfg.disc
    };
    let (judge, judge_report) = train_discriminator(lm, b, names, &judge_cfg)?;
    Ok((
        disc,
        judge,
        DiscSummary {
            steering,
            judge: judge_report,
        },
    ))
}

/// Starting prefix shared by every steered variant: activations of a run
/// of `<bos>` tokens.
pub fn prefix_init(lm: &Model) -> Result<Prefix> {
    Ok(Prefix::from_activations(lm, &vec![BOS_ID; lm.config().prefix_len])?)
}

pub fn train_policy(
    cfg: &ExperimentConfig,
    data: &Data,
    lm: &Model,
    disc: Option<&Disc>,
    beta: f64,
) -> Result<(RlPolicy, Vec<EpisodeLog>)> {
    let rl = ppc_core::rldaf::RLDAFConfig { beta, ..cfg.rldaf };
    let mut policy = Policy::new(
        lm.clone(),
        rl.lora_rank,
        cfg.stream("adapter"),
        &prefix_init(lm)?,
        data.targets.len(),
    )?;
    let log = train(
        &mut policy,
        disc,
        &data.train_prompts,
        &data.targets,
        &rl,
        &cfg.steer,
        &cfg.decode,
        None,
    )?;
    Ok((policy, log))
}

/// Mean per-token KL over the last ten logged episodes.
pub fn final_kl(log: &[EpisodeLog]) -> f64 {
    let tail = &log[log.len().saturating_sub(10)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(|e| e.mean_kl).sum::<f64>() / tail.len() as f64
}
