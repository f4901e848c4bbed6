use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ppc_core::attribute::DiscTrainConfig;
use ppc_core::corpus::{derive_seed, CorpusSpec};
use ppc_core::lm::{DecodeConfig, LMConfig, PretrainConfig};
use ppc_core::rldaf::RLDAFConfig;
use ppc_core::steer::SteerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    Topic,
    Sentiment,
}

/// Corpus sizes on top of the vocabulary and sentence spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusOptions {
    pub spec: CorpusSpec,
    pub topic_sentences: usize,
    pub sentiment_sentences: usize,
    /// Maximum packed document length for pretraining.
    pub doc_len: usize,
    /// Fraction of documents held out from pretraining.
    pub heldout: f64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            spec: CorpusSpec::default(),
            topic_sentences: 2000,
            sentiment_sentences: 1000,
            doc_len: 48,
            heldout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Generations per evaluated model, spread round-robin over targets.
    pub samples: usize,
    /// Filler words after `<bos>` in every prompt.
    pub prompt_len: usize,
    /// Co-occurrence rate above which a word joins a test bag.
    pub test_bag_threshold: f64,
    /// Prompts drawn for policy training.
    pub train_prompts: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: 100,
            prompt_len: 2,
            test_bag_threshold: 0.5,
            train_prompts: 100,
        }
    }
}

/// Everything an experiment needs. Sub-config `seed` fields are ignored:
/// every random stream is derived from the global `seed`. `lm.vocab_size`
/// always follows the corpus vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: Task,
    pub lm: LMConfig,
    pub pretrain: PretrainConfig,
    pub corpus: CorpusOptions,
    pub disc: DiscTrainConfig,
    pub steer: SteerConfig,
    pub rldaf: RLDAFConfig,
    pub decode: DecodeConfig,
    pub eval: EvalOptions,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusOptions::default();
        let vocab_size = corpus.spec.build_vocab().map_or(0, |v| v.len());
        Self {
            seed: 0,
            task: Task::default(),
            lm: LMConfig {
                vocab_size,
                ..LMConfig::default()
            },
            pretrain: PretrainConfig::default(),
            corpus,
            disc: DiscTrainConfig::default(),
            steer: SteerConfig::default(),
            rldaf: RLDAFConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalOptions::default(),
            out: PathBuf::from("out"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).context("invalid config")?;
        cfg.lm.vocab_size = cfg.corpus.spec.build_vocab()?.len();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file at `path` if given, then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.corpus.spec.validate()?;
        self.steer.validate()?;
        self.rldaf.validate()?;
        self.decode.validate()?;
        if self.eval.samples == 0 || self.eval.train_prompts == 0 {
            anyhow::bail!(ppc_core::Error::Config(
                "eval.samples and eval.train_prompts must be positive".into()
            ));
        }
        if self.corpus.doc_len > self.lm.context_len || self.corpus.doc_len < 2 {
            anyhow::bail!(ppc_core::Error::Config(format!(
                "corpus.doc_len {} must lie in [2, lm.context_len = {}]",
                self.corpus.doc_len, self.lm.context_len
            )));
        }
        if !(0.0..1.0).contains(&self.corpus.heldout) {
            anyhow::bail!(ppc_core::Error::Config("corpus.heldout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Sorted-key JSON; identical configs give identical strings.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self)
            .and_then(|v| serde_json::to_string(&v))
            .expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stream(&self, name: &str) -> u64 {
        derive_seed(self.seed, name, 0)
    }

    /// Copy with every sub-config seed replaced by its named stream.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.corpus.spec.seed = self.stream("corpus");
        c.pretrain.seed = self.stream("pretrain");
        c.disc.seed = self.stream("disc");
        c.rldaf.seed = self.stream("rollout");
        c.decode.seed = self.stream("decode");
        c
    }
}
