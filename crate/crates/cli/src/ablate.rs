//! The six compared variants, their evaluation and the comparison table.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use anyhow::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ppc_core::attribute::{AttributeTarget, Discriminator};
use ppc_core::corpus::derive_seed;
use ppc_core::eval::{mean_dist, oracle_ppl, oracle_ppl_recorded, topic_score, MetricsReport};
use ppc_core::lm::{argmax, generate_full, DecodeConfig, TokenId};
use ppc_core::steer::{generate, Objective, SteerConfig, SteerMode};
use ppc_core::{Disc, Model, Prefix, RlPolicy};

use crate::config::{ExperimentConfig, Task};
use crate::world::{final_kl, prefix_init, train_discs, train_policy, Data, DiscSummary, PretrainSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    PromptPpc,
    PpcKv,
    PpcPrefix,
    PlmRl,
    PpcFluency,
    PlainLm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::PromptPpc,
        Variant::PpcKv,
        Variant::PpcPrefix,
        Variant::PlmRl,
        Variant::PpcFluency,
        Variant::PlainLm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PromptPpc => "prompt-ppc",
            Variant::PpcKv => "ppc-kv",
            Variant::PpcPrefix => "ppc-prefix",
            Variant::PlmRl => "plm-rl",
            Variant::PpcFluency => "ppc-fluency",
            Variant::PlainLm => "plain-lm",
        }
    }

    /// Which trained policy the variant generates with.
    pub fn policy(self) -> PolicyKind {
        match self {
            Variant::PromptPpc | Variant::PpcKv | Variant::PlmRl => PolicyKind::Default,
            Variant::PpcFluency => PolicyKind::NoFluency,
            Variant::PpcPrefix | Variant::PlainLm => PolicyKind::None,
        }
    }

    /// Inference-time steering of the variant, derived from the base config.
    pub fn steer(self, base: &SteerConfig) -> SteerConfig {
        match self {
            Variant::PpcKv => SteerConfig {
                mode: SteerMode::KvSteer,
                ..*base
            },
            Variant::PlmRl => SteerConfig { m: 0, ..*base },
            Variant::PlainLm => SteerConfig::disabled(),
            _ => *base,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ppc_core::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ppc_core::Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Default,
    /// Trained with the fluency reward switched off.
    NoFluency,
    None,
}

/// What a variant generates with.
pub enum Generator<'a> {
    Plain(&'a Model),
    Steered { lm: &'a Model, prefixes: Vec<Prefix> },
    Policy(&'a RlPolicy),
}

impl<'a> Generator<'a> {
    pub fn for_variant(variant: Variant, lm: &'a Model, policy: Option<&'a RlPolicy>, targets: usize) -> Result<Self> {
        Ok(match (variant.policy(), policy) {
            (PolicyKind::None, _) if variant == Variant::PlainLm => Generator::Plain(lm),
            (PolicyKind::None, _) => Generator::Steered {
                lm,
                prefixes: vec![prefix_init(lm)?; targets],
            },
            (_, Some(p)) => Generator::Policy(p),
            (_, None) => anyhow::bail!(ppc_core::Error::Config(format!(
                "variant {variant} needs a trained policy"
            ))),
        })
    }
}

/// One evaluated generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub target: usize,
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub oracle_ppl: f64,
}

impl Sample {
    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }
}

pub fn sample_decode(cfg: &ExperimentConfig, index: usize) -> DecodeConfig {
    DecodeConfig {
        seed: derive_seed(cfg.decode.seed, "sample", index as u64),
        ..cfg.decode
    }
}

/// Generates one sample per evaluation prompt, cycling through targets.
/// The frozen base model is the fluency judge.
pub fn generate_samples(
    cfg: &ExperimentConfig,
    data: &Data,
    variant: Variant,
    generator: &Generator<'_>,
    disc: Option<&Disc>,
    judge_lm: &Model,
) -> Result<Vec<Sample>> {
    let steer = variant.steer(&cfg.steer);
    let objectives = data
        .targets
        .iter()
        .map(|t| Objective::new(t, disc))
        .collect::<ppc_core::Result<Vec<_>>>()?;
    let judge = judge_lm.view();
    data.eval_prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let target = i % data.targets.len();
            let decode = sample_decode(cfg, i);
            let (tokens, ppl) = match generator {
                Generator::Plain(lm) => {
                    let tokens = generate_full(lm.view(), prompt, &decode)?;
                    let ppl = oracle_ppl(&judge, &lm.view(), &tokens, prompt.len())?;
                    (tokens, ppl)
                }
                Generator::Steered { lm, prefixes } => {
                    let g = generate(
                        &lm.view(),
                        &objectives[target],
                        prompt,
                        &prefixes[target],
                        &steer,
                        &decode,
                        None,
                    )?;
                    let ppl = oracle_ppl_recorded(&judge, &g.tokens, g.prompt_len, &g.step_logits)?;
                    (g.tokens, ppl)
                }
                Generator::Policy(p) => {
                    let g = generate(
                        &p.view(),
                        &objectives[target],
                        prompt,
                        p.prefix(target)?,
                        &steer,
                        &decode,
                        None,
                    )?;
                    let ppl = oracle_ppl_recorded(&judge, &g.tokens, g.prompt_len, &g.step_logits)?;
                    (g.tokens, ppl)
                }
            };
            Ok(Sample {
                target,
                tokens,
                prompt_len: prompt.len(),
                oracle_ppl: ppl,
            })
        })
        .collect()
}

/// Topic coverage under the expanded test bags, or judged sentiment
/// accuracy.
pub fn attribute_score(
    task: Task,
    data: &Data,
    samples: &[Sample],
    lm: &Model,
    judge: &Discriminator<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += match (task, &data.targets[s.target]) {
            (Task::Topic, _) => topic_score(s.generated(), &data.test_bags[s.target])?,
            (Task::Sentiment, AttributeTarget::Class(c)) => {
                f64::from(u8::from(argmax(&judge.classify_tokens(lm, &s.tokens)?) == *c))
            }
            (Task::Sentiment, t) => anyhow::bail!(ppc_core::Error::Domain(format!(
                "sentiment task with non-class target {}",
                t.label()
            ))),
        };
    }
    Ok(total / samples.len().max(1) as f64)
}

pub fn metrics(
    cfg: &ExperimentConfig,
    data: &Data,
    variant: Variant,
    samples: &[Sample],
    lm: &Model,
    judge: &Disc,
    config_hash: &str,
) -> Result<MetricsReport> {
    let generated: Vec<&[TokenId]> = samples.iter().map(Sample::generated).collect();
    let report = MetricsReport {
        model: variant.name().into(),
        oracle_ppl: samples.iter().map(|s| s.oracle_ppl).sum::<f64>() / samples.len().max(1) as f64,
        dist: mean_dist(&generated)?,
        attribute_score: attribute_score(cfg.task, data, samples, lm, judge)?,
        sample_count: samples.len(),
        seed: cfg.seed,
        config_hash: config_hash.into(),
    };
    report.validate()?;
    Ok(report)
}

/// One ordering the comparison is expected to show.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub task: Task,
    pub config_hash: String,
    pub pretrain: PretrainSummary,
    pub discriminators: DiscSummary,
    pub rows: Vec<MetricsReport>,
    /// Mean per-token KL to the reference at the end of policy training.
    pub final_kl: BTreeMap<String, f64>,
    pub checks: Vec<OrderingCheck>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> &MetricsReport {
        self.rows
            .iter()
            .find(|r| r.model == v.name())
            .expect("every variant has a row")
    }

    fn compute_checks(&mut self) {
        let ppl = |v| self.row(v).oracle_ppl;
        let attr = |v| self.row(v).attribute_score;
        let kl = |k: &str| self.final_kl.get(k).copied().unwrap_or(f64::NAN);
        let mut checks = vec![OrderingCheck {
            name: "prompt-ppc attribute above plain-lm".into(),
            holds: attr(Variant::PromptPpc) > attr(Variant::PlainLm),
            detail: format!("{:.4} vs {:.4}", attr(Variant::PromptPpc), attr(Variant::PlainLm)),
        }];
        checks.push(OrderingCheck {
            name: "ppc-kv perplexity above prompt-ppc".into(),
            holds: ppl(Variant::PpcKv) > ppl(Variant::PromptPpc),
            detail: format!("{:.4} vs {:.4}", ppl(Variant::PpcKv), ppl(Variant::PromptPpc)),
        });
        checks.push(OrderingCheck {
            name: "ppc-fluency drifts further from the reference".into(),
            holds: kl("ppc-fluency") > kl("prompt-ppc"),
            detail: format!("{:.4} vs {:.4}", kl("ppc-fluency"), kl("prompt-ppc")),
        });
        self.checks = checks;
    }

    /// Results table: one row per variant, five metric columns.
    pub fn to_csv(&self) -> String {
        let attr = match self.task {
            Task::Topic => "Topic",
            Task::Sentiment => "Sentiment-acc",
        };
        let mut out = format!("Model,Perplexity,{attr},Dist1,Dist2,Dist3\n");
        for r in &self.rows {
            out.push_str(&csv_row(r));
        }
        out
    }
}

pub fn csv_row(r: &MetricsReport) -> String {
    let d = |n| r.dist.get(&n).copied().unwrap_or(f64::NAN);
    format!(
        "{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
        r.model,
        r.oracle_ppl,
        r.attribute_score,
        d(1),
        d(2),
        d(3)
    )
}

/// Runs every variant with shared seeds on a pretrained model.
/// `cfg` must be resolved; `config_hash` identifies the config as the user
/// wrote it.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    data: &Data,
    lm: &Model,
    pretrain: PretrainSummary,
    config_hash: &str,
) -> Result<AblationReport> {
    let hash = config_hash.to_string();
    let (disc, judge, disc_summary) = train_discs(cfg, data, lm)?;
    let steer_disc = (cfg.task == Task::Sentiment).then_some(&disc);
    log::info!("training policy (beta {})", cfg.rldaf.beta);
    let (policy, log_default) = train_policy(cfg, data, lm, steer_disc, cfg.rldaf.beta)?;
    log::info!("training policy without fluency reward");
    let (fluency, log_fluency) = train_policy(cfg, data, lm, steer_disc, 0.0)?;
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let p = match v.policy() {
            PolicyKind::Default => Some(&policy),
            PolicyKind::NoFluency => Some(&fluency),
            PolicyKind::None => None,
        };
        let generator = Generator::for_variant(v, lm, p, data.targets.len())?;
        let samples = generate_samples(cfg, data, v, &generator, steer_disc, lm)?;
        let row = metrics(cfg, data, v, &samples, lm, &judge, &hash)?;
        log::info!("{v}: ppl {:.3} attribute {:.3}", row.oracle_ppl, row.attribute_score);
        rows.push(row);
    }
    let mut report = AblationReport {
        task: cfg.task,
        config_hash: hash,
        pretrain,
        discriminators: disc_summary,
        rows,
        final_kl: [
            ("prompt-ppc".to_string(), final_kl(&log_default)),
            ("ppc-fluency".to_string(), final_kl(&log_fluency)),
        ]
        .into_iter()
        .collect(),
        checks: Vec::new(),
    };
    report.compute_checks();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("gpt".parse::<Variant>().is_err());
    }

    #[test]
    fn variant_deltas() {
        let base = SteerConfig::default();
        assert_eq!(Variant::PromptPpc.steer(&base), base);
        assert_eq!(Variant::PpcKv.steer(&base).mode, SteerMode::KvSteer);
        assert_eq!(Variant::PlmRl.steer(&base).m, 0);
        assert_eq!(Variant::PlainLm.steer(&base).active_iterations(), 0);
        assert_eq!(Variant::PpcPrefix.policy(), PolicyKind::None);
        assert_eq!(Variant::PpcFluency.policy(), PolicyKind::NoFluency);
    }
}
