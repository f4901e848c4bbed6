//! Subcommands. Each reads what it needs from the output directory and
//! writes its artifacts back there.

use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;

use ppc_core::attribute::AttributeTarget;
use ppc_core::checkpoint::{
    discriminator_container, discriminator_from_container, lm_container, lm_from_container, policy_container,
    policy_from_container, Container,
};
use ppc_core::corpus::BOS_ID;
use ppc_core::rldaf::write_log;
use ppc_core::steer::{generate, Objective};
use ppc_core::{Disc, Model, RlPolicy};

use crate::ablate::{csv_row, generate_samples, metrics, run_ablation, AblationReport, Generator, PolicyKind, Variant};
use crate::config::{ExperimentConfig, Task};
use crate::world::{pretrain_lm, train_discs, train_policy, Data};

/// A loaded experiment: user config, its resolved form and the corpora.
pub struct Session {
    pub config: ExperimentConfig,
    pub resolved: ExperimentConfig,
    pub data: Data,
}

impl Session {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let resolved = config.resolved();
        let data = Data::build(&resolved)?;
        fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
        Ok(Self { config, resolved, data })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.out.join(name)
    }

    fn hash(&self) -> String {
        self.config.hash()
    }

    fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<PathBuf> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn save(&self, name: &str, mut c: Container) -> Result<PathBuf> {
        c.header.metadata.insert("config_hash".into(), self.hash().into());
        let path = self.path(name);
        c.save(&path)?;
        Ok(path)
    }

    fn load(&self, name: &str) -> Result<Container> {
        let path = self.path(name);
        Container::load(&path).with_context(|| format!("loading {}", path.display()))
    }

    pub fn load_lm(&self) -> Result<Model> {
        Ok(lm_from_container(&self.load("lm.ppck")?)?)
    }

    pub fn load_disc(&self, name: &str) -> Result<Disc> {
        Ok(discriminator_from_container(&self.load(name)?)?)
    }

    /// Steering discriminator, needed only for class targets.
    fn steering_disc(&self) -> Result<Option<Disc>> {
        match self.config.task {
            Task::Topic => Ok(None),
            Task::Sentiment => self.load_disc("disc.ppck").map(Some),
        }
    }

    fn policy_file(kind: PolicyKind) -> Option<&'static str> {
        match kind {
            PolicyKind::Default => Some("policy.ppck"),
            PolicyKind::NoFluency => Some("policy-no-fluency.ppck"),
            PolicyKind::None => None,
        }
    }

    fn load_policy(&self, variant: Variant) -> Result<Option<RlPolicy>> {
        Self::policy_file(variant.policy())
            .map(|f| Ok(policy_from_container(&self.load(f)?)?))
            .transpose()
    }
}

#[derive(Serialize)]
struct Artifact<'a, S> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: S,
}

pub fn cmd_pretrain(s: &Session) -> Result<String> {
    let (lm, summary) = pretrain_lm(&s.resolved, &s.data)?;
    s.save("lm.ppck", lm_container(&lm))?;
    s.data.vocab.save(&s.path("vocab.json"))?;
    s.write_json(
        "pretrain.json",
        &Artifact {
            config_hash: &s.hash(),
            body: &summary,
        },
    )?;
    Ok(format!(
        "pretrained {} steps: held-out loss {:.4}, unigram entropy {:.4}",
        s.config.pretrain.steps, summary.heldout_loss, summary.unigram_entropy
    ))
}

pub fn cmd_train_disc(s: &Session) -> Result<String> {
    let lm = s.load_lm()?;
    let (disc, judge, summary) = train_discs(&s.resolved, &s.data, &lm)?;
    s.save(
        "disc.ppck",
        discriminator_container(&disc, s.config.lm, s.resolved.disc.seed),
    )?;
    s.save(
        "judge.ppck",
        discriminator_container(&judge, s.config.lm, s.resolved.stream("judge")),
    )?;
    s.write_json(
        "disc.json",
        &Artifact {
            config_hash: &s.hash(),
            body: &summary,
        },
    )?;
    Ok(format!(
        "discriminator held-out accuracy {:.4}, judge {:.4}",
        summary.steering.heldout_accuracy, summary.judge.heldout_accuracy
    ))
}

/// Trains the policy of `variant`; `ppc-fluency` switches the fluency
/// reward off.
pub fn cmd_rldaf(s: &Session, variant: Variant) -> Result<String> {
    let kind = variant.policy();
    let file = Session::policy_file(kind)
        .ok_or_else(|| ppc_core::Error::Config(format!("variant {variant} does not train a policy")))?;
    let lm = s.load_lm()?;
    let disc = s.steering_disc()?;
    let beta = if kind == PolicyKind::NoFluency {
        0.0
    } else {
        s.config.rldaf.beta
    };
    let (policy, log) = train_policy(&s.resolved, &s.data, &lm, disc.as_ref(), beta)?;
    let mut c = policy_container(&policy);
    c.header.metadata.insert("beta".into(), beta.into());
    s.save(file, c)?;
    let log_path = s.path(&file.replace(".ppck", ".jsonl"));
    write_log(&log, BufWriter::new(fs::File::create(&log_path)?))?;
    let last = log.last().map_or(0.0, |e| e.mean_r);
    Ok(format!("trained {} episodes, final mean reward {last:.4}", log.len()))
}

fn parse_target(s: &Session, name: &str) -> Result<usize> {
    s.data
        .targets
        .iter()
        .position(|t| match t {
            AttributeTarget::Topic(b) => b.name() == name,
            AttributeTarget::Class(c) => s.data.class_names(&s.config).get(*c).is_some_and(|n| n == name),
        })
        .ok_or_else(|| {
            let names: Vec<String> = match s.config.task {
                Task::Topic => s.config.corpus.spec.topic_names(),
                Task::Sentiment => s.data.class_names(&s.config),
            };
            ppc_core::Error::Domain(format!("unknown target {name:?}; expected one of {}", names.join(", "))).into()
        })
}

#[derive(Serialize)]
struct GenerationRecord {
    variant: Variant,
    target: String,
    prompt: String,
    text: String,
    tokens: Vec<u32>,
}

/// Steered continuation of `prompt`; writes the steering trace.
pub fn cmd_generate(s: &Session, variant: Variant, prompt: &str, target: &str) -> Result<String> {
    let mut tokens = s.data.vocab.tokenize(prompt)?;
    if tokens.first() != Some(&BOS_ID) {
        tokens.insert(0, BOS_ID);
    }
    let t = parse_target(s, target)?;
    let lm = s.load_lm()?;
    let disc = s.steering_disc()?;
    let policy = s.load_policy(variant)?;
    let steer = variant.steer(&s.resolved.steer);
    let decode = s.resolved.decode;
    let objective = Objective::new(&s.data.targets[t], disc.as_ref())?;
    let (generated, trace) = match Generator::for_variant(variant, &lm, policy.as_ref(), s.data.targets.len())? {
        Generator::Plain(lm) => (ppc_core::lm::generate_full(lm.view(), &tokens, &decode)?, None),
        Generator::Steered { lm, prefixes } => {
            let g = generate(&lm.view(), &objective, &tokens, &prefixes[t], &steer, &decode, None)?;
            (g.tokens, Some(g.trace))
        }
        Generator::Policy(p) => {
            let g = generate(&p.view(), &objective, &tokens, p.prefix(t)?, &steer, &decode, None)?;
            (g.tokens, Some(g.trace))
        }
    };
    let trace = trace.unwrap_or_default();
    trace.write_jsonl(BufWriter::new(fs::File::create(s.path("trace.jsonl"))?))?;
    let text = s.data.vocab.detokenize(&generated)?;
    s.write_json(
        "generation.json",
        &Artifact {
            config_hash: &s.hash(),
            body: GenerationRecord {
                variant,
                target: target.into(),
                prompt: prompt.into(),
                text: text.clone(),
                tokens: generated,
            },
        },
    )?;
    Ok(text)
}

/// Metrics of one variant from saved checkpoints.
pub fn cmd_evaluate(s: &Session, variant: Variant) -> Result<String> {
    let lm = s.load_lm()?;
    let disc = s.steering_disc()?;
    let judge = s.load_disc("judge.ppck")?;
    let policy = s.load_policy(variant)?;
    let generator = Generator::for_variant(variant, &lm, policy.as_ref(), s.data.targets.len())?;
    let samples = generate_samples(&s.resolved, &s.data, variant, &generator, disc.as_ref(), &lm)?;
    let report = metrics(&s.resolved, &s.data, variant, &samples, &lm, &judge, &s.hash())?;
    s.write_json(&format!("metrics-{variant}.json"), &report)?;
    let attr = match s.config.task {
        Task::Topic => "Topic",
        Task::Sentiment => "Sentiment-acc",
    };
    let csv = format!("Model,Perplexity,{attr},Dist1,Dist2,Dist3\n{}", csv_row(&report));
    fs::write(s.path(&format!("metrics-{variant}.csv")), &csv)?;
    Ok(csv)
}

/// Every variant end to end with shared seeds.
pub fn cmd_ablate(s: &Session) -> Result<AblationReport> {
    let (lm, summary) = pretrain_lm(&s.resolved, &s.data)?;
    let report = run_ablation(&s.resolved, &s.data, &lm, summary, &s.hash())?;
    fs::write(s.path("ablation.csv"), report.to_csv())?;
    s.write_json("ablation.json", &report)?;
    Ok(report)
}
