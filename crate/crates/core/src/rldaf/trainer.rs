use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribute::{bow_log_likelihood, AttributeTarget, Discriminator};
use crate::corpus::derive_seed;
use crate::error::{Error, Result};
use crate::lm::{DecodeConfig, ForwardInput, LanguageModel, LogitsMode, PrefixState, TokenId};
use crate::optim::{clip_global_norm, Adam};
use crate::scalar::Scalar;
use crate::steer::{steer_token, Objective, SteerConfig};
use crate::tape::{kl_from_logits, log_softmax, softmax, Tape, Var};

use super::policy::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Clipped importance-ratio surrogate.
    #[default]
    Ppo,
    /// Plain score-function gradient `log pi * advantage`.
    Reinforce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RLDAFConfig {
    /// Tokens per rollout segment.
    pub k: usize,
    /// Weight of the fluency penalty.
    pub beta: f64,
    pub clip_eps: f64,
    pub lr: f64,
    pub episodes: usize,
    pub lora_rank: usize,
    /// Rollouts per update.
    pub batch: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    /// Weight of the old value in the running reward baseline.
    pub baseline_decay: f64,
    pub max_grad_norm: f64,
    /// Episodes between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for RLDAFConfig {
    fn default() -> Self {
        Self {
            k: 3,
            beta: 0.1,
            clip_eps: 0.2,
            lr: 1e-3,
            episodes: 100,
            lora_rank: 4,
            batch: 8,
            seed: 0,
            algorithm: Algorithm::Ppo,
            baseline_decay: 0.9,
            max_grad_norm: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl RLDAFConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.k == 0 {
            return bad("rollout length k must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and nonnegative");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.lora_rank == 0 || self.batch == 0 {
            return bad("lora_rank and batch must be positive");
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay must lie in [0, 1)");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

/// One rollout segment and its rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub context: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    /// Index into the policy's prefix bank.
    pub target: usize,
    pub policy_logp: Vec<T>,
    pub ref_logp: Vec<T>,
    pub policy_logits: Vec<Vec<T>>,
    pub ref_logits: Vec<Vec<T>>,
    /// Steered prefix each token was sampled under.
    pub prefixes: Vec<PrefixState<T>>,
    /// Bank entry the steering started from.
    pub prefix_init: PrefixState<T>,
    pub r_d: T,
    pub r_f: T,
    pub r: T,
}

impl<T: Scalar> Trajectory<T> {
    /// Context followed by the sampled tokens.
    pub fn sequence(&self) -> Vec<TokenId> {
        let mut s = self.context.clone();
        s.extend(&self.tokens);
        s
    }

    /// `KL(policy || reference)` at each step.
    pub fn kl_per_step(&self) -> Result<Vec<T>> {
        self.policy_logits
            .iter()
            .zip(&self.ref_logits)
            .map(|(p, q)| Ok(kl_from_logits(p, q)?.max(T::zero())))
            .collect()
    }

    /// Sets `R_f` from the recorded logits and `R = R_d + R_f`.
    pub fn assign_rewards(&mut self, r_d: T, beta: T) -> Result<()> {
        self.r_d = r_d;
        self.r_f = fluency_reward(&self.policy_logits, &self.ref_logits, beta, self.tokens.len())?;
        self.r = total_reward(self.r_d, self.r_f);
        Ok(())
    }
}

/// Samples `k` tokens from the steered policy, recording policy and
/// reference logits at each step. The reference is the frozen base under
/// the untrained, unsteered prefix. Rewards are left at zero.
#[allow(clippy::too_many_arguments)]
pub fn rollout<T: Scalar, R: Rng + ?Sized>(
    policy: &Policy<T>,
    objective: &Objective<'_, T>,
    context: &[TokenId],
    target: usize,
    steer: &SteerConfig,
    decode: &DecodeConfig,
    k: usize,
    rng: &mut R,
) -> Result<Trajectory<T>> {
    let init = policy.prefix(target)?;
    let cfg = policy.base().config();
    let extra = usize::from(matches!(objective, Objective::Class { .. }));
    let needed = init.len() + context.len() + k.saturating_sub(1) + extra;
    if needed > cfg.context_len || context.is_empty() {
        return Err(Error::Capacity {
            needed,
            available: cfg.context_len,
        });
    }
    let view = policy.view();
    let mut seq = context.to_vec();
    let mut prefix = init.clone();
    let mut traj = Trajectory {
        context: context.to_vec(),
        tokens: Vec::with_capacity(k),
        target,
        policy_logp: Vec::with_capacity(k),
        ref_logp: Vec::with_capacity(k),
        policy_logits: Vec::with_capacity(k),
        ref_logits: Vec::with_capacity(k),
        prefixes: Vec::with_capacity(k),
        prefix_init: init.clone(),
        r_d: T::zero(),
        r_f: T::zero(),
        r: T::zero(),
    };
    for j in 0..k {
        let start = if steer.persist_prefix { &prefix } else { init };
        let out = steer_token(&view, objective, &seq, start, steer, decode, rng, j, None)?;
        let ref_logits = policy.reference_logits(&seq)?;
        let tok = out.token as usize;
        traj.policy_logp.push(log_softmax(&out.logits)[tok]);
        traj.ref_logp.push(log_softmax(&ref_logits)[tok]);
        traj.policy_logits.push(out.logits);
        traj.ref_logits.push(ref_logits);
        traj.tokens.push(out.token);
        traj.prefixes.push(out.prefix.clone());
        seq.push(out.token);
        prefix = out.prefix;
    }
    Ok(traj)
}

/// Attribute satisfaction of `sequence` under the frozen model, in
/// `[0, 1]`. Class targets: judged probability of the class. Topic targets:
/// bag mass of the next-token distribution averaged over the last `k`
/// positions.
pub fn control_reward<T: Scalar>(
    lm: &LanguageModel<T>,
    disc: Option<&Discriminator<T>>,
    sequence: &[TokenId],
    target: &AttributeTarget,
    k: usize,
) -> Result<T> {
    match target {
        AttributeTarget::Class(c) => {
            let disc = disc.ok_or_else(|| Error::Domain("class reward needs a discriminator".into()))?;
            let d = disc.classify_tokens(lm, sequence)?;
            d.get(*c).copied().ok_or(Error::Domain(format!(
                "target class {c} outside discriminator classes {}",
                d.len()
            )))
        }
        AttributeTarget::Topic(bag) => {
            if k == 0 || sequence.len() < k {
                return Err(Error::Domain(format!("need at least {k} tokens for the topic reward")));
            }
            let (logits, _) = lm.view().forward(sequence)?;
            let n = sequence.len();
            let mut avg = vec![T::zero(); logits.cols()];
            for i in n - k..n {
                for (a, p) in avg.iter_mut().zip(softmax(logits.row(i))) {
                    *a += p;
                }
            }
            let kk = T::lit(k as f64);
            avg.iter_mut().for_each(|a| *a /= kk);
            let score = bow_log_likelihood(&avg, bag)?;
            Ok(score.value.exp())
        }
    }
}

/// `-(beta / k) * sum_j KL(policy_j || ref_j)`.
pub fn fluency_reward<T: Scalar>(policy_logits: &[Vec<T>], ref_logits: &[Vec<T>], beta: T, k: usize) -> Result<T> {
    if policy_logits.len() != ref_logits.len()
        || policy_logits.len() != k
        || policy_logits.iter().zip(ref_logits).any(|(p, q)| p.len() != q.len())
    {
        return Err(Error::Shape(format!(
            "fluency reward needs {k} matching logit pairs, got {} and {}",
            policy_logits.len(),
            ref_logits.len()
        )));
    }
    if beta < T::zero() {
        return Err(Error::Domain("beta must be nonnegative".into()));
    }
    if beta == T::zero() {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for (p, q) in policy_logits.iter().zip(ref_logits) {
        total += kl_from_logits(p, q)?.max(T::zero());
    }
    Ok(-(beta / T::lit(k as f64)) * total)
}

pub fn total_reward<T: Scalar>(r_d: T, r_f: T) -> T {
    r_d + r_f
}

/// Exponential moving average of batch rewards, seeded with the first
/// batch mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningBaseline<T> {
    pub value: Option<T>,
    pub decay: T,
}

impl<T: Scalar> RunningBaseline<T> {
    pub fn new(decay: f64) -> Self {
        Self {
            value: None,
            decay: T::lit(decay),
        }
    }

    fn current(&self, batch_mean: T) -> T {
        self.value.unwrap_or(batch_mean)
    }

    fn observe(&mut self, batch_mean: T) {
        self.value = Some(match self.value {
            Some(v) => self.decay * v + (T::one() - self.decay) * batch_mean,
            None => batch_mean,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_r: f64,
    pub mean_r_d: f64,
    pub mean_r_f: f64,
    /// Mean per-token KL of the batch to the reference.
    pub mean_kl: f64,
    pub clip_fraction: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Baseline the advantages were taken against.
    pub baseline: f64,
}

fn mean<T: Scalar>(xs: impl Iterator<Item = T>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x.as_f64();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per step: log-probability of the sampled token and the log-softmax row.
type StepLogps = Vec<(Var, Var)>;

/// Per-step log-probability of the sampled tokens under the current policy,
/// plus the full log-softmax row, recorded on `tape`. The prefix of step `j` is rebuilt as
/// `bank[target] + (prefixes[j] - prefix_init)`, so it equals the steered
/// prefix while gradients still reach the bank entry.
fn recompute_logps<T: Scalar>(
    tape: &mut Tape<T>,
    policy: &Policy<T>,
    traj: &Trajectory<T>,
    bank_vars: Option<&[(Var, Var)]>,
) -> Result<(StepLogps, Vec<Var>)> {
    let mut bound = policy.base().bind(tape);
    let adapter = policy.model.adapter.bind(tape, true);
    // Same order as `LoraAdapter::tensors`.
    let adapter_vars = adapter
        .factors
        .iter()
        .flat_map(|layer| layer.iter().flatten().flat_map(|&(a, b)| [a, b]))
        .collect();
    bound.adapter = Some(adapter);
    let mut out = Vec::with_capacity(traj.tokens.len());
    let mut seq = traj.context.clone();
    for (j, &tok) in traj.tokens.iter().enumerate() {
        let past: Option<Vec<(Var, Var)>> = match bank_vars {
            Some(vars) => {
                let steered = &traj.prefixes[j];
                let mut layers = Vec::with_capacity(vars.len());
                for (l, &(kv, vv)) in vars.iter().enumerate() {
                    let mut pair = [kv, vv];
                    for (slot, var) in pair.iter_mut().enumerate() {
                        let delta = steered
                            .slot(l, slot)
                            .data()
                            .iter()
                            .zip(traj.prefix_init.slot(l, slot).data())
                            .map(|(a, b)| *a - *b)
                            .collect();
                        let shape = steered.slot(l, slot).shape().to_vec();
                        let d = tape.constant(crate::tensor::Tensor::new(&shape, delta)?);
                        *var = tape.add(*var, d)?;
                    }
                    layers.push((pair[0], pair[1]));
                }
                Some(layers)
            }
            None => None,
        };
        let fwd = bound.forward(
            tape,
            &ForwardInput {
                tokens: &seq,
                past: past.as_deref(),
                logits: LogitsMode::Last,
                ..Default::default()
            },
        )?;
        let lsm = tape.log_softmax_rows(fwd.logits.expect("logits"))?;
        out.push((tape.select_cols(lsm, &[tok as usize])?, lsm));
        seq.push(tok);
    }
    Ok((out, adapter_vars))
}

/// One optimizer step on the adapter and prefix bank from a batch of
/// scored trajectories. Aborts without touching the policy if any
/// trajectory yields a non-finite loss.
pub fn ppo_update<T: Scalar>(
    policy: &mut Policy<T>,
    opt: &mut Adam<T>,
    batch: &[Trajectory<T>],
    cfg: &RLDAFConfig,
    baseline: &mut RunningBaseline<T>,
) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Err(Error::Domain("empty trajectory batch".into()));
    }
    let batch_mean = T::lit(mean(batch.iter().map(|t| t.r)));
    let b = baseline.current(batch_mean);
    let n_tokens: usize = batch.iter().map(|t| t.tokens.len()).sum();
    let inv_tokens = T::one() / T::lit(n_tokens.max(1) as f64);
    let eps = T::lit(cfg.clip_eps);
    let (lo, hi) = (T::one() - eps, T::one() + eps);
    let beta = T::lit(cfg.beta);

    let n_adapter = policy.model.adapter.tensors().count();
    let per_prefix = policy.prefix_bank.first().map_or(0, |p| p.tensors().count());
    let mut grads: Vec<Vec<T>> = policy.trainable().iter().map(|t| vec![T::zero(); t.numel()]).collect();
    let mut clipped = 0usize;

    // Adapter gradients, prefix gradients and clipped-token count per trajectory.
    #[allow(clippy::type_complexity)]
    let per_traj: Vec<(Vec<Vec<T>>, Vec<Vec<T>>, usize)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, traj)| -> Result<_> {
            let mut tape = Tape::new();
            let bank = policy.prefix(traj.target)?.bind(&mut tape, true);
            let (logps, adapter_vars) = recompute_logps(&mut tape, policy, traj, bank.as_deref())?;
            let adv = traj.r - b;
            let mut terms = Vec::with_capacity(logps.len());
            let mut clip_count = 0;
            for (j, &(lp, lsm)) in logps.iter().enumerate() {
                let mut term = match cfg.algorithm {
                    Algorithm::Ppo => {
                        let diff = tape.add_scalar(lp, -traj.policy_logp[j]);
                        let ratio = tape.exp(diff);
                        let r = tape.item(ratio);
                        if r < lo || r > hi {
                            clip_count += 1;
                        }
                        let s1 = tape.scale(ratio, adv);
                        let rc = tape.clamp(ratio, lo, hi);
                        let s2 = tape.scale(rc, adv);
                        let surr = tape.minimum(s1, s2)?;
                        tape.neg(surr)
                    }
                    Algorithm::Reinforce => tape.scale(lp, -adv),
                };
                // R_f depends on the policy directly, so its pathwise
                // gradient joins the score-function term.
                if beta > T::zero() {
                    let kl = policy_kl(&mut tape, lsm, &traj.ref_logits[j])?;
                    let weighted = tape.scale(kl, beta);
                    term = tape.add(term, weighted)?;
                }
                terms.push(term);
            }
            let summed = if terms.len() == 1 {
                terms[0]
            } else {
                let stacked = tape.concat(&terms, crate::tape::Axis::Rows)?;
                tape.sum(stacked)
            };
            let loss = tape.scale(summed, inv_tokens);
            if !tape.item(loss).is_finite() {
                return Err(Error::NonFiniteLoss { trajectory: i });
            }
            tape.backward(loss)?;
            let adapter_grads = adapter_vars.iter().map(|v| grad_or_zero(&tape, *v)).collect();
            let bank_grads = bank
                .iter()
                .flatten()
                .flat_map(|(k, v)| [*k, *v])
                .map(|v| grad_or_zero(&tape, v))
                .collect();
            Ok((adapter_grads, bank_grads, clip_count))
        })
        .collect::<Result<Vec<_>>>()?;

    for ((adapter, bank, clip_count), traj) in per_traj.into_iter().zip(batch) {
        for (acc, g) in grads.iter_mut().zip(adapter) {
            acc.iter_mut().zip(g).for_each(|(a, x)| *a += x);
        }
        let offset = n_adapter + traj.target * per_prefix;
        for (acc, g) in grads[offset..offset + bank.len()].iter_mut().zip(bank) {
            acc.iter_mut().zip(g).for_each(|(a, x)| *a += x);
        }
        clipped += clip_count;
    }
    let grad_norm = clip_global_norm(&mut grads, T::lit(cfg.max_grad_norm));
    if !grad_norm.is_finite() {
        return Err(Error::Numeric("non-finite policy gradient".into()));
    }
    let refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
    opt.step(&mut policy.trainable_mut(), &refs)?;
    baseline.observe(batch_mean);

    let kls: Vec<T> = batch
        .iter()
        .map(Trajectory::kl_per_step)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(UpdateStats {
        mean_r: batch_mean.as_f64(),
        mean_r_d: mean(batch.iter().map(|t| t.r_d)),
        mean_r_f: mean(batch.iter().map(|t| t.r_f)),
        mean_kl: mean(kls.into_iter()),
        clip_fraction: clipped as f64 / n_tokens.max(1) as f64,
        grad_norm: grad_norm.as_f64(),
        baseline: b.as_f64(),
    })
}

/// `KL(softmax(lsm) || softmax(reference))` as a `[1, 1]` node.
fn policy_kl<T: Scalar>(tape: &mut Tape<T>, lsm: Var, reference: &[T]) -> Result<Var> {
    let lq = log_softmax(reference);
    let lq = tape.constant(crate::tensor::Tensor::new(&[1, lq.len()], lq)?);
    let p = tape.exp(lsm);
    let diff = tape.sub(lsm, lq)?;
    let prod = tape.mul(p, diff)?;
    let total = tape.sum(prod);
    tape.reshape(total, &[1, 1])
}

fn grad_or_zero<T: Scalar>(tape: &Tape<T>, v: Var) -> Vec<T> {
    tape.grad(v)
        .map_or_else(|| vec![T::zero(); tape.value(v).numel()], <[T]>::to_vec)
}

/// Per-episode training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    #[serde(rename = "mean_R_d")]
    pub mean_r_d: f64,
    #[serde(rename = "mean_R_f")]
    pub mean_r_f: f64,
    #[serde(rename = "mean_R")]
    pub mean_r: f64,
    #[serde(rename = "mean_KL")]
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub seed: u64,
}

pub fn write_log<W: Write>(log: &[EpisodeLog], mut w: W) -> Result<()> {
    for e in log {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w)?;
    }
    Ok(())
}

pub type CheckpointHook<'h, T> = &'h mut (dyn FnMut(usize, &Policy<T>) -> Result<()> + 'h);

/// Episodes of rollout, scoring and update. Each episode draws `batch`
/// (prompt, target) pairs from per-rollout seeded streams.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    policy: &mut Policy<T>,
    disc: Option<&Discriminator<T>>,
    prompts: &[Vec<TokenId>],
    targets: &[AttributeTarget],
    cfg: &RLDAFConfig,
    steer: &SteerConfig,
    decode: &DecodeConfig,
    mut on_checkpoint: Option<CheckpointHook<'_, T>>,
) -> Result<Vec<EpisodeLog>> {
    cfg.validate()?;
    steer.validate()?;
    if prompts.is_empty() || targets.is_empty() {
        return Err(Error::Data("training needs prompts and targets".into()));
    }
    if targets.len() != policy.prefix_bank.len() {
        return Err(Error::Config(format!(
            "{} targets but {} prefix bank entries",
            targets.len(),
            policy.prefix_bank.len()
        )));
    }
    let objectives = targets
        .iter()
        .map(|t| Objective::new(t, disc))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(cfg.lr);
    let mut baseline = RunningBaseline::new(cfg.baseline_decay);
    let beta = T::lit(cfg.beta);
    let mut log = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let wrap = |e| Error::Episode {
            episode,
            source: Box::new(e),
        };
        let snapshot = &*policy;
        let batch = (0..cfg.batch)
            .into_par_iter()
            .map(|b| {
                let stream = (episode * cfg.batch + b) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "rollout", stream));
                let prompt = &prompts[rng.random_range(0..prompts.len())];
                let target = rng.random_range(0..targets.len());
                let mut traj = rollout(
                    snapshot,
                    &objectives[target],
                    prompt,
                    target,
                    steer,
                    decode,
                    cfg.k,
                    &mut rng,
                )?;
                let r_d = control_reward(snapshot.base(), disc, &traj.sequence(), &targets[target], cfg.k)?;
                traj.assign_rewards(r_d, beta)?;
                Ok(traj)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;
        let stats = ppo_update(policy, &mut opt, &batch, cfg, &mut baseline).map_err(wrap)?;
        log::debug!(
            "episode {episode}: R_d {:.3} R_f {:.4} KL {:.4}",
            stats.mean_r_d,
            stats.mean_r_f,
            stats.mean_kl
        );
        log.push(EpisodeLog {
            episode,
            mean_r_d: stats.mean_r_d,
            mean_r_f: stats.mean_r_f,
            mean_r: stats.mean_r,
            mean_kl: stats.mean_kl,
            clip_fraction: stats.clip_fraction,
            seed: cfg.seed,
        });
        if let Some(hook) = on_checkpoint.as_mut() {
            if cfg.checkpoint_every > 0 && (episode + 1) % cfg.checkpoint_every == 0 {
                hook(episode + 1, policy).map_err(wrap)?;
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute::WordBag;
    use crate::lm::{LMConfig, Strategy};
    use crate::steer::SteerMode;

    fn tiny(vocab: usize) -> LanguageModel<f64> {
        let cfg = LMConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            context_len: 12,
            prefix_len: 2,
            d_ff: 16,
        };
        LanguageModel::init(cfg, 3).unwrap()
    }

    fn policy(lm: &LanguageModel<f64>) -> Policy<f64> {
        let init = PrefixState::random(lm.config(), 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        Policy::new(lm.clone(), 2, 1, &init, 1).unwrap()
    }

    fn no_steer() -> SteerConfig {
        SteerConfig {
            mode: SteerMode::NoSteer,
            ..Default::default()
        }
    }

    fn sample_all() -> DecodeConfig {
        DecodeConfig {
            strategy: Strategy::TopK,
            k: 1000,
            ..Default::default()
        }
    }

    fn prob_of(policy: &Policy<f64>, context: &[TokenId], tok: usize) -> f64 {
        let logits = policy
            .view()
            .with_prefix(&policy.prefix_bank[0])
            .unwrap()
            .next_logits(context)
            .unwrap();
        softmax(&logits)[tok]
    }

    /// Context of one token, one sampled token, reward 1 for token 0.
    fn bandit(seed: u64) -> f64 {
        let lm = tiny(3);
        let mut policy = policy(&lm);
        let bag = WordBag::new("zero", vec![0], 3).unwrap();
        let target = AttributeTarget::Topic(bag);
        let objective = Objective::new(&target, None).unwrap();
        let cfg = RLDAFConfig {
            k: 1,
            lr: 0.05,
            seed,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg.lr);
        let mut baseline = RunningBaseline::new(cfg.baseline_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let batch: Vec<_> = (0..cfg.batch)
                .map(|_| {
                    let mut t = rollout(&policy, &objective, &[1], 0, &no_steer(), &sample_all(), 1, &mut rng).unwrap();
                    let r = if t.tokens[0] == 0 { 1.0 } else { 0.0 };
                    t.assign_rewards(r, cfg.beta).unwrap();
                    t
                })
                .collect();
            ppo_update(&mut policy, &mut opt, &batch, &cfg, &mut baseline).unwrap();
        }
        prob_of(&policy, &[1], 0)
    }

    #[test]
    fn bandit_converges() {
        for seed in 0..3 {
            let p = bandit(seed);
            assert!(p > 0.9, "seed {seed}: p(rewarded) = {p}");
        }
    }

    #[test]
    fn zero_advantage_means_zero_gradient() {
        let lm = tiny(5);
        let mut policy = policy(&lm);
        let bag = WordBag::new("b", vec![2], 5).unwrap();
        let target = AttributeTarget::Topic(bag);
        let objective = Objective::new(&target, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch: Vec<_> = (0..4)
            .map(|_| {
                let mut t = rollout(&policy, &objective, &[1, 3], 0, &no_steer(), &sample_all(), 3, &mut rng).unwrap();
                t.assign_rewards(0.5, 0.0).unwrap();
                t
            })
            .collect();
        let cfg = RLDAFConfig {
            beta: 0.0,
            ..Default::default()
        };
        let before = policy.clone();
        let mut baseline = RunningBaseline::new(0.9);
        let stats = ppo_update(&mut policy, &mut Adam::new(1e-2), &batch, &cfg, &mut baseline).unwrap();
        assert_eq!(stats.grad_norm, 0.0);
        assert_eq!(stats.clip_fraction, 0.0);
        assert_eq!(policy, before);
    }

    #[test]
    fn base_stays_frozen() {
        let lm = tiny(5);
        let mut policy = policy(&lm);
        let bag = WordBag::new("b", vec![2], 5).unwrap();
        let target = AttributeTarget::Topic(bag);
        let objective = Objective::new(&target, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<_> = (0..4)
            .map(|i| {
                let mut t = rollout(
                    &policy,
                    &objective,
                    &[1],
                    0,
                    &SteerConfig::default(),
                    &sample_all(),
                    3,
                    &mut rng,
                )
                .unwrap();
                t.assign_rewards(i as f64 * 0.25, 0.1).unwrap();
                t
            })
            .collect();
        let mut baseline = RunningBaseline::new(0.9);
        baseline.observe(0.0);
        let stats = ppo_update(
            &mut policy,
            &mut Adam::new(1e-2),
            &batch,
            &RLDAFConfig::default(),
            &mut baseline,
        )
        .unwrap();
        assert!(stats.grad_norm > 0.0);
        assert_eq!(policy.base(), &lm);
        assert_ne!(policy.model.adapter, lora_fresh(&lm));
    }

    fn lora_fresh(lm: &LanguageModel<f64>) -> super::super::lora::LoraAdapter<f64> {
        super::super::lora::lora_wrap(lm.clone(), 2, 1).unwrap().adapter
    }

    #[test]
    fn clipped_ratio_stops_gradient() {
        // A recorded log-prob far below the current one puts the ratio above
        // 1 + eps; with a positive advantage the clipped branch is active.
        let lm = tiny(5);
        let mut policy = policy(&lm);
        let bag = WordBag::new("b", vec![2], 5).unwrap();
        let target = AttributeTarget::Topic(bag);
        let objective = Objective::new(&target, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = rollout(&policy, &objective, &[1], 0, &no_steer(), &sample_all(), 1, &mut rng).unwrap();
        t.assign_rewards(1.0, 0.0).unwrap();
        t.policy_logp[0] -= 1.0;
        let cfg = RLDAFConfig {
            beta: 0.0,
            ..Default::default()
        };
        let mut baseline = RunningBaseline::new(0.9);
        baseline.observe(0.0);
        let stats = ppo_update(&mut policy, &mut Adam::new(1e-2), &[t.clone()], &cfg, &mut baseline).unwrap();
        assert_eq!(stats.clip_fraction, 1.0);
        assert_eq!(stats.grad_norm, 0.0);

        // Negative advantage keeps the unclipped branch and its gradient.
        t.assign_rewards(-1.0, 0.0).unwrap();
        let mut baseline = RunningBaseline::new(0.9);
        baseline.observe(0.0);
        let stats = ppo_update(&mut policy, &mut Adam::new(1e-2), &[t], &cfg, &mut baseline).unwrap();
        assert_eq!(stats.clip_fraction, 1.0);
        assert!(stats.grad_norm > 0.0);
    }

    #[test]
    fn fluency_examples() {
        let p: Vec<Vec<f64>> = vec![vec![0.1, 0.5, -0.3], vec![1.0, 0.0, 0.2]];
        assert_eq!(fluency_reward(&p, &p, 0.1, 2).unwrap(), 0.0);
        let q = vec![vec![0.0, 0.0, 0.0], vec![-1.0, 0.5, 0.0]];
        assert_eq!(fluency_reward(&p, &q, 0.0, 2).unwrap(), 0.0);
        let expected = -0.05 * (kl_from_logits(&p[0], &q[0]).unwrap() + kl_from_logits(&p[1], &q[1]).unwrap());
        let got = fluency_reward(&p, &q, 0.1, 2).unwrap();
        assert!((got - expected).abs() < 1e-12 && got < 0.0);
        assert!(matches!(fluency_reward(&p, &q[..1], 0.1, 2), Err(Error::Shape(_))));
        assert_eq!(total_reward(0.8, -0.1), 0.8 + -0.1);
    }

    #[test]
    fn rollout_shape_and_determinism() {
        let lm = tiny(6);
        let policy = policy(&lm);
        let bag = WordBag::new("b", vec![4, 5], 6).unwrap();
        let target = AttributeTarget::Topic(bag);
        let objective = Objective::new(&target, None).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rollout(
                &policy,
                &objective,
                &[1, 2],
                0,
                &SteerConfig::default(),
                &sample_all(),
                3,
                &mut rng,
            )
            .unwrap()
        };
        let a = run(9);
        assert_eq!(a.tokens.len(), 3);
        assert_eq!(a.policy_logits.len(), 3);
        assert_eq!(a.ref_logits.len(), 3);
        assert_eq!(a, run(9));

        // Fresh adapter and no steering: policy and reference agree.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plain = rollout(&policy, &objective, &[1, 2], 0, &no_steer(), &sample_all(), 3, &mut rng).unwrap();
        assert_eq!(plain.policy_logits, plain.ref_logits);
        assert!(plain.kl_per_step().unwrap().iter().all(|&k| k == 0.0));
    }

    #[test]
    fn rollout_capacity() {
        let lm = tiny(6);
        let policy = policy(&lm);
        let bag = WordBag::new("b", vec![4], 6).unwrap();
        let target = AttributeTarget::Topic(bag);
        let objective = Objective::new(&target, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ctx = vec![1; 9];
        let err = rollout(&policy, &objective, &ctx, 0, &no_steer(), &sample_all(), 3, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn control_reward_matches_recomputation() {
        let lm = tiny(6);
        let disc = Discriminator::new(
            crate::tensor::Tensor::new(&[8, 2], (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
            crate::tensor::Tensor::new(&[1, 2], vec![0.1, -0.2]).unwrap(),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let seq = [1, 3, 5, 2, 4];
        let r = control_reward(&lm, Some(&disc), &seq, &AttributeTarget::Class(1), 3).unwrap();
        assert_eq!(r, disc.classify_tokens(&lm, &seq).unwrap()[1]);
        assert!(control_reward(&lm, None, &seq, &AttributeTarget::Class(1), 3).is_err());
        assert!(control_reward(&lm, Some(&disc), &seq, &AttributeTarget::Class(4), 3).is_err());

        let bag = WordBag::new("b", (0..6).collect(), 6).unwrap();
        let full = control_reward(&lm, None, &seq, &AttributeTarget::Topic(bag), 3).unwrap();
        assert!((full - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_episodes_is_identity() {
        let lm = tiny(6);
        let mut p = policy(&lm);
        let before = p.clone();
        let bag = WordBag::new("b", vec![4], 6).unwrap();
        let cfg = RLDAFConfig {
            episodes: 0,
            ..Default::default()
        };
        let log = train(
            &mut p,
            None,
            &[vec![1]],
            &[AttributeTarget::Topic(bag)],
            &cfg,
            &SteerConfig::default(),
            &sample_all(),
            None,
        )
        .unwrap();
        assert!(log.is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn training_is_deterministic() {
        let lm = tiny(6);
        let bag = WordBag::new("b", vec![4, 5], 6).unwrap();
        let targets = [AttributeTarget::Topic(bag)];
        let cfg = RLDAFConfig {
            episodes: 3,
            batch: 4,
            lr: 1e-2,
            ..Default::default()
        };
        let run = || {
            let mut p = policy(&lm);
            let log = train(
                &mut p,
                None,
                &[vec![1], vec![1, 3]],
                &targets,
                &cfg,
                &SteerConfig::default(),
                &sample_all(),
                None,
            )
            .unwrap();
            (p, log)
        };
        let (pa, la) = run();
        let (pb, lb) = run();
        assert_eq!(pa, pb);
        assert_eq!(la, lb);
        assert_ne!(pa.prefix_bank[0], policy(&lm).prefix_bank[0]);
    }
}
