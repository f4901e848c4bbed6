//! Decode-time steering: before each token, a few gradient steps move the
//! prefix activations (or, in the ablation mode, every cached key and
//! value) towards the attribute target.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribute::{bow_log_likelihood_var, AttributeTarget, Discriminator, WordBag};
use crate::error::{Error, Result};
use crate::lm::{
    sample_next, BoundModel, DecodeConfig, ForwardInput, ForwardOutput, HiddenCache, LogitsMode, ModelView,
    PrefixState, TokenId,
};
use crate::optim::clip_global_norm;
use crate::scalar::Scalar;
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteerMode {
    #[default]
    PrefixSteer,
    KvSteer,
    NoSteer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerConfig {
    /// Update iterations per generated token.
    pub m: usize,
    /// Step size of each update.
    pub alpha: f64,
    pub mode: SteerMode,
    /// Carry the updated prefix to the next token instead of resetting it.
    pub persist_prefix: bool,
    /// Global gradient-norm bound applied before every update.
    pub clip_norm: f64,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            m: 5,
            alpha: 1.0,
            mode: SteerMode::PrefixSteer,
            persist_prefix: true,
            clip_norm: 1.0,
        }
    }
}

impl SteerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.active_iterations() > 0 && !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive when m > 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Iterations actually run per token.
    pub fn active_iterations(&self) -> usize {
        match self.mode {
            SteerMode::NoSteer => 0,
            _ => self.m,
        }
    }

    pub fn disabled() -> Self {
        Self {
            m: 0,
            mode: SteerMode::NoSteer,
            ..Self::default()
        }
    }
}

/// One steering iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteerRecord {
    pub token_index: usize,
    pub iteration: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad_norm: f64,
    pub delta_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SteerTrace {
    pub records: Vec<SteerRecord>,
    /// Model forward passes run, steering iterations plus emissions.
    pub forwards: usize,
}

impl SteerTrace {
    /// One JSON object per iteration.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }

    fn extend(&mut self, other: SteerTrace) {
        self.records.extend(other.records);
        self.forwards += other.forwards;
    }
}

/// The loss a steering step descends.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a, T> {
    /// `-log` bag mass of the next-token distribution.
    Bag(&'a WordBag),
    /// Cross-entropy of the classifier on the context extended by the
    /// expected next-token embedding.
    Class { disc: &'a Discriminator<T>, class: usize },
}

impl<'a, T: Scalar> Objective<'a, T> {
    pub fn new(target: &'a AttributeTarget, disc: Option<&'a Discriminator<T>>) -> Result<Self> {
        match target {
            AttributeTarget::Topic(bag) => Ok(Objective::Bag(bag)),
            AttributeTarget::Class(c) => {
                let disc = disc.ok_or_else(|| Error::Domain("class target needs a discriminator".into()))?;
                if *c >= disc.classes() {
                    return Err(Error::Index {
                        what: "target class",
                        index: *c,
                        bound: disc.classes(),
                    });
                }
                Ok(Objective::Class { disc, class: *c })
            }
        }
    }

    /// Extra content slots the loss needs beyond the context.
    fn extra_positions(&self) -> usize {
        match self {
            Objective::Bag(_) => 0,
            Objective::Class { .. } => 1,
        }
    }
}

/// Records the objective on `tape` given the forward output over the
/// context. `history` holds final hidden states of earlier content
/// positions not part of `out`.
pub fn objective_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundModel<T>,
    objective: &Objective<'_, T>,
    out: &ForwardOutput,
    history: Option<Var>,
    next_position: usize,
) -> Result<Var> {
    let logits = out.logits.expect("steering forward keeps last logits");
    match objective {
        Objective::Bag(bag) => {
            let ll = bow_log_likelihood_var(tape, logits, bag)?;
            Ok(tape.neg(ll))
        }
        Objective::Class { disc, class } => {
            let probs = tape.softmax_rows(logits)?;
            let soft = bound.forward(
                tape,
                &ForwardInput {
                    tokens: &[],
                    past: Some(&out.kv),
                    pos_offset: next_position,
                    soft_next: Some(probs),
                    logits: LogitsMode::None,
                },
            )?;
            let mut parts = Vec::with_capacity(3);
            parts.extend(history);
            parts.push(out.hidden);
            parts.push(soft.hidden);
            let hidden = tape.concat(&parts, Axis::Rows)?;
            let rows = tape.value(hidden).rows();
            let head = disc.logits_var(tape, hidden, rows)?;
            tape.cross_entropy(head, *class)
        }
    }
}

/// Result of one forward over the context under a given prefix.
struct Evaluation<T> {
    loss: Option<T>,
    logits: Vec<T>,
    grads: Vec<Vec<T>>,
    cache: Option<HiddenCache<T>>,
}

fn evaluate_prefix<T: Scalar>(
    view: &ModelView<'_, T>,
    prefix: &PrefixState<T>,
    context: &[TokenId],
    objective: &Objective<'_, T>,
    with_loss: bool,
    with_grad: bool,
    with_cache: bool,
) -> Result<Evaluation<T>> {
    let mut tape = Tape::new();
    let bound = view.bind(&mut tape);
    let prefix_vars = prefix.bind(&mut tape, with_grad);
    let out = bound.forward(
        &mut tape,
        &ForwardInput {
            tokens: context,
            past: prefix_vars.as_deref(),
            logits: LogitsMode::Last,
            ..Default::default()
        },
    )?;
    let logits = tape.value(out.logits.expect("logits")).data().to_vec();
    let cache = with_cache.then(|| HiddenCache::from_output(&tape, &out));
    let mut loss = None;
    let mut grads = Vec::new();
    if with_loss {
        let l = objective_loss(&mut tape, &bound, objective, &out, None, context.len())?;
        let value = tape.item(l);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("steering loss is {value}")));
        }
        loss = Some(value);
        if with_grad {
            tape.backward(l)?;
            for (k, v) in prefix_vars.iter().flatten() {
                for var in [k, v] {
                    let g = tape
                        .grad(*var)
                        .map_or_else(|| vec![T::zero(); tape.value(*var).numel()], <[T]>::to_vec);
                    grads.push(g);
                }
            }
        }
    }
    Ok(Evaluation {
        loss,
        logits,
        grads,
        cache,
    })
}

/// One descent step `h <- h - alpha * grad` on every prefix slot. `grads`
/// follows [`PrefixState::tensors`] order. Returns the new state and the
/// norm of the applied change.
pub fn update_prefix<T: Scalar>(prefix: &PrefixState<T>, grads: &[Vec<T>], alpha: T) -> Result<(PrefixState<T>, T)> {
    let sizes: Vec<usize> = prefix.tensors().map(Tensor::numel).collect();
    if grads.len() != sizes.len() || grads.iter().zip(&sizes).any(|(g, &n)| g.len() != n) {
        return Err(Error::Shape(format!(
            "prefix gradient has {} buffers, prefix has {}",
            grads.len(),
            sizes.len()
        )));
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite prefix gradient, step skipped".into()));
    }
    let mut next = prefix.clone();
    let mut sq = T::zero();
    for (t, g) in next.tensors_mut().zip(grads) {
        for (x, &gi) in t.data_mut().iter_mut().zip(g) {
            let step = alpha * gi;
            *x -= step;
            sq += step * step;
        }
    }
    Ok((next, sq.sqrt()))
}

/// What an observer sees around each prefix update.
pub struct UpdateEvent<'e, T> {
    pub token_index: usize,
    pub iteration: usize,
    pub context: &'e [TokenId],
    /// Activations of the forward pass that produced the gradient.
    pub cache: &'e HiddenCache<T>,
    pub prefix_before: &'e PrefixState<T>,
    pub prefix_after: &'e PrefixState<T>,
}

pub type Observer<'o, 'f, T> = &'o mut (dyn FnMut(&UpdateEvent<'_, T>) + 'f);

/// Outcome of steering and emitting one token.
#[derive(Debug, Clone)]
pub struct SteeredToken<T> {
    pub token: TokenId,
    pub prefix: PrefixState<T>,
    pub records: Vec<SteerRecord>,
    /// Logits the token was sampled from.
    pub logits: Vec<T>,
    pub forwards: usize,
}

/// Runs `m` prefix updates against the objective, then one forward with
/// the final prefix and samples the next token. The model and the content
/// tokens are only read.
#[allow(clippy::too_many_arguments)]
pub fn steer_token<T: Scalar, R: Rng + ?Sized>(
    view: &ModelView<'_, T>,
    objective: &Objective<'_, T>,
    context: &[TokenId],
    prefix: &PrefixState<T>,
    cfg: &SteerConfig,
    decode: &DecodeConfig,
    rng: &mut R,
    token_index: usize,
    mut observer: Option<Observer<'_, '_, T>>,
) -> Result<SteeredToken<T>> {
    if context.is_empty() {
        return Err(Error::Domain("steering needs a nonempty context".into()));
    }
    cfg.validate()?;
    let m = cfg.active_iterations();
    let alpha = T::lit(cfg.alpha);
    let mut p = prefix.clone();
    let mut records: Vec<SteerRecord> = Vec::with_capacity(m);
    let mut forwards = 0;
    for iteration in 0..m {
        let annotate = |e| Error::Steer {
            iteration,
            source: Box::new(e),
        };
        let ev = evaluate_prefix(view, &p, context, objective, true, true, observer.is_some()).map_err(annotate)?;
        forwards += 1;
        let loss = ev.loss.expect("loss requested").as_f64();
        if let Some(prev) = records.last_mut() {
            prev.loss_after = loss;
        }
        let mut grads = ev.grads;
        let grad_norm = clip_global_norm(&mut grads, T::lit(cfg.clip_norm));
        let (next, delta) = update_prefix(&p, &grads, alpha).map_err(annotate)?;
        if let (Some(obs), Some(cache)) = (observer.as_mut(), ev.cache.as_ref()) {
            obs(&UpdateEvent {
                token_index,
                iteration,
                context,
                cache,
                prefix_before: &p,
                prefix_after: &next,
            });
        }
        records.push(SteerRecord {
            token_index,
            iteration,
            loss_before: loss,
            loss_after: f64::NAN,
            grad_norm: grad_norm.as_f64(),
            delta_norm: delta.as_f64(),
        });
        p = next;
    }
    let ev = evaluate_prefix(view, &p, context, objective, m > 0, false, false).map_err(|e| Error::Steer {
        iteration: m,
        source: Box::new(e),
    })?;
    forwards += 1;
    if let (Some(last), Some(loss)) = (records.last_mut(), ev.loss) {
        last.loss_after = loss.as_f64();
    }
    let token = sample_next(&ev.logits, decode, rng)?;
    Ok(SteeredToken {
        token,
        prefix: p,
        records,
        logits: ev.logits,
        forwards,
    })
}

/// A steered continuation with the distributions its tokens were drawn
/// from.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation<T> {
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub trace: SteerTrace,
    /// Next-token logits at every generated position.
    pub step_logits: Vec<Vec<T>>,
}

impl<T> Generation<T> {
    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }
}

fn check_budget<T: Scalar>(
    view: &ModelView<'_, T>,
    prompt_len: usize,
    prefix_len: usize,
    decode: &DecodeConfig,
    objective: &Objective<'_, T>,
) -> Result<()> {
    if prompt_len == 0 {
        return Err(Error::Domain("prompt must not be empty".into()));
    }
    let cfg = view.model.config();
    let steps = decode.max_new_tokens;
    let content = prompt_len + steps.saturating_sub(1) + objective.extra_positions();
    let needed = prefix_len + content.max(prompt_len);
    if needed > cfg.context_len {
        return Err(Error::Capacity {
            needed,
            available: cfg.context_len,
        });
    }
    Ok(())
}

/// Steered generation from `prompt`. Dispatches on the steering mode.
#[allow(clippy::too_many_arguments)]
pub fn generate<T: Scalar>(
    view: &ModelView<'_, T>,
    objective: &Objective<'_, T>,
    prompt: &[TokenId],
    prefix_init: &PrefixState<T>,
    cfg: &SteerConfig,
    decode: &DecodeConfig,
    observer: Option<Observer<'_, '_, T>>,
) -> Result<Generation<T>> {
    cfg.validate()?;
    decode.validate()?;
    if cfg.mode == SteerMode::KvSteer {
        return generate_kv(view, objective, prompt, cfg, decode);
    }
    prefix_init.check_against(view.model.config())?;
    check_budget(view, prompt.len(), prefix_init.len(), decode, objective)?;
    let mut observer = observer;
    let mut rng = ChaCha8Rng::seed_from_u64(decode.seed);
    let mut seq = prompt.to_vec();
    let mut trace = SteerTrace::default();
    let mut step_logits = Vec::with_capacity(decode.max_new_tokens);
    let mut prefix = prefix_init.clone();
    for step in 0..decode.max_new_tokens {
        let start = if cfg.persist_prefix { &prefix } else { prefix_init };
        let out = steer_token(
            view,
            objective,
            &seq,
            start,
            cfg,
            decode,
            &mut rng,
            step,
            observer.as_mut().map(|o| &mut **o as Observer<'_, '_, T>),
        )?;
        trace.extend(SteerTrace {
            records: out.records,
            forwards: out.forwards,
        });
        step_logits.push(out.logits);
        prefix = out.prefix;
        seq.push(out.token);
        if decode.stop_token == Some(out.token) {
            break;
        }
    }
    Ok(Generation {
        tokens: seq,
        prompt_len: prompt.len(),
        trace,
        step_logits,
    })
}

/// Key/value activations of every content position seen so far except the
/// pending last token, which steering may rewrite.
#[derive(Debug, Clone, PartialEq)]
pub struct KvState<T> {
    /// Per layer `(keys, values)`, `content_len x d_model`; empty before the
    /// first content position is cached.
    pub past: Vec<(Tensor<T>, Tensor<T>)>,
    /// Final hidden states of the cached positions.
    pub hidden: Option<Tensor<T>>,
    pub content_len: usize,
}

impl<T: Scalar> KvState<T> {
    /// Unsteered activations of `tokens`.
    pub fn prime(view: &ModelView<'_, T>, tokens: &[TokenId]) -> Result<Self> {
        if tokens.is_empty() {
            return Ok(Self {
                past: Vec::new(),
                hidden: None,
                content_len: 0,
            });
        }
        let (_, cache) = view.without_prefix().forward(tokens)?;
        Ok(Self {
            past: cache.keys.into_iter().zip(cache.values).collect(),
            hidden: Some(cache.hidden),
            content_len: tokens.len(),
        })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.past.iter().flat_map(|(k, v)| [k, v])
    }
}

struct KvEvaluation<T> {
    loss: Option<T>,
    logits: Vec<T>,
    grads: Vec<Vec<T>>,
    new_kv: Vec<(Tensor<T>, Tensor<T>)>,
    new_hidden: Tensor<T>,
}

fn evaluate_kv<T: Scalar>(
    view: &ModelView<'_, T>,
    state: &KvState<T>,
    last: TokenId,
    objective: &Objective<'_, T>,
    with_loss: bool,
    with_grad: bool,
) -> Result<KvEvaluation<T>> {
    let mut tape = Tape::new();
    let bound = view.bind(&mut tape);
    let past: Vec<(Var, Var)> = state
        .past
        .iter()
        .map(|(k, v)| {
            (
                tape.leaf(k.clone().with_requires_grad(with_grad)),
                tape.leaf(v.clone().with_requires_grad(with_grad)),
            )
        })
        .collect();
    let history = state.hidden.as_ref().map(|h| tape.constant(h.clone()));
    let out = bound.forward(
        &mut tape,
        &ForwardInput {
            tokens: &[last],
            past: (!past.is_empty()).then_some(past.as_slice()),
            pos_offset: state.content_len,
            soft_next: None,
            logits: LogitsMode::Last,
        },
    )?;
    let logits = tape.value(out.logits.expect("logits")).data().to_vec();
    let new_kv = out
        .new_kv
        .iter()
        .map(|(k, v)| (tape.value(*k).clone(), tape.value(*v).clone()))
        .collect();
    let new_hidden = tape.value(out.hidden).clone();
    let mut loss = None;
    let mut grads = Vec::new();
    if with_loss {
        let l = objective_loss(&mut tape, &bound, objective, &out, history, state.content_len + 1)?;
        let value = tape.item(l);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("steering loss is {value}")));
        }
        loss = Some(value);
        if with_grad {
            tape.backward(l)?;
            for (k, v) in &past {
                for var in [k, v] {
                    let g = tape
                        .grad(*var)
                        .map_or_else(|| vec![T::zero(); tape.value(*var).numel()], <[T]>::to_vec);
                    grads.push(g);
                }
            }
        }
    }
    Ok(KvEvaluation {
        loss,
        logits,
        grads,
        new_kv,
        new_hidden,
    })
}

/// Ablation mode: the same update loop applied to every cached key and
/// value, content positions included. Content activations are rewritten on
/// purpose and the rewrites persist into later tokens. Appends `last` to the
/// state and returns the sampled successor.
#[allow(clippy::too_many_arguments)]
pub fn kv_steer_token<T: Scalar, R: Rng + ?Sized>(
    view: &ModelView<'_, T>,
    objective: &Objective<'_, T>,
    state: &mut KvState<T>,
    last: TokenId,
    cfg: &SteerConfig,
    decode: &DecodeConfig,
    rng: &mut R,
    token_index: usize,
) -> Result<(TokenId, Vec<SteerRecord>, Vec<T>, usize)> {
    if cfg.mode != SteerMode::KvSteer {
        return Err(Error::Config("kv_steer_token needs mode kv-steer".into()));
    }
    let alpha = T::lit(cfg.alpha);
    let mut records: Vec<SteerRecord> = Vec::with_capacity(cfg.m);
    let mut forwards = 0;
    for iteration in 0..cfg.m {
        let annotate = |e| Error::Steer {
            iteration,
            source: Box::new(e),
        };
        let ev = evaluate_kv(view, state, last, objective, true, true).map_err(annotate)?;
        forwards += 1;
        let loss = ev.loss.expect("loss requested").as_f64();
        if let Some(prev) = records.last_mut() {
            prev.loss_after = loss;
        }
        let mut grads = ev.grads;
        let grad_norm = clip_global_norm(&mut grads, T::lit(cfg.clip_norm));
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(annotate(Error::Numeric("non-finite cache gradient".into())));
        }
        let mut sq = T::zero();
        for ((k, v), pair) in state.past.iter_mut().zip(grads.chunks(2)) {
            for (t, g) in [k, v].into_iter().zip(pair) {
                for (x, &gi) in t.data_mut().iter_mut().zip(g) {
                    let step = alpha * gi;
                    *x -= step;
                    sq += step * step;
                }
            }
        }
        records.push(SteerRecord {
            token_index,
            iteration,
            loss_before: loss,
            loss_after: f64::NAN,
            grad_norm: grad_norm.as_f64(),
            delta_norm: sq.sqrt().as_f64(),
        });
    }
    let m = cfg.m;
    let ev = evaluate_kv(view, state, last, objective, m > 0, false).map_err(|e| Error::Steer {
        iteration: m,
        source: Box::new(e),
    })?;
    forwards += 1;
    if let (Some(rec), Some(loss)) = (records.last_mut(), ev.loss) {
        rec.loss_after = loss.as_f64();
    }
    let token = sample_next(&ev.logits, decode, rng)?;
    state.past = if state.past.is_empty() {
        ev.new_kv
    } else {
        state
            .past
            .iter()
            .zip(ev.new_kv)
            .map(|((k, v), (nk, nv))| Ok((stack(k, &nk)?, stack(v, &nv)?)))
            .collect::<Result<_>>()?
    };
    state.hidden = Some(match &state.hidden {
        Some(h) => stack(h, &ev.new_hidden)?,
        None => ev.new_hidden,
    });
    state.content_len += 1;
    Ok((token, records, ev.logits, forwards))
}

fn stack<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(&[a.rows() + b.rows(), a.cols()], data)
}

fn generate_kv<T: Scalar>(
    view: &ModelView<'_, T>,
    objective: &Objective<'_, T>,
    prompt: &[TokenId],
    cfg: &SteerConfig,
    decode: &DecodeConfig,
) -> Result<Generation<T>> {
    check_budget(view, prompt.len(), 0, decode, objective)?;
    let view = view.without_prefix();
    let mut rng = ChaCha8Rng::seed_from_u64(decode.seed);
    let (head, last) = prompt.split_at(prompt.len() - 1);
    let mut state = KvState::prime(&view, head)?;
    let mut last = last[0];
    let mut seq = prompt.to_vec();
    let mut trace = SteerTrace::default();
    let mut step_logits = Vec::with_capacity(decode.max_new_tokens);
    for step in 0..decode.max_new_tokens {
        let (token, records, logits, forwards) =
            kv_steer_token(&view, objective, &mut state, last, cfg, decode, &mut rng, step)?;
        trace.extend(SteerTrace { records, forwards });
        step_logits.push(logits);
        seq.push(token);
        last = token;
        if decode.stop_token == Some(token) {
            break;
        }
    }
    Ok(Generation {
        tokens: seq,
        prompt_len: prompt.len(),
        trace,
        step_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{generate_full, LMConfig, LanguageModel};

    fn setup() -> (LanguageModel<f64>, WordBag) {
        let cfg = LMConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_len: 24,
            prefix_len: 3,
            d_ff: 16,
        };
        let lm = LanguageModel::init(cfg, 3).unwrap();
        let bag = WordBag::new("t", vec![2, 5, 7], 12).unwrap();
        (lm, bag)
    }

    #[test]
    fn zero_alpha_and_zero_grad_keep_prefix() {
        let (lm, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PrefixState::random(lm.config(), 0.5, &mut rng);
        let grads: Vec<Vec<f64>> = p.tensors().map(|t| vec![1.0; t.numel()]).collect();
        assert_eq!(update_prefix(&p, &grads, 0.0).unwrap().0, p);
        let zeros: Vec<Vec<f64>> = p.tensors().map(|t| vec![0.0; t.numel()]).collect();
        assert_eq!(update_prefix(&p, &zeros, 0.3).unwrap().0, p);
    }

    #[test]
    fn delta_norm_is_alpha_times_grad_norm() {
        let (lm, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PrefixState::random(lm.config(), 0.5, &mut rng);
        let grads: Vec<Vec<f64>> = p
            .tensors()
            .map(|t| (0..t.numel()).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let (_, delta) = update_prefix(&p, &grads, 0.25).unwrap();
        assert!((delta - 0.25 * norm).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let (lm, _) = setup();
        let p = PrefixState::<f64>::zeros(lm.config());
        let mut grads: Vec<Vec<f64>> = p.tensors().map(|t| vec![0.0; t.numel()]).collect();
        grads[0][0] = f64::NAN;
        assert!(matches!(update_prefix(&p, &grads, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn m_zero_matches_plain_decoding() {
        let (lm, bag) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PrefixState::random(lm.config(), 0.5, &mut rng);
        let decode = DecodeConfig {
            max_new_tokens: 6,
            seed: 9,
            ..DecodeConfig::default()
        };
        let plain = generate_full(lm.view().with_prefix(&p).unwrap(), &[1, 3], &decode).unwrap();
        let obj = Objective::Bag(&bag);
        for cfg in [
            SteerConfig {
                m: 0,
                ..SteerConfig::default()
            },
            SteerConfig::disabled(),
        ] {
            let g = generate(&lm.view(), &obj, &[1, 3], &p, &cfg, &decode, None).unwrap();
            assert_eq!(g.tokens, plain);
            assert!(g.trace.records.is_empty());
            assert_eq!(g.trace.forwards, 6);
        }
    }

    #[test]
    fn trace_counts_and_budget() {
        let (lm, bag) = setup();
        let p = PrefixState::zeros(lm.config());
        let decode = DecodeConfig {
            max_new_tokens: 4,
            ..DecodeConfig::default()
        };
        let cfg = SteerConfig::default();
        let g = generate(&lm.view(), &Objective::Bag(&bag), &[1], &p, &cfg, &decode, None).unwrap();
        assert_eq!(g.trace.records.len(), 4 * cfg.m);
        assert_eq!(g.trace.forwards, 4 * (cfg.m + 1));
        assert!(g.trace.records.iter().all(|r| r.loss_after.is_finite()));
        let long = DecodeConfig {
            max_new_tokens: 30,
            ..decode
        };
        assert!(matches!(
            generate(&lm.view(), &Objective::Bag(&bag), &[1], &p, &cfg, &long, None),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn zero_new_tokens_returns_prompt() {
        let (lm, bag) = setup();
        let p = PrefixState::zeros(lm.config());
        let decode = DecodeConfig {
            max_new_tokens: 0,
            ..DecodeConfig::default()
        };
        let g = generate(
            &lm.view(),
            &Objective::Bag(&bag),
            &[1, 4],
            &p,
            &SteerConfig::default(),
            &decode,
            None,
        )
        .unwrap();
        assert_eq!(g.tokens, vec![1, 4]);
    }

    #[test]
    fn kv_mode_mutates_cache() {
        let (lm, bag) = setup();
        let view = lm.view();
        let primed = KvState::prime(&view, &[1, 4, 6]).unwrap();
        let mut state = primed.clone();
        let cfg = SteerConfig {
            mode: SteerMode::KvSteer,
            m: 1,
            ..SteerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        kv_steer_token(
            &view,
            &Objective::Bag(&bag),
            &mut state,
            3,
            &cfg,
            &DecodeConfig::greedy(1),
            &mut rng,
            0,
        )
        .unwrap();
        let changed = primed
            .tensors()
            .zip(state.tensors())
            .any(|(a, b)| a.data().iter().zip(b.data()).any(|(x, y)| x != y));
        assert!(changed);
    }
}
