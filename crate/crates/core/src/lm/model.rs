//! Pre-norm decoder-only transformer whose attention can read extra
//! key/value slots placed before the content positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::LMConfig;
use super::prefix::PrefixState;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

pub type TokenId = u32;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

const LAYER_PARAM_NAMES: [&str; 12] = [
    "ln1.g", "ln1.b", "attn.q", "attn.k", "attn.v", "attn.o", "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

impl<T> Layer<T> {
    fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// The generator: token and position embeddings, transformer layers and an
/// untied output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel<T> {
    config: LMConfig,
    seed: u64,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<Layer<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
    pub w_out: Tensor<T>,
}

/// The four attention projections a low-rank adapter may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Query = 0,
    Key = 1,
    Value = 2,
    Output = 3,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }
}

/// Tape handles of adapter factors: `W -> W + scale * A * B`.
#[derive(Debug, Clone)]
pub struct AdapterVars<T> {
    pub scale: T,
    /// Per layer, per [`Projection`], the `(A, B)` factor pair if adapted.
    pub factors: Vec<[Option<(Var, Var)>; 4]>,
}

/// Parameters of a [`LanguageModel`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel<T> {
    config: LMConfig,
    /// Same order as [`LanguageModel::named_params`].
    pub params: Vec<Var>,
    pub adapter: Option<AdapterVars<T>>,
}

/// Everything a forward pass needs besides the parameters.
#[derive(Debug, Clone, Default)]
pub struct ForwardInput<'a> {
    pub tokens: &'a [TokenId],
    /// Per layer `(keys, values)` of shape `P x d_model`, visible to every
    /// new position. Prefix slots, cached content, or both.
    pub past: Option<&'a [(Var, Var)]>,
    /// Content position index of `tokens[0]`.
    pub pos_offset: usize,
    /// A `1 x vocab` probability row embedded as one extra trailing position.
    pub soft_next: Option<Var>,
    pub logits: LogitsMode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LogitsMode {
    #[default]
    All,
    Last,
    None,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Option<Var>,
    /// Per layer `(keys, values)` over past slots followed by new positions.
    pub kv: Vec<(Var, Var)>,
    /// Per layer `(keys, values)` of the new positions only.
    pub new_kv: Vec<(Var, Var)>,
    /// Final-norm hidden states of the new positions, `T x d_model`.
    pub hidden: Var,
    /// Residual stream after every layer, `T x d_model`.
    pub layer_outputs: Vec<Var>,
    pub past_len: usize,
}

impl<T: Scalar> LanguageModel<T> {
    /// Scaled-normal initialization, reproducible from `seed`.
    pub fn init(config: LMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std_in = 1.0 / (d as f64).sqrt();
        let std_ff = 1.0 / (config.d_ff as f64).sqrt();
        let resid = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = Tensor::randn(&[config.vocab_size, d], 0.5, &mut rng);
        let pos_emb = Tensor::randn(&[config.context_len, d], 0.1, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                ln1_g: Tensor::ones(&[d]),
                ln1_b: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], std_in, &mut rng),
                wk: Tensor::randn(&[d, d], std_in, &mut rng),
                wv: Tensor::randn(&[d, d], std_in, &mut rng),
                wo: Tensor::randn(&[d, d], std_in * resid, &mut rng),
                ln2_g: Tensor::ones(&[d]),
                ln2_b: Tensor::zeros(&[d]),
                w1: Tensor::randn(&[d, config.d_ff], std_in, &mut rng),
                b1: Tensor::zeros(&[config.d_ff]),
                w2: Tensor::randn(&[config.d_ff, d], std_ff * resid, &mut rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config,
            seed,
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Tensor::ones(&[d]),
            lnf_b: Tensor::zeros(&[d]),
            w_out: Tensor::randn(&[d, config.vocab_size], std_in, &mut rng),
        })
    }

    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Parameters in a fixed order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_PARAM_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf.g".into(), &self.lnf_g));
        out.push(("lnf.b".into(), &self.lnf_b));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.w_out);
        out
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_named(config: LMConfig, seed: u64, named: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut model = Self::init(config, seed)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((dst, (name, shape)), (src_name, src)) in model.params_mut().into_iter().zip(&expected).zip(named) {
            if name != src_name || shape.as_slice() != src.shape() {
                return Err(Error::Format(format!(
                    "parameter {src_name} {:?} does not match {name} {shape:?}",
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records the parameters on `tape`; `trainable` controls gradients.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel<T> {
        self.bind_with(tape, false)
    }

    pub fn bind_with(&self, tape: &mut Tape<T>, trainable: bool) -> BoundModel<T> {
        let params = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone().with_requires_grad(trainable)))
            .collect();
        BoundModel {
            config: self.config,
            params,
            adapter: None,
        }
    }

    /// A view with no prefix and no adapter.
    pub fn view(&self) -> ModelView<'_, T> {
        ModelView {
            model: self,
            adapter: None,
            prefix: None,
        }
    }
}

/// Read-only bundle of base weights, optional adapter factors and optional
/// prefix activations.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a, T> {
    pub model: &'a LanguageModel<T>,
    pub adapter: Option<&'a crate::rldaf::LoraAdapter<T>>,
    pub prefix: Option<&'a PrefixState<T>>,
}

/// Attaches prefix activations to a model, checking their shape.
pub fn attach_prefix<'a, T: Scalar>(
    model: &'a LanguageModel<T>,
    prefix: &'a PrefixState<T>,
) -> Result<ModelView<'a, T>> {
    model.view().with_prefix(prefix)
}

impl<'a, T: Scalar> ModelView<'a, T> {
    pub fn with_prefix(mut self, prefix: &'a PrefixState<T>) -> Result<Self> {
        prefix.check_against(self.model.config())?;
        self.prefix = Some(prefix);
        Ok(self)
    }

    pub fn with_adapter(mut self, adapter: &'a crate::rldaf::LoraAdapter<T>) -> Result<Self> {
        adapter.check_against(self.model.config())?;
        self.adapter = Some(adapter);
        Ok(self)
    }

    pub fn without_prefix(mut self) -> Self {
        self.prefix = None;
        self
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix.map_or(0, PrefixState::len)
    }

    /// Binds base weights and adapter factors, none trainable.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel<T> {
        let mut bound = self.model.bind(tape);
        if let Some(a) = self.adapter {
            bound.adapter = Some(a.bind(tape, false));
        }
        bound
    }

    /// Full forward pass over `tokens` returning logits for every position
    /// and the materialized hidden-state cache.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<(Tensor<T>, HiddenCache<T>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let prefix_vars = self.prefix.and_then(|p| p.bind(&mut tape, false));
        let out = bound.forward(
            &mut tape,
            &ForwardInput {
                tokens,
                past: prefix_vars.as_deref(),
                ..Default::default()
            },
        )?;
        let logits = tape.value(out.logits.expect("logits requested")).clone();
        let cache = HiddenCache::from_output(&tape, &out);
        Ok((logits, cache))
    }

    /// Logits of the next token after `tokens`.
    pub fn next_logits(&self, tokens: &[TokenId]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let prefix_vars = self.prefix.and_then(|p| p.bind(&mut tape, false));
        let out = bound.forward(
            &mut tape,
            &ForwardInput {
                tokens,
                past: prefix_vars.as_deref(),
                logits: LogitsMode::Last,
                ..Default::default()
            },
        )?;
        Ok(tape.value(out.logits.expect("logits requested")).data().to_vec())
    }
}

/// Materialized activations of one forward pass: per layer keys and values
/// over prefix slots then content positions, and final hidden states of
/// the content positions.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenCache<T> {
    pub prefix_len: usize,
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
    /// Final-norm hidden states, one row per content position.
    pub hidden: Tensor<T>,
    /// Residual stream after each layer for content positions.
    pub layer_outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> HiddenCache<T> {
    pub fn from_output(tape: &Tape<T>, out: &ForwardOutput) -> Self {
        Self {
            prefix_len: out.past_len,
            keys: out.kv.iter().map(|(k, _)| tape.value(*k).clone()).collect(),
            values: out.kv.iter().map(|(_, v)| tape.value(*v).clone()).collect(),
            hidden: tape.value(out.hidden).clone(),
            layer_outputs: out.layer_outputs.iter().map(|v| tape.value(*v).clone()).collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn content_len(&self) -> usize {
        self.hidden.rows()
    }

    /// Total positions per layer: prefix slots plus content.
    pub fn positions(&self) -> usize {
        self.keys.first().map_or(0, Tensor::rows)
    }

    fn rows_from(t: &Tensor<T>, start: usize) -> &[T] {
        &t.data()[start * t.cols()..]
    }

    /// Key and value rows of content positions in `layer`.
    pub fn content_kv(&self, layer: usize) -> (&[T], &[T]) {
        (
            Self::rows_from(&self.keys[layer], self.prefix_len),
            Self::rows_from(&self.values[layer], self.prefix_len),
        )
    }
}

fn checked_ids(tokens: &[TokenId], vocab: usize) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|&t| {
            let t = t as usize;
            if t >= vocab {
                Err(Error::Index {
                    what: "token id",
                    index: t,
                    bound: vocab,
                })
            } else {
                Ok(t)
            }
        })
        .collect()
}

impl<T: Scalar> BoundModel<T> {
    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    fn p(&self, i: usize) -> Var {
        self.params[i]
    }

    fn layer_param(&self, layer: usize, slot: usize) -> Var {
        self.params[2 + layer * LAYER_PARAM_NAMES.len() + slot]
    }

    pub fn tok_emb(&self) -> Var {
        self.p(0)
    }

    fn tail(&self, back: usize) -> Var {
        self.params[self.params.len() - back]
    }

    fn project(&self, tape: &mut Tape<T>, x: Var, layer: usize, which: Projection) -> Result<Var> {
        let w = self.layer_param(layer, 2 + which as usize);
        let base = tape.matmul(x, w)?;
        let Some(adapter) = &self.adapter else {
            return Ok(base);
        };
        let Some((a, b)) = adapter.factors[layer][which as usize] else {
            return Ok(base);
        };
        let xa = tape.matmul(x, a)?;
        let xab = tape.matmul(xa, b)?;
        let scaled = tape.scale(xab, adapter.scale);
        tape.add(base, scaled)
    }

    /// Causal forward pass. New position `i` sees every past slot and new
    /// positions `0..=i`.
    pub fn forward(&self, tape: &mut Tape<T>, input: &ForwardInput<'_>) -> Result<ForwardOutput> {
        let cfg = self.config;
        let d = cfg.d_model;
        let past_len = match input.past {
            Some(kv) => {
                if kv.len() != cfg.n_layers {
                    return Err(Error::Config(format!(
                        "past has {} layers, model has {}",
                        kv.len(),
                        cfg.n_layers
                    )));
                }
                let r = tape.value(kv[0].0).rows();
                for &(k, v) in kv {
                    for t in [tape.value(k), tape.value(v)] {
                        if t.rows() != r || t.cols() != d {
                            return Err(Error::Dimension {
                                op: "past kv",
                                left: t.shape().to_vec(),
                                right: vec![r, d],
                            });
                        }
                    }
                }
                r
            }
            None => 0,
        };
        let ids = checked_ids(input.tokens, cfg.vocab_size)?;
        let n_new = ids.len() + usize::from(input.soft_next.is_some());
        if n_new == 0 {
            return Err(Error::Domain("forward needs at least one position".into()));
        }
        let needed = past_len + n_new;
        let last_position = input.pos_offset + n_new;
        if needed > cfg.context_len || last_position > cfg.context_len {
            return Err(Error::Capacity {
                needed: needed.max(last_position),
                available: cfg.context_len,
            });
        }

        // Embeddings.
        let mut parts = Vec::with_capacity(2);
        if !ids.is_empty() {
            parts.push(tape.embedding(self.tok_emb(), &ids)?);
        }
        if let Some(probs) = input.soft_next {
            parts.push(tape.matmul(probs, self.tok_emb())?);
        }
        let tok = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, Axis::Rows)?
        };
        let positions: Vec<usize> = (input.pos_offset..input.pos_offset + n_new).collect();
        let pos = tape.embedding(self.p(1), &positions)?;
        let mut x = tape.add(tok, pos)?;

        let total = past_len + n_new;
        let mut mask = vec![false; n_new * total];
        for i in 0..n_new {
            for j in 0..total {
                mask[i * total + j] = j < past_len || j - past_len <= i;
            }
        }

        let dh = cfg.head_dim();
        let inv_sqrt = T::one() / T::lit(dh as f64).sqrt();
        let eps = T::lit(LN_EPS);
        let mut kv = Vec::with_capacity(cfg.n_layers);
        let mut new_kv = Vec::with_capacity(cfg.n_layers);
        let mut layer_outputs = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let a = tape.layer_norm(x, self.layer_param(l, 0), self.layer_param(l, 1), eps)?;
            let q = self.project(tape, a, l, Projection::Query)?;
            let k_new = self.project(tape, a, l, Projection::Key)?;
            let v_new = self.project(tape, a, l, Projection::Value)?;
            new_kv.push((k_new, v_new));
            let (k, v) = match input.past {
                Some(past) => (
                    tape.concat(&[past[l].0, k_new], Axis::Rows)?,
                    tape.concat(&[past[l].1, v_new], Axis::Rows)?,
                ),
                None => (k_new, v_new),
            };
            kv.push((k, v));
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = tape.slice(q, Axis::Cols, h * dh, dh)?;
                let kh = tape.slice(k, Axis::Cols, h * dh, dh)?;
                let vh = tape.slice(v, Axis::Cols, h * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let attn = tape.softmax_rows_masked(scores, Some(&mask))?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let merged = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat(&heads, Axis::Cols)?
            };
            let attn_out = self.project(tape, merged, l, Projection::Output)?;
            let h = tape.add(x, attn_out)?;
            let f = tape.layer_norm(h, self.layer_param(l, 6), self.layer_param(l, 7), eps)?;
            let f = tape.matmul(f, self.layer_param(l, 8))?;
            let f = tape.add_row(f, self.layer_param(l, 9))?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, self.layer_param(l, 10))?;
            let f = tape.add_row(f, self.layer_param(l, 11))?;
            x = tape.add(h, f)?;
            layer_outputs.push(x);
        }
        let hidden = tape.layer_norm(x, self.tail(3), self.tail(2), eps)?;
        let logits = match input.logits {
            LogitsMode::All => Some(tape.matmul(hidden, self.tail(1))?),
            LogitsMode::Last => {
                let last = tape.slice(hidden, Axis::Rows, n_new - 1, 1)?;
                Some(tape.matmul(last, self.tail(1))?)
            }
            LogitsMode::None => None,
        };
        Ok(ForwardOutput {
            logits,
            kv,
            new_kv,
            hidden,
            layer_outputs,
            past_len,
        })
    }
}
