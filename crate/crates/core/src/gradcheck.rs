//! Finite-difference checks of the reverse-mode gradients.
//!
//! Every check compares the tape gradient of a scalar loss against central
//! differences and reports the largest relative error over all inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attribute::{Discriminator, WordBag};
use crate::error::Result;
use crate::lm::{ForwardInput, LMConfig, LanguageModel, LogitsMode, PrefixState, TokenId};
use crate::steer::{objective_loss, Objective};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor so that gradients near zero are compared absolutely.
const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Builds a graph from leaves holding `inputs` and returns its output,
/// which need not be scalar.
pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn scalar_loss(tape: &mut Tape<f64>, out: Var, weights: &[f64]) -> Result<Var> {
    let v = tape.value(out);
    if v.numel() == 1 {
        return Ok(out);
    }
    let w = tape.constant(Tensor::new(v.shape(), weights[..v.numel()].to_vec())?);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn evaluate(build: &Build<'_>, inputs: &[Tensor<f64>], weights: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = scalar_loss(&mut tape, out, weights)?;
    Ok(tape.item(loss))
}

/// Largest relative error between tape and finite-difference gradients of
/// `build` with respect to every input. Non-scalar outputs are reduced
/// with fixed random weights drawn from `seed`.
pub fn check(build: &Build<'_>, inputs: &[Tensor<f64>], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let weights: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = scalar_loss(&mut tape, out, &weights)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + STEP;
            let up = evaluate(build, &probe, &weights)?;
            probe[i].data_mut()[j] = x - STEP;
            let down = evaluate(build, &probe, &weights)?;
            probe[i].data_mut()[j] = x;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Uniform values kept at least `gap` away from each point in `avoid`, so
/// that kinks stay outside the difference stencil.
fn uniform_avoiding(rng: &mut ChaCha8Rng, shape: &[usize], avoid: &[f64], gap: f64) -> Tensor<f64> {
    let mut t = uniform(rng, shape, -2.0, 2.0);
    for x in t.data_mut() {
        while avoid.iter().any(|a| (*x - a).abs() < gap) {
            *x = rng.random_range(-2.0..2.0);
        }
    }
    t
}

type Case = (&'static str, Box<Build<'static>>, Vec<Tensor<f64>>);

/// One random instance of every tape primitive.
fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let a = uniform(r, &[m, k], -1.0, 1.0);
    let b = uniform(r, &[k, n], -1.0, 1.0);
    let bt = uniform(r, &[n, k], -1.0, 1.0);
    let x = uniform(r, &[m, n], -2.0, 2.0);
    let y = uniform(r, &[m, n], -2.0, 2.0);
    let mut y_far = y.clone();
    for (yv, xv) in y_far.data_mut().iter_mut().zip(x.data()) {
        if (*yv - xv).abs() < 1e-3 {
            *yv += 0.1;
        }
    }
    let row = uniform(r, &[n], -1.0, 1.0);
    let pos = uniform(r, &[m, n], 0.2, 3.0);
    let clampable = uniform_avoiding(r, &[m, n], &[-0.5, 0.5], 1e-3);
    let wide = uniform(r, &[m, 6], -3.0, 3.0);
    let mask: Vec<bool> = (0..m * 6).map(|i| i % 6 == 0 || r.random_bool(0.6)).collect();
    let gain = uniform(r, &[6], 0.5, 1.5);
    let bias = uniform(r, &[6], -0.5, 0.5);
    let table = uniform(r, &[5, 3], -1.0, 1.0);
    let ids: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    let top = uniform(r, &[2, n], -1.0, 1.0);
    let left = uniform(r, &[m, 2], -1.0, 1.0);
    let start = r.random_range(0..6);
    let len = r.random_range(1..=6 - start);
    let cols: Vec<usize> = (0..3).map(|_| r.random_range(0..6)).collect();
    let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..6)).collect();
    let p = uniform(r, &[1, 6], -2.0, 2.0);
    let q = uniform(r, &[1, 6], -2.0, 2.0);
    let target = targets[0];
    let (kc, mc) = (k, m);

    vec![
        (
            "matmul",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.matmul(v[0], v[1])),
            vec![a.clone(), b],
        ),
        (
            "matmul_nt",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.matmul_nt(v[0], v[1])),
            vec![a.clone(), bt],
        ),
        (
            "transpose",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.transpose(v[0])),
            vec![a.clone()],
        ),
        (
            "add",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.add(v[0], v[1])),
            vec![x.clone(), y.clone()],
        ),
        (
            "sub",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.sub(v[0], v[1])),
            vec![x.clone(), y.clone()],
        ),
        (
            "mul",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mul(v[0], v[1])),
            vec![x.clone(), y],
        ),
        (
            "minimum",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.minimum(v[0], v[1])),
            vec![x.clone(), y_far],
        ),
        (
            "add_row",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.add_row(v[0], v[1])),
            vec![x.clone(), row],
        ),
        (
            "scale",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.scale(v[0], -1.7))),
            vec![x.clone()],
        ),
        (
            "add_scalar",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.add_scalar(v[0], 0.3))),
            vec![x.clone()],
        ),
        (
            "neg",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.neg(v[0]))),
            vec![x.clone()],
        ),
        (
            "exp",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.exp(v[0]))),
            vec![x.clone()],
        ),
        (
            "log",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.log(v[0]))),
            vec![pos],
        ),
        (
            "gelu",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.gelu(v[0]))),
            vec![x.clone()],
        ),
        (
            "clamp",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.clamp(v[0], -0.5, 0.5))),
            vec![clampable],
        ),
        (
            "sum",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.sum(v[0]))),
            vec![x.clone()],
        ),
        (
            "mean",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.mean(v[0]))),
            vec![x.clone()],
        ),
        (
            "mean_rows",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mean_rows(v[0])),
            vec![x.clone()],
        ),
        (
            "reshape",
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.reshape(v[0], &[kc, mc])),
            vec![a],
        ),
        (
            "softmax_rows",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.softmax_rows(v[0])),
            vec![wide.clone()],
        ),
        (
            "softmax_rows_masked",
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.softmax_rows_masked(v[0], Some(&mask))),
            vec![wide.clone()],
        ),
        (
            "log_softmax_rows",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.log_softmax_rows(v[0])),
            vec![wide.clone()],
        ),
        (
            "logsumexp_rows",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.logsumexp_rows(v[0])),
            vec![wide.clone()],
        ),
        (
            "layer_norm",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.layer_norm(v[0], v[1], v[2], 1e-5)),
            vec![wide.clone(), gain, bias],
        ),
        (
            "embedding",
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.embedding(v[0], &ids)),
            vec![table],
        ),
        (
            "concat_rows",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.concat(&[v[0], v[1]], Axis::Rows)),
            vec![x.clone(), top],
        ),
        (
            "concat_cols",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.concat(&[v[0], v[1]], Axis::Cols)),
            vec![x, left],
        ),
        (
            "slice",
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.slice(v[0], Axis::Cols, start, len)),
            vec![wide.clone()],
        ),
        (
            "select_cols",
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.select_cols(v[0], &cols)),
            vec![wide.clone()],
        ),
        (
            "cross_entropy",
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.cross_entropy_rows(v[0], &targets)),
            vec![wide.clone()],
        ),
        (
            "kl_divergence",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.kl_divergence(v[0], v[1])),
            vec![p, q],
        ),
        (
            "matmul_softmax_cross_entropy",
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let z = t.matmul(v[0], v[1])?;
                let s = t.softmax_rows(z)?;
                t.cross_entropy(s, target)
            }),
            vec![uniform(r, &[1, 4], -1.0, 1.0), uniform(r, &[4, 6], -1.0, 1.0)],
        ),
    ]
}

/// Names of the primitives covered by [`primitive_errors`].
pub fn primitive_names() -> Vec<&'static str> {
    primitive_cases(0).into_iter().map(|c| c.0).collect()
}

/// Worst relative gradient error of every primitive on the instance drawn
/// from `seed`.
pub fn primitive_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    primitive_cases(seed)
        .into_iter()
        .map(|(name, build, inputs)| Ok((name, check(&*build, &inputs, seed)?)))
        .collect()
}

/// Small random model, prefix, context and objective for the end-to-end
/// check. Odd seeds use a classifier objective, even seeds a word bag.
pub struct PrefixInstance {
    pub lm: LanguageModel<f64>,
    pub prefix: PrefixState<f64>,
    pub context: Vec<TokenId>,
    pub bag: WordBag,
    pub disc: Option<Discriminator<f64>>,
}

impl PrefixInstance {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LMConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            context_len: 12,
            prefix_len: 3,
        };
        let lm = LanguageModel::init(cfg, rng.random())?;
        let prefix = PrefixState::random(&cfg, 0.7, &mut rng);
        let len = rng.random_range(1..5);
        let context = (0..len).map(|_| rng.random_range(0..11)).collect();
        let bag = WordBag::new("bag", vec![2, 5, 9], 11)?;
        let disc = (seed % 2 == 1)
            .then(|| {
                Discriminator::new(
                    uniform(&mut rng, &[8, 2], -1.0, 1.0),
                    uniform(&mut rng, &[2], -0.5, 0.5),
                    vec!["a".into(), "b".into()],
                )
            })
            .transpose()?;
        Ok(Self {
            lm,
            prefix,
            context,
            bag,
            disc,
        })
    }

    fn objective(&self) -> Objective<'_, f64> {
        match &self.disc {
            Some(disc) => Objective::Class { disc, class: 1 },
            None => Objective::Bag(&self.bag),
        }
    }

    /// Steering loss under `prefix` and, if requested, its gradient with
    /// respect to the flattened prefix.
    pub fn loss(&self, prefix: &PrefixState<f64>, with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let view = self.lm.view();
        let bound = view.bind(&mut tape);
        let past = prefix.bind(&mut tape, with_grad);
        let out = bound.forward(
            &mut tape,
            &ForwardInput {
                tokens: &self.context,
                past: past.as_deref(),
                logits: LogitsMode::Last,
                ..Default::default()
            },
        )?;
        let loss = objective_loss(&mut tape, &bound, &self.objective(), &out, None, self.context.len())?;
        let value = tape.item(loss);
        let mut grad = Vec::new();
        if with_grad {
            tape.backward(loss)?;
            for (k, v) in past.iter().flatten() {
                for var in [k, v] {
                    grad.extend_from_slice(tape.grad(*var).expect("prefix requires grad"));
                }
            }
        }
        Ok((value, grad))
    }
}

/// Worst relative error of the steering-loss gradient with respect to the
/// prefix slots, and the gradient norm.
pub fn prefix_error(seed: u64) -> Result<(f64, f64)> {
    let inst = PrefixInstance::new(seed)?;
    let (_, analytic) = inst.loss(&inst.prefix, true)?;
    let flat = inst.prefix.flatten();
    let mut probe = inst.prefix.clone();
    let mut worst = 0.0f64;
    for (j, &a) in analytic.iter().enumerate() {
        let mut shifted = flat.clone();
        shifted[j] = flat[j] + STEP;
        probe.assign_flat(&shifted)?;
        let up = inst.loss(&probe, false)?.0;
        shifted[j] = flat[j] - STEP;
        probe.assign_flat(&shifted)?;
        let down = inst.loss(&probe, false)?.0;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * STEP)));
    }
    let norm = analytic.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok((worst, norm))
}
