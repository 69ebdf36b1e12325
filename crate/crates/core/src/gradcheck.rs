//! Central finite-difference checks of every differentiable op, both encoders
//! and the full training loss.

use crate::autodiff::{
    concat_cols, gather_rows, softmax_cross_entropy, unfold, where_rows, Tape, Var,
};
use crate::cif::{attention_weights, integrate_and_fire, quantity_loss, resize_weights};
use crate::ctc::{ctc_loss, CtcTarget};
use crate::data::Utterance;
use crate::encoders::{AcousticConfig, AcousticEncoder, LinguisticConfig, LinguisticEncoder};
use crate::error::Result;
use crate::fusion::{FusionConfig, FusionModel, ModelConfig};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::IGNORE_INDEX;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 10;
/// Smallest gradient norm the error is measured against. Central differences
/// of an O(1) loss carry roughly 1e-9 of rounding noise per component, so
/// smaller gradients cannot be resolved relatively.
pub const SCALE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, SCALE_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(SCALE_FLOOR)
}

/// Compares the gradient of scalar `f` w.r.t. every input tensor with central
/// differences; returns the worst per-tensor relative error.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_inputs_with(&(), inputs, |tape, _, v| f(tape, v))
}

/// As [`check_inputs`], with shared read-only state passed to `f`.
pub fn check_inputs_with<C, F>(state: &C, inputs: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &'t C, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let grads = tape.backward(f(&tape, state, &vars)?)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, state, &vars)?.item())
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.numel()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let x0 = xs[i].data()[k];
            xs[i].data_mut()[k] = x0 + FD_EPS;
            let plus = eval(&xs)?;
            xs[i].data_mut()[k] = x0 - FD_EPS;
            let minus = eval(&xs)?;
            xs[i].data_mut()[k] = x0;
            *slot = (plus - minus) / (2.0 * FD_EPS);
        }
        worst = worst.max(relative_error(a.data(), &numeric));
    }
    Ok(worst)
}

/// As [`check_inputs`], over every parameter of a model. `store` selects the
/// model's parameter store so it can be perturbed in place.
pub fn check_params<M, S, F>(model: &mut M, store: S, f: F) -> Result<f64>
where
    S: Fn(&mut M) -> &mut ParamStore,
    F: for<'t> Fn(&'t Tape, &'t M) -> Result<Var<'t>>,
{
    let grads = {
        let tape = Tape::new();
        let loss = f(&tape, model)?;
        tape.backward(loss)?
    };
    let ids: Vec<_> = store(model).ids().collect();
    let eval = |m: &M| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&tape, m)?.item())
    };
    let mut worst = 0.0f64;
    for id in ids {
        let n = store(model).get(id).numel();
        let analytic = grads
            .param(id)
            .unwrap_or_else(|| Tensor::zeros(store(model).get(id).shape()));
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let x0 = store(model).get(id).data()[k];
            store(model).get_mut(id).data_mut()[k] = x0 + FD_EPS;
            let plus = eval(model)?;
            store(model).get_mut(id).data_mut()[k] = x0 - FD_EPS;
            let minus = eval(model)?;
            store(model).get_mut(id).data_mut()[k] = x0;
            *slot = (plus - minus) / (2.0 * FD_EPS);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// Reduces any output to a scalar through a fixed random weighting, so every
/// output element contributes a distinct coefficient.
fn readout<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let shape = v.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().fold(17, |a, d| a * 31 + *d as u64));
    let w = Tensor::uniform(&shape, 1.0, &mut rng);
    Ok(v.mul(v.tape().constant(w))?.sum())
}

fn away_from_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::uniform(shape, 1.0, rng);
    for x in t.data_mut() {
        *x = x.signum() * (0.2 + x.abs());
    }
    t
}

fn positive<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::uniform(shape, 1.0, rng);
    for x in t.data_mut() {
        *x = 0.2 + x.abs();
    }
    t
}

fn dims<R: Rng>(rng: &mut R) -> (usize, usize, usize) {
    (
        rng.random_range(1..5),
        rng.random_range(1..5),
        rng.random_range(1..5),
    )
}

type Instance = fn(&mut ChaCha8Rng) -> Result<f64>;

fn op_matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, k, n) = dims(rng);
    let ins = [
        Tensor::normal(&[m, k], 1.0, rng),
        Tensor::normal(&[k, n], 1.0, rng),
    ];
    check_inputs(&ins, |_, v| readout(v[0].matmul(v[1])?))
}

fn op_transpose(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n, _) = dims(rng);
    check_inputs(&[Tensor::normal(&[m, n], 1.0, rng)], |_, v| {
        readout(v[0].t()?)
    })
}

fn op_broadcast_arith(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n, _) = dims(rng);
    let ins = [
        Tensor::normal(&[m, n], 1.0, rng),
        Tensor::normal(&[m, n], 1.0, rng),
        Tensor::normal(&[n], 1.0, rng),
        Tensor::normal(&[], 1.0, rng),
    ];
    check_inputs(&ins, |_, v| {
        let a = v[0].add(v[1])?.mul(v[2])?.sub(v[3])?;
        let b = v[0].sub(v[1])?.sub(v[2])?.mul(v[3])?;
        let c = v[0].mul(v[1])?.add(v[3])?.scale(-1.5).shift(0.25).neg();
        readout(a.add(b)?.add(c)?)
    })
}

fn op_unary(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n, _) = dims(rng);
    let ins = [away_from_zero(&[m, n], rng), positive(&[m, n], rng)];
    check_inputs(&ins, |_, v| {
        let x = v[0];
        let parts = [
            x.sigmoid(),
            x.tanh(),
            x.relu(),
            x.abs(),
            x.exp()?,
            x.recip()?,
            v[1].ln()?,
        ];
        let mut acc = readout(parts[0])?;
        for (i, p) in parts.iter().enumerate().skip(1) {
            acc = acc.add(readout(*p)?.scale(1.0 + i as f64))?;
        }
        Ok(acc)
    })
}

fn op_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n, _) = dims(rng);
    check_inputs(&[Tensor::normal(&[m, n + 1], 2.0, rng)], |_, v| {
        readout(v[0].softmax_rows())?.add(readout(v[0].log_softmax_rows())?.scale(0.5))
    })
}

fn op_cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n, _) = dims(rng);
    let rows = m + 1;
    let mut targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..n + 1)).collect();
    targets[rng.random_range(0..rows)] = IGNORE_INDEX;
    check_inputs(&[Tensor::normal(&[rows, n + 1], 2.0, rng)], move |_, v| {
        softmax_cross_entropy(v[0], &targets, IGNORE_INDEX)
    })
}

fn op_reductions(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n, _) = dims(rng);
    check_inputs(&[Tensor::normal(&[m, n], 1.0, rng)], |_, v| {
        let s = v[0].sum();
        s.mul(s)?.add(v[0].mean().scale(3.0))
    })
}

fn op_layer_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n, _) = dims(rng);
    let n = n + 1;
    let ins = [
        Tensor::normal(&[m, n], 1.0, rng),
        Tensor::normal(&[n], 1.0, rng),
        Tensor::normal(&[n], 1.0, rng),
    ];
    check_inputs(&ins, |_, v| readout(v[0].layer_norm(v[1], v[2])?))
}

fn op_slicing(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n, k) = dims(rng);
    let ins = [
        Tensor::normal(&[m, n + 1], 1.0, rng),
        Tensor::normal(&[m, k], 1.0, rng),
    ];
    let start = rng.random_range(0..=n);
    check_inputs(&ins, move |_, v| {
        let part = v[0].narrow_cols(start, n + 1 - start)?;
        let joined = concat_cols(&[part, v[1], v[0]])?;
        readout(joined.reshape(&[joined.value().numel()])?)
    })
}

fn op_gather(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (v_size, d, u) = dims(rng);
    let ids: Vec<usize> = (0..u + 2).map(|_| rng.random_range(0..v_size)).collect();
    check_inputs(&[Tensor::normal(&[v_size, d], 1.0, rng)], move |_, v| {
        readout(gather_rows(v[0], &ids)?)
    })
}

fn op_where_rows(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n, _) = dims(rng);
    let mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
    let ins = [
        Tensor::normal(&[m, n], 1.0, rng),
        Tensor::normal(&[m, n], 1.0, rng),
    ];
    check_inputs(&ins, move |_, v| readout(where_rows(&mask, v[0], v[1])?))
}

fn op_unfold(rng: &mut ChaCha8Rng) -> Result<f64> {
    let t = rng.random_range(1..9);
    let f = rng.random_range(1..4);
    let stride = rng.random_range(1..4);
    let kernel = stride + rng.random_range(0..3);
    let pad = rng.random_range(0..2);
    check_inputs(&[Tensor::normal(&[t, f], 1.0, rng)], move |_, v| {
        readout(unfold(v[0], kernel, stride, pad)?)
    })
}

fn cif_chain(rng: &mut ChaCha8Rng) -> Result<f64> {
    let t = rng.random_range(1..10);
    let d = rng.random_range(1..5);
    let n_star = rng.random_range(1..=t + 2);
    check_inputs(&[Tensor::normal(&[t, d + 1], 1.5, rng)], move |_, v| {
        let alpha = attention_weights(v[0])?;
        let content = v[0].narrow_cols(0, d)?;
        let resized = resize_weights(alpha, n_star)?;
        readout(integrate_and_fire(resized, content, n_star)?)
    })
}

fn cif_infer_chain(rng: &mut ChaCha8Rng) -> Result<f64> {
    let t = rng.random_range(2..10);
    let d = rng.random_range(1..5);
    check_inputs(&[Tensor::normal(&[t, d + 1], 1.5, rng)], move |_, v| {
        let alpha = attention_weights(v[0])?;
        let content = v[0].narrow_cols(0, d)?;
        let cells = crate::cif::round_length(alpha.value().sum()).max(1);
        readout(integrate_and_fire(alpha, content, cells)?)
    })
}

fn quantity(rng: &mut ChaCha8Rng) -> Result<f64> {
    let t = rng.random_range(1..10);
    let n_star = rng.random_range(1..=t);
    check_inputs(&[Tensor::normal(&[t, 3], 1.5, rng)], move |_, v| {
        Ok(quantity_loss(attention_weights(v[0])?, n_star))
    })
}

fn ctc(rng: &mut ChaCha8Rng) -> Result<f64> {
    let vocab = rng.random_range(2..5);
    let n = rng.random_range(1..4);
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
    let target = CtcTarget::new(tokens, vocab)?;
    let t = target.min_frames() + rng.random_range(0..4);
    check_inputs(&[Tensor::normal(&[t, vocab + 1], 1.5, rng)], move |_, v| {
        Ok(ctc_loss(v[0].log_softmax_rows(), &target)?.loss)
    })
}

fn acoustic_encoder(rng: &mut ChaCha8Rng) -> Result<f64> {
    let heads = rng.random_range(1..3);
    let cfg = AcousticConfig {
        feat_dim: 4,
        strides: vec![rng.random_range(1..3), 2],
        content_dim: 4 * heads - 1,
        blocks: 1,
        heads,
        ff_dim: 4,
        positional: true,
    };
    let mut store = ParamStore::new();
    let enc = AcousticEncoder::new(&mut store, cfg, rng)?;
    perturb(&mut store, rng);
    let frames = Tensor::normal(&[8, 4], 1.0, rng);
    let mut pair = (enc, store);
    let wrt_input = check_inputs_with(
        &pair,
        std::slice::from_ref(&frames),
        |tape, (enc, store), v| readout(enc.encode(Ctx::new(tape, store), v[0])?),
    )?;
    let wrt_params = check_params(
        &mut pair,
        |p| &mut p.1,
        |tape, (enc, store)| {
            let ctx = Ctx::new(tape, store);
            readout(enc.encode(ctx, ctx.constant(frames.clone()))?)
        },
    )?;
    Ok(wrt_input.max(wrt_params))
}

fn linguistic_encoder(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = LinguisticConfig {
        vocab_size: 4,
        dim: 4,
        blocks: 1,
        heads: rng.random_range(1..3),
        ff_dim: 4,
        positional: true,
    };
    let mut store = ParamStore::new();
    let enc = LinguisticEncoder::new(&mut store, cfg, rng)?;
    perturb(&mut store, rng);
    let inputs = Tensor::normal(&[3, 4], 1.0, rng);
    let mut pair = (enc, store);
    let wrt_input = check_inputs_with(
        &pair,
        std::slice::from_ref(&inputs),
        |tape, (enc, store), v| readout(enc.encode(Ctx::new(tape, store), v[0])?),
    )?;
    let ids: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let mask = vec![true, false, rng.random_bool(0.5)];
    let wrt_params = check_params(
        &mut pair,
        |p| &mut p.1,
        |tape, (enc, store)| Ok(enc.masked_lm_loss(Ctx::new(tape, store), &ids, &mask)?.0),
    )?;
    Ok(wrt_input.max(wrt_params))
}

/// Smallest model that exercises every path of the training loss.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        acoustic: AcousticConfig {
            feat_dim: 3,
            strides: vec![1],
            content_dim: 3,
            blocks: 1,
            heads: 1,
            ff_dim: 4,
            positional: true,
        },
        linguistic: LinguisticConfig {
            vocab_size: 3,
            dim: 4,
            blocks: 1,
            heads: 2,
            ff_dim: 4,
            positional: true,
        },
        fusion: FusionConfig::default(),
    }
}

fn full_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut model = FusionModel::new(tiny_model_config(), rng.random())?;
    perturb(&mut model.store, rng);
    let first = rng.random_range(0..3);
    let utt = Utterance {
        id: "gc".into(),
        frames: Tensor::normal(&[2, 3], 1.0, rng),
        tokens: vec![first, (first + rng.random_range(1..3)) % 3],
    };
    let mask = vec![rng.random_bool(0.5), rng.random_bool(0.5)];
    check_params(
        &mut model,
        |m| &mut m.store,
        |tape, m| {
            let out = m.forward_train_with(tape, &utt, |_| mask.clone())?;
            debug_assert!(out.ctc.is_some());
            Ok(out.loss)
        },
    )
}

/// Moves every parameter off its initial value so zero biases and unit gains
/// do not hide errors.
fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.get_mut(id).data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
}

pub const SUITE: &[(&str, Instance)] = &[
    ("matmul", op_matmul),
    ("transpose", op_transpose),
    ("add/sub/mul/scale/shift", op_broadcast_arith),
    ("unary", op_unary),
    ("softmax/log_softmax", op_softmax),
    ("softmax_cross_entropy", op_cross_entropy),
    ("sum/mean", op_reductions),
    ("layer_norm", op_layer_norm),
    ("narrow/concat/reshape", op_slicing),
    ("gather_rows", op_gather),
    ("where_rows", op_where_rows),
    ("unfold", op_unfold),
    ("cif train chain", cif_chain),
    ("cif infer chain", cif_infer_chain),
    ("quantity_loss", quantity),
    ("ctc_loss", ctc),
    ("acoustic encoder", acoustic_encoder),
    ("linguistic encoder", linguistic_encoder),
    ("full training loss", full_loss),
];

/// Runs every check on [`INSTANCES`] seeded instances.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    SUITE
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut worst = 0.0f64;
            for k in 0..INSTANCES {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((i * 1000 + k) as u64);
                worst = worst.max(check(&mut rng)?);
            }
            Ok(CheckResult {
                name,
                instances: INSTANCES,
                max_rel_err: worst,
            })
        })
        .collect()
}
