//! Test-only oracles: central finite differences and small data helpers.
#![allow(dead_code)]

use airid::autograd::{AutogradError, EntryKind, Tape, Tensor, Var};
use airid::losses::{LossWeights, Variant};
use airid::model::{Bind, Mode, Model};
use airid::training::{concepts, discriminator_objective, generator_objective, Batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor so entries whose true gradient is zero compare absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Values bounded away from zero, for ops with a kink at the origin.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Max relative error between backward gradients and central differences.
///
/// `f` builds a scalar from the given input leaves on a fresh tape.
pub fn max_grad_error<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutogradError>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| tape.constant(x.clone()).unwrap())
            .collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(x.clone().with_requires_grad(true)).unwrap())
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|g| g.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Contracts any tensor to a scalar with fixed weights, so upstream gradients are non-uniform.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var, AutogradError> {
    let shape = tape.shape(v).to_vec();
    let mut r = rng(seed);
    let w = random_tensor(&mut r, &shape, -1.0, 1.0);
    let w = tape.constant(w)?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

/// Largest relative error between backward and central-difference gradients
/// over `coords` weight entries drawn from parameters named under `prefixes`.
///
/// `objective` builds a scalar on a fresh tape from a fresh copy of `model`,
/// so batchnorm running statistics never leak between evaluations.
pub fn model_grad_error<F>(
    model: &Model<f64>,
    prefixes: &[&str],
    coords: usize,
    seed: u64,
    objective: F,
) -> f64
where
    F: Fn(&mut Model<f64>, &mut Tape<f64>) -> Result<Var, AutogradError>,
{
    let eval = |m: &Model<f64>| -> f64 {
        let mut m = m.clone();
        let mut tape = Tape::new();
        let out = objective(&mut m, &mut tape).unwrap();
        tape.value(out).item()
    };
    let mut m = model.clone();
    let mut tape = Tape::new();
    let out = objective(&mut m, &mut tape).unwrap();
    let grads = tape.backward(out).unwrap();

    let store = model.store();
    let pool: Vec<_> = store
        .ids()
        .filter(|&id| {
            store.kind(id) == EntryKind::Param
                && prefixes.iter().any(|p| store.name(id).starts_with(p))
        })
        .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let (id, i) = pool[r.random_range(0..pool.len())];
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
        let mut plus = model.clone();
        plus.store_mut().get_mut(id).data_mut()[i] += FD_STEP;
        let mut minus = model.clone();
        minus.store_mut().get_mut(id).data_mut()[i] -= FD_STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// Four-sample batch sized for `model`: images in `[0, 1]`, binary attributes.
pub fn model_batch(model: &Model<f64>, seed: u64) -> Batch<f64> {
    let cfg = model.config();
    let mut r = rng(seed);
    let images = random_tensor(&mut r, &[4, cfg.image_len], 0.0, 1.0);
    let attrs: Vec<f64> = (0..4 * cfg.attribute_size)
        .map(|_| r.random_bool(0.4) as u8 as f64)
        .collect();
    let ids = (0..4)
        .map(|_| r.random_range(0..cfg.num_train_ids))
        .collect();
    Batch {
        images,
        attributes: Tensor::from_f64(&[4, cfg.attribute_size], &attrs).unwrap(),
        ids,
    }
}

/// Generator, image and classifier objective of `variant`, as differentiated in a joint step.
pub fn generator_total(
    m: &mut Model<f64>,
    t: &mut Tape<f64>,
    batch: &Batch<f64>,
    variant: Variant,
) -> Result<Var, AutogradError> {
    let (ci, ca) = concepts(m, t, batch, Mode::Train, Bind::Trainable, Mode::Train)?;
    Ok(generator_objective(m, t, ci, ca, &batch.ids, variant, &LossWeights::default())?.total)
}

/// Parameter groups whose generator-step gradient is the true derivative of
/// the objective under `variant`. Groups feeding a detached input are left
/// out: the stacked discriminator batch normalizes with statistics of the
/// detached real concepts, and alignment targets are detached image concepts,
/// so central differences see a dependence that backward deliberately drops.
pub fn differentiable_groups(variant: Variant) -> &'static [&'static str] {
    use airid::model::{CLASSIFIER, GENERATOR, IMAGE};
    match variant {
        Variant::NoAdv => &[GENERATOR, IMAGE, CLASSIFIER],
        Variant::Img2a => &[IMAGE, CLASSIFIER],
        _ => &[GENERATOR, CLASSIFIER],
    }
}

/// Discriminator objective on the concepts `model` produces for `batch`.
pub fn discriminator_total(
    m: &mut Model<f64>,
    t: &mut Tape<f64>,
    batch: &Batch<f64>,
) -> Result<Var, AutogradError> {
    let mut probe = m.clone();
    let mut pt = Tape::new();
    let (ci, ca) = concepts(
        &mut probe,
        &mut pt,
        batch,
        Mode::Train,
        Bind::Trainable,
        Mode::Train,
    )?;
    let (real, fake) = (pt.value(ci).clone(), pt.value(ca).clone());
    Ok(
        discriminator_objective(m, t, &real, &fake, &LossWeights::default(), Mode::Train)?
            .objective,
    )
}
