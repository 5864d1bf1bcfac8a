use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AutogradError, ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// `param -= lr * wd * param` before the adaptive update.
    #[default]
    Decoupled,
    /// `grad += wd * param` before the moment updates.
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            decay_mode: WeightDecayMode::Decoupled,
        }
    }
}

/// Moment buffers of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<R> {
    pub m: Vec<R>,
    pub v: Vec<R>,
}

/// Adam with bias correction over a fixed parameter group.
///
/// The step counter is shared by the group and advances once per [`AdamState::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub config: AdamConfig,
    pub t: u64,
    pub moments: BTreeMap<ParamId, Moments<R>>,
}

/// Updates one parameter in place with an already-incremented step counter `t`.
pub fn adam_update<R: Real>(
    param: &mut [R],
    grad: &[R],
    moments: &mut Moments<R>,
    t: u64,
    cfg: &AdamConfig,
) {
    let lr = R::lit(cfg.lr);
    let (b1, b2) = (R::lit(cfg.beta1), R::lit(cfg.beta2));
    let eps = R::lit(cfg.eps);
    let wd = R::lit(cfg.weight_decay);
    let bc1 = R::one() - b1.powi(t as i32);
    let bc2 = R::one() - b2.powi(t as i32);
    for (i, p) in param.iter_mut().enumerate() {
        let mut g = grad[i];
        match cfg.decay_mode {
            WeightDecayMode::Decoupled => *p = *p - lr * wd * *p,
            WeightDecayMode::L2 => g += wd * *p,
        }
        let m = b1 * moments.m[i] + (R::one() - b1) * g;
        let v = b2 * moments.v[i] + (R::one() - b2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

impl<R: Real> AdamState<R> {
    pub fn new(config: AdamConfig, store: &ParamStore<R>, params: &[ParamId]) -> Self {
        let moments = params
            .iter()
            .map(|&id| {
                let n = store.get(id).numel();
                (
                    id,
                    Moments {
                        m: vec![R::zero(); n],
                        v: vec![R::zero(); n],
                    },
                )
            })
            .collect();
        Self {
            config,
            t: 0,
            moments,
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    /// One update of every parameter in the group from its stored `grad`.
    pub fn step(&mut self, store: &mut ParamStore<R>) -> Result<(), AutogradError> {
        for &id in self.moments.keys() {
            if store.get(id).grad.is_none() {
                return Err(AutogradError::MissingGrad(store.name(id).to_string()));
            }
        }
        self.t += 1;
        let t = self.t;
        let cfg = self.config;
        for (&id, mom) in self.moments.iter_mut() {
            let tensor: &mut Tensor<R> = store.get_mut(id);
            let grad = tensor.grad.take().expect("checked above");
            adam_update(tensor.data_mut(), &grad, mom, t, &cfg);
            tensor.grad = Some(grad);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Classical momentum SGD with L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<R> {
    pub config: SgdConfig,
    pub t: u64,
    pub velocity: BTreeMap<ParamId, Vec<R>>,
}

impl<R: Real> SgdState<R> {
    pub fn new(config: SgdConfig, store: &ParamStore<R>, params: &[ParamId]) -> Self {
        let velocity = params
            .iter()
            .map(|&id| (id, vec![R::zero(); store.get(id).numel()]))
            .collect();
        Self {
            config,
            t: 0,
            velocity,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<R>) -> Result<(), AutogradError> {
        for &id in self.velocity.keys() {
            if store.get(id).grad.is_none() {
                return Err(AutogradError::MissingGrad(store.name(id).to_string()));
            }
        }
        self.t += 1;
        let lr = R::lit(self.config.lr);
        let mu = R::lit(self.config.momentum);
        let wd = R::lit(self.config.weight_decay);
        for (&id, vel) in self.velocity.iter_mut() {
            let tensor = store.get_mut(id);
            let grad = tensor.grad.take().expect("checked above");
            for ((p, v), &g) in tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            }
            tensor.grad = Some(grad);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Optimizer over one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer<R> {
    Adam(AdamState<R>),
    Sgd(SgdState<R>),
}

impl<R: Real> Optimizer<R> {
    /// Builds an optimizer sharing Adam's lr / beta1 / weight decay for the SGD fallback.
    pub fn new(
        kind: OptimizerKind,
        config: AdamConfig,
        store: &ParamStore<R>,
        params: &[ParamId],
    ) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam(AdamState::new(config, store, params)),
            OptimizerKind::Sgd => Self::Sgd(SgdState::new(
                SgdConfig {
                    lr: config.lr,
                    momentum: config.beta1,
                    weight_decay: config.weight_decay,
                },
                store,
                params,
            )),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<R>) -> Result<(), AutogradError> {
        match self {
            Self::Adam(s) => s.step(store),
            Self::Sgd(s) => s.step(store),
        }
    }

    pub fn steps(&self) -> u64 {
        match self {
            Self::Adam(s) => s.t,
            Self::Sgd(s) => s.t,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Self::Adam(s) => s.moments.keys().copied().collect(),
            Self::Sgd(s) => s.velocity.keys().copied().collect(),
        }
    }

    /// Named state buffers, for checkpointing.
    pub fn buffers(&self) -> Vec<(ParamId, &'static str, &[R])> {
        match self {
            Self::Adam(s) => s
                .moments
                .iter()
                .flat_map(|(&id, m)| [(id, "m", m.m.as_slice()), (id, "v", m.v.as_slice())])
                .collect(),
            Self::Sgd(s) => s
                .velocity
                .iter()
                .map(|(&id, v)| (id, "velocity", v.as_slice()))
                .collect(),
        }
    }

    pub fn buffer_mut(&mut self, id: ParamId, slot: &str) -> Option<&mut Vec<R>> {
        match (self, slot) {
            (Self::Adam(s), "m") => s.moments.get_mut(&id).map(|m| &mut m.m),
            (Self::Adam(s), "v") => s.moments.get_mut(&id).map(|m| &mut m.v),
            (Self::Sgd(s), "velocity") => s.velocity.get_mut(&id),
            _ => None,
        }
    }

    pub fn set_steps(&mut self, t: u64) {
        match self {
            Self::Adam(s) => s.t = t,
            Self::Sgd(s) => s.t = t,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Self::Adam(s) => s.config.lr = lr,
            Self::Sgd(s) => s.config.lr = lr,
        }
    }
}
