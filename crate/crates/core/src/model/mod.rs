//! The four networks: attribute concept generator, image concept extractor,
//! concept discriminator and the shared semantic-id classifier.
//!
//! All weights live in one [`ParamStore`] under the prefixes `generator.`,
//! `image.`, `discriminator.` and `classifier.`, which is also how optimizers
//! select their parameter groups.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{
    AutogradError, BatchStats, Checkpoint, CheckpointError, EntryKind, ParamId, ParamStore, Real,
    Tape, Tensor, Var,
};

pub const GENERATOR: &str = "generator.";
pub const IMAGE: &str = "image.";
pub const DISCRIMINATOR: &str = "discriminator.";
pub const CLASSIFIER: &str = "classifier.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub attribute_size: usize,
    pub image_len: usize,
    pub embedding_size: usize,
    pub num_train_ids: usize,
    pub generator_hidden: Vec<usize>,
    pub image_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Squash image concepts with tanh like the generator output.
    pub image_head_tanh: bool,
    /// Start the discriminator's output layer at zero so it first predicts 0.5.
    pub discriminator_zero_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            attribute_size: 14,
            image_len: 16 * 8 * 3,
            embedding_size: 128,
            num_train_ids: 40,
            generator_hidden: vec![128, 256, 512],
            image_hidden: vec![512, 256],
            discriminator_hidden: vec![256, 64],
            leaky_slope: 0.2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            image_head_tanh: false,
            discriminator_zero_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), AutogradError> {
        let dims = [
            self.attribute_size,
            self.image_len,
            self.embedding_size,
            self.num_train_ids,
        ];
        let hidden = self
            .generator_hidden
            .iter()
            .chain(&self.image_hidden)
            .chain(&self.discriminator_hidden);
        if dims.iter().chain(hidden).any(|&d| d == 0) {
            return Err(AutogradError::InvalidArgument(
                "model dimensions must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(AutogradError::InvalidArgument(
                "bn_momentum in [0,1] and bn_eps > 0 required".into(),
            ));
        }
        Ok(())
    }
}

/// How batchnorm layers normalize and whether they update running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Batch statistics; running statistics left alone.
    TrainFrozenStats,
    /// Running statistics.
    Eval,
}

/// Whether a network's parameters receive gradients on this tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    Trainable,
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Act {
    Relu,
    Leaky,
    Tanh,
    Sigmoid,
    Identity,
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// `(fc, bn, act)` blocks followed by an output fc and activation.
#[derive(Clone, Debug)]
struct Net {
    blocks: Vec<(Linear, BatchNorm)>,
    hidden_act: Act,
    head: Linear,
    out_act: Act,
}

struct StatUpdate<R> {
    bn: BatchNorm,
    stats: BatchStats<R>,
}

fn glorot<R: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<R> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| R::lit(rng.random_range(-a..a)))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive dims")
}

fn linear<R: Real>(
    store: &mut ParamStore<R>,
    rng: &mut ChaCha8Rng,
    name: &str,
    i: usize,
    o: usize,
) -> Linear {
    Linear {
        weight: store.add_param(&format!("{name}.weight"), glorot(rng, i, o)),
        bias: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[o])),
    }
}

fn batch_norm<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize) -> BatchNorm {
    BatchNorm {
        gamma: store.add_param(&format!("{name}.gamma"), Tensor::ones(&[d])),
        beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[d])),
        running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[d])),
        running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[d])),
    }
}

fn build_net<R: Real>(
    store: &mut ParamStore<R>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    hidden: &[usize],
    output: usize,
    hidden_act: Act,
    out_act: Act,
) -> Net {
    let mut blocks = Vec::new();
    let mut width = input;
    for (k, &h) in hidden.iter().enumerate() {
        let fc = linear(store, rng, &format!("{prefix}fc{k}"), width, h);
        let bn = batch_norm(store, &format!("{prefix}bn{k}"), h);
        blocks.push((fc, bn));
        width = h;
    }
    let head = linear(store, rng, &format!("{prefix}head"), width, output);
    Net {
        blocks,
        hidden_act,
        head,
        out_act,
    }
}

/// All networks plus their weights.
#[derive(Clone, Debug)]
pub struct Model<R: Real = f32> {
    config: ModelConfig,
    store: ParamStore<R>,
    generator: Net,
    image: Net,
    discriminator: Net,
    classifier: Linear,
}

impl<R: Real> Model<R> {
    /// Glorot-uniform weights, zero biases, identity batchnorm.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, AutogradError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let generator = build_net(
            &mut store,
            &mut rng,
            GENERATOR,
            c.attribute_size,
            &c.generator_hidden,
            c.embedding_size,
            Act::Relu,
            Act::Tanh,
        );
        let image_out = if c.image_head_tanh {
            Act::Tanh
        } else {
            Act::Identity
        };
        let image = build_net(
            &mut store,
            &mut rng,
            IMAGE,
            c.image_len,
            &c.image_hidden,
            c.embedding_size,
            Act::Leaky,
            image_out,
        );
        let discriminator = build_net(
            &mut store,
            &mut rng,
            DISCRIMINATOR,
            c.embedding_size,
            &c.discriminator_hidden,
            1,
            Act::Leaky,
            Act::Sigmoid,
        );
        if c.discriminator_zero_head {
            store
                .get_mut(discriminator.head.weight)
                .data_mut()
                .fill(R::zero());
        }
        let classifier = linear(
            &mut store,
            &mut rng,
            "classifier.fc",
            c.embedding_size,
            c.num_train_ids,
        );
        Ok(Self {
            config,
            store,
            generator,
            image,
            discriminator,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<R> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.store
    }

    /// Trainable parameters whose name starts with `prefix`.
    pub fn params(&self, prefix: &str) -> Vec<ParamId> {
        self.store.params_with_prefix(prefix)
    }

    fn act(&self, tape: &mut Tape<R>, x: Var, act: Act) -> Result<Var, AutogradError> {
        match act {
            Act::Relu => tape.relu(x),
            Act::Leaky => tape.leaky_relu(x, R::lit(self.config.leaky_slope)),
            Act::Tanh => tape.tanh(x),
            Act::Sigmoid => tape.sigmoid(x),
            Act::Identity => Ok(x),
        }
    }

    fn bind(&self, tape: &mut Tape<R>, id: ParamId, bind: Bind) -> Var {
        match bind {
            Bind::Trainable => tape.param(&self.store, id),
            Bind::Frozen => tape.param_frozen(&self.store, id),
        }
    }

    fn dense(
        &self,
        tape: &mut Tape<R>,
        fc: &Linear,
        x: Var,
        bind: Bind,
    ) -> Result<Var, AutogradError> {
        let w = self.bind(tape, fc.weight, bind);
        let b = self.bind(tape, fc.bias, bind);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn run(
        &self,
        net: &Net,
        tape: &mut Tape<R>,
        x: Var,
        mode: Mode,
        bind: Bind,
        updates: &mut Vec<StatUpdate<R>>,
    ) -> Result<Var, AutogradError> {
        let eps = R::lit(self.config.bn_eps);
        let mut h = x;
        for (fc, bn) in &net.blocks {
            h = self.dense(tape, fc, h, bind)?;
            let g = self.bind(tape, bn.gamma, bind);
            let b = self.bind(tape, bn.beta, bind);
            h = match mode {
                Mode::Eval => {
                    let (m, v) = (
                        self.store.get(bn.running_mean),
                        self.store.get(bn.running_var),
                    );
                    tape.batch_norm_eval(h, g, b, m.data(), v.data(), eps)?
                }
                Mode::Train | Mode::TrainFrozenStats => {
                    let (y, stats) = tape.batch_norm_train(h, g, b, eps)?;
                    if mode == Mode::Train {
                        updates.push(StatUpdate {
                            bn: bn.clone(),
                            stats,
                        });
                    }
                    y
                }
            };
            h = self.act(tape, h, net.hidden_act)?;
        }
        h = self.dense(tape, &net.head, h, bind)?;
        self.act(tape, h, net.out_act)
    }

    fn commit(&mut self, updates: Vec<StatUpdate<R>>) {
        let m = R::lit(self.config.bn_momentum);
        for u in updates {
            let blend = |buf: &mut [R], batch: &[R]| {
                for (r, &b) in buf.iter_mut().zip(batch) {
                    *r = (R::one() - m) * *r + m * b;
                }
            };
            blend(
                self.store.get_mut(u.bn.running_mean).data_mut(),
                &u.stats.mean,
            );
            blend(
                self.store.get_mut(u.bn.running_var).data_mut(),
                &u.stats.var_unbiased,
            );
        }
    }

    fn forward(
        &mut self,
        which: Which,
        tape: &mut Tape<R>,
        x: Var,
        mode: Mode,
        bind: Bind,
    ) -> Result<Var, AutogradError> {
        let expected = match which {
            Which::Generator => self.config.attribute_size,
            Which::Image => self.config.image_len,
            Which::Discriminator => self.config.embedding_size,
        };
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != expected {
            return Err(AutogradError::ShapeMismatch {
                op: which.op(),
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), expected],
            });
        }
        let net = match which {
            Which::Generator => &self.generator,
            Which::Image => &self.image,
            Which::Discriminator => &self.discriminator,
        };
        let mut updates = Vec::new();
        let y = self.run(net, tape, x, mode, bind, &mut updates)?;
        self.commit(updates);
        Ok(y)
    }

    /// Attribute concepts `C^A`, `[n, attribute_size] -> [n, embedding_size]`.
    pub fn forward_generator(
        &mut self,
        tape: &mut Tape<R>,
        attrs: Var,
        mode: Mode,
        bind: Bind,
    ) -> Result<Var, AutogradError> {
        self.forward(Which::Generator, tape, attrs, mode, bind)
    }

    /// Image concepts `C^I`, `[n, image_len] -> [n, embedding_size]`.
    pub fn forward_image(
        &mut self,
        tape: &mut Tape<R>,
        images: Var,
        mode: Mode,
        bind: Bind,
    ) -> Result<Var, AutogradError> {
        self.forward(Which::Image, tape, images, mode, bind)
    }

    /// Probability that each concept is an image concept, `[n, 1]`.
    pub fn forward_discriminator(
        &mut self,
        tape: &mut Tape<R>,
        concepts: Var,
        mode: Mode,
        bind: Bind,
    ) -> Result<Var, AutogradError> {
        self.forward(Which::Discriminator, tape, concepts, mode, bind)
    }

    /// Semantic-id logits `[n, num_train_ids]`.
    pub fn forward_classifier(
        &self,
        tape: &mut Tape<R>,
        concepts: Var,
        bind: Bind,
    ) -> Result<Var, AutogradError> {
        let shape = tape.shape(concepts);
        if shape.len() != 2 || shape[1] != self.config.embedding_size {
            return Err(AutogradError::ShapeMismatch {
                op: "classifier",
                lhs: shape.to_vec(),
                rhs: vec![
                    shape.first().copied().unwrap_or(0),
                    self.config.embedding_size,
                ],
            });
        }
        self.dense(tape, &self.classifier, concepts, bind)
    }

    fn eval_net(&self, which: Which, input: Tensor<R>) -> Result<Tensor<R>, AutogradError> {
        let mut tape = Tape::new();
        let x = tape.constant(input)?;
        let net = match which {
            Which::Generator => &self.generator,
            Which::Image => &self.image,
            Which::Discriminator => &self.discriminator,
        };
        let mut none = Vec::new();
        let y = self.run(net, &mut tape, x, Mode::Eval, Bind::Frozen, &mut none)?;
        Ok(tape.value(y).clone())
    }

    /// Eval-mode attribute concepts without recording gradients.
    pub fn embed_attributes(&self, attrs: Tensor<R>) -> Result<Tensor<R>, AutogradError> {
        self.check_width("generator", &attrs, self.config.attribute_size)?;
        self.eval_net(Which::Generator, attrs)
    }

    /// Eval-mode image concepts without recording gradients.
    pub fn embed_images(&self, images: Tensor<R>) -> Result<Tensor<R>, AutogradError> {
        self.check_width("image", &images, self.config.image_len)?;
        self.eval_net(Which::Image, images)
    }

    fn check_width(
        &self,
        op: &'static str,
        t: &Tensor<R>,
        want: usize,
    ) -> Result<(), AutogradError> {
        match t.dims2() {
            Some((_, w)) if w == want => Ok(()),
            _ => Err(AutogradError::ShapeMismatch {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![t.shape()[0], want],
            }),
        }
    }

    /// Every store entry as an f32 record, with the config under `metadata.model`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({ "model": self.config }));
        for e in self.store.entries() {
            ck.push(
                e.name.clone(),
                e.tensor.shape(),
                e.tensor.data().iter().map(|x| x.as_f64() as f32).collect(),
            );
        }
        ck
    }

    /// Rebuilds a model from [`to_checkpoint`](Self::to_checkpoint) output; every entry must be present.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let config: ModelConfig = serde_json::from_value(
            ck.metadata
                .get("model")
                .cloned()
                .ok_or_else(|| CheckpointError::MissingRecord("metadata.model".into()))?,
        )?;
        let mut model =
            Self::new(config, 0).map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
        model.load_weights(ck)?;
        Ok(model)
    }

    /// Overwrites every store entry from `ck`, checking names and shapes.
    pub fn load_weights(&mut self, ck: &Checkpoint) -> Result<(), CheckpointError> {
        let names: Vec<String> = self
            .store
            .entries()
            .iter()
            .map(|e| e.name.clone())
            .collect();
        for name in names {
            let rec = ck.require(&name)?;
            let data = rec.data.iter().map(|&x| R::lit(x as f64)).collect();
            self.store
                .load_value(&name, &rec.shape, data)
                .map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
        }
        Ok(())
    }

    /// Names of batchnorm running-statistic buffers.
    pub fn buffer_names(&self) -> Vec<&str> {
        self.store
            .entries()
            .iter()
            .filter(|e| e.kind == EntryKind::Buffer)
            .map(|e| e.name.as_str())
            .collect()
    }
}

#[derive(Clone, Copy)]
enum Which {
    Generator,
    Image,
    Discriminator,
}

impl Which {
    fn op(self) -> &'static str {
        match self {
            Which::Generator => "generator",
            Which::Image => "image",
            Which::Discriminator => "discriminator",
        }
    }
}

/// Row-stacks equally sized feature vectors into `[n, d]`.
pub fn stack_rows<R: Real, T: AsRef<[f32]>>(rows: &[T]) -> Result<Tensor<R>, AutogradError> {
    let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        let r = r.as_ref();
        if r.len() != d {
            return Err(AutogradError::ShapeMismatch {
                op: "stack_rows",
                lhs: vec![d],
                rhs: vec![r.len()],
            });
        }
        data.extend(r.iter().map(|&x| R::lit(x as f64)));
    }
    Tensor::new(&[rows.len(), d], data)
}
