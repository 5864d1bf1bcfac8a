use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::step::{concepts, discriminator_objective, generator_objective, roles, Batch};
use super::{LogRow, TrainConfig, TrainError};
use crate::autograd::{
    AdamConfig, AutogradError, Checkpoint, Gradients, Optimizer, ParamId, ParamStore, Tape, Tensor,
};
use crate::losses::{LossParts, Variant};
use crate::model::{Bind, Mode, Model, ModelConfig, CLASSIFIER, DISCRIMINATOR, GENERATOR, IMAGE};
use crate::synthdata::{mix_seed, DatasetSplit};

const INIT_STREAM: u64 = 0x1217;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Joint,
}

impl Phase {
    fn salt(self) -> u64 {
        match self {
            Phase::Pretrain => 0x5052_4554,
            Phase::Joint => 0x4a4f_494e,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        })
    }
}

/// Points inside a step at which [`Trainer::step_observed`] reports the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Both concept batches computed, before any update.
    Concepts,
    /// After each discriminator update.
    Discriminator,
    /// After the generator, image and classifier updates (or the pretraining update).
    Generator,
}

/// Loss values of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub phase: Phase,
    pub epoch: usize,
    pub batch: usize,
    pub parts: LossParts,
    pub discriminator_objective: Option<f64>,
    pub generator_objective: Option<f64>,
}

#[derive(Clone, Debug)]
struct TrainData {
    images: Vec<f32>,
    attributes: Vec<f32>,
    ids: Vec<usize>,
    image_len: usize,
    attribute_len: usize,
}

impl TrainData {
    fn new(split: &DatasetSplit) -> Self {
        let image_len = split.image_len();
        let attribute_len = split.schema.attribute_size();
        let mut images = Vec::with_capacity(split.train.len() * image_len);
        let mut attributes = Vec::with_capacity(split.train.len() * attribute_len);
        for s in &split.train {
            images.extend_from_slice(&s.image.pixels);
            attributes.extend(s.attributes.to_reals::<f32>());
        }
        let ids = split.train.iter().map(|s| s.image.semantic_id.0).collect();
        Self {
            images,
            attributes,
            ids,
            image_len,
            attribute_len,
        }
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn gather(&self, rows: &[usize]) -> Result<Batch<f32>, AutogradError> {
        let pick = |src: &[f32], w: usize| {
            rows.iter()
                .flat_map(|&i| src[i * w..(i + 1) * w].iter().copied())
                .collect()
        };
        Ok(Batch {
            images: Tensor::new(
                &[rows.len(), self.image_len],
                pick(&self.images, self.image_len),
            )?,
            attributes: Tensor::new(
                &[rows.len(), self.attribute_len],
                pick(&self.attributes, self.attribute_len),
            )?,
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
        })
    }
}

/// Running per-epoch sums of the logged terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Accum {
    batches: usize,
    l_i: f64,
    l_adv_d: f64,
    l_adv_g: f64,
    l_sc: f64,
    align: f64,
    generator: f64,
}

/// The model config implied by a split and a training config.
pub fn model_config(split: &DatasetSplit, config: &TrainConfig) -> ModelConfig {
    ModelConfig {
        attribute_size: split.schema.attribute_size(),
        image_len: split.image_len(),
        embedding_size: config.embedding_size,
        num_train_ids: split.num_train_ids(),
        image_head_tanh: config.image_head_tanh,
        discriminator_zero_head: config.discriminator_zero_head,
        ..ModelConfig::default()
    }
}

/// Owns the model, optimizer states and position of one training phase.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    phase: Phase,
    model: Model<f32>,
    groups: Vec<(&'static str, Optimizer<f32>)>,
    data: TrainData,
    epoch: usize,
    batch: usize,
    global_step: u64,
    accum: Accum,
    log: Vec<LogRow>,
}

fn group_prefixes(name: &str) -> &'static [&'static str] {
    match name {
        "pretrain" => &[IMAGE, CLASSIFIER],
        "discriminator" => &[DISCRIMINATOR],
        "generator" => &[GENERATOR],
        "image" => &[IMAGE],
        "classifier" => &[CLASSIFIER],
        _ => unreachable!("unknown group {name}"),
    }
}

fn group_names(phase: Phase, config: &TrainConfig) -> Vec<&'static str> {
    match phase {
        Phase::Pretrain => vec!["pretrain"],
        Phase::Joint => {
            let mut g = vec!["discriminator", "generator"];
            if !config.freeze_image_branch {
                g.push("image");
            }
            g.push("classifier");
            g
        }
    }
}

fn group_lr(name: &str, config: &TrainConfig) -> f64 {
    match name {
        "pretrain" => config.lr_pretrain,
        "discriminator" => config.lr_discriminator,
        "generator" => config.lr_attribute,
        _ => config.lr_image,
    }
}

/// Writes gradients for `params`, substituting zeros for parameters the loss does not reach.
fn load_grads(store: &mut ParamStore<f32>, grads: &Gradients<f32>, params: &[ParamId]) {
    for &id in params {
        let g = match grads.param(id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; store.get(id).numel()],
        };
        store.get_mut(id).grad = Some(g);
    }
}

impl Trainer {
    fn build(
        split: &DatasetSplit,
        config: TrainConfig,
        phase: Phase,
        model: Model<f32>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        split.validate()?;
        let data = TrainData::new(split);
        if data.len() < 2 {
            return Err(TrainError::Config(
                "training split needs at least 2 images".into(),
            ));
        }
        let expected = model_config(split, &config);
        if model.config() != &expected {
            return Err(TrainError::Incompatible(format!(
                "model {:?} vs expected {:?}",
                model.config(),
                expected
            )));
        }
        let groups = group_names(phase, &config)
            .into_iter()
            .map(|name| {
                let params: Vec<ParamId> = group_prefixes(name)
                    .iter()
                    .flat_map(|p| model.params(p))
                    .collect();
                let adam = AdamConfig {
                    lr: group_lr(name, &config),
                    weight_decay: config.weight_decay,
                    decay_mode: config.decay_mode,
                    ..AdamConfig::default()
                };
                (
                    name,
                    Optimizer::new(config.optimizer, adam, model.store(), &params),
                )
            })
            .collect();
        Ok(Self {
            config,
            phase,
            model,
            groups,
            data,
            epoch: 0,
            batch: 0,
            global_step: 0,
            accum: Accum::default(),
            log: Vec::new(),
        })
    }

    /// Fresh model initialized from the config seed, ready for pretraining.
    pub fn pretraining(split: &DatasetSplit, config: TrainConfig) -> Result<Self, TrainError> {
        let model = Model::new(
            model_config(split, &config),
            mix_seed(config.seed, INIT_STREAM),
        )?;
        Self::build(split, config, Phase::Pretrain, model)
    }

    /// Joint training starting from the weights in `pretrained`, with fresh optimizer moments.
    pub fn joint(
        split: &DatasetSplit,
        config: TrainConfig,
        pretrained: &Checkpoint,
    ) -> Result<Self, TrainError> {
        let model = Model::from_checkpoint(pretrained)?;
        Self::build(split, config, Phase::Joint, model)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    /// Completed epochs in this phase.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn epochs(&self) -> usize {
        match self.phase {
            Phase::Pretrain => self.config.pretrain_epochs,
            Phase::Joint => self.config.joint_epochs,
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.epochs()
    }

    /// Batches of one epoch; a trailing batch of one sample is dropped (batchnorm needs two).
    pub fn batch_order(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed ^ self.phase.salt(), epoch as u64));
        order.shuffle(&mut rng);
        order
            .chunks(self.config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    fn step_group(&mut self, name: &str, grads: &Gradients<f32>) -> Result<(), AutogradError> {
        let Some(pos) = self.groups.iter().position(|(n, _)| *n == name) else {
            return Ok(());
        };
        let params = self.groups[pos].1.params();
        load_grads(self.model.store_mut(), grads, &params);
        self.groups[pos].1.step(self.model.store_mut())
    }

    /// One optimization step on the next batch.
    pub fn step(&mut self) -> Result<StepReport, TrainError> {
        self.step_observed(|_, _| {})
    }

    /// [`step`](Self::step), calling `observe` with the model at each [`Stage`].
    pub fn step_observed(
        &mut self,
        mut observe: impl FnMut(Stage, &Model<f32>),
    ) -> Result<StepReport, TrainError> {
        if self.is_done() {
            return Err(TrainError::Config(format!(
                "{} phase already finished {} epochs",
                self.phase,
                self.epochs()
            )));
        }
        let order = self.batch_order(self.epoch);
        let (epoch, batch) = (self.epoch, self.batch);
        let rows = &order[batch];
        let report = match self.phase {
            Phase::Pretrain => self.pretrain_step(rows, &mut observe),
            Phase::Joint => self.joint_step(rows, &mut observe),
        }
        .map_err(|e| match e {
            AutogradError::NonFinite { .. } => TrainError::NonFinite {
                phase: self.phase,
                epoch,
                batch,
                source: e,
            },
            e => TrainError::Autograd(e),
        })?;
        self.record(&report);
        self.global_step += 1;
        self.batch += 1;
        if self.batch == order.len() {
            self.finish_epoch();
        }
        Ok(StepReport {
            phase: self.phase,
            epoch,
            batch,
            ..report
        })
    }

    fn pretrain_step(
        &mut self,
        rows: &[usize],
        observe: &mut dyn FnMut(Stage, &Model<f32>),
    ) -> Result<StepReport, AutogradError> {
        let batch = self.data.gather(rows)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.images)?;
        let ci = self
            .model
            .forward_image(&mut tape, x, Mode::Train, Bind::Trainable)?;
        let logits = self
            .model
            .forward_classifier(&mut tape, ci, Bind::Trainable)?;
        let l_i = crate::losses::image_concept_loss(&mut tape, logits, &batch.ids)?;
        let value = tape.value(l_i).item() as f64;
        let grads = tape.backward(l_i)?;
        self.step_group("pretrain", &grads)?;
        observe(Stage::Generator, &self.model);
        Ok(StepReport {
            phase: Phase::Pretrain,
            epoch: 0,
            batch: 0,
            parts: LossParts {
                l_i: value,
                ..LossParts::default()
            },
            discriminator_objective: None,
            generator_objective: None,
        })
    }

    fn joint_step(
        &mut self,
        rows: &[usize],
        observe: &mut dyn FnMut(Stage, &Model<f32>),
    ) -> Result<StepReport, AutogradError> {
        let variant = self.config.variant;
        let weights = self.config.weights();
        let batch = self.data.gather(rows)?;
        let (image_mode, image_bind) = if self.config.freeze_image_branch {
            (Mode::Eval, Bind::Frozen)
        } else {
            (Mode::Train, Bind::Trainable)
        };

        let mut tape = Tape::new();
        let (ci, ca) = concepts(
            &mut self.model,
            &mut tape,
            &batch,
            image_mode,
            image_bind,
            Mode::Train,
        )?;
        observe(Stage::Concepts, &self.model);

        let mut parts = LossParts::default();
        let mut d_obj = None;
        if variant.adversarial() {
            let (real, fake) = roles(variant, ci, ca);
            let (real, fake) = (tape.value(real).clone(), tape.value(fake).clone());
            for _ in 0..self.config.d_steps_per_g_step {
                let mut dt = Tape::new();
                let pass = discriminator_objective(
                    &mut self.model,
                    &mut dt,
                    &real,
                    &fake,
                    &weights,
                    Mode::Train,
                )?;
                parts.l_adv_d = dt.value(pass.l_adv_d).item() as f64;
                d_obj = Some(dt.value(pass.objective).item() as f64);
                let grads = dt.backward(pass.objective)?;
                self.step_group("discriminator", &grads)?;
                observe(Stage::Discriminator, &self.model);
            }
        }

        let pass = generator_objective(
            &mut self.model,
            &mut tape,
            ci,
            ca,
            &batch.ids,
            variant,
            &weights,
        )?;
        let val = |v| tape.value(v).item() as f64;
        parts.l_i = val(pass.l_i);
        parts.l_sc = val(pass.l_sc);
        parts.l_adv_g = pass.l_adv_g.map(val).unwrap_or(0.0);
        parts.align = pass.align.map(val).unwrap_or(0.0);
        let g_obj = val(pass.generator_objective);
        let grads = tape.backward(pass.total)?;
        for name in ["generator", "image", "classifier"] {
            self.step_group(name, &grads)?;
        }
        observe(Stage::Generator, &self.model);
        Ok(StepReport {
            phase: Phase::Joint,
            epoch: 0,
            batch: 0,
            parts,
            discriminator_objective: d_obj,
            generator_objective: Some(g_obj),
        })
    }

    fn record(&mut self, r: &StepReport) {
        let a = &mut self.accum;
        a.batches += 1;
        a.l_i += r.parts.l_i;
        a.l_adv_d += r.parts.l_adv_d;
        a.l_adv_g += r.parts.l_adv_g;
        a.l_sc += r.parts.l_sc;
        a.align += r.parts.align;
        a.generator += r.generator_objective.unwrap_or(0.0);
    }

    fn finish_epoch(&mut self) {
        let a = std::mem::take(&mut self.accum);
        let n = a.batches as f64;
        let variant = self.config.variant;
        let joint = self.phase == Phase::Joint;
        let when = |cond: bool, v: f64| (joint && cond).then_some(v / n);
        self.log.push(LogRow {
            epoch: self.epoch + 1,
            variant: if joint {
                variant.name().to_string()
            } else {
                "pretrain".to_string()
            },
            l_i: a.l_i / n,
            l_adv_d: when(variant.adversarial(), a.l_adv_d),
            l_adv_g: when(variant.adversarial(), a.l_adv_g),
            l_sc: when(true, a.l_sc),
            alignment_loss: when(matches!(variant, Variant::Mmd | Variant::Coral), a.align),
            generator_objective: when(true, a.generator),
        });
        self.epoch += 1;
        self.batch = 0;
    }

    /// Runs the remaining steps of the current epoch and returns its log row.
    pub fn run_epoch(&mut self) -> Result<&LogRow, TrainError> {
        let target = self.epoch + 1;
        while self.epoch < target {
            self.step()?;
        }
        Ok(self.log.last().expect("epoch just finished"))
    }

    /// Trains to the end of the phase, calling `on_epoch` after every epoch.
    pub fn run<F>(&mut self, mut on_epoch: F) -> Result<(), TrainError>
    where
        F: FnMut(&Trainer) -> Result<(), TrainError>,
    {
        while !self.is_done() {
            self.run_epoch()?;
            on_epoch(self)?;
        }
        Ok(())
    }

    /// Model weights, optimizer state and loop position.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        let mut steps = serde_json::Map::new();
        for (name, opt) in &self.groups {
            steps.insert(name.to_string(), json!(opt.steps()));
            for (id, slot, buf) in opt.buffers() {
                let shape = self.model.store().get(id).shape().to_vec();
                ck.push(
                    format!("optim.{name}.{}.{slot}", self.model.store().name(id)),
                    &shape,
                    buf.to_vec(),
                );
            }
        }
        ck.metadata["trainer"] = json!({
            "config": self.config,
            "phase": self.phase,
            "epoch": self.epoch,
            "batch": self.batch,
            "global_step": self.global_step,
            "optimizer_steps": steps,
            "accum": self.accum,
            "log": self.log,
        });
        ck
    }

    /// Restores a trainer saved by [`to_checkpoint`](Self::to_checkpoint).
    pub fn from_checkpoint(ck: &Checkpoint, split: &DatasetSplit) -> Result<Self, TrainError> {
        #[derive(Deserialize)]
        struct State {
            config: TrainConfig,
            phase: Phase,
            epoch: usize,
            batch: usize,
            global_step: u64,
            optimizer_steps: serde_json::Map<String, Value>,
            accum: Accum,
            log: Vec<LogRow>,
        }
        let meta =
            ck.metadata.get("trainer").cloned().ok_or_else(|| {
                TrainError::Incompatible("checkpoint has no trainer state".into())
            })?;
        let st: State =
            serde_json::from_value(meta).map_err(|e| TrainError::Incompatible(e.to_string()))?;
        let model = Model::from_checkpoint(ck)?;
        let mut t = Self::build(split, st.config, st.phase, model)?;
        for pos in 0..t.groups.len() {
            let name = t.groups[pos].0;
            let steps = st
                .optimizer_steps
                .get(name)
                .and_then(Value::as_u64)
                .ok_or_else(|| {
                    TrainError::Incompatible(format!("missing step count for optimizer {name}"))
                })?;
            let slots: Vec<(ParamId, &'static str)> = t.groups[pos]
                .1
                .buffers()
                .into_iter()
                .map(|(id, slot, _)| (id, slot))
                .collect();
            for (id, slot) in slots {
                let key = format!("optim.{name}.{}.{slot}", t.model.store().name(id));
                let rec = ck.require(&key)?;
                let buf = t.groups[pos]
                    .1
                    .buffer_mut(id, slot)
                    .expect("slot listed by buffers()");
                if rec.data.len() != buf.len() {
                    return Err(TrainError::Incompatible(format!(
                        "{key} has {} values, expected {}",
                        rec.data.len(),
                        buf.len()
                    )));
                }
                buf.copy_from_slice(&rec.data);
            }
            t.groups[pos].1.set_steps(steps);
        }
        t.epoch = st.epoch;
        t.batch = st.batch;
        t.global_step = st.global_step;
        t.accum = st.accum;
        t.log = st.log;
        Ok(t)
    }
}

/// Pretrains the image branch and classifier on semantic ids.
pub fn pretrain(split: &DatasetSplit, config: &TrainConfig) -> Result<Trainer, TrainError> {
    let mut t = Trainer::pretraining(split, config.clone())?;
    t.run(|_| Ok(()))?;
    Ok(t)
}

/// Joint training from a pretrained checkpoint.
pub fn train_joint(
    split: &DatasetSplit,
    config: &TrainConfig,
    pretrained: &Checkpoint,
) -> Result<Trainer, TrainError> {
    let mut t = Trainer::joint(split, config.clone(), pretrained)?;
    t.run(|_| Ok(()))?;
    Ok(t)
}
