//! Joint GAN/classifier training and the plain cross-entropy baseline.
//!
//! Each joint iteration draws one noise batch and runs three updates in
//! order: discriminator, generator, classifier. Generated samples are
//! recomputed from the current generator weights at every step.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    bce_const, bce_const_logit_grad, ce_logit_grad, ce_loss, kl_logit_grad, kl_to_uniform,
};
use crate::nn::{
    sample_noise, AdamConfig, AdamState, Mode, Model, ModelSpec, OutputGrad, Role, TrainSchedule,
    NOISE_DIM,
};
use crate::tensor::{Scalar, Tensor};

/// Inputs in `[0, 1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<T: Scalar = f32> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl<T: Scalar> LabeledBatch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.len() != inputs.batch() {
            return Err(Error::dim(format!(
                "{} labels for {} samples",
                labels.len(),
                inputs.batch()
            )));
        }
        if let Some(pos) = inputs
            .data()
            .iter()
            .position(|v| !(*v >= T::zero() && *v <= T::one()))
        {
            return Err(Error::Domain(format!(
                "input value {:?} at element {pos} outside [0, 1]",
                inputs.data()[pos]
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Index(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Ce,
    Joint,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Ce => "ce",
            TrainMode::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub adam: AdamConfig,
    pub noise_dim: usize,
    /// Global L2 norm bound applied to each network's gradient before its update.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: TrainSchedule::default(),
            adam: AdamConfig::default(),
            noise_dim: NOISE_DIM,
            grad_clip: None,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub lr: f64,
    pub l_d: Option<f64>,
    pub l_g: Option<f64>,
    /// Classifier loss: the joint objective or plain cross-entropy.
    pub l_cls: f64,
}

/// The three networks of a joint run; `gen`/`dis` are absent for cross-entropy runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks<T: Scalar = f32> {
    pub cls: Model<T>,
    pub gen: Option<Model<T>>,
    pub dis: Option<Model<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpecs {
    pub cls: ModelSpec,
    pub gen: ModelSpec,
    pub dis: ModelSpec,
}

impl NetworkSpecs {
    pub fn validate_for(&self, sample_shape: &[usize], n_classes: usize, noise_dim: usize) -> Result<()> {
        for (spec, role) in [(&self.cls, Role::Cls), (&self.gen, Role::Gen), (&self.dis, Role::Dis)] {
            if spec.role != role {
                return Err(Error::spec(None, format!("{} spec has role {:?}", role.as_str(), spec.role)));
            }
            spec.shapes()?;
        }
        if self.cls.input_shape != sample_shape || self.dis.input_shape != sample_shape {
            return Err(Error::spec(None, format!("cls/dis inputs must match data shape {sample_shape:?}")));
        }
        if self.gen.output_shape()? != sample_shape {
            return Err(Error::spec(None, format!("generator output must match data shape {sample_shape:?}")));
        }
        if self.gen.input_shape != [noise_dim] {
            return Err(Error::spec(None, format!("generator input must be [{noise_dim}]")));
        }
        if self.cls.n_classes != Some(n_classes) {
            return Err(Error::spec(None, format!("classifier must have {n_classes} classes")));
        }
        Ok(())
    }
}

/// Loss value with the gradients for the network being updated.
#[derive(Debug, Clone)]
pub struct LossEval<T: Scalar> {
    pub value: f64,
    pub grads: Vec<Tensor<T>>,
}

fn add_grads<T: Scalar>(mut a: Vec<Tensor<T>>, b: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    for (x, y) in a.iter_mut().zip(b) {
        x.add_assign(y)?;
    }
    Ok(a)
}

fn gen_output<T: Scalar>(gen: &Model<T>, noise: &Tensor<T>, rng: &mut impl Rng) -> Result<Tensor<T>> {
    Ok(gen.forward(noise, Mode::Train, rng)?.activations().last().unwrap().clone())
}

/// Discriminator loss and its gradient with respect to the discriminator.
pub fn discriminator_step<T: Scalar>(
    dis: &Model<T>,
    gen: &Model<T>,
    real: &Tensor<T>,
    noise: &Tensor<T>,
    rng: &mut impl Rng,
) -> Result<LossEval<T>> {
    let fake = gen_output(gen, noise, rng)?;
    let tr_real = dis.forward(real, Mode::Train, rng)?;
    let tr_fake = dis.forward(&fake, Mode::Train, rng)?;
    let value = bce_const(tr_real.output(), 1.0)? + bce_const(tr_fake.output(), 0.0)?;
    let g_real = dis.backward(&tr_real, OutputGrad::PreActivation(bce_const_logit_grad(tr_real.output(), 1.0)))?;
    let g_fake = dis.backward(&tr_fake, OutputGrad::PreActivation(bce_const_logit_grad(tr_fake.output(), 0.0)))?;
    Ok(LossEval {
        value,
        grads: add_grads(g_real.grads, &g_fake.grads)?,
    })
}

/// Generator loss and its gradient with respect to the generator.
///
/// Also returns the generator trace so callers can fold its batch statistics.
pub fn generator_step<T: Scalar>(
    gen: &Model<T>,
    dis: &Model<T>,
    cls: &Model<T>,
    noise: &Tensor<T>,
    rng: &mut impl Rng,
) -> Result<(LossEval<T>, crate::nn::Trace<T>)> {
    let n_c = cls.output_shape()[0];
    let tr_gen = gen.forward(noise, Mode::Train, rng)?;
    let fake = tr_gen.output();
    let tr_dis = dis.forward(fake, Mode::Train, rng)?;
    let tr_cls = cls.forward(fake, Mode::Train, rng)?;
    let value = bce_const(tr_dis.output(), 1.0)? + kl_to_uniform(tr_cls.output(), n_c)?;
    let through_dis = dis.backward(&tr_dis, OutputGrad::PreActivation(bce_const_logit_grad(tr_dis.output(), 1.0)))?;
    let through_cls = cls.backward(&tr_cls, OutputGrad::PreActivation(kl_logit_grad(tr_cls.output(), n_c)?))?;
    let mut d_fake = through_dis.input_grad;
    d_fake.add_assign(&through_cls.input_grad)?;
    let g = gen.backward(&tr_gen, OutputGrad::Output(d_fake))?;
    Ok((LossEval { value, grads: g.grads }, tr_gen))
}

/// Classifier loss (cross-entropy plus uniformity on generated samples) and its gradient.
///
/// With `noise = None` this is the plain cross-entropy baseline.
pub fn classifier_step<T: Scalar>(
    cls: &Model<T>,
    gen: Option<&Model<T>>,
    real: &Tensor<T>,
    labels: &[usize],
    noise: Option<&Tensor<T>>,
    rng: &mut impl Rng,
) -> Result<(LossEval<T>, Vec<crate::nn::Trace<T>>)> {
    let n_c = cls.output_shape()[0];
    let fake = match (gen, noise) {
        (Some(g), Some(n)) => Some(gen_output(g, n, rng)?),
        (None, None) => None,
        _ => return Err(Error::State("classifier step needs both generator and noise".into())),
    };
    let tr_real = cls.forward(real, Mode::Train, rng)?;
    let mut value = ce_loss(tr_real.output(), labels)?;
    let mut grads = cls
        .backward(&tr_real, OutputGrad::PreActivation(ce_logit_grad(tr_real.output(), labels)?))?
        .grads;
    let mut traces = vec![tr_real];
    if let Some(fake) = fake {
        let tr_fake = cls.forward(&fake, Mode::Train, rng)?;
        value += kl_to_uniform(tr_fake.output(), n_c)?;
        let g = cls.backward(&tr_fake, OutputGrad::PreActivation(kl_logit_grad(tr_fake.output(), n_c)?))?;
        grads = add_grads(grads, &g.grads)?;
        traces.push(tr_fake);
    }
    Ok((LossEval { value, grads }, traces))
}

fn clip<T: Scalar>(grads: &mut [Tensor<T>], max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.to_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
}

/// Points at which a joint iteration exposes the networks to observers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    AfterDis,
    AfterGen,
    AfterCls,
}

/// Complete mutable training state; serializable through a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar = f32> {
    pub mode: TrainMode,
    pub seed: u64,
    pub iteration: u64,
    pub nets: Networks<T>,
    pub adam_cls: AdamState<T>,
    pub adam_gen: Option<AdamState<T>>,
    pub adam_dis: Option<AdamState<T>>,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    /// Builds fresh networks from `specs` (cls, then gen, then dis) with the run's generator.
    pub fn init(mode: TrainMode, specs: &NetworkSpecs, adam: AdamConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cls = Model::build(specs.cls.clone(), &mut rng)?;
        let (gen, dis) = match mode {
            TrainMode::Joint => (
                Some(Model::build(specs.gen.clone(), &mut rng)?),
                Some(Model::build(specs.dis.clone(), &mut rng)?),
            ),
            TrainMode::Ce => (None, None),
        };
        Ok(Self {
            mode,
            seed,
            iteration: 0,
            adam_cls: AdamState::for_model(&cls, adam),
            adam_gen: gen.as_ref().map(|g| AdamState::for_model(g, adam)),
            adam_dis: dis.as_ref().map(|d| AdamState::for_model(d, adam)),
            nets: Networks { cls, gen, dis },
            rng,
        })
    }
}

/// Drives training over a dataset one iteration at a time.
pub struct Trainer<'d, T: Scalar = f32> {
    data: &'d LabeledBatch<T>,
    config: TrainConfig,
    state: TrainState<T>,
    log: Vec<LossRecord>,
    perm: Option<(u64, Vec<usize>)>,
}

impl<'d, T: Scalar> Trainer<'d, T> {
    pub fn new(
        data: &'d LabeledBatch<T>,
        specs: &NetworkSpecs,
        config: TrainConfig,
        mode: TrainMode,
        seed: u64,
    ) -> Result<Self> {
        match mode {
            TrainMode::Joint => specs.validate_for(data.sample_shape(), data.n_classes, config.noise_dim)?,
            TrainMode::Ce => {
                if specs.cls.input_shape != data.sample_shape() || specs.cls.n_classes != Some(data.n_classes) {
                    return Err(Error::spec(None, "classifier spec does not match the dataset"));
                }
            }
        }
        let state = TrainState::init(mode, specs, config.adam, seed)?;
        Self::resume(data, config, state)
    }

    /// Continues from a restored state.
    pub fn resume(data: &'d LabeledBatch<T>, config: TrainConfig, state: TrainState<T>) -> Result<Self> {
        config.schedule.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyInput("training set is empty".into()));
        }
        if data.len() < config.schedule.batch_size {
            return Err(Error::Config(format!(
                "{} samples cannot fill one batch of {}",
                data.len(),
                config.schedule.batch_size
            )));
        }
        Ok(Self {
            data,
            config,
            state,
            log: Vec::new(),
            perm: None,
        })
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    /// Complete batches per epoch; the incomplete tail is dropped.
    pub fn batches_per_epoch(&self) -> u64 {
        (self.data.len() / self.config.schedule.batch_size) as u64
    }

    pub fn total_iterations(&self) -> u64 {
        self.batches_per_epoch() * self.config.schedule.epochs as u64
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let bpe = self.batches_per_epoch();
        let epoch = self.state.iteration / bpe;
        let b = (self.state.iteration % bpe) as usize;
        if self.perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
            // Shuffling draws from its own stream so a resumed run sees the same order.
            let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed);
            rng.set_stream(epoch + 1);
            let mut perm: Vec<usize> = (0..self.data.len()).collect();
            perm.shuffle(&mut rng);
            self.perm = Some((epoch, perm));
        }
        let bs = self.config.schedule.batch_size;
        self.perm.as_ref().unwrap().1[b * bs..(b + 1) * bs].to_vec()
    }

    pub fn step(&mut self) -> Result<LossRecord> {
        self.step_observed(|_, _| {})
    }

    /// One iteration; `observe` sees the networks after each update of a joint iteration.
    pub fn step_observed(&mut self, mut observe: impl FnMut(Phase, &Networks<T>)) -> Result<LossRecord> {
        let idx = self.batch_indices();
        let real = self.data.inputs.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| self.data.labels[i]).collect();
        let it = self.state.iteration;
        let lr = self.config.schedule.lr_at(it);
        let clip_at = self.config.grad_clip;
        let finite = |v: f64, loss: &'static str| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Divergence { iteration: it, loss })
            }
        };
        let st = &mut self.state;
        let record = match st.mode {
            TrainMode::Ce => {
                let (mut eval, traces) = classifier_step(&st.nets.cls, None, &real, &labels, None, &mut st.rng)?;
                let l_cls = finite(eval.value, "CE")?;
                clip(&mut eval.grads, clip_at);
                st.nets.cls.accumulate_grads(&eval.grads)?;
                st.adam_cls.step_model(&mut st.nets.cls, lr)?;
                for t in &traces {
                    st.nets.cls.update_running_stats(t)?;
                }
                LossRecord { iteration: it, lr, l_d: None, l_g: None, l_cls }
            }
            TrainMode::Joint => {
                let batch = real.batch();
                let noise = sample_noise::<T>(self.config.noise_dim, batch, &mut st.rng);
                let Networks { gen, dis, .. } = &mut st.nets;
                let (gen, dis) = (gen.as_mut().unwrap(), dis.as_mut().unwrap());

                let mut d = discriminator_step(dis, gen, &real, &noise, &mut st.rng)?;
                let l_d = finite(d.value, "L_d")?;
                clip(&mut d.grads, clip_at);
                dis.accumulate_grads(&d.grads)?;
                st.adam_dis.as_mut().unwrap().step_model(dis, lr)?;
                observe(Phase::AfterDis, &st.nets);

                let Networks { cls, gen, dis } = &mut st.nets;
                let (gen, dis) = (gen.as_mut().unwrap(), dis.as_mut().unwrap());
                let (mut g, gen_trace) = generator_step(gen, dis, cls, &noise, &mut st.rng)?;
                let l_g = finite(g.value, "L_g")?;
                clip(&mut g.grads, clip_at);
                gen.accumulate_grads(&g.grads)?;
                st.adam_gen.as_mut().unwrap().step_model(gen, lr)?;
                gen.update_running_stats(&gen_trace)?;
                observe(Phase::AfterGen, &st.nets);

                let Networks { cls, gen, .. } = &mut st.nets;
                let (mut c, traces) =
                    classifier_step(cls, gen.as_ref(), &real, &labels, Some(&noise), &mut st.rng)?;
                let l_cls = finite(c.value, "L_cls")?;
                clip(&mut c.grads, clip_at);
                cls.accumulate_grads(&c.grads)?;
                st.adam_cls.step_model(cls, lr)?;
                for t in &traces {
                    cls.update_running_stats(t)?;
                }
                observe(Phase::AfterCls, &st.nets);
                LossRecord { iteration: it, lr, l_d: Some(l_d), l_g: Some(l_g), l_cls }
            }
        };
        self.state.iteration += 1;
        self.log.push(record);
        Ok(record)
    }

    /// Runs until the configured number of epochs is complete.
    pub fn run(mut self) -> Result<TrainRun<T>> {
        while self.state.iteration < self.total_iterations() {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn run_iterations(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainRun<T> {
        TrainRun {
            mode: self.state.mode,
            seed: self.state.seed,
            schedule: self.config.schedule.clone(),
            log: self.log,
            state: self.state,
        }
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun<T: Scalar = f32> {
    pub mode: TrainMode,
    pub seed: u64,
    pub schedule: TrainSchedule,
    pub log: Vec<LossRecord>,
    pub state: TrainState<T>,
}

impl<T: Scalar> TrainRun<T> {
    pub fn networks(&self) -> &Networks<T> {
        &self.state.nets
    }

    /// Training log as CSV with header `iteration,lr,L_d,L_g,L_cls` (joint) or `iteration,lr,CE`.
    pub fn log_csv(&self) -> String {
        log_csv(self.mode, &self.log)
    }
}

pub fn log_csv(mode: TrainMode, log: &[LossRecord]) -> String {
    let mut out = String::new();
    match mode {
        TrainMode::Joint => {
            out.push_str("iteration,lr,L_d,L_g,L_cls\n");
            for r in log {
                out.push_str(&format!(
                    "{},{:e},{:.9e},{:.9e},{:.9e}\n",
                    r.iteration,
                    r.lr,
                    r.l_d.unwrap_or(f64::NAN),
                    r.l_g.unwrap_or(f64::NAN),
                    r.l_cls
                ));
            }
        }
        TrainMode::Ce => {
            out.push_str("iteration,lr,CE\n");
            for r in log {
                out.push_str(&format!("{},{:e},{:.9e}\n", r.iteration, r.lr, r.l_cls));
            }
        }
    }
    out
}

pub fn train_joint<T: Scalar>(
    data: &LabeledBatch<T>,
    specs: &NetworkSpecs,
    config: TrainConfig,
    seed: u64,
) -> Result<TrainRun<T>> {
    Trainer::new(data, specs, config, TrainMode::Joint, seed)?.run()
}

pub fn train_ce<T: Scalar>(
    data: &LabeledBatch<T>,
    specs: &NetworkSpecs,
    config: TrainConfig,
    seed: u64,
) -> Result<TrainRun<T>> {
    Trainer::new(data, specs, config, TrainMode::Ce, seed)?.run()
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(probs.row(*i)) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
