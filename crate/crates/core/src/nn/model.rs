//! Layer sequences with parameters: the classifier, generator and discriminator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::xavier_init;
use super::layer::{Cache, LayerCtx, LayerSpec, Mode, BATCHNORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Cls,
    Gen,
    Dis,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Cls => "cls",
            Role::Gen => "gen",
            Role::Dis => "dis",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub role: Role,
    /// Per-sample input shape, e.g. `[32, 32, 3]` or `[100]`.
    pub input_shape: Vec<usize>,
    /// Class count; required for classifiers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Per-sample shapes of every activation, input first.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::spec(None, "model has no layers"));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::spec(None, format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|m| Error::spec(Some(i), m))?;
            shapes.push(next);
        }
        let last = self.layers.len() - 1;
        let out = shapes.last().unwrap();
        match self.role {
            Role::Cls => {
                let n_c = self
                    .n_classes
                    .ok_or_else(|| Error::spec(None, "classifier needs n_classes"))?;
                if self.layers[last] != LayerSpec::Softmax {
                    return Err(Error::spec(Some(last), "classifier must end in softmax"));
                }
                if out != &[n_c] {
                    return Err(Error::spec(
                        Some(last),
                        format!("classifier output {out:?} != n_classes {n_c}"),
                    ));
                }
            }
            Role::Dis => {
                if self.layers[last] != LayerSpec::Sigmoid || out != &[1] {
                    return Err(Error::spec(
                        Some(last),
                        "discriminator must end in a single sigmoid output",
                    ));
                }
            }
            Role::Gen => {
                if self.layers[last] != LayerSpec::Sigmoid {
                    return Err(Error::spec(Some(last), "generator must end in sigmoid"));
                }
            }
        }
        Ok(shapes)
    }

    /// Closed-form learnable parameter count.
    pub fn param_count(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .flat_map(|(l, s)| l.param_shapes(s))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap())
    }

    pub fn has_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Dropout { .. }))
    }
}

/// Identifies one learnable parameter of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub layer: usize,
    pub name: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    spec: ModelSpec,
    shapes: Vec<Vec<usize>>,
    /// Per layer learnable tensors, storage order from `LayerSpec::param_shapes`.
    params: Vec<Vec<Tensor<T>>>,
    buffers: Vec<Vec<Tensor<T>>>,
}

/// Activations and per-layer caches of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T: Scalar = f32> {
    mode: Mode,
    activations: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().unwrap()
    }

    /// Input to the final layer: logits for a classifier, pre-sigmoid scores otherwise.
    pub fn pre_activation(&self) -> &Tensor<T> {
        &self.activations[self.activations.len() - 2]
    }

    pub fn activations(&self) -> &[Tensor<T>] {
        &self.activations
    }
}

/// Where backward starts.
#[derive(Debug, Clone)]
pub enum OutputGrad<T: Scalar = f32> {
    /// Gradient with respect to the model output.
    Output(Tensor<T>),
    /// Gradient with respect to the input of the final activation, which is skipped.
    PreActivation(Tensor<T>),
}

#[derive(Debug, Clone)]
pub struct Backward<T: Scalar = f32> {
    /// One tensor per learnable parameter, in `Model::param_slots` order.
    pub grads: Vec<Tensor<T>>,
    pub input_grad: Tensor<T>,
}

pub fn build_model<T: Scalar>(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Model<T>> {
    Model::build(spec.clone(), rng)
}

impl<T: Scalar> Model<T> {
    pub fn build(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut buffers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let input = &shapes[i];
            let p = match layer {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::Tconv2d { .. } => {
                    let init = xavier_init(layer, input, rng).map_err(|e| match e {
                        Error::InvalidSpec { msg, .. } => Error::spec(Some(i), msg),
                        other => other,
                    })?;
                    vec![init.weight, init.bias]
                }
                LayerSpec::Batchnorm => layer
                    .param_shapes(input)
                    .into_iter()
                    .map(|(name, s)| {
                        Tensor::full(&s, if name == "gamma" { T::one() } else { T::zero() })
                    })
                    .collect(),
                _ => vec![],
            };
            let b = layer
                .buffer_shapes(input)
                .into_iter()
                .map(|(name, s)| {
                    Tensor::full(&s, if name == "running_var" { T::one() } else { T::zero() })
                })
                .collect();
            params.push(p);
            buffers.push(b);
        }
        Ok(Self {
            spec,
            shapes,
            params,
            buffers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn role(&self) -> Role {
        self.spec.role
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn param_slots(&self) -> Vec<ParamSlot> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.param_shapes(&self.shapes[i])
                    .into_iter()
                    .map(move |(name, _)| ParamSlot { layer: i, name })
            })
            .collect()
    }

    pub fn buffer_slots(&self) -> Vec<ParamSlot> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.buffer_shapes(&self.shapes[i])
                    .into_iter()
                    .map(move |(name, _)| ParamSlot { layer: i, name })
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.params.iter().flatten().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().flatten().collect()
    }

    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        self.buffers.iter().flatten().collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.buffers.iter_mut().flatten().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Same architecture and values in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |v: &Vec<Vec<Tensor<T>>>| {
            v.iter()
                .map(|l| l.iter().map(|t| t.cast()).collect())
                .collect()
        };
        Model {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }

    fn ctx(&self, i: usize) -> LayerCtx<'_, T> {
        LayerCtx {
            spec: &self.spec.layers[i],
            in_shape: &self.shapes[i],
            out_shape: &self.shapes[i + 1],
            params: &self.params[i],
            buffers: &self.buffers[i],
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let s = input.shape();
        if s.len() != self.shapes[0].len() + 1 || s[1..] != self.shapes[0][..] {
            return Err(Error::dim(format!(
                "{} expects input [N, {:?}], got {s:?}",
                self.role().as_str(),
                self.shapes[0]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<T>, mode: Mode, rng: &mut impl Rng) -> Result<Trace<T>> {
        self.check_input(input)?;
        let n_layers = self.spec.layers.len();
        let mut activations = Vec::with_capacity(n_layers + 1);
        let mut caches = Vec::with_capacity(n_layers);
        activations.push(input.clone());
        for i in 0..n_layers {
            let (y, cache) = self.ctx(i).forward(&activations[i], mode, rng);
            activations.push(y);
            caches.push(cache);
        }
        Ok(Trace {
            mode,
            activations,
            caches,
        })
    }

    /// Forward pass without dropout; returns the model output.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Trace<T>> {
        // Infer mode draws no random numbers; any generator will do.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        self.forward(input, Mode::Infer, &mut rng)
    }

    /// Reverse-mode gradients of a train-mode trace. Does not touch the model.
    pub fn backward(&self, trace: &Trace<T>, seed: OutputGrad<T>) -> Result<Backward<T>> {
        if trace.mode != Mode::Train {
            return Err(Error::State(format!(
                "backward needs a train-mode trace, got {:?}",
                trace.mode
            )));
        }
        if trace.activations.len() != self.spec.layers.len() + 1 {
            return Err(Error::State("trace does not belong to this model".into()));
        }
        let n_layers = self.spec.layers.len();
        let (mut grad, top) = match seed {
            OutputGrad::Output(g) => (g, n_layers),
            OutputGrad::PreActivation(g) => {
                if !matches!(
                    self.spec.layers[n_layers - 1],
                    LayerSpec::Sigmoid | LayerSpec::Softmax
                ) {
                    return Err(Error::State("final layer is not an activation".into()));
                }
                (g, n_layers - 1)
            }
        };
        if grad.shape() != trace.activations[top].shape() {
            return Err(Error::dim(format!(
                "upstream gradient {:?} does not match activation {:?}",
                grad.shape(),
                trace.activations[top].shape()
            )));
        }
        let mut per_layer: Vec<Vec<Tensor<T>>> = vec![vec![]; n_layers];
        for i in (0..n_layers).rev() {
            if i >= top {
                // Skipped final activation still owns no parameters.
                continue;
            }
            let (pg, dx) = self.ctx(i).backward(
                &trace.activations[i],
                &trace.activations[i + 1],
                &trace.caches[i],
                &grad,
            );
            per_layer[i] = pg;
            grad = dx;
        }
        Ok(Backward {
            grads: per_layer.into_iter().flatten().collect(),
            input_grad: grad,
        })
    }

    /// Folds the batch statistics of a train-mode trace into the running averages.
    pub fn update_running_stats(&mut self, trace: &Trace<T>) -> Result<()> {
        if trace.mode != Mode::Train || trace.caches.len() != self.spec.layers.len() {
            return Err(Error::State("running stats need a train-mode trace of this model".into()));
        }
        let m = BATCHNORM_MOMENTUM;
        for (bufs, cache) in self.buffers.iter_mut().zip(&trace.caches) {
            if let Cache::BatchNorm { mean, var, .. } = cache {
                let (rm, rv) = bufs.split_at_mut(1);
                for (r, &b) in rm[0].data_mut().iter_mut().zip(mean) {
                    *r = T::lit(m * r.to_f64().unwrap() + (1.0 - m) * b);
                }
                for (r, &b) in rv[0].data_mut().iter_mut().zip(var) {
                    *r = T::lit(m * r.to_f64().unwrap() + (1.0 - m) * b);
                }
            }
        }
        Ok(())
    }

    /// Adds `grads` into each parameter's gradient buffer.
    pub fn accumulate_grads(&mut self, grads: &[Tensor<T>]) -> Result<()> {
        let params = self.params_mut();
        if params.len() != grads.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.into_iter().zip(grads) {
            p.accumulate_grad(g)?;
        }
        Ok(())
    }
}
