//! Layer kinds and their forward/backward kernels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{col2im, conv_out, im2col, PatchGeom};
use crate::tensor::{gemm, Scalar, Tensor};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

fn default_kernel() -> usize {
    5
}
fn default_stride() -> usize {
    2
}
fn default_alpha() -> f64 {
    0.2
}
fn default_rate() -> f64 {
    0.3
}

/// Evaluation mode of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Dropout on, batchnorm uses batch statistics.
    Train,
    /// Dropout off, batchnorm uses running averages.
    Infer,
    /// Dropout on, batchnorm uses running averages.
    McDropout,
}

impl Mode {
    fn dropout_active(self) -> bool {
        matches!(self, Mode::Train | Mode::McDropout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        filters: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
    },
    Tconv2d {
        filters: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
    },
    Batchnorm,
    Dropout {
        #[serde(default = "default_rate")]
        rate: f64,
    },
    LeakyRelu {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Sigmoid,
    Softmax,
    Flatten,
    /// Per-sample reshape, e.g. from a dense layer into a feature map.
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Tconv2d { .. } => "tconv2d",
            LayerSpec::Batchnorm => "batchnorm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    /// Checks hyperparameters that do not depend on the input shape.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            LayerSpec::Dense { units } if *units == 0 => Err("dense units must be positive".into()),
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
            }
            | LayerSpec::Tconv2d {
                filters,
                kernel,
                stride,
            } => {
                if *filters == 0 || *kernel == 0 || *stride == 0 {
                    Err(format!(
                        "{}: filters, kernel and stride must be positive",
                        self.name()
                    ))
                } else {
                    Ok(())
                }
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                Err(format!("dropout rate {rate} outside [0, 1)"))
            }
            LayerSpec::LeakyRelu { alpha } if !(*alpha > 0.0) => {
                Err(format!("leaky_relu slope {alpha} must be positive"))
            }
            LayerSpec::Reshape { shape } if shape.is_empty() || shape.contains(&0) => {
                Err(format!("reshape target {shape:?} must have positive extents"))
            }
            _ => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        self.validate()?;
        let numel: usize = input.iter().product();
        match self {
            LayerSpec::Dense { units } => match input {
                [_] => Ok(vec![*units]),
                _ => Err(format!("dense expects a flat input, got {input:?}")),
            },
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
            } => {
                let [h, w, _c] = input else {
                    return Err(format!("conv2d expects HxWxC input, got {input:?}"));
                };
                let pad = (kernel - 1) / 2;
                match (
                    conv_out(*h, *kernel, *stride, pad),
                    conv_out(*w, *kernel, *stride, pad),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![oh, ow, *filters]),
                    _ => Err(format!("conv2d kernel {kernel} too large for {input:?}")),
                }
            }
            LayerSpec::Tconv2d {
                filters,
                kernel,
                stride,
            } => {
                let [h, w, _c] = input else {
                    return Err(format!("tconv2d expects HxWxC input, got {input:?}"));
                };
                let pad = (kernel - 1) / 2;
                let (oh, ow) = (h * stride, w * stride);
                // The output must map back onto the input grid under the adjoint convolution.
                if conv_out(oh, *kernel, *stride, pad) != Some(*h)
                    || conv_out(ow, *kernel, *stride, pad) != Some(*w)
                {
                    return Err(format!(
                        "tconv2d kernel {kernel} / stride {stride} inconsistent for {input:?}"
                    ));
                }
                Ok(vec![oh, ow, *filters])
            }
            LayerSpec::Flatten => Ok(vec![numel]),
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() == numel {
                    Ok(shape.clone())
                } else {
                    Err(format!("cannot reshape {input:?} into {shape:?}"))
                }
            }
            LayerSpec::Softmax if input.len() != 1 => {
                Err(format!("softmax expects a flat input, got {input:?}"))
            }
            _ => Ok(input.to_vec()),
        }
    }

    /// Learnable parameter names and shapes, in storage order.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerSpec::Dense { units } => {
                vec![("weight", vec![input[0], *units]), ("bias", vec![*units])]
            }
            LayerSpec::Conv2d {
                filters, kernel, ..
            } => vec![
                ("weight", vec![*kernel, *kernel, input[2], *filters]),
                ("bias", vec![*filters]),
            ],
            LayerSpec::Tconv2d {
                filters, kernel, ..
            } => vec![
                ("weight", vec![input[2], *kernel, *kernel, *filters]),
                ("bias", vec![*filters]),
            ],
            LayerSpec::Batchnorm => {
                let c = *input.last().unwrap();
                vec![("gamma", vec![c]), ("beta", vec![c])]
            }
            _ => vec![],
        }
    }

    /// Non-learnable state that still belongs to the model (batchnorm running averages).
    pub fn buffer_shapes(&self, input: &[usize]) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerSpec::Batchnorm => {
                let c = *input.last().unwrap();
                vec![("running_mean", vec![c]), ("running_var", vec![c])]
            }
            _ => vec![],
        }
    }

    /// `(fan_in, fan_out)` for layers whose weights are Xavier-initialized.
    pub fn fans(&self, input: &[usize]) -> Option<(usize, usize)> {
        match self {
            LayerSpec::Dense { units } => Some((input[0], *units)),
            LayerSpec::Conv2d {
                filters, kernel, ..
            }
            | LayerSpec::Tconv2d {
                filters, kernel, ..
            } => {
                let area = kernel * kernel;
                Some((area * input[2], area * filters))
            }
            _ => None,
        }
    }
}

/// Per-layer values recorded by the forward pass for use in backward.
#[derive(Debug, Clone)]
pub(crate) enum Cache<T> {
    None,
    Cols(Vec<T>),
    Mask(Vec<T>),
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

pub(crate) struct LayerCtx<'a, T> {
    pub spec: &'a LayerSpec,
    pub in_shape: &'a [usize],
    pub out_shape: &'a [usize],
    pub params: &'a [Tensor<T>],
    pub buffers: &'a [Tensor<T>],
}

impl<T: Scalar> LayerCtx<'_, T> {
    fn conv_geom(&self, batch: usize) -> PatchGeom {
        let (kernel, stride) = match self.spec {
            LayerSpec::Conv2d { kernel, stride, .. } | LayerSpec::Tconv2d { kernel, stride, .. } => {
                (*kernel, *stride)
            }
            _ => unreachable!(),
        };
        // The image side is the larger map: input for conv, output for tconv.
        let (img, grid) = match self.spec {
            LayerSpec::Conv2d { .. } => (self.in_shape, self.out_shape),
            _ => (self.out_shape, self.in_shape),
        };
        let channels = match self.spec {
            LayerSpec::Conv2d { .. } => img[2],
            _ => self.out_shape[2],
        };
        PatchGeom {
            batch,
            img_h: img[0],
            img_w: img[1],
            channels,
            grid_h: grid[0],
            grid_w: grid[1],
            kernel,
            stride,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode, rng: &mut impl Rng) -> (Tensor<T>, Cache<T>) {
        let n = x.batch();
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(self.out_shape);
        let make = |data: Vec<T>| Tensor::new(out_shape.clone(), data).expect("layer output shape");
        match self.spec {
            LayerSpec::Dense { units } => {
                let fan_in = self.in_shape[0];
                let (w, b) = (&self.params[0], &self.params[1]);
                let mut y = Vec::with_capacity(n * units);
                for _ in 0..n {
                    y.extend_from_slice(b.data());
                }
                gemm(n, fan_in, *units, x.data(), false, w.data(), false, &mut y, true);
                (make(y), Cache::None)
            }
            LayerSpec::Conv2d { filters, .. } => {
                let geom = self.conv_geom(n);
                let cols = im2col(x.data(), &geom);
                let rows = geom.rows();
                let bias = self.params[1].data();
                let mut y = Vec::with_capacity(rows * filters);
                for _ in 0..rows {
                    y.extend_from_slice(bias);
                }
                gemm(rows, geom.cols(), *filters, &cols, false, self.params[0].data(), false, &mut y, true);
                (make(y), Cache::Cols(cols))
            }
            LayerSpec::Tconv2d { filters, .. } => {
                let geom = self.conv_geom(n);
                let cin = self.in_shape[2];
                let mut cols = vec![T::zero(); geom.rows() * geom.cols()];
                gemm(geom.rows(), cin, geom.cols(), x.data(), false, self.params[0].data(), false, &mut cols, false);
                let mut y = col2im(&cols, &geom);
                let bias = self.params[1].data();
                for px in y.chunks_mut(*filters) {
                    px.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
                }
                (make(y), Cache::None)
            }
            LayerSpec::Batchnorm => self.batchnorm_forward(x, mode, make),
            LayerSpec::Dropout { rate } => {
                if !mode.dropout_active() {
                    return (x.clone().reshape(out_shape).unwrap(), Cache::None);
                }
                let scale = T::lit(1.0 / (1.0 - rate));
                let mask: Vec<T> = (0..x.numel())
                    .map(|_| if rng.random::<f64>() < *rate { T::zero() } else { scale })
                    .collect();
                let y = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                (make(y), Cache::Mask(mask))
            }
            LayerSpec::LeakyRelu { alpha } => {
                let a = T::lit(*alpha);
                (x.map(|v| if v > T::zero() { v } else { a * v }), Cache::None)
            }
            LayerSpec::Sigmoid => (x.map(sigmoid), Cache::None),
            LayerSpec::Softmax => {
                let w = self.in_shape[0];
                let mut y = x.data().to_vec();
                y.chunks_mut(w).for_each(softmax_in_place);
                (make(y), Cache::None)
            }
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                (x.clone().reshape(out_shape).unwrap(), Cache::None)
            }
        }
    }

    fn batchnorm_forward(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        make: impl Fn(Vec<T>) -> Tensor<T>,
    ) -> (Tensor<T>, Cache<T>) {
        let c = *self.in_shape.last().unwrap();
        let (gamma, beta) = (self.params[0].data(), self.params[1].data());
        let data = x.data();
        if mode != Mode::Train {
            let (rm, rv) = (self.buffers[0].data(), self.buffers[1].data());
            let eps = T::lit(BATCHNORM_EPS);
            let scale: Vec<T> = (0..c).map(|j| gamma[j] / (rv[j] + eps).sqrt()).collect();
            let mut y = data.to_vec();
            for px in y.chunks_mut(c) {
                for j in 0..c {
                    px[j] = (px[j] - rm[j]) * scale[j] + beta[j];
                }
            }
            return (make(y), Cache::None);
        }
        let m = (data.len() / c) as f64;
        let mut mean = vec![0.0f64; c];
        for px in data.chunks(c) {
            px.iter().zip(&mut mean).for_each(|(v, s)| *s += v.to_f64().unwrap());
        }
        mean.iter_mut().for_each(|s| *s /= m);
        let mut var = vec![0.0f64; c];
        for px in data.chunks(c) {
            for j in 0..c {
                let d = px[j].to_f64().unwrap() - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= m);
        let inv_std: Vec<T> = var.iter().map(|v| T::lit(1.0 / (v + BATCHNORM_EPS).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::lit(v)).collect();
        let mut xhat = data.to_vec();
        for px in xhat.chunks_mut(c) {
            for j in 0..c {
                px[j] = (px[j] - mean_t[j]) * inv_std[j];
            }
        }
        let mut y = xhat.clone();
        for px in y.chunks_mut(c) {
            for j in 0..c {
                px[j] = px[j] * gamma[j] + beta[j];
            }
        }
        (
            make(y),
            Cache::BatchNorm {
                xhat,
                inv_std,
                mean,
                var,
            },
        )
    }

    /// Returns parameter gradients (storage order) and the input gradient.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        cache: &Cache<T>,
        dy: &Tensor<T>,
    ) -> (Vec<Tensor<T>>, Tensor<T>) {
        let n = x.batch();
        let in_full = x.shape().to_vec();
        let make_dx = |data: Vec<T>| Tensor::new(in_full.clone(), data).expect("input grad shape");
        match self.spec {
            LayerSpec::Dense { units } => {
                let fan_in = self.in_shape[0];
                let w = &self.params[0];
                let mut dw = vec![T::zero(); fan_in * units];
                gemm(fan_in, n, *units, x.data(), true, dy.data(), false, &mut dw, false);
                let db = column_sums(dy.data(), *units);
                let mut dx = vec![T::zero(); n * fan_in];
                gemm(n, *units, fan_in, dy.data(), false, w.data(), true, &mut dx, false);
                (
                    vec![
                        Tensor::new(w.shape().to_vec(), dw).unwrap(),
                        Tensor::new(vec![*units], db).unwrap(),
                    ],
                    make_dx(dx),
                )
            }
            LayerSpec::Conv2d { filters, .. } => {
                let Cache::Cols(cols) = cache else {
                    unreachable!("conv2d trace without patch matrix")
                };
                let geom = self.conv_geom(n);
                let (rows, k) = (geom.rows(), geom.cols());
                let w = &self.params[0];
                let mut dw = vec![T::zero(); k * filters];
                gemm(k, rows, *filters, cols, true, dy.data(), false, &mut dw, false);
                let db = column_sums(dy.data(), *filters);
                let mut dcols = vec![T::zero(); rows * k];
                gemm(rows, *filters, k, dy.data(), false, w.data(), true, &mut dcols, false);
                (
                    vec![
                        Tensor::new(w.shape().to_vec(), dw).unwrap(),
                        Tensor::new(vec![*filters], db).unwrap(),
                    ],
                    make_dx(col2im(&dcols, &geom)),
                )
            }
            LayerSpec::Tconv2d { filters, .. } => {
                let geom = self.conv_geom(n);
                let cin = self.in_shape[2];
                let (rows, k) = (geom.rows(), geom.cols());
                let w = &self.params[0];
                let dcols = im2col(dy.data(), &geom);
                let mut dw = vec![T::zero(); cin * k];
                gemm(cin, rows, k, x.data(), true, &dcols, false, &mut dw, false);
                let db = column_sums(dy.data(), *filters);
                let mut dx = vec![T::zero(); rows * cin];
                gemm(rows, k, cin, &dcols, false, w.data(), true, &mut dx, false);
                (
                    vec![
                        Tensor::new(w.shape().to_vec(), dw).unwrap(),
                        Tensor::new(vec![*filters], db).unwrap(),
                    ],
                    make_dx(dx),
                )
            }
            LayerSpec::Batchnorm => {
                let Cache::BatchNorm { xhat, inv_std, .. } = cache else {
                    unreachable!("batchnorm trace without batch statistics")
                };
                let c = *self.in_shape.last().unwrap();
                let gamma = self.params[0].data();
                let m = (x.numel() / c) as f64;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for (g, xh) in dy.data().chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        let gj = g[j].to_f64().unwrap();
                        sum_dy[j] += gj;
                        sum_dy_xhat[j] += gj * xh[j].to_f64().unwrap();
                    }
                }
                let mut dx = vec![T::zero(); x.numel()];
                let coef: Vec<T> = (0..c).map(|j| gamma[j] * inv_std[j] / T::lit(m)).collect();
                let sum_dy_t: Vec<T> = sum_dy.iter().map(|&s| T::lit(s)).collect();
                let sum_dyx_t: Vec<T> = sum_dy_xhat.iter().map(|&s| T::lit(s)).collect();
                let mt = T::lit(m);
                for ((d, g), xh) in dx.chunks_mut(c).zip(dy.data().chunks(c)).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        d[j] = coef[j] * (mt * g[j] - sum_dy_t[j] - xh[j] * sum_dyx_t[j]);
                    }
                }
                (
                    vec![
                        Tensor::new(vec![c], sum_dyx_t).unwrap(),
                        Tensor::new(vec![c], sum_dy_t).unwrap(),
                    ],
                    make_dx(dx),
                )
            }
            LayerSpec::Dropout { .. } => {
                let dx = match cache {
                    Cache::Mask(mask) => dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                    _ => dy.data().to_vec(),
                };
                (vec![], make_dx(dx))
            }
            LayerSpec::LeakyRelu { alpha } => {
                let a = T::lit(*alpha);
                let dx = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { a * g })
                    .collect();
                (vec![], make_dx(dx))
            }
            LayerSpec::Sigmoid => {
                let dx = y
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                (vec![], make_dx(dx))
            }
            LayerSpec::Softmax => {
                let w = self.in_shape[0];
                let mut dx = vec![T::zero(); x.numel()];
                for ((d, p), g) in dx.chunks_mut(w).zip(y.data().chunks(w)).zip(dy.data().chunks(w)) {
                    let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    for j in 0..w {
                        d[j] = p[j] * (g[j] - dot);
                    }
                }
                (vec![], make_dx(dx))
            }
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                (vec![], make_dx(dy.data().to_vec()))
            }
        }
    }
}

fn column_sums<T: Scalar>(m: &[T], width: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; width];
    for row in m.chunks(width) {
        row.iter().zip(&mut acc).for_each(|(v, a)| *a += v.to_f64().unwrap());
    }
    acc.into_iter().map(T::lit).collect()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}
