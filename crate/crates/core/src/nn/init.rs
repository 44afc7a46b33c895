use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::layer::LayerSpec;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default generator noise width.
pub const NOISE_DIM: usize = 100;

/// Freshly initialized weight and bias of a learnable layer.
#[derive(Debug, Clone)]
pub struct LayerInit<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Xavier (Glorot) uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
pub fn xavier_init<T: Scalar>(
    spec: &LayerSpec,
    input_shape: &[usize],
    rng: &mut impl Rng,
) -> Result<LayerInit<T>> {
    spec.output_shape(input_shape).map_err(|m| Error::spec(None, m))?;
    let Some((fan_in, fan_out)) = spec.fans(input_shape) else {
        return Err(Error::spec(
            None,
            format!("{} has no Xavier-initialized weights", spec.name()),
        ));
    };
    let shapes = spec.param_shapes(input_shape);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let w_shape = &shapes[0].1;
    let numel: usize = w_shape.iter().product();
    let data = (0..numel).map(|_| T::lit(dist.sample(rng))).collect();
    Ok(LayerInit {
        weight: Tensor::new(w_shape.clone(), data)?,
        bias: Tensor::zeros(&shapes[1].1),
    })
}

/// `batch x dim` tensor of i.i.d. standard normal entries.
pub fn sample_noise<T: Scalar>(dim: usize, batch: usize, rng: &mut impl Rng) -> Tensor<T> {
    assert!(dim >= 1 && batch >= 1, "noise extents must be positive");
    let data = (0..dim * batch)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
        .collect();
    Tensor::new(vec![batch, dim], data).expect("noise shape")
}
