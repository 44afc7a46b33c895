//! Discriminator, generator and classifier objectives.
//!
//! Every loss is a batch mean. Values are computed from probabilities; the
//! matching gradients are taken with respect to the pre-activation (logits of
//! the final sigmoid/softmax), which stays finite where `1/p` would not.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probability clamp for binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;
/// Probability floor inside the logarithms of cross-entropy and KL.
pub const LOG_CLAMP: f64 = 1e-12;

fn rows<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.batch(), t.row_len())
}

/// Mean binary cross-entropy of probabilities `pred` against `target`.
pub fn bce<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "bce: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.batch() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let p = p.to_f64().unwrap().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let t = t.to_f64().unwrap();
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n)
}

/// [`bce`] against a constant target (all ones or all zeros).
pub fn bce_const<T: Scalar>(pred: &Tensor<T>, target: f64) -> Result<f64> {
    bce(pred, &Tensor::full(pred.shape(), T::lit(target)))
}

/// Gradient of [`bce_const`] with respect to the sigmoid input.
pub fn bce_const_logit_grad<T: Scalar>(pred: &Tensor<T>, target: f64) -> Tensor<T> {
    let inv_n = T::lit(1.0 / pred.batch() as f64);
    let t = T::lit(target);
    pred.map(|p| (p - t) * inv_n)
}

/// Lower clamp that lets NaN through, so a diverged network surfaces as a non-finite loss.
fn floor_log(p: f64) -> f64 {
    if p < LOG_CLAMP {
        LOG_CLAMP.ln()
    } else {
        p.ln()
    }
}

fn check_labels(labels: &[usize], n: usize, n_c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= n_c) {
        return Err(Error::Index(format!("label {bad} outside [0, {n_c})")));
    }
    Ok(())
}

/// Mean `-log p[label]`.
pub fn ce_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (n, n_c) = rows(probs);
    check_labels(labels, n, n_c)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -floor_log(probs.row(i)[l].to_f64().unwrap()))
        .sum();
    Ok(total / n as f64)
}

/// Gradient of [`ce_loss`] with respect to the softmax input.
pub fn ce_logit_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, n_c) = rows(probs);
    check_labels(labels, n, n_c)?;
    let inv_n = T::lit(1.0 / n as f64);
    let mut g = probs.map(|p| p * inv_n);
    for (i, &l) in labels.iter().enumerate() {
        g.data_mut()[i * n_c + l] -= inv_n;
    }
    Ok(g)
}

/// Mean `KL(p || uniform) = sum_i p_i log(p_i n_c)`; zero entries contribute nothing.
pub fn kl_to_uniform<T: Scalar>(probs: &Tensor<T>, n_c: usize) -> Result<f64> {
    let (n, w) = rows(probs);
    if w != n_c {
        return Err(Error::dim(format!("kl: row width {w} != n_c {n_c}")));
    }
    let nc = n_c as f64;
    let total: f64 = probs
        .data()
        .iter()
        .map(|p| {
            let p = p.to_f64().unwrap();
            if p == 0.0 {
                0.0
            } else {
                p * (floor_log(p) + nc.ln())
            }
        })
        .sum();
    Ok(total / n as f64)
}

/// Gradient of [`kl_to_uniform`] with respect to the softmax input:
/// `p_j (log p_j - sum_i p_i log p_i) / N`.
pub fn kl_logit_grad<T: Scalar>(probs: &Tensor<T>, n_c: usize) -> Result<Tensor<T>> {
    let (n, w) = rows(probs);
    if w != n_c {
        return Err(Error::dim(format!("kl: row width {w} != n_c {n_c}")));
    }
    let inv_n = 1.0 / n as f64;
    let mut g = Vec::with_capacity(probs.numel());
    for i in 0..n {
        let row: Vec<f64> = probs.row(i).iter().map(|p| p.to_f64().unwrap()).collect();
        let logs: Vec<f64> = row.iter().map(|p| p.max(LOG_CLAMP).ln()).collect();
        let ent: f64 = row.iter().zip(&logs).map(|(p, l)| p * l).sum();
        g.extend(row.iter().zip(&logs).map(|(p, l)| T::lit(p * (l - ent) * inv_n)));
    }
    Tensor::new(probs.shape().to_vec(), g)
}

/// Discriminator objective: real samples scored towards 1, generated towards 0.
pub fn loss_d<T: Scalar>(dis_real: &Tensor<T>, dis_fake: &Tensor<T>) -> Result<f64> {
    Ok(bce_const(dis_real, 1.0)? + bce_const(dis_fake, 0.0)?)
}

/// Generator objective: fool the discriminator and make the classifier uniform.
pub fn loss_g<T: Scalar>(dis_fake: &Tensor<T>, cls_fake: &Tensor<T>, n_c: usize) -> Result<f64> {
    Ok(bce_const(dis_fake, 1.0)? + kl_to_uniform(cls_fake, n_c)?)
}

/// Classifier objective: cross-entropy on real data plus uniformity on generated data.
pub fn loss_cls<T: Scalar>(
    cls_real: &Tensor<T>,
    labels: &[usize],
    cls_fake: &Tensor<T>,
    n_c: usize,
) -> Result<f64> {
    Ok(ce_loss(cls_real, labels)? + kl_to_uniform(cls_fake, n_c)?)
}

/// Mean natural-log entropy of probability rows.
pub fn mean_entropy<T: Scalar>(probs: &Tensor<T>) -> f64 {
    let n = probs.batch();
    (0..n)
        .map(|i| entropy(probs.row(i).iter().map(|p| p.to_f64().unwrap())))
        .sum::<f64>()
        / n as f64
}

pub(crate) fn entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter()
        .filter(|&v| v > 0.0)
        .map(|v| -v * v.ln())
        .sum()
}
