//! Confidence scores over classifier outputs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gamma::chi2_sf;
use super::stats::{cosine_score, mahalanobis, ClassConditionalStats};
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::tensor::{Scalar, Tensor};
use crate::train::argmax;

pub const DEFAULT_MC_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Softmax,
    Cossim,
    Chi2,
    Mi,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 4] = [ScoreKind::Softmax, ScoreKind::Cossim, ScoreKind::Chi2, ScoreKind::Mi];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Softmax => "softmax",
            ScoreKind::Cossim => "cossim",
            ScoreKind::Chi2 => "chi2",
            ScoreKind::Mi => "mi",
        }
    }

    /// True for uncertainty scores, where larger means more likely out-of-distribution.
    pub fn high_is_out(self) -> bool {
        self == ScoreKind::Mi
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown score kind `{s}` (expected softmax, cossim, chi2 or mi)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub kind: ScoreKind,
    pub q: f64,
    pub class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_m: Option<f64>,
}

/// `1 - CDF` of chi-square with `dof` degrees of freedom at `d_m^2`.
pub fn chi2_confidence(d_m: f64, dof: usize) -> Result<f64> {
    if !(d_m >= 0.0) {
        return Err(Error::Domain(format!("Mahalanobis distance must be non-negative, got {d_m}")));
    }
    Ok(chi2_sf(d_m * d_m, dof)?.clamp(0.0, 1.0))
}

/// Largest probability and its class (ties: lowest index).
pub fn softmax_score(probs: &[f64]) -> (f64, usize) {
    let c = argmax(probs);
    (probs[c], c)
}

/// Mutual information between prediction and dropout masks, one value per input row.
///
/// Uses `T` passes in mc-dropout mode: `H(mean p) - mean H(p_t)`.
pub fn mc_dropout_mi<T: Scalar>(model: &Model<T>, input: &Tensor<T>, passes: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !model.spec().has_dropout() {
        return Err(Error::InvalidModel("mc-dropout needs at least one dropout layer".into()));
    }
    if passes < 2 {
        return Err(Error::Domain(format!("mc-dropout needs at least 2 passes, got {passes}")));
    }
    let n = input.batch();
    let k = model.output_shape().iter().product::<usize>();
    let mut probs = Vec::with_capacity(passes);
    let mut mean = vec![0.0; n * k];
    for _ in 0..passes {
        let p = model.forward(input, Mode::McDropout, rng)?.output().to_f64_vec();
        mean.iter_mut().zip(&p).for_each(|(m, v)| *m += v);
        probs.push(p);
    }
    let t = passes as f64;
    mean.iter_mut().for_each(|m| *m /= t);
    let max = (k as f64).ln();
    // H(mean) - mean H(p_t) written as the mean KL(p_t || mean), which is exactly
    // zero when every pass agrees.
    Ok((0..n)
        .map(|i| {
            let row = i * k..(i + 1) * k;
            let kl: f64 = probs
                .iter()
                .map(|p| {
                    p[row.clone()]
                        .iter()
                        .zip(&mean[row.clone()])
                        .filter(|(v, _)| **v > 0.0)
                        .map(|(v, m)| v * (v.ln() - m.ln()))
                        .sum::<f64>()
                })
                .sum();
            // Rounding can push the estimate just outside [0, ln k].
            (kl / t).clamp(0.0, max)
        })
        .collect())
}

/// Inference-mode logits of `input`, computed in chunks of `chunk` rows.
pub fn classifier_logits<T: Scalar>(cls: &Model<T>, input: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
    let n = input.batch();
    let mut data = Vec::new();
    let mut width = cls.output_shape().iter().product::<usize>();
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
        let trace = cls.infer(&input.select_rows(&idx))?;
        width = trace.pre_activation().row_len();
        data.extend_from_slice(trace.pre_activation().data());
    }
    Tensor::new(vec![n, width], data)
}

/// Scores every row of `input` with one kind.
///
/// The predicted class is the argmax of the inference-mode softmax.
pub fn score_batch<T: Scalar>(
    cls: &Model<T>,
    stats: Option<&ClassConditionalStats>,
    input: &Tensor<T>,
    kind: ScoreKind,
    mc_samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ScoreRecord>> {
    let trace = cls.infer(input)?;
    let probs = trace.output();
    let logits = trace.pre_activation();
    let need_stats = || stats.ok_or_else(|| Error::State(format!("{kind} scoring needs fitted statistics")));
    let mi = match kind {
        ScoreKind::Mi => Some(mc_dropout_mi(cls, input, mc_samples, rng)?),
        _ => None,
    };
    (0..input.batch())
        .map(|i| {
            let p: Vec<f64> = probs.row(i).iter().map(|v| v.to_f64().unwrap()).collect();
            let (top, class) = softmax_score(&p);
            let x = || -> Vec<f64> { logits.row(i).iter().map(|v| v.to_f64().unwrap()).collect() };
            let (q, d_m) = match kind {
                ScoreKind::Softmax => (top, None),
                ScoreKind::Cossim => (cosine_score(&x(), need_stats()?, class)?, None),
                ScoreKind::Chi2 => {
                    let s = need_stats()?;
                    let d = mahalanobis(&x(), s, class)?;
                    (chi2_confidence(d, s.dim())?, Some(d))
                }
                ScoreKind::Mi => (mi.as_ref().unwrap()[i], None),
            };
            if !q.is_finite() {
                return Err(Error::Numerical(format!("{kind} score of row {i} is not finite")));
            }
            Ok(ScoreRecord { kind, q, class, d_m })
        })
        .collect()
}
