//! Per-class Gaussian statistics over classifier logits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use nalgebra::{DMatrix, DVector};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Diagonal loading added to each class covariance before factorization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum Shrinkage {
    /// `value * trace(cov) / k`.
    Relative(f64),
    /// A fixed `value`.
    Absolute(f64),
}

impl Default for Shrinkage {
    fn default() -> Self {
        Shrinkage::Relative(1e-5)
    }
}

impl Shrinkage {
    fn ridge(&self, cov: &[f64], k: usize) -> f64 {
        match *self {
            Shrinkage::Relative(r) => r * (0..k).map(|i| cov[i * k + i]).sum::<f64>() / k as f64,
            Shrinkage::Absolute(e) => e,
        }
    }

    fn value(&self) -> f64 {
        match *self {
            Shrinkage::Relative(v) | Shrinkage::Absolute(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Biased (`1/N_c`) covariance, row-major `k x k`.
    pub cov: Vec<f64>,
    /// Diagonal loading applied before factorization.
    pub ridge: f64,
    chol: DMatrix<f64>,
}

impl ClassStats {
    fn new(count: usize, mean: Vec<f64>, cov: Vec<f64>, ridge: f64) -> Result<Self> {
        let k = mean.len();
        let reg = DMatrix::from_row_slice(k, k, &cov) + DMatrix::identity(k, k) * ridge;
        let chol = reg
            .cholesky()
            .map(|c| c.unpack())
            .filter(|l| l.diagonal().iter().all(|&d| d > 0.0 && d.is_finite()))
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        Ok(Self {
            count,
            mean,
            cov,
            ridge,
            chol,
        })
    }

    /// Lower Cholesky factor of `cov + ridge * I`.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }
}

/// Class-conditional Gaussians fitted on in-distribution logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassConditionalStats {
    dim: usize,
    shrinkage: Shrinkage,
    classes: BTreeMap<usize, ClassStats>,
}

/// Fits per-class mean and biased covariance of `logits` (`N x k`).
pub fn fit_class_stats<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    shrinkage: Shrinkage,
) -> Result<ClassConditionalStats> {
    let k = logits.row_len();
    if labels.len() != logits.batch() {
        return Err(Error::dim(format!("{} labels for {} logit rows", labels.len(), logits.batch())));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let mut classes = BTreeMap::new();
    for (class, rows) in groups {
        let n = rows.len();
        if n < 2 {
            return Err(Error::InsufficientData { class, count: n });
        }
        let mut mean = vec![0.0; k];
        for &r in &rows {
            for (m, v) in mean.iter_mut().zip(logits.row(r)) {
                *m += v.to_f64().unwrap();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; k * k];
        for &r in &rows {
            let d: Vec<f64> = logits.row(r).iter().zip(&mean).map(|(v, m)| v.to_f64().unwrap() - m).collect();
            for i in 0..k {
                for j in 0..k {
                    cov[i * k + j] += d[i] * d[j];
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= n as f64);
        let ridge = shrinkage.ridge(&cov, k);
        let stats = ClassStats::new(n, mean, cov, ridge).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("class {class}: {m}")),
            other => other,
        })?;
        classes.insert(class, stats);
    }
    Ok(ClassConditionalStats { dim: k, shrinkage, classes })
}

fn round9(v: f64) -> f64 {
    format!("{v:.8e}").parse().unwrap()
}

impl ClassConditionalStats {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shrinkage(&self) -> Shrinkage {
        self.shrinkage
    }

    pub fn class(&self, c: usize) -> Result<&ClassStats> {
        self.classes
            .get(&c)
            .ok_or_else(|| Error::Index(format!("no statistics for class {c}")))
    }

    pub fn classes(&self) -> impl Iterator<Item = (usize, &ClassStats)> {
        self.classes.iter().map(|(&c, s)| (c, s))
    }

    /// Document `{class_id: {mean, cov, count, ridge}, epsilon, epsilon_mode, dof}`.
    ///
    /// Numbers carry 9 significant digits.
    pub fn to_json(&self) -> String {
        let k = self.dim;
        let mut doc = Map::new();
        for (c, s) in &self.classes {
            let cov: Vec<Vec<f64>> = s.cov.chunks(k).map(|r| r.iter().map(|&v| round9(v)).collect()).collect();
            doc.insert(
                c.to_string(),
                json!({
                    "mean": s.mean.iter().map(|&v| round9(v)).collect::<Vec<_>>(),
                    "cov": cov,
                    "count": s.count,
                    "ridge": round9(s.ridge),
                }),
            );
        }
        let mode = match self.shrinkage {
            Shrinkage::Relative(_) => "relative",
            Shrinkage::Absolute(_) => "absolute",
        };
        doc.insert("epsilon".into(), json!(round9(self.shrinkage.value())));
        doc.insert("epsilon_mode".into(), json!(mode));
        doc.insert("dof".into(), json!(k));
        serde_json::to_string_pretty(&Value::Object(doc)).unwrap() + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("stats document: {m}"));
        let doc: Map<String, Value> = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let dim = doc
            .get("dof")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("missing dof".into()))? as usize;
        let eps = doc
            .get("epsilon")
            .and_then(Value::as_f64)
            .ok_or_else(|| bad("missing epsilon".into()))?;
        let shrinkage = match doc.get("epsilon_mode").and_then(Value::as_str) {
            Some("absolute") => Shrinkage::Absolute(eps),
            Some("relative") | None => Shrinkage::Relative(eps),
            Some(other) => return Err(bad(format!("unknown epsilon_mode {other}"))),
        };
        let floats = |v: &Value| -> Option<Vec<f64>> { v.as_array()?.iter().map(Value::as_f64).collect() };
        let mut classes = BTreeMap::new();
        for (key, entry) in &doc {
            let Ok(c) = key.parse::<usize>() else { continue };
            let mean = entry.get("mean").and_then(floats).ok_or_else(|| bad(format!("class {c}: mean")))?;
            let rows = entry
                .get("cov")
                .and_then(Value::as_array)
                .ok_or_else(|| bad(format!("class {c}: cov")))?;
            let cov: Vec<f64> = rows
                .iter()
                .map(floats)
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(format!("class {c}: cov")))?
                .concat();
            if mean.len() != dim || cov.len() != dim * dim {
                return Err(bad(format!("class {c}: expected dimension {dim}")));
            }
            let count = entry.get("count").and_then(Value::as_u64).unwrap_or(0) as usize;
            let ridge = entry.get("ridge").and_then(Value::as_f64).unwrap_or(0.0);
            classes.insert(c, ClassStats::new(count, mean, cov, ridge)?);
        }
        if classes.is_empty() {
            return Err(bad("no classes".into()));
        }
        Ok(Self { dim, shrinkage, classes })
    }
}

/// Mahalanobis distance of `x` to class `c` under `cov + ridge * I`.
pub fn mahalanobis(x: &[f64], stats: &ClassConditionalStats, c: usize) -> Result<f64> {
    let s = stats.class(c)?;
    if x.len() != stats.dim {
        return Err(Error::dim(format!("logit width {} != {}", x.len(), stats.dim)));
    }
    let diff = DVector::from_iterator(x.len(), x.iter().zip(&s.mean).map(|(a, m)| a - m));
    let y = s
        .chol
        .solve_lower_triangular(&diff)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let d2 = y.norm_squared();
    if !d2.is_finite() {
        return Err(Error::Numerical("non-finite Mahalanobis distance".into()));
    }
    Ok(d2.sqrt())
}

/// Cosine similarity between `x` and the mean of class `c`.
pub fn cosine_score(x: &[f64], stats: &ClassConditionalStats, c: usize) -> Result<f64> {
    let mu = &stats.class(c)?.mean;
    if x.len() != mu.len() {
        return Err(Error::dim(format!("logit width {} != {}", x.len(), mu.len())));
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || nm == 0.0 {
        return Err(Error::DegenerateInput("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = x.iter().zip(mu).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * nm)).clamp(-1.0, 1.0))
}
