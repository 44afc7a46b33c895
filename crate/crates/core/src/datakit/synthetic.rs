//! Procedural stand-ins for in-distribution and out-of-distribution data.
//!
//! `shapes` renders anti-aliased glyphs on a noisy background; each in-class
//! is one glyph kind and the held-out kinds form the OOD set. `blobs` draws
//! Gaussian clusters in a vector space, with OOD clusters placed far from
//! every in-class mean.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::LabeledBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticMode {
    Shapes,
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Star,
    Ring,
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Star => "star",
            ShapeKind::Ring => "ring",
        }
    }

    /// Whether the point `(u, v)` in glyph-local units lies inside the glyph.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Triangle => in_polygon(u, v, &polygon(3, &[1.0])),
            ShapeKind::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
            }
            ShapeKind::Star => in_polygon(u, v, &polygon(10, &[1.0, 0.45])),
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.55 * 0.55..=1.0).contains(&r2)
            }
        }
    }
}

/// Vertices on alternating radii, starting straight up.
fn polygon(vertices: usize, radii: &[f64]) -> Vec<(f64, f64)> {
    (0..vertices)
        .map(|i| {
            let a = PI / 2.0 + i as f64 * 2.0 * PI / vertices as f64;
            let r = radii[i % radii.len()];
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub mode: SyntheticMode,
    pub samples_per_class: usize,
    /// Held-out samples generated per OOD kind.
    pub ood_per_kind: usize,
    /// `[H, W, C]` for shapes.
    pub image_size: Vec<usize>,
    /// Feature dimension for blobs.
    pub vector_dim: usize,
    /// Additive Gaussian pixel noise (shapes) or cluster spread (blobs).
    pub noise: f64,
    pub in_kinds: Vec<ShapeKind>,
    pub ood_kinds: Vec<ShapeKind>,
    /// In-class count for blobs (shapes uses `in_kinds.len()`).
    pub blob_classes: usize,
    /// OOD cluster count for blobs.
    pub blob_ood_clusters: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            mode: SyntheticMode::Shapes,
            samples_per_class: 500,
            ood_per_kind: 100,
            image_size: vec![32, 32, 3],
            vector_dim: 8,
            noise: 0.05,
            in_kinds: vec![
                ShapeKind::Circle,
                ShapeKind::Square,
                ShapeKind::Triangle,
                ShapeKind::Cross,
            ],
            ood_kinds: vec![ShapeKind::Star, ShapeKind::Ring],
            blob_classes: 4,
            blob_ood_clusters: 2,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn blobs() -> Self {
        Self {
            mode: SyntheticMode::Blobs,
            noise: 0.03,
            ..Self::default()
        }
    }

    pub fn n_classes(&self) -> usize {
        match self.mode {
            SyntheticMode::Shapes => self.in_kinds.len(),
            SyntheticMode::Blobs => self.blob_classes,
        }
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match self.mode {
            SyntheticMode::Shapes => self.image_size.clone(),
            SyntheticMode::Blobs => vec![self.vector_dim],
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        match self.mode {
            SyntheticMode::Shapes => self.in_kinds.iter().map(|k| k.as_str().to_string()).collect(),
            SyntheticMode::Blobs => (0..self.blob_classes).map(|i| format!("blob{i}")).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::spec(None, m));
        if !(self.noise >= 0.0) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        if self.samples_per_class < 5 {
            return bad("need at least 5 samples per class for an 80/20 split".into());
        }
        match self.mode {
            SyntheticMode::Shapes => {
                let ins: BTreeSet<_> = self.in_kinds.iter().collect();
                let outs: BTreeSet<_> = self.ood_kinds.iter().collect();
                if ins.len() != self.in_kinds.len() || outs.len() != self.ood_kinds.len() {
                    return bad("duplicate shape kinds".into());
                }
                if let Some(k) = ins.intersection(&outs).next() {
                    return bad(format!("{} is both an in-class and an OOD kind", k.as_str()));
                }
                if self.in_kinds.len() < 2 {
                    return bad("need at least two in-classes".into());
                }
                match self.image_size.as_slice() {
                    [h, w, c] if *h >= 8 && *w >= 8 && *c >= 1 => {}
                    s => return bad(format!("image size {s:?} must be HxWxC with H, W >= 8")),
                }
            }
            SyntheticMode::Blobs => {
                if self.blob_classes < 2 || self.vector_dim == 0 {
                    return bad("blobs need two or more classes and a positive dimension".into());
                }
            }
        }
        Ok(())
    }
}

/// Generated splits, all values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    pub ood: Tensor,
    /// Index into the OOD kind list for each OOD sample.
    pub ood_kinds: Vec<usize>,
    /// Cluster means for blobs mode (in-classes first, then OOD clusters).
    pub blob_means: Vec<Vec<f64>>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_c = spec.n_classes();
    let n_train = spec.samples_per_class * 4 / 5;
    let row = spec.sample_shape().iter().product::<usize>();
    let n_ood_kinds = match spec.mode {
        SyntheticMode::Shapes => spec.ood_kinds.len(),
        SyntheticMode::Blobs => spec.blob_ood_clusters,
    };

    let blob_means = match spec.mode {
        SyntheticMode::Blobs => blob_means(spec, n_ood_kinds, &mut rng)?,
        SyntheticMode::Shapes => vec![],
    };
    let draw = |group: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
        match spec.mode {
            SyntheticMode::Shapes => {
                let kind = if group < n_c {
                    spec.in_kinds[group]
                } else {
                    spec.ood_kinds[group - n_c]
                };
                render_glyph(kind, &spec.image_size, spec.noise, rng)
            }
            SyntheticMode::Blobs => {
                let noise = Normal::new(0.0, spec.noise).unwrap();
                blob_means[group]
                    .iter()
                    .map(|m| (m + noise.sample(rng)).clamp(0.0, 1.0) as f32)
                    .collect()
            }
        }
    };

    let (mut train_x, mut train_y, mut test_x, mut test_y) = (vec![], vec![], vec![], vec![]);
    for c in 0..n_c {
        for i in 0..spec.samples_per_class {
            let s = draw(c, &mut rng);
            if i < n_train {
                train_x.extend(s);
                train_y.push(c);
            } else {
                test_x.extend(s);
                test_y.push(c);
            }
        }
    }
    let (mut ood_x, mut ood_k) = (vec![], vec![]);
    for k in 0..n_ood_kinds {
        for _ in 0..spec.ood_per_kind {
            ood_x.extend(draw(n_c + k, &mut rng));
            ood_k.push(k);
        }
    }
    let shape = |n: usize| {
        let mut s = vec![n];
        s.extend(spec.sample_shape());
        s
    };
    debug_assert_eq!(train_x.len(), train_y.len() * row);
    let train = LabeledBatch::new(Tensor::new(shape(train_y.len()), train_x)?, train_y, n_c)?;
    let test = LabeledBatch::new(Tensor::new(shape(test_y.len()), test_x)?, test_y, n_c)?;
    if ood_k.is_empty() {
        return Err(Error::spec(None, "no OOD samples requested"));
    }
    let ood = Tensor::new(shape(ood_k.len()), ood_x)?;
    Ok(SyntheticData {
        train,
        test,
        ood,
        ood_kinds: ood_k,
        blob_means,
    })
}

fn blob_means(spec: &SyntheticSpec, n_ood: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let min_sep = 6.0 * spec.noise;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut means: Vec<Vec<f64>> = Vec::new();
    for group in 0..spec.blob_classes + n_ood {
        let (lo, hi) = if group < spec.blob_classes { (0.25, 0.75) } else { (0.1, 0.9) };
        let mut tries = 0;
        loop {
            let m: Vec<f64> = (0..spec.vector_dim).map(|_| rng.random_range(lo..hi)).collect();
            if means.iter().all(|o| dist(o, &m) >= min_sep) {
                means.push(m);
                break;
            }
            tries += 1;
            if tries > 10_000 {
                return Err(Error::spec(None, "cannot place separated blob means; lower the noise"));
            }
        }
    }
    Ok(means)
}

/// Renders one glyph with random colour, scale, rotation and position.
fn render_glyph(kind: ShapeKind, size: &[usize], noise: f64, rng: &mut impl Rng) -> Vec<f32> {
    let (h, w, c) = (size[0], size[1], size[2]);
    let extent = h.min(w) as f64;
    let bg: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..0.35)).collect();
    let fg: Vec<f64> = (0..c).map(|_| rng.random_range(0.6..1.0)).collect();
    let radius = extent * rng.random_range(0.26..0.36);
    let jitter = extent * 0.1;
    let cx = w as f64 / 2.0 + rng.random_range(-jitter..jitter);
    let cy = h as f64 / 2.0 + rng.random_range(-jitter..jitter);
    let theta = rng.random_range(-PI / 12.0..PI / 12.0);
    let (sin, cos) = theta.sin_cos();
    let pixel_noise = Normal::new(0.0, noise.max(0.0)).unwrap();
    const SS: usize = 3;
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64 - cx;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64 - cy;
                    // Image y grows downward; glyphs are defined with y up.
                    let u = (cos * px + sin * py) / radius;
                    let v = (sin * px - cos * py) / radius;
                    if kind.contains(u, v) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (SS * SS) as f64;
            for ch in 0..c {
                let val = bg[ch] + cov * (fg[ch] - bg[ch]) + pixel_noise.sample(rng);
                out.push(val.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}
