//! Threshold search, precision-recall curves and evaluation reports.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::posthoc::{score_batch, ClassConditionalStats, ScoreKind, ScoreRecord};
use crate::tensor::{Scalar, Tensor};
use crate::train::{accuracy, LabeledBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HighIsIn,
    HighIsOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positive {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPopulation {
    pub scores_in: Vec<f64>,
    pub scores_out: Vec<f64>,
    pub orientation: Orientation,
}

impl ScoredPopulation {
    pub fn new(scores_in: Vec<f64>, scores_out: Vec<f64>, orientation: Orientation) -> Result<Self> {
        if let Some(v) = scores_in.iter().chain(&scores_out).find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("score {v} is not finite")));
        }
        Ok(Self {
            scores_in,
            scores_out,
            orientation,
        })
    }

    /// Copy with `HighIsIn` orientation.
    pub fn normalized(&self) -> Self {
        match self.orientation {
            Orientation::HighIsIn => self.clone(),
            Orientation::HighIsOut => Self {
                scores_in: self.scores_in.iter().map(|v| -v).collect(),
                scores_out: self.scores_out.iter().map(|v| -v).collect(),
                orientation: Orientation::HighIsIn,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    #[serde(with = "float_or_inf")]
    pub tau: f64,
    pub min_error: f64,
    pub detection_accuracy: f64,
    pub p_in: f64,
    pub p_out: f64,
}

/// Pooled scores sorted ascending, grouped by distinct value: `(value, n_in, n_out)`.
fn groups(scores_in: &[f64], scores_out: &[f64]) -> Vec<(f64, usize, usize)> {
    let mut pooled: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&v| (v, true))
        .chain(scores_out.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    for (v, is_in) in pooled {
        match out.last_mut() {
            Some(last) if last.0 == v => {}
            _ => out.push((v, 0, 0)),
        }
        let last = out.last_mut().unwrap();
        if is_in {
            last.1 += 1;
        } else {
            last.2 += 1;
        }
    }
    out
}

/// Threshold minimizing `P(q_in <= tau) P_in + P(q_out > tau) P_out` with empirical priors.
///
/// Candidates are `-inf`, midpoints between consecutive distinct scores and `+inf`;
/// ties resolve to the smallest threshold.
pub fn optimal_threshold(pop: &ScoredPopulation) -> Result<ThresholdResult> {
    let pop = pop.normalized();
    let (n_in, n_out) = (pop.scores_in.len(), pop.scores_out.len());
    if n_in == 0 || n_out == 0 {
        return Err(Error::EmptyInput(format!(
            "threshold search needs both populations ({n_in} in, {n_out} out)"
        )));
    }
    let g = groups(&pop.scores_in, &pop.scores_out);
    // Errors counted as integers so equal candidates compare exactly.
    let (mut in_below, mut out_above) = (0usize, n_out);
    let mut best = (in_below + out_above, f64::NEG_INFINITY);
    for (i, &(v, gi, go)) in g.iter().enumerate() {
        in_below += gi;
        out_above -= go;
        let tau = match g.get(i + 1) {
            Some(&(next, _, _)) => v / 2.0 + next / 2.0,
            None => f64::INFINITY,
        };
        if in_below + out_above < best.0 {
            best = (in_below + out_above, tau);
        }
    }
    let n = (n_in + n_out) as f64;
    let min_error = best.0 as f64 / n;
    Ok(ThresholdResult {
        tau: best.1,
        min_error,
        detection_accuracy: 1.0 - min_error,
        p_in: n_in as f64 / n,
        p_out: n_out as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    #[serde(with = "float_or_inf")]
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Descending sweep over distinct thresholds, from `(recall 0, precision 1)` to the
/// first point at recall 1.
///
/// `threshold` is the positive-class score at which the point is reached:
/// samples with oriented score `>= threshold` are predicted positive.
pub fn pr_curve(pop: &ScoredPopulation, positive: Positive) -> Result<Vec<PrPoint>> {
    let pop = pop.normalized();
    let (pos, neg): (Vec<f64>, Vec<f64>) = match positive {
        Positive::In => (pop.scores_in, pop.scores_out),
        Positive::Out => (
            pop.scores_out.iter().map(|v| -v).collect(),
            pop.scores_in.iter().map(|v| -v).collect(),
        ),
    };
    if pos.is_empty() {
        return Err(Error::EmptyInput("precision-recall curve needs at least one positive".into()));
    }
    let total = pos.len() as f64;
    let mut curve = vec![PrPoint {
        threshold: f64::INFINITY,
        recall: 0.0,
        precision: 1.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(v, gp, gn) in groups(&pos, &neg).iter().rev() {
        tp += gp;
        fp += gn;
        curve.push(PrPoint {
            threshold: v,
            recall: tp as f64 / total,
            precision: tp as f64 / (tp + fp) as f64,
        });
        if tp == pos.len() {
            break;
        }
    }
    Ok(curve)
}

/// Average precision: `sum (r_i - r_{i-1}) p_i`.
pub fn aupr(curve: &[PrPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].recall - w[0].recall) * w[1].precision)
        .sum()
}

pub fn pr_csv(curve: &[PrPoint]) -> String {
    let mut out = String::from("threshold,recall,precision\n");
    for p in curve {
        out.push_str(&format!("{:e},{:.9e},{:.9e}\n", p.threshold, p.recall, p.precision));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindMetrics {
    pub detection_accuracy: f64,
    #[serde(with = "float_or_inf")]
    pub tau: f64,
    pub min_error: f64,
    pub p_in: f64,
    pub p_out: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
}

impl KindMetrics {
    pub fn from_population(pop: &ScoredPopulation) -> Result<Self> {
        let t = optimal_threshold(pop)?;
        Ok(Self {
            detection_accuracy: t.detection_accuracy,
            tau: t.tau,
            min_error: t.min_error,
            p_in: t.p_in,
            p_out: t.p_out,
            aupr_in: aupr(&pr_curve(pop, Positive::In)?),
            aupr_out: aupr(&pr_curve(pop, Positive::Out)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classifier_accuracy: f64,
    pub scores: BTreeMap<ScoreKind, KindMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap() + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("evaluation report: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub kinds: Vec<ScoreKind>,
    pub mc_samples: usize,
    pub seed: u64,
    pub threads: usize,
}

const CHUNK: usize = 128;

/// Scores `input` in fixed chunks; chunk `i` of population `pop_id` draws from
/// its own generator stream, so results do not depend on the thread count.
pub fn score_population<T: Scalar>(
    cls: &Model<T>,
    stats: Option<&ClassConditionalStats>,
    input: &Tensor<T>,
    kind: ScoreKind,
    opts: &EvalOptions,
    pop_id: u32,
) -> Result<Vec<ScoreRecord>> {
    let n = input.batch();
    let chunks: Vec<(usize, Vec<usize>)> = (0..n)
        .step_by(CHUNK)
        .enumerate()
        .map(|(c, start)| (c, (start..(start + CHUNK).min(n)).collect()))
        .collect();
    let run = |(c, idx): &(usize, Vec<usize>)| -> Result<Vec<ScoreRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(((pop_id as u64) << 32) | *c as u64);
        score_batch(cls, stats, &input.select_rows(idx), kind, opts.mc_samples, &mut rng)
    };
    let threads = opts.threads.max(1).min(chunks.len().max(1));
    let results: Vec<Result<Vec<ScoreRecord>>> = if threads == 1 {
        chunks.iter().map(run).collect()
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|part| s.spawn(move || part.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
        })
    };
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Classifier accuracy on `test` plus threshold and AUPR metrics per score kind.
pub fn run_evaluation<T: Scalar>(
    cls: &Model<T>,
    stats: Option<&ClassConditionalStats>,
    test: &LabeledBatch<T>,
    ood: &Tensor<T>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut probs = Vec::with_capacity(test.inputs.numel());
    for start in (0..test.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(test.len())).collect();
        probs.extend_from_slice(cls.infer(&test.inputs.select_rows(&idx))?.output().data());
    }
    let probs = Tensor::new(vec![test.len(), test.n_classes], probs)?;
    let mut scores = BTreeMap::new();
    for &kind in &opts.kinds {
        let q = |recs: Vec<ScoreRecord>| recs.into_iter().map(|r| r.q).collect::<Vec<_>>();
        let scores_in = q(score_population(cls, stats, &test.inputs, kind, opts, 0)?);
        let scores_out = q(score_population(cls, stats, ood, kind, opts, 1)?);
        let orientation = if kind.high_is_out() {
            Orientation::HighIsOut
        } else {
            Orientation::HighIsIn
        };
        let pop = ScoredPopulation::new(scores_in, scores_out, orientation)?;
        scores.insert(kind, KindMetrics::from_population(&pop)?);
    }
    Ok(EvalReport {
        classifier_accuracy: accuracy(&probs, &test.labels),
        scores,
    })
}

/// JSON has no infinities; they are written as the strings `"inf"` / `"-inf"`.
mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad threshold `{t}`"))),
        }
    }
}
