//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use oodkit::losses::{loss_cls, loss_d, loss_g};
use oodkit::nn::{LayerSpec, Mode, Model, ModelSpec, OutputGrad, Role, Trace};
use oodkit::train::{classifier_step, discriminator_step, generator_step};
use oodkit::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;
pub const PROBES: usize = 5;
/// Batch for the composite objectives; batchnorm statistics of smaller
/// batches curve enough to dominate the step-size truncation error.
pub const COMPOSITE_BATCH: usize = 8;
/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-2;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn normal_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn uniform_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Signs of every leaky-ReLU input in `trace`; a change means a kink was crossed.
pub fn leaky_signs(model: &Model<f64>, trace: &Trace<f64>) -> Vec<bool> {
    let mut out = Vec::new();
    for (i, layer) in model.spec().layers.iter().enumerate() {
        if matches!(layer, LayerSpec::LeakyRelu { .. }) {
            out.extend(trace.activations()[i].data().iter().map(|&v| v > 0.0));
        }
    }
    out
}

/// Worst relative error and number of checked coordinates.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdResult {
    pub worst: f64,
    pub checked: usize,
}

impl FdResult {
    fn add(&mut self, e: f64) {
        self.worst = self.worst.max(e);
        self.checked += 1;
    }

    pub fn merge(&mut self, o: FdResult) {
        self.worst = self.worst.max(o.worst);
        self.checked += o.checked;
    }
}

type Probe<'a> = dyn FnMut(&[f64]) -> (f64, Vec<bool>) + 'a;

/// Central differences on up to `PROBES` random coordinates of `values`.
///
/// `eval(v)` returns the objective and a kink signature with `values` replaced by `v`;
/// probes whose `±h` signatures differ are redrawn.
fn probe(
    values: &[f64],
    analytic: &[f64],
    eval: &mut Probe<'_>,
    rng: &mut ChaCha8Rng,
    res: &mut FdResult,
) {
    let n = values.len();
    let want = PROBES.min(n);
    let mut done = 0;
    let mut tried = 0;
    let order = sample(rng, n, n).into_vec();
    let mut v = values.to_vec();
    for &i in order.iter() {
        if done == want {
            break;
        }
        tried += 1;
        v[i] = values[i] + FD_STEP;
        let (lp, sp) = eval(&v);
        v[i] = values[i] - FD_STEP;
        let (lm, sm) = eval(&v);
        v[i] = values[i];
        if sp != sm {
            continue;
        }
        res.add(rel_err(analytic[i], (lp - lm) / (2.0 * FD_STEP)));
        done += 1;
    }
    assert!(done == want, "only {done} kink-free probes out of {tried}");
}

/// Checks parameter and input gradients of `L = sum(w * y)` in train mode.
///
/// With `at_output` false, `y` is the input of the final layer, so the check
/// isolates the layers below the role's closing activation.
pub fn check_model(spec: ModelSpec, batch: usize, seed: u64, at_output: bool) -> FdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::build(spec, &mut rng).unwrap();
    let mut in_shape = vec![batch];
    in_shape.extend_from_slice(model.input_shape());
    let x = normal_tensor(in_shape, &mut rng);
    let mask_seed = rng.random::<u64>();
    let pick = |tr: &Trace<f64>| -> Tensor<f64> {
        if at_output {
            tr.output().clone()
        } else {
            tr.pre_activation().clone()
        }
    };
    let trace = model.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(mask_seed)).unwrap();
    let w = uniform_tensor(pick(&trace).shape().to_vec(), -1.0, 1.0, &mut rng);

    let run = |m: &Model<f64>, x: &Tensor<f64>| -> (f64, Trace<f64>) {
        let tr = m.forward(x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(mask_seed)).unwrap();
        let l = pick(&tr).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        (l, tr)
    };
    let seed_grad = if at_output {
        OutputGrad::Output(w.clone())
    } else {
        OutputGrad::PreActivation(w.clone())
    };
    let back = model.backward(&trace, seed_grad).unwrap();

    let mut res = FdResult::default();
    for (pi, g) in back.grads.iter().enumerate() {
        let base = model.params()[pi].data().to_vec();
        let mut eval = |v: &[f64]| {
            let mut m = model.clone();
            m.params_mut()[pi].data_mut().copy_from_slice(v);
            let (l, tr) = run(&m, &x);
            (l, leaky_signs(&m, &tr))
        };
        probe(&base, g.data(), &mut eval, &mut rng, &mut res);
    }
    let mut eval = |v: &[f64]| {
        let xv = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
        let (l, tr) = run(&model, &xv);
        (l, leaky_signs(&model, &tr))
    };
    probe(x.data(), back.input_grad.data(), &mut eval, &mut rng, &mut res);
    res
}

/// Tiny vector networks: 8-dim inputs, 3 classes, 4-dim noise.
pub fn tiny_specs() -> (ModelSpec, ModelSpec, ModelSpec) {
    use LayerSpec::*;
    let lrelu = LeakyRelu { alpha: 0.2 };
    let cls = ModelSpec {
        role: Role::Cls,
        input_shape: vec![8],
        n_classes: Some(3),
        layers: vec![Dense { units: 6 }, lrelu.clone(), Dropout { rate: 0.3 }, Dense { units: 3 }, Softmax],
    };
    let gen = ModelSpec {
        role: Role::Gen,
        input_shape: vec![4],
        n_classes: None,
        layers: vec![Dense { units: 6 }, Batchnorm, lrelu.clone(), Dense { units: 8 }, Sigmoid],
    };
    let dis = ModelSpec {
        role: Role::Dis,
        input_shape: vec![8],
        n_classes: None,
        layers: vec![Dense { units: 6 }, lrelu, Dropout { rate: 0.3 }, Dense { units: 1 }, Sigmoid],
    };
    (cls, gen, dis)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Dis,
    Gen,
    Cls,
}

/// Gradient of one composite loss with respect to the network it trains.
pub fn check_composite(which: Objective, seed: u64, batch: usize) -> FdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cs, gs, ds) = tiny_specs();
    let cls = Model::<f64>::build(cs, &mut rng).unwrap();
    let gen = Model::<f64>::build(gs, &mut rng).unwrap();
    let dis = Model::<f64>::build(ds, &mut rng).unwrap();
    let real = uniform_tensor(vec![batch, 8], 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();
    let noise = normal_tensor(vec![batch, 4], &mut rng);
    let s = rng.random::<u64>();
    let r = || ChaCha8Rng::seed_from_u64(s);

    // Replays each step's forward passes in the same generator order to read
    // kink signatures; the replayed loss must equal the step's own value.
    let eval = |cls: &Model<f64>, gen: &Model<f64>, dis: &Model<f64>| -> (f64, Vec<f64>, Vec<bool>) {
        let mut rr = r();
        match which {
            Objective::Dis => {
                let e = discriminator_step(dis, gen, &real, &noise, &mut r()).unwrap();
                let tg = gen.forward(&noise, Mode::Train, &mut rr).unwrap();
                let tr = dis.forward(&real, Mode::Train, &mut rr).unwrap();
                let tf = dis.forward(tg.output(), Mode::Train, &mut rr).unwrap();
                assert_eq!(loss_d(tr.output(), tf.output()).unwrap(), e.value);
                let sig = [leaky_signs(gen, &tg), leaky_signs(dis, &tr), leaky_signs(dis, &tf)].concat();
                (e.value, flat(&e.grads), sig)
            }
            Objective::Gen => {
                let (e, _) = generator_step(gen, dis, cls, &noise, &mut r()).unwrap();
                let tg = gen.forward(&noise, Mode::Train, &mut rr).unwrap();
                let td = dis.forward(tg.output(), Mode::Train, &mut rr).unwrap();
                let tc = cls.forward(tg.output(), Mode::Train, &mut rr).unwrap();
                assert_eq!(loss_g(td.output(), tc.output(), 3).unwrap(), e.value);
                let sig = [leaky_signs(gen, &tg), leaky_signs(dis, &td), leaky_signs(cls, &tc)].concat();
                (e.value, flat(&e.grads), sig)
            }
            Objective::Cls => {
                let (e, _) = classifier_step(cls, Some(gen), &real, &labels, Some(&noise), &mut r()).unwrap();
                let tg = gen.forward(&noise, Mode::Train, &mut rr).unwrap();
                let tr = cls.forward(&real, Mode::Train, &mut rr).unwrap();
                let tf = cls.forward(tg.output(), Mode::Train, &mut rr).unwrap();
                assert_eq!(loss_cls(tr.output(), &labels, tf.output(), 3).unwrap(), e.value);
                let sig = [leaky_signs(gen, &tg), leaky_signs(cls, &tr), leaky_signs(cls, &tf)].concat();
                (e.value, flat(&e.grads), sig)
            }
        }
    };
    let target = match which {
        Objective::Dis => &dis,
        Objective::Gen => &gen,
        Objective::Cls => &cls,
    };
    let (_, grads, _) = eval(&cls, &gen, &dis);
    let mut res = FdResult::default();
    let mut offset = 0;
    for pi in 0..target.params().len() {
        let base = target.params()[pi].data().to_vec();
        let analytic = grads[offset..offset + base.len()].to_vec();
        offset += base.len();
        let mut f = |v: &[f64]| {
            let mut m = target.clone();
            m.params_mut()[pi].data_mut().copy_from_slice(v);
            let (l, _, sig) = match which {
                Objective::Dis => eval(&cls, &gen, &m),
                Objective::Gen => eval(&cls, &m, &dis),
                Objective::Cls => eval(&m, &gen, &dis),
            };
            (l, sig)
        };
        probe(&base, &analytic, &mut f, &mut rng, &mut res);
    }
    res
}

fn flat(ts: &[Tensor<f64>]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

pub struct LayerCase {
    pub name: &'static str,
    pub spec: ModelSpec,
    pub batch: usize,
    /// Seed the check at the model output rather than below the closing activation.
    pub at_output: bool,
}

impl LayerCase {
    pub fn check(&self, seed: u64) -> FdResult {
        check_model(self.spec.clone(), self.batch, seed, self.at_output)
    }
}

/// One small model per layer kind.
pub fn layer_cases() -> Vec<LayerCase> {
    use LayerSpec::*;
    let gen = |input: Vec<usize>, layers: Vec<LayerSpec>| ModelSpec {
        role: Role::Gen,
        input_shape: input,
        n_classes: None,
        layers,
    };
    let case = |name, spec, batch| LayerCase {
        name,
        spec,
        batch,
        at_output: name == "sigmoid" || name == "softmax",
    };
    vec![
        case("dense", gen(vec![5], vec![Dense { units: 4 }, Sigmoid]), 3),
        case("conv2d", gen(vec![7, 7, 2], vec![Conv2d { filters: 3, kernel: 5, stride: 2 }, Sigmoid]), 2),
        case("conv2d_3x3_s1", gen(vec![5, 4, 2], vec![Conv2d { filters: 2, kernel: 3, stride: 1 }, Sigmoid]), 2),
        case("tconv2d", gen(vec![3, 3, 2], vec![Tconv2d { filters: 2, kernel: 5, stride: 2 }, Sigmoid]), 2),
        case("batchnorm", gen(vec![4], vec![Dense { units: 3 }, Batchnorm, Sigmoid]), 6),
        case("batchnorm_spatial", gen(vec![2, 2, 3], vec![Batchnorm, Sigmoid]), 3),
        case("dropout", gen(vec![6], vec![Dense { units: 6 }, Dropout { rate: 0.3 }, Sigmoid]), 4),
        case("leaky_relu", gen(vec![5], vec![Dense { units: 6 }, LeakyRelu { alpha: 0.2 }, Dense { units: 2 }, Sigmoid]), 4),
        case("sigmoid", gen(vec![6], vec![Sigmoid]), 3),
        case(
            "softmax",
            ModelSpec {
                role: Role::Cls,
                input_shape: vec![5],
                n_classes: Some(3),
                layers: vec![Dense { units: 3 }, Softmax],
            },
            3,
        ),
        case(
            "flatten",
            gen(vec![5, 5, 1], vec![Conv2d { filters: 2, kernel: 3, stride: 2 }, Flatten, Dense { units: 2 }, Sigmoid]),
            2,
        ),
        case(
            "reshape",
            gen(vec![3], vec![Dense { units: 12 }, Reshape { shape: vec![2, 2, 3] }, Conv2d { filters: 2, kernel: 3, stride: 1 }, Sigmoid]),
            2,
        ),
    ]
}

/// Brute-force minimum error count over every threshold placement.
///
/// Tries each pooled score and both infinities as `tau` with `in <= tau` counted as errors.
pub fn oracle_min_error_count(scores_in: &[f64], scores_out: &[f64]) -> usize {
    let mut taus: Vec<f64> = scores_in.iter().chain(scores_out).copied().collect();
    taus.push(f64::NEG_INFINITY);
    taus.push(f64::INFINITY);
    taus.iter()
        .map(|&t| scores_in.iter().filter(|&&q| q <= t).count() + scores_out.iter().filter(|&&q| q > t).count())
        .min()
        .unwrap()
}

/// Average precision by direct counting at every distinct positive-score cut.
pub fn oracle_aupr(pos: &[f64], neg: &[f64]) -> f64 {
    let mut cuts: Vec<f64> = pos.iter().chain(neg).copied().collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for t in cuts {
        let tp = pos.iter().filter(|&&q| q >= t).count();
        let fp = neg.iter().filter(|&&q| q >= t).count();
        let recall = tp as f64 / pos.len() as f64;
        if tp + fp > 0 {
            area += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
        }
        prev_recall = recall;
        if tp == pos.len() {
            break;
        }
    }
    area
}

/// Two-sided Kolmogorov-Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn chi2_cdf_k2(x: f64) -> f64 {
    1.0 - (-x / 2.0).exp()
}

pub fn chi2_cdf_k4(x: f64) -> f64 {
    1.0 - (-x / 2.0).exp() * (1.0 + x / 2.0)
}

pub const CHI2_POINTS: [f64; 6] = [0.1, 1.0, 2.0, 5.0, 10.0, 50.0];

/// Largest deviation of `chi2_confidence` from the closed forms for k = 2 and 4.
pub fn chi2_closed_form_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for x in CHI2_POINTS {
        let d = x.sqrt();
        let q2 = oodkit::posthoc::chi2_confidence(d, 2).unwrap();
        let q4 = oodkit::posthoc::chi2_confidence(d, 4).unwrap();
        worst = worst.max((q2 - (1.0 - chi2_cdf_k2(x))).abs());
        worst = worst.max((q4 - (1.0 - chi2_cdf_k4(x))).abs());
    }
    worst
}

/// KS statistic of squared Mahalanobis distances of `n` draws from a Gaussian
/// fitted on 4-dim data, against the chi-square CDF with 4 degrees of freedom.
pub fn ks_fitted_gaussian(seed: u64, n: usize) -> f64 {
    use oodkit::posthoc::{fit_class_stats, mahalanobis, Shrinkage};
    let k = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = [
        [1.0, 0.0, 0.0, 0.0],
        [0.5, 2.0, 0.0, 0.0],
        [-0.3, 0.4, 0.7, 0.0],
        [0.2, -1.0, 0.3, 1.5],
    ];
    let fit_rows = 500;
    let mut data = Vec::with_capacity(fit_rows * k);
    for _ in 0..fit_rows {
        let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        for row in &mix {
            data.push(3.0 + row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    let logits = Tensor::new(vec![fit_rows, k], data).unwrap();
    let stats = fit_class_stats(&logits, &vec![0; fit_rows], Shrinkage::default()).unwrap();
    let class = stats.class(0).unwrap();
    let l = class.cholesky();
    let d2: Vec<f64> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let x: Vec<f64> = (0..k)
                .map(|i| class.mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>())
                .collect();
            mahalanobis(&x, &stats, 0).unwrap().powi(2)
        })
        .collect();
    ks_statistic(&d2, chi2_cdf_k4)
}

pub fn mi_classifier(n_c: usize, rate: f64, seed: u64) -> Model<f32> {
    let spec = ModelSpec {
        role: Role::Cls,
        input_shape: vec![6],
        n_classes: Some(n_c),
        layers: vec![
            LayerSpec::Dense { units: 24 },
            LayerSpec::LeakyRelu { alpha: 0.2 },
            LayerSpec::Dropout { rate },
            LayerSpec::Dense { units: n_c },
            LayerSpec::Softmax,
        ],
    };
    Model::build(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct MiCheck {
    pub min: f64,
    pub max: f64,
    pub ln_nc: f64,
    /// Largest MI with dropout rate 0, where every pass is identical.
    pub disabled_max: f64,
}

/// MC-dropout MI over `n` random inputs with scaled weights so passes disagree.
pub fn mi_check(seed: u64, n: usize, passes: usize) -> MiCheck {
    let n_c = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::new(vec![n, 6], (0..n * 6).map(|_| rng.random_range(-3.0f32..3.0)).collect()).unwrap();
    let mut model = mi_classifier(n_c, 0.5, seed);
    for p in model.params_mut() {
        p.data_mut().iter_mut().for_each(|w| *w *= 4.0);
    }
    let mi = oodkit::posthoc::mc_dropout_mi(&model, &input, passes, &mut rng).unwrap();
    let off = mi_classifier(n_c, 0.0, seed);
    let zero = oodkit::posthoc::mc_dropout_mi(&off, &input, passes, &mut rng).unwrap();
    MiCheck {
        min: mi.iter().copied().fold(f64::INFINITY, f64::min),
        max: mi.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ln_nc: (n_c as f64).ln(),
        disabled_max: zero.iter().copied().fold(0.0, f64::max),
    }
}

/// Non-decreasing sequences of length `len` over `0..alphabet`, i.e. every multiset.
pub fn multisets(len: usize, alphabet: usize) -> Vec<Vec<usize>> {
    fn rec(len: usize, alphabet: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == len {
            out.push(cur.clone());
            return;
        }
        for v in start..alphabet {
            cur.push(v);
            rec(len, alphabet, v, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(len, alphabet, 0, &mut Vec::with_capacity(len), &mut out);
    out
}

#[derive(Debug, Clone, Default)]
pub struct OracleReport {
    pub cases: usize,
    pub mismatches: Vec<String>,
}

/// Compares threshold search and both AUPRs with the brute-force oracles on
/// every pair of in/out multisets with `1 <= n_in, n_out` and `n_in + n_out <= max_total`.
///
/// Rank patterns are all that matter, so an alphabet of `max_total` values covers every case.
pub fn exhaustive_metric_check(max_total: usize) -> OracleReport {
    use oodkit::eval::{aupr, optimal_threshold, pr_curve, Orientation, Positive, ScoredPopulation};
    let value = |i: usize| 0.1 * i as f64 - 0.3;
    let mut report = OracleReport::default();
    let sets: Vec<Vec<Vec<usize>>> = (0..max_total).map(|n| multisets(n, max_total)).collect();
    for n_in in 1..max_total {
        for n_out in 1..=(max_total - n_in) {
            for a in &sets[n_in] {
                for b in &sets[n_out] {
                    let si: Vec<f64> = a.iter().map(|&i| value(i)).collect();
                    let so: Vec<f64> = b.iter().map(|&i| value(i)).collect();
                    let pop = ScoredPopulation::new(si.clone(), so.clone(), Orientation::HighIsIn).unwrap();
                    let t = optimal_threshold(&pop).unwrap();
                    let n = (n_in + n_out) as f64;
                    let want = oracle_min_error_count(&si, &so) as f64 / n;
                    let ai = aupr(&pr_curve(&pop, Positive::In).unwrap());
                    let ao = aupr(&pr_curve(&pop, Positive::Out).unwrap());
                    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
                    let wi = oracle_aupr(&si, &so);
                    let wo = oracle_aupr(&neg(&so), &neg(&si));
                    let at_tau = si.iter().filter(|&&q| q <= t.tau).count() + so.iter().filter(|&&q| q > t.tau).count();
                    report.cases += 1;
                    if t.min_error != want || at_tau as f64 / n != want || ai != wi || ao != wo {
                        report.mismatches.push(format!(
                            "in {si:?} out {so:?}: err {} vs {want}, aupr_in {ai} vs {wi}, aupr_out {ao} vs {wo}",
                            t.min_error
                        ));
                    }
                }
            }
        }
    }
    report
}

/// Random strictly increasing map built from positive combinations of monotone pieces.
pub fn random_increasing(rng: &mut impl Rng) -> impl Fn(f64) -> f64 {
    let a: f64 = rng.random_range(0.01..10.0);
    let b: f64 = rng.random_range(0.0..3.0);
    let c: f64 = rng.random_range(0.0..2.0);
    let shift: f64 = rng.random_range(-5.0..5.0);
    move |x| a * x + b * x.powi(3) + c * x.atan() + shift
}

/// Checks detection accuracy and both AUPRs are unchanged under `transforms`
/// random increasing maps, each applied to a fresh random population with ties.
pub fn transform_invariance_check(transforms: usize, seed: u64) -> OracleReport {
    use oodkit::eval::{KindMetrics, Orientation, ScoredPopulation};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport::default();
    for _ in 0..transforms {
        let n_in = rng.random_range(1..40);
        let n_out = rng.random_range(1..40);
        let levels = rng.random_range(2..30);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64 * 4.0 - 2.0).collect()
        };
        let (si, so) = (draw(n_in), draw(n_out));
        let f = random_increasing(&mut rng);
        let base = KindMetrics::from_population(&ScoredPopulation::new(si.clone(), so.clone(), Orientation::HighIsIn).unwrap()).unwrap();
        let moved = ScoredPopulation::new(
            si.iter().map(|&x| f(x)).collect(),
            so.iter().map(|&x| f(x)).collect(),
            Orientation::HighIsIn,
        )
        .unwrap();
        let m = KindMetrics::from_population(&moved).unwrap();
        report.cases += 1;
        if m.detection_accuracy != base.detection_accuracy || m.aupr_in != base.aupr_in || m.aupr_out != base.aupr_out {
            report.mismatches.push(format!("{base:?} vs {m:?}"));
        }
    }
    report
}

/// Blob dataset with 256 training samples and the matching default networks.
pub fn blob_fixture() -> (oodkit::datakit::SyntheticData, oodkit::train::NetworkSpecs, oodkit::train::TrainConfig) {
    use oodkit::datakit::{generate_synthetic, SyntheticSpec};
    let spec = SyntheticSpec {
        samples_per_class: 80,
        ..SyntheticSpec::blobs()
    };
    let data = generate_synthetic(&spec).unwrap();
    let mut cfg = oodkit::train::TrainConfig {
        noise_dim: 16,
        ..Default::default()
    };
    cfg.schedule.lr0 = 1e-3;
    cfg.schedule.decay_every = 12;
    cfg.schedule.batch_size = 32;
    cfg.schedule.epochs = 4;
    let specs = oodkit::config::default_networks(&spec.sample_shape(), spec.n_classes(), 16);
    (data, specs, cfg)
}

/// Outcome of interrupting a run through a checkpoint round trip.
#[derive(Debug, Clone, Copy)]
pub struct ResumeCheck {
    pub logs_equal: bool,
    pub states_equal: bool,
    pub checkpoint_stable: bool,
}

/// Runs `split + extra` iterations straight through and, separately, `split`
/// iterations followed by save, load and `extra` more.
pub fn resume_check(mode: oodkit::train::TrainMode, split: u64, extra: u64, seed: u64) -> ResumeCheck {
    use oodkit::datakit::{decode_checkpoint, encode_checkpoint};
    use oodkit::train::Trainer;
    let (data, specs, cfg) = blob_fixture();
    let mut straight = Trainer::new(&data.train, &specs, cfg.clone(), mode, seed).unwrap();
    straight.run_iterations(split + extra).unwrap();

    let mut first = Trainer::new(&data.train, &specs, cfg.clone(), mode, seed).unwrap();
    first.run_iterations(split).unwrap();
    let bytes = encode_checkpoint(first.state()).unwrap();
    let restored = decode_checkpoint(&bytes, &specs).unwrap();
    let checkpoint_stable = encode_checkpoint(&restored).unwrap() == bytes && &restored == first.state();
    let mut resumed = Trainer::resume(&data.train, cfg, restored).unwrap();
    resumed.run_iterations(extra).unwrap();

    let tail = &straight.log()[split as usize..];
    ResumeCheck {
        logs_equal: tail.len() == resumed.log().len()
            && tail.iter().zip(resumed.log()).all(|(a, b)| {
                a.iteration == b.iteration
                    && a.l_cls.to_bits() == b.l_cls.to_bits()
                    && a.l_d.map(f64::to_bits) == b.l_d.map(f64::to_bits)
                    && a.l_g.map(f64::to_bits) == b.l_g.map(f64::to_bits)
            }),
        states_equal: straight.state() == resumed.state(),
        checkpoint_stable,
    }
}
