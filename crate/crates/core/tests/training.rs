use oodkit::config::default_networks;
use oodkit::datakit::{generate_synthetic, SyntheticSpec};
use oodkit::losses::{bce, bce_const, ce_loss, kl_to_uniform, loss_cls, loss_d, loss_g};
use oodkit::nn::TrainSchedule;
use oodkit::train::{
    train_ce, train_joint, LabeledBatch, Networks, Phase, TrainConfig, TrainMode, Trainer,
};
use oodkit::{Error, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-6;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn uniform(rows: usize, n_c: usize) -> Tensor<f64> {
    Tensor::full(&[rows, n_c], 1.0 / n_c as f64)
}

fn one_hot(rows: usize, n_c: usize, hot: usize) -> Tensor<f64> {
    let mut v = vec![0.0; rows * n_c];
    for r in 0..rows {
        v[r * n_c + hot] = 1.0;
    }
    t(&[rows, n_c], &v)
}

fn close(a: f64, b: f64) {
    assert!((a - b).abs() <= TOL, "{a} vs {b}");
}

#[test]
fn bce_closed_forms() {
    let ones = t(&[1, 1], &[1.0]);
    close(bce(&ones, &ones).unwrap(), 0.0);
    close(bce(&t(&[1, 1], &[0.5]), &ones).unwrap(), 2f64.ln());
    close(bce(&t(&[1, 1], &[0.0]), &ones).unwrap(), 1e7f64.ln());
    assert!(matches!(bce(&t(&[2, 1], &[0.5, 0.5]), &ones), Err(Error::Dimension(_))));
}

#[test]
fn ce_and_kl_closed_forms() {
    let ln4 = 4f64.ln();
    close(ce_loss(&uniform(1, 4), &[2]).unwrap(), ln4);
    close(ce_loss(&one_hot(1, 4, 1), &[1]).unwrap(), 0.0);
    let mixed = t(&[2, 4], &[0.25, 0.25, 0.25, 0.25, 0.0, 1.0, 0.0, 0.0]);
    close(ce_loss(&mixed, &[0, 1]).unwrap(), ln4 / 2.0);
    assert!(matches!(ce_loss(&uniform(1, 4), &[4]), Err(Error::Index(_))));

    close(kl_to_uniform(&uniform(3, 4), 4).unwrap(), 0.0);
    close(kl_to_uniform(&one_hot(2, 4, 3), 4).unwrap(), ln4);
    assert!(matches!(kl_to_uniform(&uniform(1, 4), 3), Err(Error::Dimension(_))));
}

#[test]
fn composite_fixed_points() {
    let ln2 = 2f64.ln();
    let ln4 = 4f64.ln();
    let one = t(&[2, 1], &[1.0, 1.0]);
    let zero = t(&[2, 1], &[0.0, 0.0]);
    let half = t(&[2, 1], &[0.5, 0.5]);

    close(loss_d(&one, &zero).unwrap(), 0.0);
    close(loss_d(&half, &half).unwrap(), 2.0 * ln2);
    close(loss_d(&zero, &one).unwrap(), 2.0 * 1e7f64.ln());
    assert!((loss_d(&zero, &one).unwrap() - 32.24).abs() < 5e-3);

    close(loss_g(&one, &uniform(2, 4), 4).unwrap(), 0.0);
    close(loss_g(&half, &uniform(2, 4), 4).unwrap(), ln2);
    close(loss_g(&one, &one_hot(2, 4, 0), 4).unwrap(), ln4);

    let labels = [0, 3];
    let perfect = t(&[2, 4], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    close(loss_cls(&perfect, &labels, &uniform(2, 4), 4).unwrap(), 0.0);
    close(loss_cls(&uniform(2, 4), &labels, &uniform(2, 4), 4).unwrap(), ln4);
    close(loss_cls(&perfect, &labels, &one_hot(2, 4, 2), 4).unwrap(), ln4);
}

fn prob_rows() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (2usize..6, 1usize..5).prop_flat_map(|(n_c, rows)| {
        (Just(n_c), prop::collection::vec(0.0f64..1.0, rows * n_c)).prop_map(|(n_c, raw)| {
            let mut v = raw;
            for row in v.chunks_mut(n_c) {
                let s: f64 = row.iter().sum::<f64>() + 1e-3;
                row.iter_mut().for_each(|x| *x = (*x + 1e-3 / n_c as f64) / s);
            }
            (n_c, v)
        })
    })
}

proptest! {
    #[test]
    fn losses_are_finite_and_non_negative(
        (n_c, p) in prob_rows(),
        d in prop::collection::vec(0.0f64..=1.0, 8),
        labels_seed in any::<u64>(),
    ) {
        let rows = p.len() / n_c;
        let probs = t(&[rows, n_c], &p);
        let labels: Vec<usize> = (0..rows).map(|i| ((labels_seed >> i) as usize) % n_c).collect();
        let real = t(&[4, 1], &d[..4]);
        let fake = t(&[4, 1], &d[4..]);
        for v in [
            loss_d(&real, &fake).unwrap(),
            loss_g(&fake, &probs, n_c).unwrap(),
            loss_cls(&probs, &labels, &probs, n_c).unwrap(),
            bce_const(&real, 1.0).unwrap(),
        ] {
            prop_assert!(v.is_finite() && v >= -1e-12, "{}", v);
        }
    }

    #[test]
    fn kl_vanishes_only_at_uniform((n_c, p) in prob_rows()) {
        let rows = p.len() / n_c;
        let kl = kl_to_uniform(&t(&[rows, n_c], &p), n_c).unwrap();
        let max_dev = p.iter().map(|x| (x - 1.0 / n_c as f64).abs()).fold(0.0, f64::max);
        prop_assert!(kl >= -1e-12);
        if max_dev > 1e-3 {
            prop_assert!(kl > 1e-9, "kl {} with deviation {}", kl, max_dev);
        }
    }
}

fn blob_data() -> (LabeledBatch, usize) {
    let spec = SyntheticSpec {
        samples_per_class: 80,
        ..SyntheticSpec::blobs()
    };
    let data = generate_synthetic(&spec).unwrap();
    assert_eq!(data.train.len(), 256);
    let n_c = spec.n_classes();
    (data.train, n_c)
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        schedule: TrainSchedule {
            lr0: 1e-3,
            decay_every: 1000,
            decay_rate: 0.5,
            epochs,
            batch_size: 32,
        },
        noise_dim: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (data, n_c) = blob_data();
    let specs = default_networks(data.sample_shape(), n_c, 16);
    let a = train_joint(&data, &specs, small_config(2), 7).unwrap();
    let b = train_joint(&data, &specs, small_config(2), 7).unwrap();
    assert_eq!(a.log.len(), 16);
    assert_eq!(a.log_csv(), b.log_csv());
    assert_eq!(a.state, b.state);
    assert!(a.log.iter().all(|r| r.l_d.unwrap().is_finite() && r.l_g.unwrap().is_finite()));

    let c = train_ce(&data, &specs, small_config(2), 7).unwrap();
    let d = train_ce(&data, &specs, small_config(2), 7).unwrap();
    assert_eq!(c.log_csv(), d.log_csv());
    assert!(c.log_csv().starts_with("iteration,lr,CE\n"));
    assert_ne!(c.log_csv(), train_ce(&data, &specs, small_config(2), 8).unwrap().log_csv());
}

#[test]
fn cross_entropy_trends_downward() {
    let (data, n_c) = blob_data();
    let specs = default_networks(data.sample_shape(), n_c, 16);
    let run = train_ce(&data, &specs, small_config(10), 42).unwrap();
    let l: Vec<f64> = run.log.iter().map(|r| r.l_cls).collect();
    let head = l[..10].iter().sum::<f64>() / 10.0;
    let tail = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "first {head} last {tail}");
}

#[test]
fn each_phase_updates_only_its_network() {
    let (data, n_c) = blob_data();
    let specs = default_networks(data.sample_shape(), n_c, 16);
    let mut trainer = Trainer::new(&data, &specs, small_config(1), TrainMode::Joint, 3).unwrap();
    let snapshot = |n: &Networks| n.clone();
    for _ in 0..3 {
        let before = snapshot(&trainer.state().nets);
        let mut seen: Vec<(Phase, Networks)> = Vec::new();
        trainer.step_observed(|p, n| seen.push((p, snapshot(n)))).unwrap();
        let phases: Vec<Phase> = seen.iter().map(|(p, _)| *p).collect();
        assert_eq!(phases, [Phase::AfterDis, Phase::AfterGen, Phase::AfterCls]);

        let [(_, s1), (_, s2), (_, s3)] = <[_; 3]>::try_from(seen).ok().unwrap();
        let params = |m: &Option<oodkit::nn::Model>| m.as_ref().unwrap().params().into_iter().cloned().collect::<Vec<_>>();
        let cls = |n: &Networks| n.cls.params().into_iter().cloned().collect::<Vec<_>>();

        assert_ne!(params(&s1.dis), params(&before.dis));
        assert_eq!(params(&s1.gen), params(&before.gen));
        assert_eq!(cls(&s1), cls(&before));

        assert_eq!(params(&s2.dis), params(&s1.dis));
        assert_ne!(params(&s2.gen), params(&s1.gen));
        assert_eq!(cls(&s2), cls(&s1));

        assert_eq!(params(&s3.dis), params(&s2.dis));
        assert_eq!(params(&s3.gen), params(&s2.gen));
        assert_ne!(cls(&s3), cls(&s2));
    }
}

#[test]
fn divergence_reports_the_iteration() {
    let (data, n_c) = blob_data();
    let specs = default_networks(data.sample_shape(), n_c, 16);
    let mut cfg = small_config(50);
    cfg.schedule.lr0 = 1e38;
    let err = train_ce(&data, &specs, cfg, 1).unwrap_err();
    match err {
        Error::Divergence { iteration, loss } => {
            assert!(iteration > 0);
            assert_eq!(loss, "CE");
        }
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn mismatched_specs_are_rejected() {
    let (data, n_c) = blob_data();
    let specs = default_networks(&[5], n_c, 16);
    assert!(Trainer::new(&data, &specs, small_config(1), TrainMode::Joint, 0).is_err());
    assert!(Trainer::new(&data, &specs, small_config(1), TrainMode::Ce, 0).is_err());
    let empty = LabeledBatch::new(Tensor::<f32>::zeros(&[0, 8]), vec![], n_c).unwrap();
    let specs = default_networks(&[8], n_c, 16);
    assert!(Trainer::new(&empty, &specs, small_config(1), TrainMode::Ce, 0).is_err());
    assert!(LabeledBatch::new(Tensor::full(&[1, 2], 2.0f32), vec![0], 2).is_err());
}
