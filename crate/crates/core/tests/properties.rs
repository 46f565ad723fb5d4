mod common;

use std::sync::Mutex;

use amulab_core::eval::best_threshold_score;
use amulab_core::gaussianize::{soft_cdf_values, probit};
use amulab_core::harness::gen_gaussian_classes;
use amulab_core::nn::{batch_objective, grad, init_model_with, mean_loss, Activation, LabeledSet, LossSpec, Tensor};
use amulab_core::unlearn::{run_unlearning, run_unlearning_observed, SampleSource, UnlearnConfig, UnlearnInputs, UnlearnMethod};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

/// Records every id read through it.
struct Traced<'a> {
    inner: &'a LabeledSet,
    reads: Mutex<Vec<usize>>,
}

impl<'a> Traced<'a> {
    fn new(inner: &'a LabeledSet) -> Self {
        Self { inner, reads: Mutex::new(Vec::new()) }
    }
    fn reads(&self) -> Vec<usize> {
        self.reads.lock().unwrap().clone()
    }
}

impl SampleSource for Traced<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn gather(&self, ids: &[usize]) -> (Tensor, Vec<usize>) {
        self.reads.lock().unwrap().extend_from_slice(ids);
        self.inner.gather(ids)
    }
}

fn small_task() -> (LabeledSet, LabeledSet, LabeledSet) {
    let ds = gen_gaussian_classes(3, 40, 4, 3.0, 11).unwrap();
    let train = ds.train_ids();
    let (f, r): (Vec<usize>, Vec<usize>) = train.iter().partition(|&&i| ds.labels[i] == 0);
    let t: Vec<usize> = ds.test_ids().into_iter().take(f.len().min(40)).collect();
    (ds.subset(&r), ds.subset(&f), ds.subset(&t))
}

#[test]
fn forget_data_firewall() {
    let (r, f, t) = small_task();
    let model = init_model_with(&[4, 8, 3], Activation::Tanh, 3).unwrap();
    for method in UnlearnMethod::ALL {
        let (rs, fs, ts) = (Traced::new(&r), Traced::new(&f), Traced::new(&t));
        let cfg = UnlearnConfig { epochs: 2, batch_f: 32, ..UnlearnConfig::for_method(method) };
        let inputs = UnlearnInputs { retain: &rs, forget: &fs, t: &ts, preprocessing_seconds: 0.0 };
        run_unlearning(&model, &inputs, &cfg).unwrap();
        assert!(!rs.reads().is_empty(), "{method:?} never read the retain set");
        if method.is_accelerated() {
            // forget reads come only from the MMD term: one batch_f draw per retain batch
            let steps = 2 * r.len().div_ceil(cfg.batch_retain);
            assert_eq!(fs.reads().len(), steps * cfg.batch_f, "{method:?}");
            assert_eq!(ts.reads().len(), steps * cfg.batch_f, "{method:?}");
        } else {
            assert!(fs.reads().is_empty(), "{method:?} read forget samples");
            assert!(ts.reads().is_empty(), "{method:?} read T samples");
        }
    }
    // without the MMD term an accelerated method is also forget-blind
    let fs = Traced::new(&f);
    let cfg = UnlearnConfig { epochs: 1, lambda: 0.0, ..UnlearnConfig::for_method(UnlearnMethod::ACf) };
    run_unlearning(&model, &UnlearnInputs { retain: &r, forget: &fs, t: &t, preprocessing_seconds: 0.0 }, &cfg).unwrap();
    assert!(fs.reads().is_empty());
}

#[test]
fn squared_mean_chain_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..20 {
        let model = init_model_with(&[3, 6, 4], Activation::Tanh, seed).unwrap();
        let n = rng.random_range(2..20);
        let x = Tensor::from_rows(n, 3, (0..3 * n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let (l, g) = grad(&model, |t, v| batch_objective(t, &model, v, &x, &y, LossSpec::MeanCe)).unwrap();
        let (l2, g2) = grad(&model, |t, v| batch_objective(t, &model, v, &x, &y, LossSpec::SquaredMeanCe)).unwrap();
        assert!((l2 - l * l).abs() <= 1e-12 * l2.max(1.0));
        for (a, b) in g2.flatten().iter().zip(g.flatten()) {
            assert!((a - 2.0 * l * b).abs() <= 1e-12 * a.abs().max(1e-8), "{a} vs {}", 2.0 * l * b);
        }
    }
}

#[test]
fn full_batch_descent_on_linear_model_is_monotone() {
    let (r, f, t) = small_task();
    let model = init_model_with(&[4, 3], Activation::Tanh, 5).unwrap();
    let cfg = UnlearnConfig { epochs: 40, lr: 0.01, batch_retain: r.len(), ..UnlearnConfig::for_method(UnlearnMethod::Cf) };
    let mut losses = vec![mean_loss(&model, &r).unwrap()];
    run_unlearning_observed(
        &model,
        &UnlearnInputs { retain: &r, forget: &f, t: &t, preprocessing_seconds: 0.0 },
        &cfg,
        &mut |_, m| losses.push(mean_loss(m, &r).unwrap()),
    )
    .unwrap();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let (r, f, t) = small_task();
    let model = init_model_with(&[4, 8, 3], Activation::Tanh, 3).unwrap();
    let cfg = UnlearnConfig { epochs: 2, batch_f: 32, ..UnlearnConfig::default() };
    let inputs = UnlearnInputs { retain: &r, forget: &f, t: &t, preprocessing_seconds: 0.0 };
    let a = run_unlearning(&model, &inputs, &cfg).unwrap();
    let b = run_unlearning(&model, &inputs, &cfg).unwrap();
    assert_eq!(flatten_model(&a.model), flatten_model(&b.model));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn threshold_score_is_a_balanced_accuracy(
        m in prop::collection::vec(-5.0f64..5.0, 1..40),
        n in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let s = best_threshold_score(&m, &n).unwrap();
        prop_assert!((50.0..=100.0).contains(&s));
        prop_assert!((s - best_threshold_score(&n, &m).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn soft_cdf_is_monotone_and_inside_unit_interval(
        x in prop::collection::vec(-3.0f64..3.0, 2..30),
        k in 1.0f64..300.0,
    ) {
        let q = soft_cdf_values(&x, k);
        for i in 0..x.len() {
            prop_assert!(q[i] > 0.0 && q[i] < 1.0);
            for j in 0..x.len() {
                if x[i] < x[j] {
                    prop_assert!(q[i] <= q[j]);
                }
            }
        }
    }

    #[test]
    fn probit_inverts_the_normal_cdf(q in 1e-6f64..(1.0 - 1e-6)) {
        let z = probit(q);
        prop_assert!((amulab_core::gaussianize::normal_cdf(z) - q).abs() <= 1e-12);
    }
}
