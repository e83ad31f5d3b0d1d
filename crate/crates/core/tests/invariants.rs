use proptest::prelude::*;

use softreset::autodiff::Tensor;
use softreset::bench::{cumulative_error, online_accuracy, per_task_accuracy};
use softreset::drift::{
    closed_form_gamma, estimate_gamma_mc, predictive_prior, CellMap, DriftState, GammaConfig,
    GaussianBelief, Noise, SharingScheme,
};
use softreset::model::{init_mlp, MlpObjective, MlpSpec, PriorMean, TaskKind};
use softreset::optim::{gaussian_kl, lr_scale, soft_reset_target, variance_ratio};
use softreset::rng::Lane;
use softreset::streams::{Batch, Stream, StreamKind, StreamSpec, Targets};

fn sizes() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..7, 2..5).prop_map(|mut v| {
        let last = v.len() - 1;
        v[last] = v[last].max(2);
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn look_ahead_variance_lies_between_posterior_and_prior(
        gamma in 0.0f64..=1.0,
        mu in -3.0f64..3.0,
        mu0 in -3.0f64..3.0,
        sigma in 0.01f64..2.0,
        sigma0 in 0.01f64..2.0,
    ) {
        let spec = MlpSpec::new(vec![1, 1], TaskKind::Regression).unwrap();
        let (_, mut prior) = init_mlp(&spec, 1.0, PriorMean::Zero, 0).unwrap();
        prior.mu0 = vec![mu0; 2];
        prior.sigma0 = vec![sigma0; 2];
        let cells = CellMap::new(SharingScheme::Global, &spec.groups());
        let belief = GaussianBelief { mu: vec![mu; 2], sigma: vec![sigma; 2] };
        let look = predictive_prior(&belief, &prior, &DriftState::constant(1, gamma), &cells);
        let (lo, hi) = (sigma.min(sigma0), sigma.max(sigma0));
        prop_assert!(look.sigma[0] >= lo - 1e-12 && look.sigma[0] <= hi + 1e-12);
        prop_assert!(look.mu[0] >= mu.min(mu0) - 1e-12 && look.mu[0] <= mu.max(mu0) + 1e-12);
    }

    #[test]
    fn closed_form_gamma_is_clipped(
        d in 1usize..6,
        seed in 0u64..1000,
        lambda in 0.0f64..3.0,
        gamma0 in 0.0f64..=1.0,
    ) {
        let mut rng = Lane::new(seed, &[]);
        let spec = MlpSpec::new(vec![d, 1], TaskKind::Regression).unwrap();
        let n = spec.num_params();
        let cells = CellMap::new(SharingScheme::PerLayer, &spec.groups());
        let sigma0: Vec<f64> = (0..n).map(|_| 0.1 + rng.uniform()).collect();
        let sigma: Vec<f64> = (0..n).map(|_| 0.1 + rng.uniform()).collect();
        let cf = closed_form_gamma(
            &rng.normals(n), &rng.normals(n), &sigma, &sigma0, &rng.normals(n),
            lambda, &vec![gamma0; cells.count()], &cells,
        ).unwrap();
        prop_assert!(cf.drift.gamma.iter().all(|g| (0.0..=1.0).contains(g)));
        for c in &cf.degenerate {
            prop_assert_eq!(cf.drift.gamma[*c], gamma0);
        }
    }

    #[test]
    fn mc_gamma_stays_in_unit_interval(
        sizes in sizes(),
        seed in 0u64..1000,
        eta in 0.001f64..1.0,
        k in 1usize..4,
    ) {
        let spec = MlpSpec::new(sizes.clone(), TaskKind::Classification).unwrap();
        let (params, prior) = init_mlp(&spec, 0.5, PriorMean::SpecificInit, seed).unwrap();
        let mut rng = Lane::new(seed, &[7]);
        let rows = 3;
        let inputs = Tensor::matrix(rows, sizes[0], rng.normals(rows * sizes[0])).unwrap();
        let labels = (0..rows).map(|_| rng.below(*sizes.last().unwrap())).collect();
        let batch = Batch::new(inputs, Targets::Classes(labels));
        let obj = MlpObjective { spec: &spec, batch: &batch };
        let cells = CellMap::new(SharingScheme::PerLayer, &spec.groups());
        let post = GaussianBelief {
            mu: params.values.iter().map(|v| v + 0.3 * rng.normal()).collect(),
            sigma: prior.sigma0.iter().map(|s| 0.8 * s).collect(),
        };
        let cfg = GammaConfig { k_gamma: k, eta_gamma: eta, ..GammaConfig::default() };
        let mut noise = Lane::new(seed, &[8]);
        let drift = estimate_gamma_mc(&post, &prior, &cells, &cfg, None, &obj, Noise::Sampled(&mut noise)).unwrap();
        prop_assert_eq!(drift.gamma.len(), cells.count());
        prop_assert!(drift.gamma.iter().all(|g| (0.0..=1.0).contains(g)));
    }

    #[test]
    fn shrink_target_is_a_convex_combination(
        theta in prop::collection::vec(-5.0f64..5.0, 1..20),
        seed in 0u64..1000,
    ) {
        let mut rng = Lane::new(seed, &[]);
        let mu0 = rng.normals(theta.len());
        let gamma: Vec<f64> = (0..theta.len()).map(|_| rng.uniform()).collect();
        let target = soft_reset_target(&theta, &mu0, &gamma);
        for i in 0..theta.len() {
            let (lo, hi) = (theta[i].min(mu0[i]), theta[i].max(mu0[i]));
            prop_assert!(target[i] >= lo - 1e-12 && target[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn learning_rate_grows_as_gamma_falls(g1 in 0.0f64..=1.0, g2 in 0.0f64..=1.0, s in 0.05f64..=1.0) {
        prop_assert!(lr_scale(g1, s) >= 1.0 - 1e-12);
        if g1 <= g2 {
            prop_assert!(lr_scale(g1, s) >= lr_scale(g2, s) - 1e-12);
        }
        prop_assert!((lr_scale(1.0, s) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kl_is_non_negative(
        mu in -3.0f64..3.0, mu_t in -3.0f64..3.0, sigma in 0.01f64..3.0, sigma_t in 0.01f64..3.0,
    ) {
        prop_assert!(gaussian_kl(mu, sigma, mu_t, sigma_t) >= -1e-12);
        prop_assert!(gaussian_kl(mu, sigma, mu, sigma).abs() < 1e-12);
    }

    #[test]
    fn variance_ratio_is_one_without_drift(sigma in 0.01f64..2.0, sigma0 in 0.01f64..2.0) {
        prop_assert!((variance_ratio(sigma, sigma0, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_metrics_are_bounded(
        rows in 1usize..10,
        classes in 2usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = Lane::new(seed, &[]);
        let pred = Tensor::matrix(rows, classes, rng.normals(rows * classes)).unwrap();
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(classes)).collect();
        let a = online_accuracy(&pred, &Targets::Classes(labels));
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!((a * rows as f64).round(), a * rows as f64);
    }

    #[test]
    fn cumulative_error_matches_task_means(
        tasks in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 1..20), 1..6),
    ) {
        let flat: Vec<f64> = tasks.iter().flatten().cloned().collect();
        let direct = cumulative_error(&flat, TaskKind::Classification);
        let by_task: f64 = tasks
            .iter()
            .map(|t| t.len() as f64 * (1.0 - per_task_accuracy(t).unwrap()))
            .sum();
        prop_assert!((direct - by_task).abs() < 1e-9);
    }

    #[test]
    fn stream_batches_respect_the_schedule(
        subset in 10usize..60,
        tasks in 1usize..4,
        epochs in 1usize..3,
        batch in 1usize..16,
        seed in 0u64..100,
        kind in prop::sample::select(vec![StreamKind::RandomLabel, StreamKind::Permuted, StreamKind::LabelNoise]),
    ) {
        let data = softreset::streams::synthetic_fallback_dataset(subset, 3, 32, seed).unwrap();
        let spec = StreamSpec {
            kind,
            subset_size: subset,
            num_tasks: tasks,
            epochs_per_task: epochs,
            batch_size: batch,
            ..StreamSpec::default()
        };
        let stream = Stream::new(&spec, Some(&data), seed).unwrap();
        let per_task = stream.steps_per_task();
        let total = stream.total_steps();
        let batches: Vec<Batch> = stream.collect();
        prop_assert_eq!(batches.len(), total);
        prop_assert_eq!(total, per_task * tasks);
        for (t, b) in batches.iter().enumerate() {
            prop_assert_eq!(b.step, t);
            prop_assert_eq!(b.task, t / per_task);
            prop_assert_eq!(b.boundary, t % per_task == 0);
            prop_assert!(!b.is_empty() && b.len() <= batch);
        }
    }
}
