use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vae2_core::bounds::{cauchy_schwarz_check, random_instance, tightness_epsilon, Constraints, Sizes};
use vae2_core::eval::best_of_n;
use vae2_core::nn::gaussian_kl_value;
use vae2_core::worldmodel::{build_dataset, split_sequence};
use vae2_core::{
    train_model, AdamConfig, AdamState, BaselineKind, Checkpoint, MlpConfig, MlpParams, ModelKind, OutputActivation,
    Tensor, Vae2Config, WorldConfig,
};

fn small_mlp(seed: u64) -> MlpParams {
    let config = MlpConfig {
        in_dim: 3,
        hidden_dims: vec![5, 4],
        out_dim: 2,
        output_activation: OutputActivation::Sigmoid,
    };
    MlpParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative(code in prop::collection::vec((-5.0f64..5.0, -8.0f64..8.0), 1..12)) {
        let (mean, logvar): (Vec<f64>, Vec<f64>) = code.into_iter().unzip();
        prop_assert!(gaussian_kl_value(&mean, &logvar) >= 0.0);
    }

    #[test]
    fn mlp_rows_are_independent(seed in 0u64..1000, rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..6)) {
        let p = small_mlp(seed);
        let n = rows.len();
        let batch = Tensor::new(vec![n, 3], rows.concat()).unwrap();
        let reversed = Tensor::new(vec![n, 3], rows.iter().rev().flatten().copied().collect()).unwrap();
        let a = p.eval(&batch).unwrap();
        let b = p.eval(&reversed).unwrap();
        for i in 0..n {
            prop_assert_eq!(&a.data()[2 * i..2 * i + 2], &b.data()[2 * (n - 1 - i)..2 * (n - i)]);
        }
    }

    #[test]
    fn adam_zero_gradient_only_decays(seed in 0u64..1000, wd in prop_oneof![Just(0.0), 1e-6f64..1e-2]) {
        let mut p = small_mlp(seed);
        let before = p.flatten();
        let config = AdamConfig { weight_decay: wd, ..AdamConfig::default() };
        let mut state = AdamState::new("net", &p, config);
        let zeros: Vec<Vec<f64>> = p.tensors().map(|t| vec![0.0; t.len()]).collect();
        state.step(&mut p, &zeros).unwrap();
        for (a, b) in before.iter().zip(p.flatten()) {
            if wd == 0.0 {
                prop_assert_eq!(b, *a);
            } else {
                prop_assert!((b - a * (1.0 - config.lr * wd)).abs() <= 2.0 * f64::EPSILON * a.abs());
            }
        }
    }

    #[test]
    fn adam_first_step_moves_each_coordinate_by_lr(seed in 0u64..1000, g in 1e-3f64..10.0) {
        let mut p = small_mlp(seed);
        let before = p.flatten();
        let config = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut state = AdamState::new("net", &p, config);
        let grads: Vec<Vec<f64>> = p
            .tensors()
            .map(|t| (0..t.len()).map(|i| if i % 2 == 0 { g } else { -g }).collect())
            .collect();
        state.step(&mut p, &grads).unwrap();
        for (a, b) in before.iter().zip(p.flatten()) {
            prop_assert!(((a - b).abs() - config.lr).abs() < config.lr * 1e-5);
        }
        prop_assert_eq!(state.steps(), 1);
    }

    #[test]
    fn split_concatenates_back(values in prop::collection::vec(0.0f64..1.0, 1..10).prop_map(|v| v.repeat(3))) {
        let s = split_sequence(&values).unwrap();
        prop_assert_eq!([s.observed, s.transition, s.future].concat(), values);
    }

    #[test]
    fn random_instances_respect_the_bound(seed in 0u64..10_000, e in 2usize..=6, s in 2usize..=6, v in 2usize..=6, z in 2usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let constraints = Constraints { markov: true, s_independent_of_z: seed % 2 == 0 };
        let inst = random_instance(Sizes { e, s, v, z }, &mut rng, constraints).unwrap();
        prop_assert!(cauchy_schwarz_check(&inst, 0, v - 1).unwrap().slack >= -1e-9);
        let (eps, log_c) = tightness_epsilon(&inst, e - 1, 0).unwrap();
        prop_assert!(eps >= -1e-12 && eps <= log_c + 1e-9);
    }
}

fn tiny_run(kind: ModelKind, seed: u64) -> (String, String) {
    let ds = build_dataset(&WorldConfig::with_count(60), seed).unwrap();
    let config = Vae2Config {
        epochs: 3,
        batch_size: 16,
        seed,
        ..Vae2Config::default()
    };
    let (model, history) = train_model(kind, &ds, &config, |_, _| {}).unwrap();
    (Checkpoint { model, config }.to_json().unwrap(), history.to_csv())
}

#[test]
fn training_is_deterministic_per_seed() {
    for kind in [ModelKind::Vae2, ModelKind::Baseline(BaselineKind::VaeGan), ModelKind::Baseline(BaselineKind::AnnealVae)] {
        let a = tiny_run(kind, 4);
        assert_eq!(a, tiny_run(kind, 4), "{kind}");
        assert_ne!(a.0, tiny_run(kind, 5).0, "{kind}");
    }
}

#[test]
fn best_of_n_is_monotone_per_item() {
    let ds = build_dataset(&WorldConfig::with_count(60), 2).unwrap();
    let config = Vae2Config {
        epochs: 2,
        batch_size: 16,
        ..Vae2Config::default()
    };
    let (model, _) = train_model(ModelKind::Vae2, &ds, &config, |_, _| {}).unwrap();
    let curve = best_of_n(&model, &ds.test, &[1, 4, 9, 30], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for row in &curve.per_item {
        assert!(row.windows(2).all(|w| w[1] <= w[0]), "{row:?}");
    }
    assert!(curve.points.windows(2).all(|w| w[1].1 <= w[0].1));
}
