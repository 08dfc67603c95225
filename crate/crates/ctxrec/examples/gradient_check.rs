//! Verify every analytic gradient in the crate against central finite
//! differences.
//!
//! All training here is hand-written backpropagation, so the gradient is
//! the part most worth distrusting. For each model kind (and each ranker
//! integration mode) this draws a random small instance, computes the
//! analytic gradient of the loss at a random parameter point, and compares
//! it coordinate-by-coordinate with `(f(w+h) - f(w-h)) / 2h`.
//!
//! One subtlety: the ranker's deep tower uses ReLU, and at a freshly
//! initialized point the zero biases put pre-activations exactly on the
//! kink where a two-sided difference matches no subgradient. The fix is to
//! jitter the parameters to a generic point first. The pretrain models are
//! smooth (sigmoid, softmax, exp) and need no such care.
//!
//! Run with `cargo run --example gradient_check`.

use ctxrec::numerics::{finite_diff_grad, gradient_relative_error};
use ctxrec::pretrain::{
    analytic_grad, corrupt_mask, example_loss, ModelKind, PretrainConfig, PretrainModel,
};
use ctxrec::ranker::{self, IntegrationMode, LabeledExample, RankerConfig, RankerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn check_pretrain(kind: ModelKind, seed: u64) -> f64 {
    let input_dim = 7;
    let config = PretrainConfig {
        heads: 3,
        hidden_dim: 6,
        seed,
        ..PretrainConfig::default_for(kind, input_dim)
    };
    let model = PretrainModel::init(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let x: Vec<f64> = (0..input_dim).map(|_| rng.gen_range(0.05..0.95)).collect();
    let x_tilde = corrupt_mask(&x, 0.8, &mut rng).unwrap();
    let eta: Vec<f64> = (0..config.hidden_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();

    let analytic = analytic_grad(&model, &x, &x_tilde, &eta).unwrap();
    let oracle = finite_diff_grad(
        |flat| {
            let mut probe = model.clone();
            probe.unflatten(flat).unwrap();
            example_loss(&probe, &x, &x_tilde, &eta).unwrap()
        },
        &model.flatten(),
        1e-5,
    )
    .unwrap();
    gradient_relative_error(&analytic, &oracle)
}

fn check_ranker(kind: Option<ModelKind>, integration: IntegrationMode, seed: u64) -> f64 {
    let input_dim = 4;
    let pre = kind.map(|k| {
        let config = PretrainConfig {
            heads: 2,
            hidden_dim: 4,
            seed: seed + 1,
            ..PretrainConfig::default_for(k, input_dim)
        };
        PretrainModel::init(&config).unwrap()
    });
    let config = RankerConfig {
        deep_layers: vec![5, 3],
        integration,
        seed,
        ..RankerConfig::default()
    };
    let mut model = RankerModel::init(&config, input_dim, pre).unwrap();

    // jitter off the ReLU kinks
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
    let flat: Vec<f64> = model
        .flatten()
        .iter()
        .map(|v| v + rng.gen_range(-0.3..0.3))
        .collect();
    model.unflatten(&flat).unwrap();

    let examples: Vec<LabeledExample> = (0..6)
        .map(|i| LabeledExample {
            features: (0..input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            label: f64::from(i % 2),
        })
        .collect();

    let analytic = ranker::analytic_grad(&model, &examples).unwrap();
    let oracle = finite_diff_grad(
        |flat| {
            let mut probe = model.clone();
            probe.unflatten(flat).unwrap();
            ranker::mean_loss(&probe, &examples).unwrap()
        },
        &model.flatten(),
        1e-5,
    )
    .unwrap();
    gradient_relative_error(&analytic, &oracle)
}

fn main() {
    let trials = 5;
    println!("relative error of analytic vs central-difference gradients\n");

    for kind in [ModelKind::Dae, ModelKind::Vae, ModelKind::Macdae] {
        let worst = (0..trials)
            .map(|t| check_pretrain(kind, 100 + t))
            .fold(0.0_f64, f64::max);
        let label = kind.to_string();
        println!("{label:>24}: worst of {trials} trials {worst:.2e}");
        assert!(worst < 1e-4);
    }

    for (kind, integration) in [
        (None, IntegrationMode::None),
        (Some(ModelKind::Dae), IntegrationMode::FeatureBased),
        (Some(ModelKind::Dae), IntegrationMode::FineTune),
        (Some(ModelKind::Vae), IntegrationMode::FineTune),
        (Some(ModelKind::Macdae), IntegrationMode::FineTune),
    ] {
        let worst = (0..trials)
            .map(|t| check_ranker(kind, integration, 200 + t))
            .fold(0.0_f64, f64::max);
        let label = match kind {
            Some(k) => format!("ranker+{k} {integration}"),
            None => "ranker wide_deep".to_string(),
        };
        println!("{label:>24}: worst of {trials} trials {worst:.2e}");
        assert!(worst < 1e-4);
    }

    println!("\nall gradients agree to better than 1e-4");
}
