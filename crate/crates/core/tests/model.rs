use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinkflow::dataio::{build_marginals_and_plans, generate_synthetic, SyntheticSpec};
use sinkflow::model::{
    batch_loss, batch_loss_and_grad, predict_plan, rollout, train, training_samples, Checkpoint, LossConfig,
    ModelInput, ModelParams, TrainingSample,
};
use sinkflow::nn::OptimizerConfig;
use sinkflow::{FlowSeries, MarginalDistribution, SinkhornConfig, TransportPlan};

fn synthetic_series(k: usize, t: usize, seed: u64) -> FlowSeries {
    let mut kernel = vec![vec![0.1 / (k - 1) as f64; k]; k];
    for (i, row) in kernel.iter_mut().enumerate() {
        row[i] = 0.9;
    }
    let spec = SyntheticSpec {
        k,
        n: 400,
        t,
        kernel,
        drift: vec![],
        initial: None,
        seed,
    };
    build_marginals_and_plans(&generate_synthetic(&spec).unwrap()).unwrap()
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn random_input(rng: &mut ChaCha8Rng, k: usize) -> ModelInput {
    let flow = |rng: &mut ChaCha8Rng| -> Vec<f64> { random_simplex(rng, k * k) };
    ModelInput::new(
        k,
        [random_simplex(rng, k), random_simplex(rng, k), random_simplex(rng, k)],
        [flow(rng), flow(rng)],
    )
    .unwrap()
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let series = synthetic_series(4, 8, 3);
    let samples = training_samples(&series, 0..7).unwrap();
    let params = ModelParams::new(4, &[12], 5).unwrap();
    let cfg = SinkhornConfig::tight();
    for mix in [0.0, 0.3, 1.0] {
        let (_, grad) = batch_loss_and_grad(&samples, &params, mix, &cfg).unwrap();
        let base = params.flat();
        let h = 1e-6;
        let mut fd = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut probe = params.clone();
            let mut p = base.clone();
            p[i] += h;
            probe.set_flat(&p).unwrap();
            let up = batch_loss(&samples, &probe, mix, &cfg).unwrap();
            p[i] -= 2.0 * h;
            probe.set_flat(&p).unwrap();
            let down = batch_loss(&samples, &probe, mix, &cfg).unwrap();
            fd[i] = (up - down) / (2.0 * h);
        }
        let err: f64 = grad.iter().zip(&fd).map(|(g, f)| (g - f) * (g - f)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().map(|f| f * f).sum::<f64>().sqrt();
        assert!(err / scale <= 1e-3, "mix {mix}: relative error {}", err / scale);
    }
}

#[test]
fn trained_predictions_conserve_current_mass() {
    let series = synthetic_series(4, 30, 1);
    let samples = training_samples(&series, 0..29).unwrap();
    let cfg = SinkhornConfig::default();
    let loss_cfg = LossConfig {
        epochs: 50,
        optimizer: OptimizerConfig::adam(),
        ..LossConfig::default()
    };
    let params = train(&samples, ModelParams::new(4, &[16], 0).unwrap(), &loss_cfg, &cfg)
        .unwrap()
        .params;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let input = random_input(&mut rng, 4);
        let p = predict_plan(&input, &params, &cfg).unwrap();
        let worst = p
            .plan
            .source_mass()
            .iter()
            .zip(input.current())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // Row sums of S deviate from 1 by at most the reported residual.
        assert!(worst <= p.transition.residual() + 1e-15, "{worst}");
        if p.transition.converged() {
            assert!(worst <= cfg.tol);
        }
    }
}

#[test]
fn loss_mix_extremes_ignore_the_other_target() {
    let series = synthetic_series(3, 6, 2);
    let samples = training_samples(&series, 0..5).unwrap();
    let params = ModelParams::new(3, &[8], 1).unwrap();
    let cfg = SinkhornConfig::tight();
    let swap_plans: Vec<TrainingSample> = samples
        .iter()
        .map(|s| TrainingSample {
            target: TransportPlan::new(s.target.flow().transpose()).unwrap(),
            ..s.clone()
        })
        .collect();
    let swap_next: Vec<TrainingSample> = samples
        .iter()
        .map(|s| TrainingSample {
            next_marginal: MarginalDistribution::uniform(3),
            ..s.clone()
        })
        .collect();
    let g = |set: &[TrainingSample], mix| batch_loss_and_grad(set, &params, mix, &cfg).unwrap().1;
    assert_eq!(g(&samples, 1.0), g(&swap_plans, 1.0));
    assert_eq!(g(&samples, 0.0), g(&swap_next, 0.0));
    assert_ne!(g(&samples, 0.5), g(&swap_plans, 0.5));
}

#[test]
fn overfits_a_single_sample() {
    let series = synthetic_series(3, 4, 7);
    let samples = training_samples(&series, 2..3).unwrap();
    let loss_cfg = LossConfig {
        loss_mix: 0.5,
        learning_rate: 0.01,
        epochs: 1500,
        optimizer: OptimizerConfig::adam(),
    };
    let cfg = SinkhornConfig::default();
    let out = train(&samples, ModelParams::new(3, &[18], 3).unwrap(), &loss_cfg, &cfg).unwrap();
    let final_loss = batch_loss(&samples, &out.params, 0.5, &cfg).unwrap();
    assert!(final_loss < 1e-4, "{final_loss}");
    assert!(out.loss_trace[0] > final_loss);
}

#[test]
fn training_is_deterministic_and_zero_epochs_is_identity() {
    let series = synthetic_series(3, 12, 4);
    let samples = training_samples(&series, 0..11).unwrap();
    let cfg = SinkhornConfig::default();
    let init = ModelParams::new(3, &[9], 8).unwrap();
    let loss_cfg = LossConfig {
        epochs: 20,
        ..LossConfig::default()
    };
    let a = train(&samples, init.clone(), &loss_cfg, &cfg).unwrap();
    let b = train(&samples, init.clone(), &loss_cfg, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.loss_trace, b.loss_trace);
    let none = train(&samples, init.clone(), &LossConfig { epochs: 0, ..loss_cfg }, &cfg).unwrap();
    assert_eq!(none.params, init);
    assert!(none.loss_trace.is_empty());
}

#[test]
fn training_samples_skip_missing_history() {
    let series = synthetic_series(3, 10, 5);
    assert_eq!(training_samples(&series, 0..9).unwrap().len(), 7);
    assert!(training_samples(&series, 0..10).is_err());
}

#[test]
fn rollout_feeds_predictions_back() {
    let series = synthetic_series(3, 10, 6);
    let params = ModelParams::new(3, &[10], 2).unwrap();
    let cfg = SinkhornConfig::default();
    let input = ModelInput::from_series(&series, 5).unwrap();
    let steps = rollout(&input, &params, 4, &cfg).unwrap();
    assert_eq!(steps.len(), 4);
    assert_eq!(steps[0], predict_plan(&input, &params, &cfg).unwrap());
    for w in steps.windows(2) {
        for (a, b) in w[1].plan.source_mass().iter().zip(w[0].next_marginal()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    let advanced = input.advance(&steps[0].plan).unwrap();
    assert_eq!(steps[1], predict_plan(&advanced, &params, &cfg).unwrap());
    assert!(rollout(&input, &params, 0, &cfg).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let params = ModelParams::new(4, &[7, 5], 11).unwrap();
    let ckpt = Checkpoint::new(
        &params,
        LossConfig::default(),
        SinkhornConfig::default(),
        serde_json::json!({"k": 4}),
    );
    let text = serde_json::to_string(&ckpt).unwrap();
    let back = Checkpoint::from_json(&text).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.params().unwrap(), params);
    let broken = text.replace("sinkflow-checkpoint", "other");
    assert!(Checkpoint::from_json(&broken).is_err());
}
