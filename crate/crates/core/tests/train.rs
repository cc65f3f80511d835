use glmha::attention::Variant;
use glmha::config::AttnConfig;
use glmha::train::{
    ablation_plan, make_task, psnr, train, AblationKind, ModelSpec, OptimizerKind, SyntheticTask, TaskSpec,
    TrainSettings, ALPHA_GRID,
};
use glmha::{Error, Tensor};

fn small_task(noise_std: f64, seed: u64) -> SyntheticTask {
    make_task(&TaskSpec {
        seed,
        noise_std,
        train_size: 32,
        val_size: 8,
        ..TaskSpec::default()
    })
    .unwrap()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn channel(t: &Tensor, c: usize) -> &[f64] {
    t.row(c)
}

#[test]
fn task_is_deterministic_per_seed() {
    let spec = TaskSpec::default();
    let a = make_task(&spec).unwrap();
    let b = make_task(&spec).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.val, b.val);
    assert_eq!(a.data_range.to_bits(), b.data_range.to_bits());
}

#[test]
fn clean_channels_are_correlated_on_twenty_seeds() {
    for seed in 0..20 {
        let task = make_task(&TaskSpec {
            seed,
            train_size: 16,
            val_size: 4,
            ..TaskSpec::default()
        })
        .unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for s in &task.train {
            let n = s.target.shape()[0];
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        total += pearson(channel(&s.target, i), channel(&s.target, j)).abs();
                        count += 1;
                    }
                }
            }
        }
        let mean = total / count as f64;
        assert!(mean > 0.2, "seed {seed}: {mean}");
        assert!((mean - task.mean_channel_correlation()).abs() < 1e-12);
    }
}

#[test]
fn noiseless_task_has_identical_inputs_and_targets() {
    let task = small_task(0.0, 3);
    assert!(task.train.iter().chain(&task.val).all(|s| s.input == s.target));
    let noisy = small_task(0.4, 3);
    assert!(noisy.train.iter().all(|s| s.input != s.target));
}

#[test]
fn zero_learning_rate_keeps_full_batch_loss_constant() {
    let task = small_task(0.4, 1);
    let settings = TrainSettings {
        lr: 0.0,
        steps: 20,
        batch_size: 0,
        eval_every: 10,
        ..TrainSettings::default()
    };
    let (_, log) = train(&ModelSpec::default_toy(Variant::Glmha), &task, &settings).unwrap();
    assert_eq!(log.train_loss.len(), 20);
    assert!(log
        .train_loss
        .iter()
        .all(|l| l.to_bits() == log.train_loss[0].to_bits()));
}

#[test]
fn single_block_fits_the_identity_task() {
    let task = small_task(0.0, 2);
    let spec = ModelSpec::uniform(Variant::Csa, AttnConfig::new(16, 2, 2.0, 8, 8), 1);
    let settings = TrainSettings {
        steps: 500,
        batch_size: 0,
        eval_every: 100,
        ..TrainSettings::default()
    };
    let (_, log) = train(&spec, &task, &settings).unwrap();
    let last = *log.train_loss.last().unwrap();
    assert!(last < 1e-6, "{last}");
}

#[test]
fn training_is_bitwise_deterministic() {
    let task = small_task(0.4, 4);
    let settings = TrainSettings {
        steps: 30,
        eval_every: 10,
        seed: 9,
        ..TrainSettings::default()
    };
    let spec = ModelSpec::default_toy(Variant::Glmha);
    let (_, a) = train(&spec, &task, &settings).unwrap();
    let (_, b) = train(&spec, &task, &settings).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let bits = |l: &[f64]| l.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.train_loss), bits(&b.train_loss));
}

#[test]
fn loss_decreases_for_every_variant() {
    let task = small_task(0.4, 5);
    let settings = TrainSettings {
        steps: 201,
        eval_every: 100,
        ..TrainSettings::default()
    };
    for v in Variant::ALL {
        let (_, log) = train(&ModelSpec::default_toy(v), &task, &settings).unwrap();
        assert!(
            log.train_loss[200] < log.train_loss[0],
            "{v}: {} vs {}",
            log.train_loss[200],
            log.train_loss[0]
        );
        assert!(log.train_loss.iter().all(|l| l.is_finite()));
        assert!(log.evals.windows(2).all(|w| w[0].step < w[1].step));
        assert_eq!(log.evals.last().unwrap().step, 201);
    }
}

#[test]
fn log_serialization_omits_wall_clock() {
    let task = small_task(0.4, 6);
    let settings = TrainSettings {
        steps: 3,
        eval_every: 3,
        ..TrainSettings::default()
    };
    let (_, log) = train(&ModelSpec::default_toy(Variant::Csa), &task, &settings).unwrap();
    let json = serde_json::to_value(&log).unwrap();
    assert!(json.get("wall_clock_secs").is_none());
    assert!(log.wall_clock_secs >= 0.0);
    assert_eq!(log.attention_params, 3 * 3 * 16 * 16);
}

#[test]
fn divergence_reports_last_good_step() {
    let task = small_task(0.4, 7);
    let settings = TrainSettings {
        optimizer: OptimizerKind::SgdMomentum { momentum: 0.9 },
        lr: 1e4,
        steps: 200,
        ..TrainSettings::default()
    };
    match train(&ModelSpec::default_toy(Variant::Csa), &task, &settings) {
        Err(Error::Diverged {
            step,
            last_good_step,
            loss,
        }) => {
            assert!(step >= 1);
            assert_eq!(last_good_step, Some(step - 1));
            assert!(loss.is_nan() || loss > 1e6);
        }
        other => panic!("expected divergence, got {:?}", other.map(|(_, l)| l.final_val_loss)),
    }
}

#[test]
fn invalid_settings_are_config_errors() {
    let task = small_task(0.4, 8);
    let spec = ModelSpec::default_toy(Variant::Csa);
    for lr in [-1e-3, f64::NAN, f64::INFINITY] {
        let settings = TrainSettings {
            lr,
            ..TrainSettings::default()
        };
        assert!(matches!(train(&spec, &task, &settings), Err(Error::Config(_))));
    }
    let narrow = ModelSpec::uniform(Variant::Csa, AttnConfig::new(8, 2, 2.0, 8, 8), 2);
    assert!(matches!(
        train(&narrow, &task, &TrainSettings::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn psnr_definition() {
    assert!((psnr(1.0, 1.0)).abs() < 1e-15);
    assert!((psnr(0.01, 1.0) - 20.0).abs() < 1e-12);
    assert!((psnr(0.25, 2.0) - 10.0 * 16f64.log10()).abs() < 1e-12);
}

#[test]
fn alpha_plan_covers_the_grid_at_r2() {
    let plan = ablation_plan(AblationKind::Alpha, &ModelSpec::default_toy(Variant::Csa)).unwrap();
    assert_eq!(plan.len(), 1 + ALPHA_GRID.len());
    for ((_, spec), alpha) in plan[1..].iter().zip(ALPHA_GRID) {
        assert!(spec
            .blocks
            .iter()
            .all(|b| b.variant == Variant::Glmha && b.config.alpha == alpha && b.config.reduction == 2.0));
    }
}

#[test]
fn swapping_variants_changes_no_shapes() {
    let task = small_task(0.4, 9);
    let x = &task.val[0].input;
    for v in Variant::ALL {
        let model = glmha::train::Model::init(&ModelSpec::default_toy(v), 0).unwrap();
        assert_eq!(model.forward(x).unwrap().shape(), x.shape());
    }
}
