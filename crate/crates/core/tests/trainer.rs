use markovdt::envsuite::{generate_dataset, posture_env, OfflineDataset};
use markovdt::numkernel::{seeded, Tensor};
use markovdt::seqmodel::{FreezeMode, ModelConfig, ParamRole, PolicyModel};
use markovdt::trainer::{dt_loss, dt_loss_batch, fit_normalization, penalty_loss, train, StepRecord, TrainConfig};
use markovdt::weightsio::{load_checkpoint, model_to_archive};
use proptest::prelude::*;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        context_k: 5,
        max_timestep: 128,
        ..ModelConfig::default()
    }
}

fn tiny_setup(seed: u64) -> (PolicyModel, OfflineDataset) {
    let ds = generate_dataset(&posture_env(), markovdt::envsuite::Quality::Medium, 4, seed).unwrap();
    let mut model = PolicyModel::new(tiny_config(), seed).unwrap();
    fit_normalization(&mut model, &ds).unwrap();
    (model, ds)
}

fn quick_config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        learning_rate: 1e-3,
        warmup_steps: 5,
        context_k: 5,
        markov_heads: vec![vec![0]],
        checkpoint_every: 10,
        log_every: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn dt_loss_examples() {
    let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
    assert_eq!(dt_loss(&a, &a).unwrap(), 0.0);
    assert_eq!(dt_loss(&a, &b).unwrap(), 2.0);
    assert!(dt_loss(&a, &Tensor::zeros(&[2, 2])).is_err());
    assert!(dt_loss_batch(&[]).is_err());
}

#[test]
fn dt_loss_matches_direct_summation() {
    let mut rng = seeded(3);
    let pairs: Vec<(Tensor, Tensor)> = (0..6)
        .map(|_| (Tensor::randn(&[7, 3], 1.0, &mut rng), Tensor::randn(&[7, 3], 1.0, &mut rng)))
        .collect();
    let mut want = 0.0;
    for (p, t) in &pairs {
        for i in 0..7 {
            for j in 0..3 {
                want += (p.get(i, j) - t.get(i, j)).powi(2);
            }
        }
    }
    want /= 6.0;
    assert!((dt_loss_batch(&pairs).unwrap() - want).abs() < 1e-12);
}

fn gates_with_listed_means(listed: &[(usize, f64)], n_heads: usize, tokens: usize) -> Tensor {
    let rest: f64 = 1.0 - listed.iter().map(|(_, v)| v).sum::<f64>();
    let others = n_heads - listed.len();
    let mut g = Tensor::zeros(&[tokens, n_heads]);
    for t in 0..tokens {
        for h in 0..n_heads {
            let v = listed.iter().find(|(i, _)| *i == h).map_or(rest / others as f64, |(_, v)| *v);
            g.set(t, h, v);
        }
    }
    g
}

#[test]
fn penalty_examples() {
    let g = gates_with_listed_means(&[(1, 0.2), (5, 0.188), (10, 0.1)], 12, 9);
    let heads = vec![vec![1, 5, 10]];
    let b = penalty_loss(1.0, std::slice::from_ref(&g), &heads, 0.1).unwrap();
    assert!((b.penalty - 0.488).abs() < 1e-12);
    assert!((b.total - 1.0488).abs() < 1e-12);
    assert_eq!(penalty_loss(1.0, std::slice::from_ref(&g), &heads, 0.0).unwrap().total, 1.0);

    let zeroed = gates_with_listed_means(&[(1, 0.0), (5, 0.0), (10, 0.0)], 12, 9);
    assert_eq!(penalty_loss(0.7, &[zeroed], &heads, 0.1).unwrap().total, 0.7);

    assert!(penalty_loss(1.0, std::slice::from_ref(&g), &[vec![12]], 0.1).is_err());
    assert!(penalty_loss(1.0, std::slice::from_ref(&g), &[vec![], vec![0]], 0.1).is_err());
    assert!(penalty_loss(1.0, &[g], &heads, -0.1).is_err());
}

proptest! {
    #[test]
    fn total_is_monotone_in_alpha(
        dt in 0.0f64..10.0,
        a1 in 0.0f64..2.0,
        a2 in 0.0f64..2.0,
        m1 in 0.0f64..0.5,
        m2 in 0.0f64..0.5,
    ) {
        let g = gates_with_listed_means(&[(0, m1), (2, m2)], 4, 5);
        let heads = vec![vec![0, 2]];
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let b_lo = penalty_loss(dt, std::slice::from_ref(&g), &heads, lo).unwrap();
        let b_hi = penalty_loss(dt, std::slice::from_ref(&g), &heads, hi).unwrap();
        prop_assert!(b_lo.total <= b_hi.total);
        prop_assert!((b_lo.total - (b_lo.dt_loss + lo * b_lo.penalty)).abs() <= 1e-12);
    }
}

#[test]
fn zero_steps_checkpoint_is_initialization() {
    let (mut model, ds) = tiny_setup(0);
    let init = model_to_archive(&model).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = train(&mut model, &ds, &quick_config(0), Some(dir.path())).unwrap();
    assert_eq!(report.checkpoints.len(), 1);
    assert_eq!(report.checkpoints[0].0, 0);
    for path in [report.checkpoints[0].1.clone(), dir.path().join("ck_final.mhw")] {
        let loaded = model_to_archive(&load_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(loaded.to_bytes().unwrap(), init.to_bytes().unwrap());
    }
}

#[test]
fn same_seed_is_bitwise_reproducible() {
    let run = |seed: u64| {
        let (mut model, ds) = tiny_setup(1);
        let cfg = TrainConfig {
            seed,
            ..quick_config(15)
        };
        let report = train(&mut model, &ds, &cfg, None).unwrap();
        (model_to_archive(&model).unwrap().to_bytes().unwrap(), report.dt_history)
    };
    let (a, ha) = run(4);
    let (b, hb) = run(4);
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let (c, _) = run(5);
    assert_ne!(a, c);
}

#[test]
fn frozen_attention_is_bitwise_unchanged_at_every_checkpoint() {
    let (mut model, ds) = tiny_setup(2);
    let before = model.clone();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        freeze: FreezeMode::EmbeddingAndFfnOnly,
        ..quick_config(25)
    };
    let report = train(&mut model, &ds, &cfg, Some(dir.path())).unwrap();
    assert_eq!(report.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 10, 20, 25]);
    let mut ffn_moved = false;
    for (_, path) in &report.checkpoints {
        let m = load_checkpoint(path).unwrap();
        for ((name, t), role) in m.params().iter().zip(m.params().roles()) {
            let orig = before.params().get(name).unwrap();
            match role {
                ParamRole::Attention | ParamRole::Gate | ParamRole::AttentionNorm | ParamRole::Buffer => {
                    assert!(t.bitwise_eq(orig), "{name} moved")
                }
                ParamRole::FeedForward => ffn_moved |= !t.bitwise_eq(orig),
                _ => {}
            }
        }
    }
    assert!(ffn_moved);
}

#[test]
fn metric_log_obeys_total_invariant() {
    let (mut model, ds) = tiny_setup(3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        alpha: 0.3,
        ..quick_config(12)
    };
    let report = train(&mut model, &ds, &cfg, Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let records: Vec<StepRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 5, 10, 12]);
    assert_eq!(records, report.log);
    for r in &records {
        assert!((r.loss.total - (r.loss.dt_loss + 0.3 * r.loss.penalty)).abs() <= 1e-12);
        assert_eq!(r.loss.dt_loss, report.dt_history[r.step as usize - 1]);
        let row_sum: f64 = r.loss.gate_means[0].iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-12);
        assert!((r.loss.penalty - r.loss.gate_means[0][0]).abs() < 1e-15);
    }
    let first = text.lines().next().unwrap();
    let keys: Vec<&str> = ["\"step\"", "\"dt_loss\"", "\"penalty\"", "\"total\"", "\"gate_means\""].to_vec();
    assert!(keys.iter().all(|k| first.contains(k)));
}

#[test]
fn loss_decreases_on_posture() {
    let (mut model, ds) = tiny_setup(4);
    let cfg = TrainConfig {
        steps: 400,
        batch_size: 8,
        learning_rate: 3e-3,
        warmup_steps: 20,
        context_k: 5,
        alpha: 0.0,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &ds, &cfg, None).unwrap();
    let at_100 = report.dt_history[99];
    let tail = report.tail_mean(100).unwrap();
    assert!(tail < at_100, "tail {tail} vs step-100 {at_100}");
}

#[test]
fn rejects_bad_inputs() {
    let (mut model, ds) = tiny_setup(5);
    let mut empty = ds.clone();
    empty.trajectories.clear();
    assert!(train(&mut model, &empty, &quick_config(1), None).is_err());
    let wide = TrainConfig {
        context_k: 6,
        ..quick_config(1)
    };
    assert!(train(&mut model, &ds, &wide, None).is_err());
    let bad_heads = TrainConfig {
        markov_heads: vec![vec![2]],
        ..quick_config(1)
    };
    assert!(train(&mut model, &ds, &bad_heads, None).is_err());
    let maze = generate_dataset(
        &markovdt::envsuite::blindmaze_env(5, 0).unwrap(),
        markovdt::envsuite::Quality::Medium,
        2,
        0,
    )
    .unwrap();
    assert!(train(&mut model, &maze, &quick_config(1), None).is_err());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = TrainConfig {
        markov_heads: vec![vec![0, 1]],
        freeze: FreezeMode::EmbeddingAndFfnOnly,
        ..TrainConfig::default()
    };
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), cfg);
    assert!(toml::from_str::<TrainConfig>("stepz = 3").is_err());
    let d = TrainConfig::default();
    assert_eq!((d.steps, d.batch_size, d.warmup_steps, d.context_k), (20_000, 16, 1_000, 20));
    assert_eq!((d.learning_rate, d.weight_decay, d.alpha), (1e-4, 1e-4, 0.1));
}
