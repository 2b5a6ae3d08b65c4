use std::sync::Mutex;

use markovdt::envsuite::{blindmaze_env, posture_env, EnvInstance, EnvSpec, Environment};
use markovdt::evalharness::{
    context_sweep, gate_importance, gate_importance_on_windows, head_importance_ablation, head_importance_on_windows,
    pgm_bytes, rollout, rollout_recorded, rollout_with, text_heatmap, Controller, ShortestPathController, SweepPoint,
    TargetRtg,
};
use markovdt::numkernel::{derive_seed, substream, Tensor};
use markovdt::seqmodel::{head_param_name, ModelConfig, PolicyModel, Window};

fn posture_model(n_heads: usize, d_model: usize, seed: u64) -> PolicyModel {
    PolicyModel::new(
        ModelConfig {
            n_heads,
            d_model,
            d_ff: 2 * d_model,
            context_k: 6,
            max_timestep: 128,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

#[test]
fn scripted_optimal_maze_length_equals_bfs_distance() {
    for (size, layout) in [(5, 0), (8, 1), (12, 2)] {
        let spec = blindmaze_env(size, layout).unwrap();
        let (report, windows) =
            rollout_with(&ShortestPathController, &spec, TargetRtg::ShortestPath, 10, 8, 3, true).unwrap();
        let EnvInstance::Maze(maze) = spec.build().unwrap() else { unreachable!() };
        for (ep, w) in report.episodes.iter().zip(&windows) {
            let s0 = w[0].states.row(0);
            let d = maze.distance_from((s0[0] as usize, s0[1] as usize)).unwrap();
            assert_eq!(ep.length, d);
            assert!(ep.reached_goal);
            assert!((ep.target_rtg - (1.0 - 0.01 * d as f64)).abs() < 1e-12);
            assert!((ep.episode_return - ep.target_rtg).abs() < 1e-9);
        }
    }
}

#[test]
fn sealed_goal_runs_to_the_cap() {
    let spec = EnvSpec::CustomMaze {
        rows: vec![".#...".into(), "#....".into(), ".....".into(), ".....".into(), ".....".into()],
        goal: [0, 0],
    };
    let (report, _) = rollout_with(&ShortestPathController, &spec, TargetRtg::ShortestPath, 4, 3, 0, false).unwrap();
    for ep in &report.episodes {
        assert_eq!(ep.length, 500);
        assert!(!ep.reached_goal);
        assert_eq!(ep.target_rtg, 0.7);
    }
    assert_eq!(report.episode_length.mean, 500.0);
}

#[test]
fn zero_episodes_and_dimension_mismatch_error() {
    let model = posture_model(2, 8, 0);
    assert!(rollout(&model, &posture_env(), TargetRtg::Fixed(50.0), 4, 0, 0).is_err());
    assert!(rollout(&model, &blindmaze_env(5, 0).unwrap(), TargetRtg::Fixed(0.5), 4, 1, 0).is_err());
    assert!(rollout(&model, &posture_env(), TargetRtg::Fixed(50.0), 7, 1, 0).is_err());
}

/// Records each fed return-to-go and the actions taken, returning zero actions.
struct Recorder {
    seen: Mutex<Vec<(usize, f64)>>,
}

impl Controller for Recorder {
    fn act(&self, window: &Window, _env: &EnvInstance) -> markovdt::Result<Vec<f64>> {
        let t = *window.timesteps.last().unwrap();
        self.seen.lock().unwrap().push((t, *window.rtg.last().unwrap()));
        Ok(vec![0.1])
    }
}

#[test]
fn fed_rtg_is_target_minus_observed_rewards() {
    let rec = Recorder { seen: Mutex::new(Vec::new()) };
    let target = 80.0;
    let (report, _) = rollout_with(&rec, &posture_env(), TargetRtg::Fixed(target), 5, 1, 9, false).unwrap();
    // Replay the episode on the same substream to recover the rewards.
    let mut env = posture_env().build().unwrap();
    let mut rng = substream(derive_seed(9, "rollout"), 0);
    env.reset(&mut rng);
    let mut cumulative = 0.0;
    let mut seen = rec.seen.into_inner().unwrap();
    seen.sort_by_key(|s| s.0);
    for (t, fed) in &seen {
        assert_eq!(*fed, target - cumulative, "t = {t}");
        cumulative += env.step(&[0.1], &mut rng).unwrap().reward;
    }
    assert_eq!(report.episodes[0].episode_return, cumulative);
    assert_eq!(report.episodes[0].length, 100);
}

#[test]
fn context_is_truncated_to_k() {
    let model = posture_model(2, 8, 1);
    let (_, windows) = rollout_recorded(&model, &posture_env(), TargetRtg::Fixed(90.0), 4, 1, 0).unwrap();
    for (t, w) in windows[0].iter().enumerate() {
        assert_eq!(w.len(), (t + 1).min(4));
        assert_eq!(*w.timesteps.last().unwrap(), t);
        assert_eq!(w.num_actions(), w.len() - 1);
    }
}

#[test]
fn value_free_head_has_zero_importance() {
    let mut model = posture_model(2, 8, 2);
    model.params_mut().set(&head_param_name(0, 1, "wv"), Tensor::zeros(&[8, 4])).unwrap();
    let imp = head_importance_ablation(&model, &posture_env(), TargetRtg::Fixed(90.0), 4, 2, 0).unwrap();
    assert_eq!(imp.scores[0][1], 0.0);
    assert!(imp.scores[0][0] > 0.0);
    assert_eq!(imp.steps, 200);
}

#[test]
fn identical_heads_have_identical_importance() {
    let mut model = posture_model(2, 8, 3);
    for w in ["wq", "wk", "wv"] {
        let t = model.params().get(&head_param_name(0, 0, w)).unwrap().clone();
        model.params_mut().set(&head_param_name(0, 1, w), t).unwrap();
    }
    let mut wo = model.params().get("layer0.attn.wo").unwrap().clone();
    for i in 0..4 {
        for j in 0..8 {
            wo.set(4 + i, j, wo.get(i, j));
        }
    }
    model.params_mut().set("layer0.attn.wo", wo).unwrap();
    let imp = head_importance_ablation(&model, &posture_env(), TargetRtg::Fixed(90.0), 4, 1, 1).unwrap();
    assert!((imp.scores[0][0] - imp.scores[0][1]).abs() < 1e-12);
}

#[test]
fn head_without_gate_mass_changes_nothing() {
    let mut model = posture_model(2, 8, 4);
    // Constant gate input e_0 for every token; head 1's logit is pushed to -inf.
    model.params_mut().set("layer0.ln1.gamma", Tensor::zeros(&[8])).unwrap();
    let mut beta = Tensor::zeros(&[8]);
    beta.data_mut()[0] = 1.0;
    model.params_mut().set("layer0.ln1.beta", beta).unwrap();
    let mut gate = Tensor::zeros(&[8, 2]);
    gate.set(0, 1, -1e4);
    model.params_mut().set("layer0.gate.w", gate).unwrap();
    let (_, windows) = rollout_recorded(&model, &posture_env(), TargetRtg::Fixed(90.0), 4, 1, 0).unwrap();
    let imp = head_importance_on_windows(&model, &windows[0]).unwrap();
    assert_eq!(imp.scores[0][1], 0.0);
    let g = gate_importance_on_windows(&model, &windows[0], &[1]).unwrap();
    assert_eq!(g.g_markov, 0.0);
}

#[test]
fn uniform_gate_gives_share_of_heads() {
    let model = posture_model(12, 24, 5);
    let (g, _) = gate_importance(&model, &posture_env(), TargetRtg::Fixed(90.0), 3, 1, 0, &[1, 5, 10]).unwrap();
    assert!((g.g_markov - 0.25).abs() < 1e-15);
    let (none, _) = gate_importance(&model, &posture_env(), TargetRtg::Fixed(90.0), 3, 1, 0, &[]).unwrap();
    assert_eq!(none.g_markov, 0.0);
    assert!(gate_importance(&model, &posture_env(), TargetRtg::Fixed(90.0), 3, 1, 0, &[12]).is_err());

    let mut cfg = model.config().clone();
    cfg.moa_enabled = false;
    let plain = PolicyModel::new(cfg, 5).unwrap();
    assert!(gate_importance(&plain, &posture_env(), TargetRtg::Fixed(90.0), 3, 1, 0, &[1]).is_err());
}

#[test]
fn gate_importance_is_reproducible() {
    let mut model = posture_model(2, 8, 6);
    let mut rng = markovdt::numkernel::seeded(1);
    model.params_mut().set("layer0.gate.w", Tensor::randn(&[8, 2], 1.0, &mut rng)).unwrap();
    let spec = blindmaze_env(5, 3).unwrap();
    let mut cfg = model.config().clone();
    cfg.state_dim = 4;
    cfg.action_dim = 4;
    cfg.max_timestep = 512;
    let maze_model = PolicyModel::new(cfg, 6).unwrap();
    let a = gate_importance(&maze_model, &spec, TargetRtg::ShortestPath, 6, 2, 4, &[0]).unwrap();
    let b = gate_importance(&maze_model, &spec, TargetRtg::ShortestPath, 6, 2, 4, &[0]).unwrap();
    assert_eq!(a, b);
    let g = gate_importance(&model, &posture_env(), TargetRtg::Fixed(90.0), 6, 2, 4, &[0, 1]).unwrap().0;
    assert!((g.g_markov - 1.0).abs() < 1e-12);
}

#[test]
fn sweep_normalizes_to_smallest_k() {
    let table = context_sweep(&[10, 20, 50], &[0, 1], "return", |k, s| {
        Ok(SweepPoint {
            metric: k as f64,
            g_markov: 0.5 / (1.0 + k as f64 / 100.0) + s as f64 * 0.01,
        })
    })
    .unwrap();
    assert_eq!(table.rows[0].r_markov, 100.0);
    let g10 = table.rows[0].g_markov;
    let g50 = table.row(50).unwrap().g_markov;
    assert!((table.row(50).unwrap().r_markov - 100.0 * g50 / g10).abs() < 1e-12);
    assert!((g10 - (0.5 / 1.1 + 0.005)).abs() < 1e-12);
    assert!(table.render().lines().count() == 5);
    assert_eq!(table.to_jsonl().unwrap().lines().count(), 3);

    let never = |_: usize, _: u64| -> markovdt::Result<SweepPoint> { unreachable!() };
    assert!(context_sweep(&[10], &[0], "x", never).is_err());
    assert!(context_sweep(&[20, 10], &[0], "x", never).is_err());
}

#[test]
fn heatmap_outputs() {
    let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.25]]).unwrap();
    assert_eq!(text_heatmap(&m).unwrap(), "@ \n+:\n");
    let pgm = pgm_bytes(&m, 2).unwrap();
    let header = b"P5\n4 4\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 16);
    assert_eq!(pgm[header.len()], 255);
    assert_eq!(pgm[header.len() + 2], 0);
}
