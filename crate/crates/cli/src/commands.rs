//! Subcommand bodies. Each validates its inputs, runs, and writes its
//! artifacts under the output path before reporting a failed check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use markovdt::envsuite::{blindmaze_env, generate_dataset, posture_env, Quality};
use markovdt::evalharness::{
    context_sweep, head_importance_ablation, rollout_recorded, text_heatmap, write_pgm, SweepPoint, TargetRtg,
};
use markovdt::markovlab::{
    adversarial_drift_test, drift_bound, first_violation, markov_stats, mc_expectation, paired_probe,
    shuffled_control, DriftMode, MarkovReport, ProbeConfig, StepBound, DEFAULT_EPS,
};
use markovdt::numkernel::{derive_seed, Tensor};
use markovdt::seqmodel::{head_param_name, ForwardOptions};
use markovdt::weightsio::{archive_qk_products, load_archive, save_archive, synth_markov_head_scaled, WeightArchive};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::exit::Invalid;
use crate::pipeline::{beside, evaluate, load_model, train_run, write_json, write_text, RunRecord};
use crate::{
    AnalyzeArgs, CheckpointArgs, ConcentrationArgs, GenDataArgs, HeatmapArgs, SweepArgs, SynthHeadsArgs, Theorem1Args,
    Theorem4Args, TrainArgs,
};

/// Longest drift simulation `verify theorem4` will run.
const MAX_DRIFT_STEPS: u64 = 10_000_000;

fn jsonl<T: serde::Serialize>(items: impl IntoIterator<Item = T>) -> anyhow::Result<String> {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(&item)?);
        s.push('\n');
    }
    Ok(s)
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn fail_unless(pass: bool, what: &str) -> anyhow::Result<()> {
    if pass {
        Ok(())
    } else {
        Err(Invalid(format!("{what} failed")).into())
    }
}

/// Synthetic Markov matrix `W_q W_kᵀ`, built the same way as model heads.
fn synthetic_product(d_model: usize, d_k: usize, r: f64, scale: f64, seed: u64) -> anyhow::Result<Tensor> {
    let head = synth_markov_head_scaled(d_model, d_k, r, scale, seed)?;
    Ok(head.wq.matmul(&head.wk.transpose())?)
}

pub fn analyze(a: &AnalyzeArgs) -> anyhow::Result<()> {
    let archive = load_archive(&a.weights)?;
    let products = archive_qk_products(&archive, a.layer)?;
    let report = MarkovReport::from_products(products, a.r, a.eps)?;
    let table = format!("# {} ({})\n{}", a.weights.display(), archive.provenance, report.render_table());
    write_text(&a.out.join("analyze.txt"), &table)?;
    write_text(&a.out.join("analyze.jsonl"), &jsonl(&report.heads)?)?;
    print!("{table}");
    Ok(())
}

/// The estimate of `E[E A Eᵀ]` must itself be Markov at `r`, with every
/// diagonal entry within `sigmas` standard errors of `trace(A)`.
pub fn verify_theorem1(a: &Theorem1Args) -> anyhow::Result<()> {
    let m = synthetic_product(a.d, a.d, a.r, 1.0, a.seed)?;
    let trace: f64 = (0..a.d).map(|i| m.get(i, i)).sum();
    let est = mc_expectation(&m, a.k, a.samples, derive_seed(a.seed, "mc"))?;
    let stats = markov_stats(&est.mean, a.r, DEFAULT_EPS)?;
    let diagonal: Vec<_> = (0..a.k)
        .map(|i| {
            let (v, se) = (est.mean.get(i, i), est.std_err.get(i, i));
            json!({"index": i, "estimate": v, "std_err": se, "z": (v - trace) / se})
        })
        .collect();
    let max_z = (0..a.k)
        .map(|i| ((est.mean.get(i, i) - trace) / est.std_err.get(i, i)).abs())
        .fold(0.0, f64::max);
    let pass = stats.is_markov && max_z <= a.sigmas;
    let summary = json!({
        "d": a.d, "r": a.r, "k": a.k, "samples": a.samples, "seed": a.seed,
        "trace": trace,
        "matrix": markov_stats(&m, a.r, DEFAULT_EPS)?,
        "estimate": stats,
        "diagonal": diagonal,
        "max_abs_z": max_z,
        "sigmas": a.sigmas,
        "pass": pass,
    });
    write_json(&a.out.join("verify.json"), &summary)?;
    println!(
        "trace(A) {trace:.6}  estimate ratio {:.1} (markov at r={}: {})  max |z| {max_z:.2}  {}",
        stats.ratio,
        a.r,
        stats.is_markov,
        verdict(pass)
    );
    fail_unless(pass, "theorem1 check")
}

/// No worst-case (or random) run shorter than `K_max` may lose the Markov
/// property. Simulates `factor · K_max` steps to show where it breaks.
pub fn verify_theorem4(a: &Theorem4Args) -> anyhow::Result<()> {
    let mode: DriftMode = a.mode.parse()?;
    let m = synthetic_product(a.d, a.d, a.r, 1.0, a.seed)?;
    let bound = drift_bound(&m, a.r, a.eta0, a.grad_bound)?;
    let steps = match bound.k_max {
        StepBound::Finite(k) => k.max(1).saturating_mul(a.factor),
        StepBound::Unbounded => 0,
    };
    if steps > MAX_DRIFT_STEPS {
        return Err(Invalid(format!("{steps} simulation steps exceed the limit of {MAX_DRIFT_STEPS}")).into());
    }
    let trace = adversarial_drift_test(&m, a.r, a.eta0, a.grad_bound, steps, mode, derive_seed(a.seed, "drift"))?;
    // Entry i is the state after i + 1 updates.
    let broke_at = first_violation(&trace).map(|i| i as u64 + 1);
    let pass = broke_at.is_none_or(|s| !bound.k_max.covers(s));
    let summary = json!({
        "d": a.d, "r": a.r, "eta0": a.eta0, "grad_bound": a.grad_bound, "mode": a.mode,
        "seed": a.seed, "bound": bound, "simulated_steps": steps,
        "first_non_markov_step": broke_at, "pass": pass,
    });
    write_json(&a.out.join("verify.json"), &summary)?;
    let records = trace.iter().enumerate().map(|(i, s)| {
        json!({"step": i + 1, "ratio": s.ratio, "min_diag": s.min_diag, "is_markov": s.is_markov})
    });
    write_text(&a.out.join("trace.jsonl"), &jsonl(records)?)?;
    let k_max = match bound.k_max {
        StepBound::Finite(k) => k.to_string(),
        StepBound::Unbounded => "unbounded".into(),
    };
    let broke = broke_at.map_or("never".into(), |s| format!("at step {s}"));
    println!("K_max {k_max}  simulated {steps} steps  Markov lost {broke}  {}", verdict(pass));
    fail_unless(pass, "theorem4 check")
}

/// A Markov head must put at least `min_factor` times the last-token mass
/// of its Frobenius-matched shuffled control.
pub fn verify_concentration(a: &ConcentrationArgs) -> anyhow::Result<()> {
    let m = synthetic_product(a.d_model, a.d_k, a.r, 1.0, a.seed)?;
    let control = shuffled_control(&m, derive_seed(a.seed, "control"))?;
    let cfg = ProbeConfig {
        k: a.k,
        d_k: a.d_k,
        n_samples: a.samples,
        seed: derive_seed(a.seed, "probe"),
    };
    let mass = paired_probe(&[&m, &control], &cfg)?;
    let factor = mass[0] / mass[1];
    let pass = factor >= a.min_factor;
    let summary = json!({
        "d_model": a.d_model, "d_k": a.d_k, "r": a.r, "k": a.k, "samples": a.samples, "seed": a.seed,
        "head_mass": mass[0], "control_mass": mass[1], "uniform_mass": 1.0 / a.k as f64,
        "factor": factor, "min_factor": a.min_factor, "pass": pass,
    });
    write_json(&a.out.join("verify.json"), &summary)?;
    println!(
        "last-token mass {:.4} vs control {:.4} (uniform {:.4})  factor {factor:.2}  {}",
        mass[0],
        mass[1],
        1.0 / a.k as f64,
        verdict(pass)
    );
    fail_unless(pass, "concentration check")
}

pub fn synth_heads(a: &SynthHeadsArgs) -> anyhow::Result<()> {
    if a.heads.is_empty() {
        return Err(Invalid("--heads must list at least one head".into()).into());
    }
    let mut archive = WeightArchive::new("synthetic");
    for (key, value) in [
        ("r", json!(a.r)),
        ("scale", json!(a.scale)),
        ("seed", json!(a.seed)),
        ("d_model", json!(a.d_model)),
        ("d_k", json!(a.d_k)),
    ] {
        archive.metadata.insert(key.into(), value);
    }
    let mut products = Vec::with_capacity(a.heads.len());
    for &h in &a.heads {
        // Same per-head seeds as heads installed into a model.
        let seed = derive_seed(a.seed, &format!("layer{}.head{h}", a.layer));
        let head = synth_markov_head_scaled(a.d_model, a.d_k, a.r, a.scale, seed)?;
        products.push((a.layer, h, head.wq.matmul(&head.wk.transpose())?));
        archive.push(head_param_name(a.layer, h, "wq"), head.wq)?;
        archive.push(head_param_name(a.layer, h, "wk"), head.wk)?;
    }
    save_archive(&archive, &a.out)?;
    print!("{}", MarkovReport::from_products(products, a.r, DEFAULT_EPS)?.render_table());
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> anyhow::Result<()> {
    let env = match a.env.as_str() {
        "posture" => posture_env(),
        "maze" => blindmaze_env(a.size, a.layout_seed)?,
        other => return Err(Invalid(format!("unknown environment {other:?}; expected posture or maze")).into()),
    };
    let quality: Quality = a.quality.parse()?;
    let ds = generate_dataset(&env, quality, a.episodes, a.seed)?;
    ds.save(&a.out)?;
    println!(
        "{}: {} episodes, {} steps, best return {:.4}, mean return {:.4} -> {}",
        env.name(),
        ds.trajectories.len(),
        ds.total_steps(),
        ds.stats.max_return,
        ds.stats.mean_return,
        a.out.display()
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?.resolve(a.seed)?;
    if a.dry_run {
        let text = cfg.to_toml()?;
        write_text(&a.out.join("config.resolved.toml"), &text)?;
        print!("{text}");
        return Ok(());
    }
    let run = train_run(cfg, &a.out)?;
    let first = run.report.dt_history.first().copied().unwrap_or(f64::NAN);
    let tail = run.report.tail_mean(100).unwrap_or(f64::NAN);
    println!(
        "{}: {} steps, dt loss {first:.4} -> {tail:.4} (mean of last 100); markov heads {:?}",
        run.record.env.name(),
        run.report.dt_history.len(),
        run.record.markov_heads
    );
    println!("wrote {}", a.out.join("ck_final.mhw").display());
    Ok(())
}

fn with_overrides(a: &CheckpointArgs) -> anyhow::Result<RunRecord> {
    let mut record = RunRecord::locate(a.run.as_deref(), &a.checkpoint)?;
    if let Some(n) = a.episodes {
        record.eval_episodes = n;
    }
    if let Some(s) = a.seed {
        record.seed = s;
    }
    if let Some(k) = a.context_k {
        record.context_k = k;
    }
    if let Some(v) = a.target_rtg {
        record.target_rtg = TargetRtg::Fixed(v);
    }
    Ok(record)
}

/// Writes `eval_report.json`, `episodes.jsonl`, `eval.txt` and, for gated
/// models, `gates.json`.
pub fn eval(a: &CheckpointArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let record = with_overrides(a)?;
    let out = a.out.clone().unwrap_or_else(|| beside(&a.checkpoint, "eval"));
    let (report, gates) = evaluate(&model, &record)?;
    let mut text = report.render();
    if let Some(g) = &gates {
        writeln!(text, "G_Markov {:.4} over heads {:?}", g.g_markov, g.markov_indices)?;
        write_json(&out.join("gates.json"), g)?;
    }
    write_json(&out.join("eval_report.json"), &report)?;
    write_text(&out.join("episodes.jsonl"), &jsonl(&report.episodes)?)?;
    write_text(&out.join("eval.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Writes `importance.jsonl` and a ranked `importance.txt`.
pub fn ablate_heads(a: &CheckpointArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let record = with_overrides(a)?;
    let out = a.out.clone().unwrap_or_else(|| beside(&a.checkpoint, "ablation"));
    let imp = head_importance_ablation(
        &model,
        &record.env,
        record.target_rtg,
        record.context_k,
        record.eval_episodes,
        record.seed,
    )?;
    let mut ranked: Vec<(usize, usize, f64)> = imp
        .scores
        .iter()
        .enumerate()
        .flat_map(|(l, row)| row.iter().enumerate().map(move |(h, &v)| (l, h, v)))
        .collect();
    ranked.sort_by(|x, y| y.2.total_cmp(&x.2));
    let top = ranked.first().map_or(0.0, |r| r.2);
    let mut text = format!("# zero-ablation importance over {} steps\nlayer | head | importance | markov\n", imp.steps);
    for (l, h, v) in ranked {
        let bar = if top > 0.0 { "#".repeat((v / top * 40.0).round() as usize) } else { String::new() };
        let markov = l == 0 && record.markov_heads.contains(&h);
        writeln!(text, "{l:>5} | {h:>4} | {v:>10.5} | {:<3} {bar}", if markov { "yes" } else { "no" })?;
    }
    write_text(&out.join("importance.jsonl"), &imp.to_jsonl()?)?;
    write_text(&out.join("importance.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// One training run per `(k, seed)` under `out/k{k}/seed{s}`, then
/// `sweep.jsonl` and `sweep.txt`. The metric is mean return on posture and
/// mean episode length on mazes.
pub fn sweep_context(a: &SweepArgs) -> anyhow::Result<()> {
    if a.ks.len() < 2 || a.ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Invalid("--ks needs at least two strictly ascending values".into()).into());
    }
    if a.seeds.is_empty() {
        return Err(Invalid("--seeds must list at least one seed".into()).into());
    }
    let base = load_config(a.config.as_deref())?;
    let metric_name = if base.env.is_maze() { "episode_length" } else { "return" };
    let mut points = BTreeMap::new();
    for &k in &a.ks {
        for &seed in &a.seeds {
            let mut cfg = base.clone();
            cfg.train.context_k = k;
            cfg.eval.context_k = None;
            let cfg = cfg.resolve(Some(seed))?;
            let is_maze = cfg.env.is_maze();
            let run = train_run(cfg, &a.out.join(format!("k{k}")).join(format!("seed{seed}")))?;
            let (report, gates) = evaluate(&run.model, &run.record)?;
            let g = gates.ok_or_else(|| Invalid("context sweeps need a gated (moa_enabled) model".into()))?;
            let metric = if is_maze { report.episode_length.mean } else { report.episode_return.mean };
            println!("k {k:>3}  seed {seed}  {metric_name} {metric:.4}  G_Markov {:.4}", g.g_markov);
            points.insert((k, seed), SweepPoint { metric, g_markov: g.g_markov });
        }
    }
    let table = context_sweep(&a.ks, &a.seeds, metric_name, |k, s| Ok(points[&(k, s)]))?;
    write_text(&a.out.join("sweep.jsonl"), &table.to_jsonl()?)?;
    write_text(&a.out.join("sweep.txt"), &table.render())?;
    print!("{}", table.render());
    Ok(())
}

fn heatmap_pair(m: &Tensor, stem: &Path, pixel_scale: usize) -> anyhow::Result<()> {
    write_text(&stem.with_extension("txt"), &text_heatmap(m)?)?;
    write_pgm(m, pixel_scale, &stem.with_extension("pgm"))?;
    Ok(())
}

/// Layout under the output directory, each as `.txt` and `.pgm`:
/// `attention/layer{L}_head{H}` token-by-token weights of one window,
/// `gates/layer{L}` token-by-head gate scores, and `qk/layer{L}_head{H}`
/// magnitudes of `W_q W_kᵀ`.
pub fn export_heatmaps(a: &HeatmapArgs) -> anyhow::Result<()> {
    let c = &a.checkpoint;
    let model = load_model(&c.checkpoint)?;
    let mut record = with_overrides(c)?;
    // One episode is enough to pick a window.
    record.eval_episodes = 1;
    let out = c.out.clone().unwrap_or_else(|| beside(&c.checkpoint, "heatmaps"));
    let (_, mut visited) =
        rollout_recorded(&model, &record.env, record.target_rtg, record.context_k, 1, record.seed)?;
    let windows = visited.swap_remove(0);
    let last = windows.len() - 1;
    let step = a.step.unwrap_or(last);
    if step > last {
        return Err(Invalid(format!("--step {step} is past the episode's last step {last}")).into());
    }
    let fwd = model.forward(
        &windows[step],
        &ForwardOptions {
            capture_attention: true,
            ..Default::default()
        },
    )?;
    let cfg = model.config();
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            heatmap_pair(&fwd.attention[l][h], &out.join("attention").join(format!("layer{l}_head{h}")), a.pixel_scale)?;
            let qk = model.qk_product(l, h)?.map(f64::abs);
            heatmap_pair(&qk, &out.join("qk").join(format!("layer{l}_head{h}")), a.pixel_scale)?;
        }
        if cfg.moa_enabled {
            heatmap_pair(&fwd.gates[l], &out.join("gates").join(format!("layer{l}")), a.pixel_scale)?;
        }
    }
    let meta = json!({
        "env": record.env, "seed": record.seed, "context_k": record.context_k,
        "step": step, "tokens": windows[step].token_count(),
    });
    write_json(&out.join("window.json"), &meta)?;
    println!("wrote heatmaps for step {step} ({} tokens) to {}", windows[step].token_count(), out.display());
    Ok(())
}
