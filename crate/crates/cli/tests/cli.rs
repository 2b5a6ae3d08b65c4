use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use markovdt::numkernel::{derive_seed, seeded, Tensor};
use markovdt::seqmodel::head_param_name;
use markovdt::weightsio::{save_archive, synth_markov_head, DType, WeightArchive};
use tempfile::TempDir;

fn markovdt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_markovdt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = markovdt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn status(dir: &Path, args: &[&str]) -> i32 {
    markovdt(dir, args).status.code().expect("exited normally")
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

const TINY_POSTURE: &str = r#"
seed = 3
[data]
episodes = 8
[train]
steps = 12
learning_rate = 3e-3
warmup_steps = 2
context_k = 5
checkpoint_every = 5
log_every = 4
[eval]
episodes = 2
"#;

const SUBCOMMANDS: &[&[&str]] = &[
    &["analyze"],
    &["verify", "theorem1"],
    &["verify", "theorem4"],
    &["verify", "concentration"],
    &["synth-heads"],
    &["gen-data"],
    &["train"],
    &["eval"],
    &["ablate-heads"],
    &["sweep-context"],
    &["export-heatmaps"],
];

#[test]
fn every_flag_in_help_has_a_description() {
    let tmp = TempDir::new().unwrap();
    for sub in SUBCOMMANDS {
        let mut args = sub.to_vec();
        args.push("--help");
        let help = ok(tmp.path(), &args);
        let flags: Vec<&str> = help.lines().map(str::trim).filter(|l| l.starts_with("--")).collect();
        assert!(!flags.is_empty(), "{sub:?} lists no flags");
        for line in flags {
            // "--name <NAME>  Description [default: ..]": text beyond the placeholder.
            let rest = line.split_once("  ").map(|(_, r)| r.trim()).unwrap_or("");
            assert!(!rest.is_empty() && !rest.starts_with('['), "{sub:?}: undocumented flag {line:?}");
        }
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(status(tmp.path(), &["no-such-command"]), 2);
    assert_eq!(status(tmp.path(), &["analyze"]), 2, "--weights is required");
    assert_eq!(status(tmp.path(), &["verify", "theorem1", "--d", "sixteen"]), 2);
    assert_eq!(status(tmp.path(), &["--help"]), 0);
}

#[test]
fn invalid_inputs_exit_with_three() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("unknown.toml"), "seed = 1\n[train]\nlearning_rat = 1e-3\n").unwrap();
    assert_eq!(status(dir, &["train", "--config", "unknown.toml"]), 3);
    fs::write(dir.join("maze.toml"), "[env]\nkind = \"maze\"\nsize = 7\nlayout_seed = 0\n").unwrap();
    assert_eq!(status(dir, &["train", "--config", "maze.toml"]), 3);
    assert_eq!(status(dir, &["gen-data", "--env", "cartpole"]), 3);
    assert_eq!(status(dir, &["gen-data", "--quality", "expert"]), 3);
    assert_eq!(status(dir, &["verify", "theorem4", "--mode", "gentle"]), 3);
    assert_eq!(status(dir, &["sweep-context", "--ks", "20,10"]), 3);
    fs::write(dir.join("garbage.mhw"), b"not an archive").unwrap();
    assert_eq!(status(dir, &["analyze", "--weights", "garbage.mhw"]), 3);
    assert!(!dir.join("out").join("k20").exists(), "nothing trained before validation");
}

#[test]
fn failed_verification_exits_with_three_after_writing_its_report() {
    let tmp = TempDir::new().unwrap();
    let args = ["verify", "concentration", "--samples", "200", "--min-factor", "1000"];
    assert_eq!(status(tmp.path(), &args), 3);
    let report: serde_json::Value =
        serde_json::from_slice(&read(tmp.path().join("out/verify-concentration/verify.json"))).unwrap();
    assert_eq!(report["pass"], false);
    assert!(report["factor"].as_f64().unwrap() > 1.0);
}

#[test]
fn theorem_checks_pass_and_repeat_bitwise() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let t1 = ["verify", "theorem1", "--d", "16", "--r", "25", "--samples", "20000", "--seed", "0"];
    assert!(ok(dir, &t1).contains("PASS"));
    let first = read(dir.join("out/verify-theorem1/verify.json"));
    ok(dir, &t1);
    assert_eq!(first, read(dir.join("out/verify-theorem1/verify.json")));
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["estimate"]["is_markov"], true);

    ok(dir, &["verify", "theorem4", "--d", "4", "--seed", "5"]);
    let v: serde_json::Value = serde_json::from_slice(&read(dir.join("out/verify-theorem4/verify.json"))).unwrap();
    let k_max = v["bound"]["k_max"]["finite"].as_u64().unwrap();
    // Worst-case drift runs far enough to break the property, but never early.
    let broke = v["first_non_markov_step"].as_u64().expect("breaks within ten bounds");
    assert!(broke >= k_max);
    let trace = fs::read_to_string(dir.join("out/verify-theorem4/trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count() as u64, 10 * k_max);

    ok(dir, &["verify", "concentration", "--samples", "500"]);
}

#[test]
fn analyze_reads_f32_archives_with_per_head_names() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let (d_model, d_k) = (32, 8);
    let mut archive = WeightArchive::new("exported-f32");
    let mut rng = seeded(1);
    for h in 0..4 {
        let (wq, wk) = if h == 2 {
            let head = synth_markov_head(d_model, d_k, 20.0, derive_seed(1, "h2")).unwrap();
            (head.wq, head.wk)
        } else {
            (Tensor::randn(&[d_model, d_k], 0.1, &mut rng), Tensor::randn(&[d_model, d_k], 0.1, &mut rng))
        };
        let wv = Tensor::randn(&[d_model, d_k], 0.1, &mut rng);
        archive.push_as(head_param_name(0, h, "wq"), wq, DType::F32).unwrap();
        archive.push_as(head_param_name(0, h, "wk"), wk, DType::F32).unwrap();
        archive.push_as(head_param_name(0, h, "wv"), wv, DType::F32).unwrap();
    }
    save_archive(&archive, &dir.join("heads.mhw")).unwrap();
    let table = ok(dir, &["analyze", "--weights", "heads.mhw", "--r", "20"]);
    assert!(table.contains("exported-f32"));
    let rows: Vec<serde_json::Value> = fs::read_to_string(dir.join("out/analyze/analyze.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 4);
    let markov: Vec<u64> = rows
        .iter()
        .filter(|r| r["is_markov"] == true)
        .map(|r| r["head"].as_u64().unwrap())
        .collect();
    // f32 rounding of a ratio-20+ head keeps it well above threshold.
    assert_eq!(markov, vec![2]);
}

#[test]
fn synthetic_archive_analyzes_as_markov_and_is_seeded() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let args = ["synth-heads", "--heads", "0,3", "--r", "30", "--seed", "4", "--out", "a.mhw"];
    ok(dir, &args);
    let first = read(dir.join("a.mhw"));
    ok(dir, &args);
    assert_eq!(first, read(dir.join("a.mhw")));
    ok(dir, &["synth-heads", "--heads", "0,3", "--r", "30", "--seed", "5", "--out", "b.mhw"]);
    assert_ne!(first, read(dir.join("b.mhw")));
    let table = ok(dir, &["analyze", "--weights", "a.mhw", "--r", "30"]);
    assert_eq!(table.lines().filter(|l| l.ends_with("| yes")).count(), 2, "{table}");
}

#[test]
fn gen_data_is_seeded() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let args = ["gen-data", "--env", "maze", "--size", "5", "--episodes", "6", "--seed", "2", "--out", "a.jsonl"];
    ok(dir, &args);
    ok(dir, &["gen-data", "--env", "maze", "--size", "5", "--episodes", "6", "--seed", "2", "--out", "b.jsonl"]);
    assert_eq!(read(dir.join("a.jsonl")), read(dir.join("b.jsonl")));
    let header: serde_json::Value =
        serde_json::from_str(fs::read_to_string(dir.join("a.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["n_episodes"], 6);
}

#[test]
fn train_then_eval_pipeline_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("exp.cfg"), TINY_POSTURE).unwrap();
    ok(dir, &["train", "--config", "exp.cfg"]);
    for f in [
        "config.resolved.toml",
        "dataset.jsonl",
        "markov_init.txt",
        "markov_final.json",
        "metrics.jsonl",
        "ck_step000000.mhw",
        "ck_step000010.mhw",
        "ck_step000012.mhw",
        "ck_final.mhw",
        "run.json",
    ] {
        assert!(dir.join("out").join(f).exists(), "missing {f}");
    }
    // The echoed config reloads to an identical run.
    ok(dir, &["train", "--config", "out/config.resolved.toml", "--out", "again"]);
    assert_eq!(read(dir.join("out/ck_final.mhw")), read(dir.join("again/ck_final.mhw")));
    assert_eq!(read(dir.join("out/metrics.jsonl")), read(dir.join("again/metrics.jsonl")));
    let resolved = fs::read_to_string(dir.join("out/config.resolved.toml")).unwrap();
    assert!(resolved.contains("markov_heads = [[0, 1]]"), "{resolved}");

    let text = ok(dir, &["eval", "--checkpoint", "out/ck_final.mhw", "--episodes", "3"]);
    assert!(text.contains("G_Markov"));
    let report: serde_json::Value = serde_json::from_slice(&read(dir.join("out/eval/eval_report.json"))).unwrap();
    assert_eq!(report["episodes"].as_array().unwrap().len(), 3);
    assert_eq!(report["context_k"], 5);
    let first = read(dir.join("out/eval/eval_report.json"));
    ok(dir, &["eval", "--checkpoint", "out/ck_final.mhw", "--episodes", "3", "--out", "e2"]);
    assert_eq!(first, read(dir.join("e2/eval_report.json")));
    ok(dir, &["eval", "--checkpoint", "out/ck_final.mhw", "--episodes", "3", "--seed", "9", "--out", "e3"]);
    assert_ne!(first, read(dir.join("e3/eval_report.json")));

    ok(dir, &["ablate-heads", "--checkpoint", "out/ck_final.mhw"]);
    let lines = fs::read_to_string(dir.join("out/ablation/importance.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);

    ok(dir, &["export-heatmaps", "--checkpoint", "out/ck_final.mhw", "--step", "3"]);
    let attn = fs::read_to_string(dir.join("out/heatmaps/attention/layer0_head1.txt")).unwrap();
    // Window of four steps without the pending action: 3·4 − 1 tokens.
    assert_eq!(attn.lines().count(), 11);
    assert!(dir.join("out/heatmaps/qk/layer0_head0.pgm").exists());
    assert!(dir.join("out/heatmaps/gates/layer0.txt").exists());
    assert_eq!(status(dir, &["export-heatmaps", "--checkpoint", "out/ck_final.mhw", "--step", "100"]), 3);

    fs::copy(dir.join("out/ck_final.mhw"), dir.join("lonely.mhw")).unwrap();
    assert_eq!(status(dir, &["eval", "--checkpoint", "lonely.mhw"]), 3, "no run record beside it");
    ok(dir, &["eval", "--checkpoint", "lonely.mhw", "--run", "out/run.json", "--episodes", "3", "--out", "e4"]);
    assert_eq!(first, read(dir.join("e4/eval_report.json")));
}

#[test]
fn sweep_trains_one_model_per_context_and_seed() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("exp.toml"), TINY_POSTURE).unwrap();
    ok(dir, &["sweep-context", "--config", "exp.toml", "--ks", "2,4", "--seeds", "0,1"]);
    for k in [2, 4] {
        for s in [0, 1] {
            assert!(dir.join(format!("out/sweep/k{k}/seed{s}/ck_final.mhw")).exists());
        }
    }
    let rows: Vec<serde_json::Value> = fs::read_to_string(dir.join("out/sweep/sweep.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["r_markov"], 100.0);
    assert_eq!(rows[1]["per_seed"].as_array().unwrap().len(), 2);
}

#[test]
fn shipped_configs_resolve() {
    let tmp = TempDir::new().unwrap();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["posture.toml", "posture-penalty.toml", "maze.toml"] {
        let path = configs.join(name);
        let text = ok(tmp.path(), &["train", "--config", path.to_str().unwrap(), "--dry-run", "--out", name]);
        assert!(text.contains("[train]"), "{name}");
        assert!(tmp.path().join(name).join("config.resolved.toml").exists());
        assert!(!tmp.path().join(name).join("ck_final.mhw").exists(), "dry run trains nothing");
    }
    let maze = fs::read_to_string(tmp.path().join("maze.toml/config.resolved.toml")).unwrap();
    assert!(maze.contains("state_dim = 4") && maze.contains("freeze = \"embedding_and_ffn_only\""), "{maze}");
}
