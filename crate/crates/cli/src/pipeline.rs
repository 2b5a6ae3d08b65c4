//! Dataset, model preparation, training and evaluation shared by the
//! subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use markovdt::envsuite::{generate_dataset, EnvSpec, OfflineDataset};
use markovdt::evalharness::{gate_importance, GateImportance, EvalReport, TargetRtg};
use markovdt::markovlab::{MarkovReport, DEFAULT_EPS};
use markovdt::seqmodel::PolicyModel;
use markovdt::trainer::{fit_normalization, train, TrainReport};
use markovdt::weightsio::{init_from_archive, install_synthetic_heads, load_archive, load_checkpoint, Mapping};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::exit::Invalid;

/// Everything `eval`, `ablate-heads` and `export-heatmaps` need besides the
/// checkpoint. Written as `run.json` next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub env: EnvSpec,
    pub seed: u64,
    pub context_k: usize,
    pub target_rtg: TargetRtg,
    pub eval_episodes: usize,
    /// Heads counted in `G_Markov`: the first layer's penalized heads.
    pub markov_heads: Vec<usize>,
    /// Markov analysis threshold used at initialization.
    pub r: f64,
}

pub const RUN_FILE: &str = "run.json";

impl RunRecord {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("in run record {}", path.display()))
    }

    /// `explicit`, or `run.json` beside the checkpoint.
    pub fn locate(explicit: Option<&Path>, checkpoint: &Path) -> anyhow::Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => checkpoint.parent().unwrap_or(Path::new(".")).join(RUN_FILE),
        };
        if !path.exists() {
            return Err(Invalid(format!(
                "no run record at {}; pass --run or train into the checkpoint's directory",
                path.display()
            ))
            .into());
        }
        Self::load(&path)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn load_dataset(cfg: &ExperimentConfig) -> anyhow::Result<OfflineDataset> {
    match &cfg.data.path {
        Some(path) => {
            let ds = OfflineDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
            if ds.env != cfg.env {
                return Err(Invalid(format!(
                    "dataset {} was collected on {}, config selects {}",
                    path.display(),
                    ds.env.name(),
                    cfg.env.name()
                ))
                .into());
            }
            Ok(ds)
        }
        None => Ok(generate_dataset(&cfg.env, cfg.data.quality, cfg.data.episodes, cfg.seed)?),
    }
}

/// Fresh model with synthetic heads and imported tensors installed and
/// normalization fitted to `dataset`. Returns the slots filled by import.
pub fn prepare_model(cfg: &ExperimentConfig, dataset: &OfflineDataset) -> anyhow::Result<(PolicyModel, Vec<String>)> {
    let mut model = PolicyModel::new(cfg.model.clone(), cfg.seed)?;
    let init = &cfg.init;
    if !init.synthetic_heads.is_empty() {
        install_synthetic_heads(&mut model, init.synthetic_layer, &init.synthetic_heads, init.r, init.scale, cfg.seed)?;
    }
    let mut imported = Vec::new();
    if let Some(path) = &init.archive {
        let archive = load_archive(path).with_context(|| format!("loading archive {}", path.display()))?;
        let mapping = match &init.mapping {
            Some(m) => Mapping::load(m).with_context(|| format!("loading mapping {}", m.display()))?,
            None => Mapping::same_names(&archive, &model),
        };
        imported = init_from_archive(&mut model, &archive, &mapping)?;
    } else if init.mapping.is_some() {
        return Err(Invalid("init.mapping given without init.archive".into()).into());
    }
    fit_normalization(&mut model, dataset)?;
    Ok((model, imported))
}

pub fn default_target(cfg: &ExperimentConfig, dataset: &OfflineDataset) -> TargetRtg {
    match cfg.eval.target_rtg {
        Some(v) => TargetRtg::Fixed(v),
        None if cfg.env.is_maze() => TargetRtg::ShortestPath,
        None => TargetRtg::Fixed(dataset.stats.max_return),
    }
}

pub struct TrainedRun {
    pub model: PolicyModel,
    pub record: RunRecord,
    pub report: TrainReport,
}

/// Output layout of one training run under `out`:
///
/// ```text
/// config.resolved.toml   the config after defaults and overrides
/// dataset.jsonl          the offline dataset trained on
/// markov_init.txt/.json  Markov analysis of the initialized model
/// imported.txt           slots filled from an archive (if any)
/// metrics.jsonl          one record per logged step
/// ck_step{NNNNNN}.mhw    checkpoints, step 0 is the initialization
/// ck_final.mhw           the trained model
/// markov_final.txt/.json Markov analysis of the trained model
/// run.json               environment, target and heads for later commands
/// ```
pub fn train_run(mut cfg: ExperimentConfig, out: &Path) -> anyhow::Result<TrainedRun> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let dataset = load_dataset(&cfg)?;
    let (mut model, imported) = prepare_model(&cfg, &dataset)?;
    let init_report = MarkovReport::for_model(&model, cfg.init.r, DEFAULT_EPS)?;
    if cfg.train.markov_heads.is_empty() {
        cfg.train.markov_heads = (0..cfg.model.n_layers).map(|l| init_report.markov_heads(l)).collect();
    }
    write_text(&out.join("config.resolved.toml"), &cfg.to_toml()?)?;
    dataset.save(&out.join("dataset.jsonl"))?;
    write_text(&out.join("markov_init.txt"), &init_report.render_table())?;
    write_json(&out.join("markov_init.json"), &init_report)?;
    if !imported.is_empty() {
        write_text(&out.join("imported.txt"), &(imported.join("\n") + "\n"))?;
    }
    let report = train(&mut model, &dataset, &cfg.train, Some(out))?;
    let final_report = MarkovReport::for_model(&model, cfg.init.r, DEFAULT_EPS)?;
    write_text(&out.join("markov_final.txt"), &final_report.render_table())?;
    write_json(&out.join("markov_final.json"), &final_report)?;
    let record = RunRecord {
        env: cfg.env.clone(),
        seed: cfg.seed,
        context_k: cfg.eval_context_k(),
        target_rtg: default_target(&cfg, &dataset),
        eval_episodes: cfg.eval.episodes,
        markov_heads: cfg.train.markov_heads.first().cloned().unwrap_or_default(),
        r: cfg.init.r,
    };
    write_json(&out.join(RUN_FILE), &record)?;
    Ok(TrainedRun { model, record, report })
}

/// Rollout report plus first-layer gate statistics.
pub fn evaluate(model: &PolicyModel, record: &RunRecord) -> anyhow::Result<(EvalReport, Option<GateImportance>)> {
    if model.config().moa_enabled {
        let (g, report) = gate_importance(
            model,
            &record.env,
            record.target_rtg,
            record.context_k,
            record.eval_episodes,
            record.seed,
            &record.markov_heads,
        )?;
        Ok((report, Some(g)))
    } else {
        let report = markovdt::evalharness::rollout(
            model,
            &record.env,
            record.target_rtg,
            record.context_k,
            record.eval_episodes,
            record.seed,
        )?;
        Ok((report, None))
    }
}

pub fn load_model(checkpoint: &Path) -> anyhow::Result<PolicyModel> {
    load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))
}

/// Default output directory for commands that act on a checkpoint.
pub fn beside(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(name)
}
