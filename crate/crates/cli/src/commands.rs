//! The subcommands. Each writes under `out_dir` and refreshes its
//! `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use dscnet::data::rng::mix64;
use dscnet::data::{
    config_hash, load_checkpoint, read_dataset, save_checkpoint, synth_dataset, write_dataset, CheckpointMeta, SegSample,
    SynthConfig,
};
use dscnet::dmsk::KernelStrategy;
use dscnet::params::{from_named, named_tensors};
use dscnet::train::{curve_csv, evaluate, EvalReport, MetricsReport};
use dscnet::unet::{SkipMode, UNetConfig};
use dscnet::verify::{run_suite, Suite, SuiteReport};
use dscnet::Error;
use serde::{Deserialize, Serialize};

use crate::{CliError, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.dsck";
pub const ABLATION_CELLS: usize = 12;

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct ManifestFile {
    path: String,
    bytes: u64,
    sha256: String,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path != root.join("manifest.json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Indexes every file under `out_dir` with its size and SHA-256.
pub fn write_manifest(out_dir: &Path) -> Result<(), CliError> {
    let mut files = Vec::new();
    collect_files(out_dir, out_dir, &mut files)?;
    files.sort();
    let entries = files
        .iter()
        .map(|p| {
            let bytes = fs::read(p)?;
            Ok(ManifestFile {
                path: p.strip_prefix(out_dir).unwrap().to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: config_hash(&bytes),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    write_json(&out_dir.join("manifest.json"), &serde_json::json!({ "files": entries }))
}

pub fn synth(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let samples = synth_dataset::<f32>(&cfg.data)?;
    let files = write_dataset(&cfg.data_dir(), &cfg.data, &samples)?;
    write_manifest(&cfg.out_dir)?;
    Ok(files)
}

/// The dataset under `out_dir/data`, generated first if absent.
fn load_data(cfg: &RunConfig) -> Result<Vec<SegSample<f32>>, CliError> {
    let dir = cfg.data_dir();
    if !dir.join("meta.json").exists() {
        synth(cfg)?;
    }
    let meta: SynthConfig = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    if meta != cfg.data {
        return Err(CliError::Config(format!(
            "{} was generated from a different data section; rerun synth or change out_dir",
            dir.display()
        )));
    }
    Ok(read_dataset::<f32>(&dir)?.1)
}

fn model_hash(model: &UNetConfig) -> Result<String, CliError> {
    Ok(config_hash(&serde_json::to_vec(model)?))
}

#[derive(Debug, Serialize)]
struct BatchDump {
    step: usize,
    loss: f64,
    samples: Vec<DumpedSample>,
}

#[derive(Debug, Serialize)]
struct DumpedSample {
    index: usize,
    image: String,
    mask: String,
}

/// Writes `nonfinite.json` describing the batch that blew up.
fn dump_nonfinite(cfg: &RunConfig, step: usize, loss: f64, samples: &[usize]) -> Result<(), CliError> {
    let dump = BatchDump {
        step,
        loss,
        samples: samples
            .iter()
            .map(|&i| DumpedSample {
                index: i,
                image: format!("data/samples/{i:04}.img.dsct"),
                mask: format!("data/samples/{i:04}.msk.dsct"),
            })
            .collect(),
    };
    write_json(&cfg.out_dir.join("nonfinite.json"), &dump)
}

fn run_training(cfg: &RunConfig, model: &UNetConfig, data: &[SegSample<f32>]) -> Result<dscnet::train::TrainOutcome<f32>, CliError> {
    match dscnet::train::train(model, &cfg.train, data, cfg.eval.tau) {
        Ok(out) => Ok(out),
        Err(Error::NonFiniteLoss { step, loss, samples }) => {
            dump_nonfinite(cfg, step, loss, &samples)?;
            Err(CliError::Failed(format!(
                "non-finite loss {loss} at step {step} (samples {samples:?}); see nonfinite.json"
            )))
        }
        Err(e) => Err(e.into()),
    }
}

/// Trains, then writes the checkpoint, `metrics.json` and `loss_curve.csv`.
pub fn train(cfg: &RunConfig) -> Result<MetricsReport, CliError> {
    let data = load_data(cfg)?;
    let model = cfg.unet();
    let out = run_training(cfg, &model, &data)?;
    let meta = CheckpointMeta {
        config_hash: model_hash(&model)?,
        seed: cfg.train.seed,
        step: cfg.train.steps as u64,
    };
    save_checkpoint(&cfg.out_dir.join(CHECKPOINT_FILE), &named_tensors(&out.params), &meta)?;
    write_json(&cfg.out_dir.join("metrics.json"), &out.report)?;
    fs::write(cfg.out_dir.join("loss_curve.csv"), curve_csv(&out.report.loss_curve))?;
    write_manifest(&cfg.out_dir)?;
    Ok(out.report)
}

/// Scores a saved checkpoint on the configured dataset and writes `eval.json`.
pub fn eval(cfg: &RunConfig, ckpt: &Path) -> Result<EvalReport, CliError> {
    let model = cfg.unet();
    let (named, meta) = load_checkpoint::<f32>(ckpt)?;
    if meta.config_hash != model_hash(&model)? {
        return Err(Error::ManifestMismatch(format!(
            "{} was trained with a different model section",
            ckpt.display()
        ))
        .into());
    }
    let params = from_named(&model.template::<f32>()?, &named)?;
    let data = load_data(cfg)?;
    let report = evaluate(&model, &params, &data, cfg.train.weights(), cfg.eval.tau)?;
    write_json(&cfg.out_dir.join("eval.json"), &report)?;
    write_manifest(&cfg.out_dir)?;
    Ok(report)
}

/// Runs the named suites, or all of them.
pub fn gradcheck(suite: Option<Suite>, eps: f64, tol: f64) -> Result<Vec<SuiteReport>, CliError> {
    let suites = match suite {
        Some(s) => vec![s],
        None => Suite::ALL.to_vec(),
    };
    suites.into_iter().map(|s| Ok(run_suite(s, eps, tol)?)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub skip_mode: SkipMode,
    pub kernel_strategy: KernelStrategy,
    pub dice: Option<f64>,
    pub miou: Option<f64>,
    pub nsd: Option<f64>,
    pub seed: u64,
    pub error: Option<String>,
}

/// The skip-mode × kernel-strategy grid, run cell by cell on one shared
/// dataset. Values come from desk-scale runs; no ordering is asserted.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>, CliError> {
    let data = load_data(cfg)?;
    let mut rows = Vec::with_capacity(ABLATION_CELLS);
    for skip in SkipMode::ALL {
        for strategy in KernelStrategy::ALL {
            let seed = mix64(cfg.train.seed ^ rows.len() as u64);
            let mut cell = cfg.clone();
            cell.model.skip = skip;
            cell.model.strategy = strategy;
            cell.train.seed = seed;
            let result = cell
                .validate()
                .and_then(|_| run_training(&cell, &cell.unet(), &data).map(|o| o.report.final_eval));
            rows.push(match result {
                Ok(e) => AblationRow {
                    skip_mode: skip,
                    kernel_strategy: strategy,
                    dice: Some(e.scores.dice),
                    miou: Some(e.scores.miou),
                    nsd: Some(e.scores.nsd),
                    seed,
                    error: None,
                },
                Err(e) => AblationRow {
                    skip_mode: skip,
                    kernel_strategy: strategy,
                    dice: None,
                    miou: None,
                    nsd: None,
                    seed,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    write_json(
        &cfg.out_dir.join("ablation.json"),
        &serde_json::json!({ "scale": "desk", "tau": cfg.eval.tau, "rows": rows }),
    )?;
    let mut csv = String::from("skip_mode,kernel_strategy,dice,miou,nsd\n");
    let cellv = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.skip_mode.name(),
            r.kernel_strategy.name(),
            cellv(r.dice),
            cellv(r.miou),
            cellv(r.nsd)
        ));
    }
    fs::write(cfg.out_dir.join("ablation.csv"), csv)?;
    write_manifest(&cfg.out_dir)?;
    let failed: Vec<String> = rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("{}/{}: {e}", r.skip_mode.name(), r.kernel_strategy.name())))
        .collect();
    if failed.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::Failed(format!("{} ablation cells failed: {}", failed.len(), failed.join("; "))))
    }
}
