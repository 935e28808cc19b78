//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::eval::{
    ablation_report, export_embeddings, extract_features, linear_probe, rankme, EmbeddingMatrix,
};
use crate::trainer::{load_checkpoint, pretrain, TrainState};

pub const THREADS_ENV: &str = "PILAMIM_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pilamim", version, about = "Masked image modeling lab: pretraining and frozen-encoder evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `mode=pixel_only` or `train.crop.scale_lo=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset spec (`synth:seed=N,count=N[,size=N]` or `cifar:PATH`); replaces `data.spec`.
    #[arg(long)]
    data: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Token summary used as the image feature.
    #[arg(long, value_parser = ["cls", "mean_pool"])]
    feature: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain an encoder; writes metrics.csv and checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/pretrain")]
        out: PathBuf,
    },
    /// Linear-probe a checkpoint on every configured task.
    Probe {
        #[command(flatten)]
        eval: EvalArgs,
        /// Also write probe.csv and the resolved config here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the RankMe score of a checkpoint's embeddings.
    Rankme {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Write the embedding matrix as CSV.
    Export {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value = "runs/export")]
        out: PathBuf,
    },
    /// Compare two or more checkpoints on every task.
    Report {
        #[command(flatten)]
        common: Common,
        /// Repeat once per checkpoint.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_parser = ["cls", "mean_pool"])]
        feature: Option<String>,
        #[arg(long, default_value = "runs/report")]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_INVALID;
    }
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_INVALID
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(THREADS_ENV, format!("expected a positive integer, got `{raw}`")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn resolve(common: &Common, feature: Option<&str>) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(d) = &common.data {
        overrides.push(format!("data.spec=\"{}\"", d.replace('\\', "\\\\").replace('"', "\\\"")));
    }
    if let Some(f) = feature {
        overrides.push(format!("eval.feature=\"{f}\""));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

/// Validates the evaluation settings against the model stored in `state`.
fn bind_to_checkpoint(mut cfg: RunConfig, state: &TrainState) -> Result<RunConfig> {
    cfg.model = state.model.clone();
    cfg.train = state.train.clone();
    cfg.validate()?;
    Ok(cfg)
}

fn load_eval_data(cfg: &RunConfig) -> Result<Vec<ImageSample>> {
    cfg.dataset()?.load()
}

fn checkpoint_id(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(dir) if stem.starts_with("checkpoint") => format!("{}/{stem}", dir.to_string_lossy()),
        _ => stem,
    }
}

fn embed(eval: &EvalArgs) -> Result<(RunConfig, EmbeddingMatrix)> {
    let cfg = resolve(&eval.common, eval.feature.as_deref())?;
    let state = load_checkpoint(&eval.checkpoint)?;
    let cfg = bind_to_checkpoint(cfg, &state)?;
    let samples = load_eval_data(&cfg)?;
    let id = checkpoint_id(&eval.checkpoint);
    let emb = extract_features(&state.context.encoder, &state.model, &samples, cfg.eval.feature, &id)?;
    Ok((cfg, emb))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dispatch(command: Command) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let print = |out: &mut std::io::StdoutLock<'_>, s: &str| {
        let _ = writeln!(out, "{s}");
    };
    match command {
        Command::Pretrain { common, out: dir } => {
            let cfg = resolve(&common, None)?;
            cfg.validate()?;
            cfg.write_snapshot(&dir)?;
            let outcome = pretrain(&cfg.model, &cfg.train, &cfg.dataset()?, &dir)?;
            if let Some(last) = outcome.metrics.last() {
                print(&mut out, &format!("mode {} final loss {}", cfg.model.mode, last.loss.total));
            }
            print(&mut out, &format!("metrics {}", outcome.metrics_path.display()));
            for c in &outcome.checkpoints {
                print(&mut out, &format!("checkpoint {}", c.display()));
            }
        }
        Command::Probe { eval, out: dir } => {
            let (cfg, emb) = embed(&eval)?;
            let mut csv = String::from("task,accuracy,train_accuracy,epochs_run,best_epoch\n");
            for task in &cfg.eval.tasks {
                let r = linear_probe(&emb.features, emb.task_labels(task)?, task, &cfg.probe)?;
                print(&mut out, &format!("{task} {}", r.accuracy));
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.task, r.accuracy, r.train_accuracy, r.epochs_run, r.best_epoch
                ));
            }
            if let Some(dir) = dir {
                cfg.write_snapshot(&dir)?;
                write_file(&dir.join("probe.csv"), &csv)?;
            }
        }
        Command::Rankme { eval } => {
            let (_, emb) = embed(&eval)?;
            print(&mut out, &rankme(&emb.features)?.to_string());
        }
        Command::Export { eval, out: dir } => {
            let (cfg, emb) = embed(&eval)?;
            cfg.write_snapshot(&dir)?;
            let p = dir.join("embeddings.csv");
            export_embeddings(&emb, &p)?;
            print(&mut out, &format!("embeddings {}", p.display()));
        }
        Command::Report {
            common,
            checkpoints,
            feature,
            out: dir,
        } => {
            let cfg = resolve(&common, feature.as_deref())?;
            if checkpoints.len() < 2 {
                return Err(Error::InvalidArgument("report needs at least two --checkpoint flags".into()));
            }
            let states: Vec<TrainState> = checkpoints.iter().map(load_checkpoint).collect::<Result<_>>()?;
            let cfg = bind_to_checkpoint(cfg, &states[0])?;
            let mut ids: Vec<String> = Vec::new();
            for p in &checkpoints {
                let base = checkpoint_id(p);
                let mut id = base.clone();
                let mut k = 2;
                while ids.contains(&id) {
                    id = format!("{base}#{k}");
                    k += 1;
                }
                ids.push(id);
            }
            let samples = load_eval_data(&cfg)?;
            let entries: Vec<(&str, &TrainState)> = ids.iter().map(String::as_str).zip(&states).collect();
            let tasks: Vec<&str> = cfg.eval.tasks.iter().map(String::as_str).collect();
            let report = ablation_report(&entries, &samples, &tasks, cfg.eval.feature, &cfg.probe)?;
            cfg.write_snapshot(&dir)?;
            report.write(&dir)?;
            let _ = write!(out, "{}", report.to_text());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_errors_exit_one() {
        assert_eq!(run(["pilamim", "frobnicate"]), EXIT_INVALID);
        assert_eq!(run(["pilamim", "rankme"]), EXIT_INVALID);
        assert_eq!(run(["pilamim", "pretrain", "--bogus"]), EXIT_INVALID);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["pilamim", "pretrain", "--help"]), EXIT_OK);
    }

    #[test]
    fn checkpoint_ids() {
        assert_eq!(checkpoint_id(Path::new("runs/pixel/checkpoint_final.bin")), "pixel/checkpoint_final");
        assert_eq!(checkpoint_id(Path::new("a/b.bin")), "b");
    }
}
