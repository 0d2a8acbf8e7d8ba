//! The `mfnet` command line.
//!
//! Dotted overrides (`--ems.z 7` or `--ems.z=7`) are pulled out of the
//! argument list before clap sees the rest.

mod config;
mod run;

pub use config::{Command, NetSettings, Paths, RunConfig, SEED_ENV};
pub use run::{execute, RunOutput};

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mfnet", version, about = "Ensemble manifold segmentation and multi-task training")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Does not change results.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// L2-normalize features before distance computations.
    #[arg(long, global = true)]
    normalize: bool,
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    pseudo: Option<PathBuf>,
    #[arg(long, global = true)]
    split: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    teacher: Option<PathBuf>,
    #[arg(long, global = true)]
    student: Option<PathBuf>,
    #[arg(long, global = true)]
    eval: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Segment a feature set into a pseudo-label ensemble.
    Segment,
    /// Train a network on labels and/or pseudo-labels.
    Train,
    /// Report accuracy and recall@1 of a trained model.
    Evaluate,
    /// Train a student network to imitate a teacher's feature space.
    Imitate,
    /// Semi-supervised training with iterative re-segmentation.
    Semisup,
}

/// Splits `--section.key value` and `--section.key=value` pairs from the rest.
pub fn split_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => match it.next() {
                Some(v) => v,
                None => bail!("missing value for --{key}"),
            },
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn parse_args(args: Vec<String>) -> anyhow::Result<(RunConfig, Option<usize>)> {
    let (rest, mut overrides) = split_overrides(args)?;
    let cli = Cli::try_parse_from(rest)?;
    let command = match cli.command {
        Sub::Segment => Command::Segment,
        Sub::Train => Command::Train,
        Sub::Evaluate => Command::Evaluate,
        Sub::Imitate => Command::Imitate,
        Sub::Semisup => Command::Semisup,
    };
    if let Some(seed) = cli.seed {
        overrides.push(("run.seed".into(), seed.to_string()));
    }
    if cli.normalize {
        overrides.push(("run.normalize".into(), "true".into()));
    }
    let paths = [
        ("input", cli.input),
        ("pseudo", cli.pseudo),
        ("split", cli.split),
        ("model", cli.model),
        ("teacher", cli.teacher),
        ("student", cli.student),
        ("eval", cli.eval),
        ("out", cli.out),
    ];
    for (name, path) in paths {
        if let Some(p) = path {
            overrides.push((format!("paths.{name}"), p.to_string_lossy().into_owned()));
        }
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::resolve(command, env_seed.as_deref(), cli.config.as_deref(), &overrides)?;
    Ok((cfg, cli.workers))
}

/// Runs the command line and returns the process exit status.
pub fn main_with_args(args: Vec<String>) -> i32 {
    match try_main(args) {
        Ok(()) => 0,
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                let _ = clap_err.print();
                return if clap_err.use_stderr() { 2 } else { 0 };
            }
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn try_main(args: Vec<String>) -> anyhow::Result<()> {
    let (cfg, workers) = parse_args(args)?;
    if let Some(n) = workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let output = execute(&cfg).with_context(|| format!("`{}` failed", cfg.command))?;
    print!("{}", output.report.to_text());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn dotted_overrides_are_extracted() {
        let (rest, o) = split_overrides(args("mfnet segment --ems.z 7 --input a.bin --train.epochs=3")).unwrap();
        assert_eq!(rest, args("mfnet segment --input a.bin"));
        assert_eq!(o, vec![("ems.z".into(), "7".into()), ("train.epochs".into(), "3".into())]);
        assert!(split_overrides(args("mfnet segment --ems.z")).is_err());
    }

    #[test]
    fn flags_become_config_values() {
        let (cfg, workers) = parse_args(args("mfnet segment --seed 9 --normalize --out p.mfpl --workers 2 --ems.t 4")).unwrap();
        assert_eq!(cfg.seed, 9);
        assert!(cfg.normalize);
        assert_eq!(cfg.ems.t, 4);
        assert_eq!(cfg.paths.out, Some(PathBuf::from("p.mfpl")));
        assert_eq!(workers, Some(2));
    }
}
