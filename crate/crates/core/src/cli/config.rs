//! The run configuration: `section.key = value` text, layered as
//! defaults, then `MANIFOLDNET_SEED`, then the config file, then the command
//! line.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ems::EmsConfig;
use crate::error::{Error, Result};
use crate::neighbors::KMeansInit;
use crate::net::{Activation, LambdaMode, TrainConfig};
use crate::tasks::RetrievalProtocol;

pub const SEED_ENV: &str = "MANIFOLDNET_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Segment,
    Train,
    Evaluate,
    Imitate,
    Semisup,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Segment => "segment",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Imitate => "imitate",
            Command::Semisup => "semisup",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSettings {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetSettings {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 32],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub pseudo: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

const PATH_KEYS: [&str; 8] = ["input", "pseudo", "split", "model", "teacher", "student", "eval", "out"];

impl Paths {
    fn slot(&mut self, name: &str) -> Option<&mut Option<PathBuf>> {
        Some(match name {
            "input" => &mut self.input,
            "pseudo" => &mut self.pseudo,
            "split" => &mut self.split,
            "model" => &mut self.model,
            "teacher" => &mut self.teacher,
            "student" => &mut self.student,
            "eval" => &mut self.eval,
            "out" => &mut self.out,
            _ => return None,
        })
    }

    fn get(&self, name: &str) -> Option<&PathBuf> {
        match name {
            "input" => self.input.as_ref(),
            "pseudo" => self.pseudo.as_ref(),
            "split" => self.split.as_ref(),
            "model" => self.model.as_ref(),
            "teacher" => self.teacher.as_ref(),
            "student" => self.student.as_ref(),
            "eval" => self.eval.as_ref(),
            "out" => self.out.as_ref(),
            _ => None,
        }
    }

    /// The path under `paths.<name>`, or an error naming the key.
    pub fn require(&self, name: &str) -> Result<&Path> {
        self.get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::config(format!("paths.{name}"), format!("required (pass --{name} <path>)")))
    }
}

/// Everything one invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub normalize: bool,
    pub refine_rounds: usize,
    pub retrieval: RetrievalProtocol,
    pub ems: EmsConfig,
    pub train: TrainConfig,
    pub net: NetSettings,
    pub paths: Paths,
}

impl RunConfig {
    /// Defaults: the published segmentation and weight-decay settings.
    pub fn new(command: Command) -> Self {
        Self {
            command,
            seed: 0,
            normalize: false,
            refine_rounds: 3,
            retrieval: RetrievalProtocol::LeaveOneOut,
            ems: EmsConfig::default(),
            train: TrainConfig::default(),
            net: NetSettings::default(),
            paths: Paths::default(),
        }
    }

    /// Layers the seed environment variable, the optional config file and
    /// the command-line assignments over the defaults, then validates.
    pub fn resolve(
        command: Command,
        env_seed: Option<&str>,
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = Self::new(command);
        if let Some(seed) = env_seed {
            cfg.set("run.seed", seed)
                .map_err(|e| Error::config(SEED_ENV, e.to_string()))?;
        }
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, path)?;
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies every `section.key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                row: no + 1,
                message: format!("expected `section.key = value`, found `{line}`"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one key. Errors name the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
        }
        let (section, name) = key
            .split_once('.')
            .ok_or_else(|| Error::config(key, "keys have the form section.key"))?;
        match (section, name) {
            ("run", "seed") => self.seed = parse(key, value)?,
            ("run", "normalize") => self.normalize = parse(key, value)?,
            ("run", "refine_rounds") => self.refine_rounds = parse(key, value)?,
            ("run", "retrieval") => self.retrieval = parse(key, value)?,
            ("ems", "z") => self.ems.z = parse(key, value)?,
            ("ems", "t") => self.ems.t = parse(key, value)?,
            ("ems", "k") => self.ems.k = parse(key, value)?,
            ("ems", "lr_reg") => self.ems.lr_reg = parse(key, value)?,
            ("ems", "lr_iters") => self.ems.lr_iters = parse(key, value)?,
            ("ems", "init") => {
                self.ems.kmeans.init = match value {
                    "random" => KMeansInit::Random,
                    "plus_plus" | "kmeans++" => KMeansInit::PlusPlus,
                    other => return Err(Error::config(key, format!("unknown init `{other}` (random or plus_plus)"))),
                }
            }
            ("ems", "kmeans_max_iter") => self.ems.kmeans.max_iter = parse(key, value)?,
            ("ems", "kmeans_tol") => self.ems.kmeans.tol = parse(key, value)?,
            ("train", "lambda_s") => self.train.lambda_s = parse(key, value)?,
            ("train", "lambda_m") => self.train.lambda_m = parse(key, value)?,
            ("train", "lambda") => self.train.lambda = parse(key, value)?,
            ("train", "lambda_mode") => {
                self.train.lambda_mode = match value {
                    "fixed" => LambdaMode::Fixed,
                    "auto_balance" => LambdaMode::AutoBalance,
                    other => return Err(Error::config(key, format!("unknown mode `{other}` (fixed or auto_balance)"))),
                }
            }
            ("train", "learning_rate") => self.train.learning_rate = parse(key, value)?,
            ("train", "epochs") => self.train.epochs = parse(key, value)?,
            ("train", "batch_size") => self.train.batch_size = parse(key, value)?,
            ("train", "steps_per_epoch") => {
                self.train.steps_per_epoch = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            ("net", "hidden_dims") => {
                self.net.hidden_dims = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse(key, v.trim()))
                        .collect::<Result<_>>()?
                }
            }
            ("net", "activation") => self.net.activation = parse(key, value)?,
            ("paths", p) => match self.paths.slot(p) {
                Some(slot) => *slot = Some(PathBuf::from(value)),
                None => return Err(Error::config(key, "unknown key")),
            },
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Checks every numeric field that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        if self.ems.z < 2 {
            return Err(Error::config("ems.z", "must be at least 2"));
        }
        if self.ems.t < 1 {
            return Err(Error::config("ems.t", "must be at least 1"));
        }
        if !(self.ems.lr_reg >= 0.0 && self.ems.lr_reg.is_finite()) {
            return Err(Error::config("ems.lr_reg", "must be finite and non-negative"));
        }
        if self.ems.lr_iters == 0 {
            return Err(Error::config("ems.lr_iters", "must be at least 1"));
        }
        if self.ems.kmeans.max_iter == 0 {
            return Err(Error::config("ems.kmeans_max_iter", "must be at least 1"));
        }
        if !(self.ems.kmeans.tol >= 0.0 && self.ems.kmeans.tol.is_finite()) {
            return Err(Error::config("ems.kmeans_tol", "must be finite and non-negative"));
        }
        if self.refine_rounds == 0 {
            return Err(Error::config("run.refine_rounds", "must be at least 1"));
        }
        if self.net.hidden_dims.contains(&0) {
            return Err(Error::config("net.hidden_dims", "every width must be at least 1"));
        }
        self.train.validate()
    }

    /// Segmentation settings with the run seed applied.
    pub fn ems_config(&self) -> EmsConfig {
        EmsConfig {
            master_seed: self.seed,
            ..self.ems.clone()
        }
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// The effective configuration in the same text format it is read from.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# command: {}", self.command);
        let mut line = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("run.seed", &self.seed);
        line("run.normalize", &self.normalize);
        line("run.refine_rounds", &self.refine_rounds);
        line("run.retrieval", &self.retrieval);
        line("ems.z", &self.ems.z);
        line("ems.t", &self.ems.t);
        line("ems.k", &self.ems.k);
        line("ems.lr_reg", &self.ems.lr_reg);
        line("ems.lr_iters", &self.ems.lr_iters);
        let init = match self.ems.kmeans.init {
            KMeansInit::Random => "random",
            KMeansInit::PlusPlus => "plus_plus",
        };
        line("ems.init", &init);
        line("ems.kmeans_max_iter", &self.ems.kmeans.max_iter);
        line("ems.kmeans_tol", &self.ems.kmeans.tol);
        line("train.lambda_s", &self.train.lambda_s);
        line("train.lambda_m", &self.train.lambda_m);
        line("train.lambda", &self.train.lambda);
        let mode = match self.train.lambda_mode {
            LambdaMode::Fixed => "fixed",
            LambdaMode::AutoBalance => "auto_balance",
        };
        line("train.lambda_mode", &mode);
        line("train.learning_rate", &self.train.learning_rate);
        line("train.epochs", &self.train.epochs);
        line("train.batch_size", &self.train.batch_size);
        let steps = self
            .train
            .steps_per_epoch
            .map_or_else(|| "auto".to_string(), |s| s.to_string());
        line("train.steps_per_epoch", &steps);
        let dims: Vec<String> = self.net.hidden_dims.iter().map(ToString::to_string).collect();
        line("net.hidden_dims", &dims.join(","));
        line("net.activation", &self.net.activation);
        for name in PATH_KEYS {
            if let Some(p) = self.paths.get(name) {
                line(&format!("paths.{name}"), &p.display());
            }
        }
        out
    }
}
