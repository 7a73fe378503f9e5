use std::fs;
use std::path::{Path, PathBuf};

use earseg_core::{Error, Layout, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Common;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Train,
    Refine,
    Predict,
    Evaluate,
    Crossval,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Refine => "refine",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::Crossval => "crossval",
        }
    }
}

/// Everything a run depends on, after merging the config file with flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub data: Option<PathBuf>,
    pub layout: Layout,
    pub out: PathBuf,
    pub use_fov: bool,
    pub fuse: bool,
    pub folds: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn resolve(command: Command, args: &Common) -> Result<Self, Error> {
        let mut train = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|_| Error::PathNotFound(path.clone()))?;
                // Either a training config or a full run snapshot.
                TrainConfig::from_toml(&text).or_else(|e| RunConfig::from_toml(&text).map(|r| r.train).map_err(|_| e))?
            }
            None => TrainConfig::default(),
        };
        if let Some(seed) = args.seed {
            train.seed = seed;
        }
        if let Some(epochs) = args.epochs {
            match command {
                Command::Refine => train.stage2_epochs = epochs,
                _ => train.stage1_epochs = epochs,
            }
        }
        train.validate()?;
        for path in [&args.data, &args.checkpoint].into_iter().flatten() {
            if !path.exists() {
                return Err(Error::PathNotFound(path.clone()));
            }
        }
        Ok(RunConfig {
            command,
            data: args.data.clone(),
            layout: args.layout,
            out: args.out.clone(),
            use_fov: !args.no_fov,
            fuse: !args.no_fuse,
            folds: args.folds,
            checkpoint: args.checkpoint.clone(),
            train,
        })
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes `config.toml` (the training config, reusable with `--config`)
    /// and `run_<command>.toml` (the full resolved run).
    pub fn snapshot(&self) -> Result<(), Error> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join("config.toml"), self.train.to_toml()?)?;
        fs::write(self.out.join(format!("run_{}.toml", self.command.name())), self.to_toml()?)?;
        Ok(())
    }

    pub fn data_root(&self) -> Result<&Path, Error> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--data is required for this command".into()))
    }
}
