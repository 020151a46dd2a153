//! Flat `key = value` run configuration covering the model, the trainer and
//! the toy data set. `#` starts a comment; blank lines are ignored; every
//! key is optional and falls back to [`RunConfig::default`]; unknown or
//! repeated keys are rejected.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::separator::ModelConfig;
use crate::train::TrainConfig;

/// Toy-data and initialisation settings used by the `train` command.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_items: usize,
    pub valid_items: usize,
    /// Seconds per item.
    pub duration: f64,
    pub data_seed: u64,
    pub init_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_items: 20,
            valid_items: 4,
            duration: 1.0,
            data_seed: 0,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

pub const KEYS: [&str; 25] = [
    "groups",
    "group_size",
    "filters",
    "hidden_in",
    "hidden_out",
    "depth",
    "window",
    "stride",
    "speakers",
    "sample_rate",
    "block_hop",
    "inter_bidirectional",
    "lr",
    "lr_decay",
    "decay_every",
    "max_epochs",
    "clip_norm",
    "patience",
    "batch_size",
    "seed",
    "train_items",
    "valid_items",
    "duration",
    "data_seed",
    "init_seed",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

impl RunConfig {
    /// Small grouped model on 1 s toy mixtures: the desk-scale overfit run.
    pub fn overfit_preset() -> Self {
        RunConfig {
            model: ModelConfig::new(4, 8, 32, 8, 16, 2),
            train: TrainConfig {
                max_epochs: 20,
                seed: 7,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.train_items == 0 {
            return Err(Error::config("train_items", "must be positive"));
        }
        if d.valid_items == 0 {
            return Err(Error::config("valid_items", "must be positive"));
        }
        if !(d.duration >= 0.1 && d.duration.is_finite()) {
            return Err(Error::config("duration", "must be at least 0.1 s"));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "groups" => m.groups = parse_value(key, v)?,
            "group_size" => m.group_size = parse_value(key, v)?,
            "filters" => m.filters = parse_value(key, v)?,
            "hidden_in" => m.hidden_in = parse_value(key, v)?,
            "hidden_out" => m.hidden_out = parse_value(key, v)?,
            "depth" => m.depth = parse_value(key, v)?,
            "window" => m.window = parse_value(key, v)?,
            "stride" => m.stride = parse_value(key, v)?,
            "speakers" => m.speakers = parse_value(key, v)?,
            "sample_rate" => m.sample_rate = parse_value(key, v)?,
            "block_hop" => m.block_hop = if v == "auto" { None } else { Some(parse_value(key, v)?) },
            "inter_bidirectional" => m.inter_bidirectional = parse_value(key, v)?,
            "lr" => t.lr = parse_value(key, v)?,
            "lr_decay" => t.lr_decay = parse_value(key, v)?,
            "decay_every" => t.decay_every = parse_value(key, v)?,
            "max_epochs" => t.max_epochs = parse_value(key, v)?,
            "clip_norm" => t.clip_norm = parse_value(key, v)?,
            "patience" => t.patience = parse_value(key, v)?,
            "batch_size" => t.batch_size = parse_value(key, v)?,
            "seed" => t.seed = parse_value(key, v)?,
            "train_items" => d.train_items = parse_value(key, v)?,
            "valid_items" => d.valid_items = parse_value(key, v)?,
            "duration" => d.duration = parse_value(key, v)?,
            "data_seed" => d.data_seed = parse_value(key, v)?,
            "init_seed" => d.init_seed = parse_value(key, v)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        match key {
            "groups" => m.groups.to_string(),
            "group_size" => m.group_size.to_string(),
            "filters" => m.filters.to_string(),
            "hidden_in" => m.hidden_in.to_string(),
            "hidden_out" => m.hidden_out.to_string(),
            "depth" => m.depth.to_string(),
            "window" => m.window.to_string(),
            "stride" => m.stride.to_string(),
            "speakers" => m.speakers.to_string(),
            "sample_rate" => m.sample_rate.to_string(),
            "block_hop" => m.block_hop.map_or_else(|| "auto".to_string(), |h| h.to_string()),
            "inter_bidirectional" => m.inter_bidirectional.to_string(),
            "lr" => format!("{:?}", t.lr),
            "lr_decay" => format!("{:?}", t.lr_decay),
            "decay_every" => t.decay_every.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "clip_norm" => format!("{:?}", t.clip_norm),
            "patience" => t.patience.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "train_items" => d.train_items.to_string(),
            "valid_items" => d.valid_items.to_string(),
            "duration" => format!("{:?}", d.duration),
            "data_seed" => d.data_seed.to_string(),
            "init_seed" => d.init_seed.to_string(),
            _ => unreachable!("KEYS is exhaustive"),
        }
    }

    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key, one per line, in [`KEYS`] order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// Read failures are reported as configuration errors on `config`.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::overfit_preset();
        cfg.model.block_hop = Some(7);
        cfg.train.lr = 3.3e-4;
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.serialize(), text);
    }

    #[test]
    fn comments_defaults_and_errors() {
        let cfg = RunConfig::parse("# header\n\ngroups = 2 # trailing\ngroup_size=64\nhidden_in = 64\n").unwrap();
        assert_eq!(cfg.model.groups, 2);
        assert_eq!(cfg.model.filters, 128);
        let err = RunConfig::parse("grups = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "grups"));
        let err = RunConfig::parse("depth = two\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "depth"));
        let err = RunConfig::parse("depth = 2\ndepth = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "depth"));
        assert!(RunConfig::parse("depth 2\n").is_err());
        let err = RunConfig::parse("groups = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "group_size"));
    }

    #[test]
    fn keys_cover_every_field() {
        let cfg = RunConfig::default();
        let text = cfg.serialize();
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }
}
