//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are grouped by a
//! dotted prefix: `prompt.*`, `loss.*` and `train.*`.

use crate::error::{Error, Result};
use crate::train::TrainConfig;

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

/// Sets one key on `config`.
pub fn apply_key(config: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "prompt.M" | "prompt.m" => config.m = parse(key, value)?,
        "prompt.init_phrase" => config.init_phrase = value.to_string(),
        "prompt.template" => config.template = value.to_string(),
        "loss.tau" => config.tau = parse(key, value)?,
        "loss.beta" => config.beta = parse(key, value)?,
        "loss.gamma" => config.gamma = parse(key, value)?,
        "loss.negative" => config.negative = value.parse()?,
        "train.epochs" => config.epochs = parse(key, value)?,
        "train.batch_size" => config.batch_size = parse(key, value)?,
        "train.learning_rate" | "train.lr" => config.learning_rate = parse(key, value)?,
        "train.momentum" => config.momentum = parse(key, value)?,
        "train.clusters" => config.clusters = parse(key, value)?,
        "train.shots" => config.shots = parse(key, value)?,
        "train.seed" => config.seed = parse(key, value)?,
        "train.mode" => config.mode = value.parse()?,
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

/// Parses `text` on top of `base` and validates the result.
pub fn parse_config(text: &str, base: TrainConfig) -> Result<TrainConfig> {
    let mut config = base;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        apply_key(&mut config, key.trim(), value.trim())?;
    }
    config.validate()?;
    Ok(config)
}
