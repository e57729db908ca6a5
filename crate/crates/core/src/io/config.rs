//! Plain-text `key = value` configuration with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::trainer::TrainConfig;

/// Parses `key = value` lines in order. Blank lines and `#` comments are skipped; repeated keys
/// are an error.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(e, _)| e == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

/// Applies one model key; returns false when the key is not a model key.
fn apply_model(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "height" => cfg.height = parse(key, value)?,
        "width" => cfg.width = parse(key, value)?,
        "embed_dim" => cfg.embed_dim = parse(key, value)?,
        "variant" => cfg.variant = value.parse::<Variant>()?,
        "embed_channels" => {
            cfg.embed_channels = value
                .split(',')
                .map(|c| parse(key, c.trim()))
                .collect::<Result<_>>()?
        }
        "init_std" => cfg.init_std = parse(key, value)?,
        "zero_init_offsets" => cfg.zero_init_offsets = parse_bool(key, value)?,
        "bn_eps" => cfg.bn_eps = parse(key, value)?,
        "bn_momentum" => cfg.bn_momentum = parse(key, value)?,
        "init_seed" => cfg.seed = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Model configuration from `key = value` pairs; unknown keys are rejected.
pub fn model_config_from_kv(pairs: &[(String, String)]) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for (k, v) in pairs {
        if !apply_model(&mut cfg, k, v)? {
            return Err(Error::Config(format!("unknown model key `{k}`")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_config_to_text(cfg: &ModelConfig) -> String {
    let channels: Vec<String> = cfg.embed_channels.iter().map(|c| c.to_string()).collect();
    let mut s = String::new();
    let _ = writeln!(s, "height = {}", cfg.height);
    let _ = writeln!(s, "width = {}", cfg.width);
    let _ = writeln!(s, "embed_dim = {}", cfg.embed_dim);
    let _ = writeln!(s, "variant = {}", cfg.variant);
    let _ = writeln!(s, "embed_channels = {}", channels.join(","));
    let _ = writeln!(s, "init_std = {:e}", cfg.init_std);
    let _ = writeln!(s, "zero_init_offsets = {}", cfg.zero_init_offsets);
    let _ = writeln!(s, "bn_eps = {:e}", cfg.bn_eps);
    let _ = writeln!(s, "bn_momentum = {:e}", cfg.bn_momentum);
    let _ = writeln!(s, "init_seed = {}", cfg.seed);
    s
}

/// Training configuration. Accepts every model key plus the optimizer keys; `seed` seeds both
/// the initialization and the shuffles unless `init_seed` is also given.
pub fn train_config_from_text(text: &str) -> Result<TrainConfig> {
    let pairs = parse_kv(text)?;
    let mut cfg = TrainConfig::default();
    let mut init_seed = None;
    for (k, v) in &pairs {
        let (k, v) = (k.as_str(), v.as_str());
        if k == "init_seed" {
            init_seed = Some(parse(k, v)?);
            continue;
        }
        if apply_model(&mut cfg.model, k, v)? {
            continue;
        }
        match k {
            "lr" => cfg.lr = parse(k, v)?,
            "momentum" => cfg.momentum = parse(k, v)?,
            "weight_decay" => cfg.weight_decay = parse(k, v)?,
            "decay_all" => cfg.decay_all = parse_bool(k, v)?,
            "epochs" => cfg.epochs = parse(k, v)?,
            "frame_gap" => cfg.frame_gap = parse(k, v)?,
            "batch_size" => cfg.batch_size = parse(k, v)?,
            "clip_norm" => cfg.clip_norm = if v == "none" { None } else { Some(parse(k, v)?) },
            "seed" => {
                cfg.seed = parse(k, v)?;
                cfg.model.seed = cfg.seed;
            }
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
    }
    if let Some(s) = init_seed {
        cfg.model.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    train_config_from_text(&text).map_err(|e| Error::format(path, e.to_string()))
}
