//! Flat `key = value` config files. Keys are the field names of
//! `ModelConfig` and `TrainConfig`; `#` starts a comment.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use stlight::model::Preset;
use stlight::optim::ScheduleKind;
use stlight::train::TrainConfig;

/// Bad flags, config keys or values. Maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const KEYS: [&str; 26] = [
    "t_in",
    "t_out",
    "channels",
    "height",
    "width",
    "hidden",
    "depth",
    "patch",
    "overlap",
    "kernel_local",
    "kernel_global",
    "dilation",
    "max_lr",
    "final_div_factor",
    "batch_size",
    "schedule",
    "epochs",
    "seed",
    "eval_every",
    "shuffle",
    "weight_decay",
    "val_fraction",
    "train_data",
    "val_data",
    "checkpoint",
    "log",
];

fn parse<T: FromStr>(key: &str, value: &str) -> anyhow::Result<T> {
    value
        .parse()
        .map_err(|_| usage(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> anyhow::Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(usage(format!("invalid value `{value}` for `{key}`: expected true or false"))),
    }
}

/// Sets one field.
pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> anyhow::Result<()> {
    let m = &mut cfg.model;
    match key {
        "t_in" => m.t_in = parse(key, value)?,
        "t_out" => m.t_out = parse(key, value)?,
        "channels" => m.channels = parse(key, value)?,
        "height" => m.height = parse(key, value)?,
        "width" => m.width = parse(key, value)?,
        "hidden" => m.hidden = parse(key, value)?,
        "depth" => m.depth = parse(key, value)?,
        "patch" => m.patch = parse(key, value)?,
        "overlap" => m.overlap = parse(key, value)?,
        "kernel_local" => m.kernel_local = parse(key, value)?,
        "kernel_global" => m.kernel_global = parse(key, value)?,
        "dilation" => m.dilation = parse(key, value)?,
        "max_lr" => cfg.max_lr = parse(key, value)?,
        "final_div_factor" => cfg.final_div_factor = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "schedule" => {
            cfg.schedule = ScheduleKind::parse(value).ok_or_else(|| usage(format!("unknown schedule `{value}`")))?
        }
        "epochs" => cfg.epochs = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "eval_every" => cfg.eval_every = parse(key, value)?,
        "shuffle" => cfg.shuffle = parse_bool(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        "val_fraction" => cfg.val_fraction = parse(key, value)?,
        "train_data" => cfg.train_data = Some(PathBuf::from(value)),
        "val_data" => cfg.val_data = Some(PathBuf::from(value)),
        "checkpoint" => cfg.checkpoint = Some(PathBuf::from(value)),
        "log" => cfg.log = Some(PathBuf::from(value)),
        _ => return Err(usage(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

/// Parses file text into ordered pairs.
pub fn parse_text(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(usage(format!("line {}: unknown config key `{k}`", i + 1)));
        }
        if !seen.insert(k.to_string()) {
            return Err(usage(format!("line {}: duplicate key `{k}`", i + 1)));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

pub fn load_file(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
    parse_text(&text)
}

/// Splits a `--set key=value` argument.
pub fn split_override(s: &str) -> anyhow::Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn preset(name: &str) -> anyhow::Result<Preset> {
    Preset::from_name(name).ok_or_else(|| {
        let known: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
        usage(format!("unknown preset `{name}` (known: {})", known.join(", ")))
    })
}

/// Defaults (or a preset's model), then the file, then flag overrides.
pub fn resolve(
    base: Option<Preset>,
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = base {
        cfg.model = p.config();
    }
    if let Some(path) = file {
        for (k, v) in load_file(path)? {
            apply(&mut cfg, &k, &v)?;
        }
    }
    for (k, v) in overrides {
        apply(&mut cfg, k, v)?;
    }
    cfg.model
        .validate()
        .map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}
