//! Flat `key = value` steering configs.
//!
//! ```text
//! # Adam on the answer-start map
//! optimizer = adam
//! iterations = 3
//! alpha = 400
//! layer_start = 1
//! layer_end = 3
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown and repeated keys are
//! errors. `optimizer` selects the preset the other keys modify.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::energy::{AggregationMode, EnergyMode};
use crate::error::{Error, Result};
use crate::steering::{Optimizer, SteeringConfig};

pub const KEYS: [&str; 18] = [
    "optimizer",
    "iterations",
    "alpha",
    "beta",
    "lr",
    "beta1",
    "beta2",
    "epsilon",
    "gamma",
    "sigma",
    "soft_normalized",
    "early_stop",
    "energy_threshold",
    "min_improvement",
    "aggregation",
    "layer_start",
    "layer_end",
    "energy",
];

fn bad(key: &str, value: &str) -> Error {
    Error::InvalidConfig(format!("invalid value '{value}' for '{key}'"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

/// Splits the text into key/value pairs.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse("config", format!("line {}: expected 'key = value'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim().trim_matches('"'));
        if !KEYS.contains(&k) {
            return Err(Error::InvalidConfig(format!("unknown config key '{k}' on line {}", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate config key '{k}'")));
        }
    }
    Ok(out)
}

/// Applies a config text on top of `base` (or on top of the preset named by
/// its `optimizer` key) and validates the result.
pub fn parse_steering_config(text: &str, base: &SteeringConfig) -> Result<SteeringConfig> {
    let pairs = parse_pairs(text)?;
    let mut cfg = match pairs.get("optimizer").map(String::as_str) {
        None => base.clone(),
        Some("gd") => SteeringConfig::gd(),
        Some("adam") => SteeringConfig::adam(),
        Some(v) => return Err(bad("optimizer", v)),
    };
    let mut layers = (None, None);
    for (k, v) in &pairs {
        let v = v.as_str();
        match k.as_str() {
            "optimizer" => {}
            "iterations" => cfg.iterations = num(k, v)?,
            "alpha" => cfg.alpha = num(k, v)?,
            "beta" => cfg.beta = num(k, v)?,
            "lr" => cfg.lr = num(k, v)?,
            "beta1" => cfg.beta1 = num(k, v)?,
            "beta2" => cfg.beta2 = num(k, v)?,
            "epsilon" => cfg.epsilon = num(k, v)?,
            "gamma" => cfg.gamma = num(k, v)?,
            "sigma" => cfg.sigma = num(k, v)?,
            "soft_normalized" => cfg.soft_normalized = boolean(k, v)?,
            "early_stop" => cfg.early_stop.enabled = boolean(k, v)?,
            "energy_threshold" => cfg.early_stop.energy_threshold = num(k, v)?,
            "min_improvement" => cfg.early_stop.min_improvement = num(k, v)?,
            "aggregation" => {
                cfg.aggregation = match v {
                    "context_token" => AggregationMode::ContextToken,
                    "answer_start" => AggregationMode::AnswerStart,
                    _ => return Err(bad(k, v)),
                }
            }
            "layer_start" => layers.0 = Some(num(k, v)?),
            "layer_end" => layers.1 = Some(num(k, v)?),
            "energy" => {
                cfg.energy_mode = match v {
                    "auto" => EnergyMode::Auto,
                    "hard" => EnergyMode::Hard,
                    "soft" => EnergyMode::Soft,
                    _ => return Err(bad(k, v)),
                }
            }
            _ => unreachable!("keys checked in parse_pairs"),
        }
    }
    match layers {
        (Some(s), Some(e)) => cfg.layers = Some((s, e)),
        (None, None) => {}
        _ => {
            return Err(Error::InvalidConfig(
                "layer_start and layer_end must be given together".into(),
            ))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_steering_config(path: &Path, base: &SteeringConfig) -> Result<SteeringConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_steering_config(&text, base)
}

/// The optimizer named in a config text, if any.
pub fn optimizer_of(text: &str) -> Result<Option<Optimizer>> {
    Ok(match parse_pairs(text)?.get("optimizer").map(String::as_str) {
        None => None,
        Some("gd") => Some(Optimizer::Gd),
        Some("adam") => Some(Optimizer::Adam),
        Some(v) => return Err(bad("optimizer", v)),
    })
}
