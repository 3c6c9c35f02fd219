//! Run configuration: INI file plus command-line overrides on top of defaults.

use std::fmt::{self, Display};
use std::path::Path;
use std::str::FromStr;

use amqc_core::cnn::Preset;
use amqc_core::twin::{LoopMode, FEED_BOUNDS, POWER_BOUNDS_W, SPEED_BOUNDS_MM_S};
use ini::Ini;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSection {
    pub n_samples: usize,
    pub seed: u64,
    pub out_dir: String,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSection {
    #[serde(serialize_with = "as_display")]
    pub preset: Preset,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantSection {
    pub calibration_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrokerSection {
    pub port: u16,
    pub retransmit_ms: u64,
    pub max_attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopSection {
    pub layers: u32,
    pub sites: u32,
    pub hot_threshold: f64,
    pub cold_threshold: f64,
    #[serde(serialize_with = "as_display")]
    pub mode: LoopMode,
    pub controller: bool,
    pub power_w: f64,
    pub speed_mm_s: f64,
    pub feed_rel: f64,
    pub node_id: u16,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: DataSection,
    pub train: TrainSection,
    pub quant: QuantSection,
    pub broker: BrokerSection,
    #[serde(rename = "loop")]
    pub run_loop: LoopSection,
}

fn as_display<T: Display, S: serde::Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection {
                n_samples: 2000,
                seed: 42,
                out_dir: "data".into(),
                augment: true,
            },
            train: TrainSection {
                preset: Preset::Tiny,
                epochs: 30,
                lr: 0.01,
                batch_size: 32,
                seed: 42,
            },
            quant: QuantSection { calibration_n: 32 },
            broker: BrokerSection {
                port: 1883,
                retransmit_ms: 200,
                max_attempts: 10,
            },
            run_loop: LoopSection {
                layers: 200,
                sites: 1000,
                hot_threshold: 0.05,
                cold_threshold: 0.05,
                mode: LoopMode::ModelOnly,
                controller: true,
                power_w: 350.0,
                speed_mm_s: 500.0,
                feed_rel: 1.0,
                node_id: 1,
                seed: 42,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| ConfigError(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(ConfigError(format!("{key}: expected on or off, got {other:?}"))),
    }
}

fn bounded<T: PartialOrd + Display + Copy>(key: &str, v: T, lo: T, hi: T) -> Result<T> {
    if v >= lo && v <= hi {
        Ok(v)
    } else {
        Err(ConfigError(format!("{key} = {v} outside [{lo}, {hi}]")))
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides` as `(section, key, value)`.
    pub fn load(file: Option<&Path>, overrides: &[(String, String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_ini(&text)?;
        }
        for (section, key, value) in overrides {
            cfg.set(section, key, value)?;
        }
        Ok(cfg)
    }

    pub fn apply_ini(&mut self, text: &str) -> Result<()> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError(format!("config parse error: {e}")))?;
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let Some(section) = section else {
                    return Err(ConfigError(format!("key {key:?} outside any [section]")));
                };
                self.set(section, key, value)?;
            }
        }
        Ok(())
    }

    /// Sets one key, checking its bound.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let name = format!("{section}.{key}");
        let k = name.as_str();
        match (section, key) {
            ("data", "n_samples") => self.data.n_samples = bounded(k, parse(k, value)?, 8, 1_000_000)?,
            ("data", "seed") => self.data.seed = parse(k, value)?,
            ("data", "out_dir") => {
                let v = value.trim();
                if v.is_empty() {
                    return Err(ConfigError(format!("{k} must not be empty")));
                }
                self.data.out_dir = v.to_owned();
            }
            ("data", "augment") => self.data.augment = parse_bool(k, value)?,
            ("train", "preset") => self.train.preset = parse(k, value)?,
            ("train", "epochs") => self.train.epochs = bounded(k, parse(k, value)?, 1, 10_000)?,
            ("train", "lr") => self.train.lr = bounded(k, parse(k, value)?, 1e-6, 10.0)?,
            ("train", "batch_size") => self.train.batch_size = bounded(k, parse(k, value)?, 1, 4096)?,
            ("train", "seed") => self.train.seed = parse(k, value)?,
            ("quant", "calibration_n") => self.quant.calibration_n = bounded(k, parse(k, value)?, 16, 100_000)?,
            ("broker", "port") => self.broker.port = parse(k, value)?,
            ("broker", "retransmit_ms") => self.broker.retransmit_ms = bounded(k, parse(k, value)?, 1, 60_000)?,
            ("broker", "max_attempts") => self.broker.max_attempts = bounded(k, parse(k, value)?, 1, 1000)?,
            ("loop", "layers") => self.run_loop.layers = bounded(k, parse(k, value)?, 2, 1_000_000)?,
            ("loop", "sites") => self.run_loop.sites = bounded(k, parse(k, value)?, 1, 1_000_000)?,
            ("loop", "hot_threshold") => self.run_loop.hot_threshold = bounded(k, parse(k, value)?, 1e-9, 1.0)?,
            ("loop", "cold_threshold") => self.run_loop.cold_threshold = bounded(k, parse(k, value)?, 1e-9, 1.0)?,
            ("loop", "mode") => {
                self.run_loop.mode = value.trim().parse().map_err(|e| ConfigError(format!("{k}: {e}")))?
            }
            ("loop", "controller") => self.run_loop.controller = parse_bool(k, value)?,
            ("loop", "power_w") => {
                self.run_loop.power_w = bounded(k, parse(k, value)?, POWER_BOUNDS_W.0, POWER_BOUNDS_W.1)?
            }
            ("loop", "speed_mm_s") => {
                self.run_loop.speed_mm_s = bounded(k, parse(k, value)?, SPEED_BOUNDS_MM_S.0, SPEED_BOUNDS_MM_S.1)?
            }
            ("loop", "feed_rel") => self.run_loop.feed_rel = bounded(k, parse(k, value)?, FEED_BOUNDS.0, FEED_BOUNDS.1)?,
            ("loop", "node_id") => self.run_loop.node_id = parse(k, value)?,
            ("loop", "seed") => self.run_loop.seed = parse(k, value)?,
            _ => return Err(ConfigError(format!("unknown config key {k}"))),
        }
        Ok(())
    }

    /// Single-line JSON form embedded in artifacts for provenance.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Provenance line written at the top of every JSONL artifact.
    pub fn provenance_line(&self, command: &str) -> String {
        let v = serde_json::json!({ "record": "config", "command": command, "config": self.to_json() });
        format!("{v}\n")
    }
}

/// Splits `section.key=value`.
pub fn parse_override(text: &str) -> Result<(String, String, String)> {
    let (path, value) = text
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override {text:?} is not section.key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| ConfigError(format!("override {text:?} is not section.key=value")))?;
    Ok((section.to_owned(), key.to_owned(), value.to_owned()))
}
