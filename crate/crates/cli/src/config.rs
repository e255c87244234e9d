//! Resolved run settings: a preset, then a `key=value` file, then flags.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use hmn_core::data::{SynthConfig, TamperMode};
use hmn_core::model::ModelConfig;
use hmn_core::training::TrainConfig;

/// Bad input from the user; exits with status 1.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Desk,
    Full,
    Tiny,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Full => ModelConfig::full_scale(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub world_seed: u64,
    pub data_seed: u64,
    pub episodes: usize,
    pub frames: usize,
    pub tamper: Vec<TamperMode>,
    pub split: (f64, f64, f64),
    pub split_seed: u64,
    pub threshold: f64,
    /// Keys given in the config file or on the command line.
    pub explicit: BTreeSet<String>,
}

pub const KEYS: &[&str] = &[
    "memory-len",
    "patches",
    "dim",
    "hidden",
    "delta",
    "stride",
    "noise",
    "world-seed",
    "data-seed",
    "episodes",
    "frames",
    "tamper",
    "split",
    "split-seed",
    "lr",
    "d-lr",
    "batch-size",
    "window",
    "steps",
    "seed",
    "lambda-adv",
    "lambda-cls",
    "lambda-mse",
    "d-steps",
    "threshold",
];

fn parse<V: FromStr>(key: &str, raw: &str) -> anyhow::Result<V> {
    raw.trim()
        .parse()
        .map_err(|_| usage(format!("invalid value {raw:?} for {key}")))
}

pub fn parse_split(raw: &str) -> anyhow::Result<(f64, f64, f64)> {
    let parts: Vec<f64> = raw
        .split(',')
        .map(|p| parse("split", p))
        .collect::<anyhow::Result<_>>()?;
    match parts.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(usage(format!("split needs three comma-separated ratios, got {raw:?}"))),
    }
}

pub fn parse_tamper(raw: &str) -> anyhow::Result<Vec<TamperMode>> {
    raw.split(',')
        .map(|m| TamperMode::parse(m.trim()).map_err(|e| usage(e.to_string())))
        .collect()
}

impl Settings {
    pub fn from_preset(preset: Preset) -> Self {
        let model = preset.model();
        Self {
            model,
            train: TrainConfig::default(),
            synth: SynthConfig {
                patches: model.patches,
                dim: model.dim,
                ..SynthConfig::default()
            },
            world_seed: 42,
            data_seed: 42,
            episodes: 200,
            frames: 20,
            tamper: vec![TamperMode::TemporalBreak],
            split: (0.7, 0.1, 0.2),
            split_seed: 42,
            threshold: 0.5,
            explicit: BTreeSet::new(),
        }
    }

    /// Applies one setting; `key` may use `-` or `_`.
    pub fn set(&mut self, key: &str, raw: &str) -> anyhow::Result<()> {
        let key = key.trim().replace('_', "-");
        let k = key.as_str();
        match k {
            "memory-len" => self.model.memory_len = parse(k, raw)?,
            "patches" => {
                self.model.patches = parse(k, raw)?;
                self.synth.patches = self.model.patches;
            }
            "dim" => {
                self.model.dim = parse(k, raw)?;
                self.synth.dim = self.model.dim;
            }
            "hidden" => {
                self.model.hidden = parse(k, raw)?;
                self.model.attn_dim = self.model.hidden;
            }
            "delta" => self.synth.delta = parse(k, raw)?,
            "stride" => self.synth.stride = parse(k, raw)?,
            "noise" => self.synth.noise = parse(k, raw)?,
            "world-seed" => self.world_seed = parse(k, raw)?,
            "data-seed" => self.data_seed = parse(k, raw)?,
            "episodes" => self.episodes = parse(k, raw)?,
            "frames" => self.frames = parse(k, raw)?,
            "tamper" => self.tamper = parse_tamper(raw)?,
            "split" => self.split = parse_split(raw)?,
            "split-seed" => self.split_seed = parse(k, raw)?,
            "lr" => self.train.lr = parse(k, raw)?,
            "d-lr" => self.train.d_lr = parse(k, raw)?,
            "batch-size" => self.train.batch_size = parse(k, raw)?,
            "window" => self.train.window = parse(k, raw)?,
            "steps" => self.train.steps = parse(k, raw)?,
            "seed" => self.train.seed = parse(k, raw)?,
            "lambda-adv" => self.train.lambda_adv = parse(k, raw)?,
            "lambda-cls" => self.train.lambda_cls = parse(k, raw)?,
            "lambda-mse" => self.train.lambda_mse = parse(k, raw)?,
            "d-steps" => self.train.d_steps = parse(k, raw)?,
            "threshold" => self.threshold = parse(k, raw)?,
            _ => return Err(usage(format!("unknown setting {key:?}; known: {}", KEYS.join(", ")))),
        }
        self.explicit.insert(key);
        Ok(())
    }

    /// Applies a `key=value` file; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> anyhow::Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k, v)
                .map_err(|e| usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(usage("threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Adopts the grid shape of loaded data unless the user fixed it.
    pub fn adopt_grid(&mut self, patches: usize, dim: usize) -> anyhow::Result<()> {
        for (key, have, want) in [("patches", self.model.patches, patches), ("dim", self.model.dim, dim)] {
            if have != want && self.explicit.contains(key) {
                return Err(usage(format!("{key}={have} was requested but the data has {key}={want}")));
            }
        }
        self.model.patches = patches;
        self.model.dim = dim;
        self.synth.patches = patches;
        self.synth.dim = dim;
        Ok(())
    }

    pub fn describe(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        format!(
            "L={} K={} d={} H={} delta={} stride={} noise={} | lr={} d_lr={} batch={} window={} steps={} seed={} \
             lambda_adv={} lambda_cls={} lambda_mse={} d_steps={} | episodes={} frames={} split={:?} split_seed={} threshold={}",
            m.memory_len,
            m.patches,
            m.dim,
            m.hidden,
            self.synth.delta,
            self.synth.stride,
            self.synth.noise,
            t.lr,
            t.d_lr,
            t.batch_size,
            t.window,
            t.steps,
            t.seed,
            t.lambda_adv,
            t.lambda_cls,
            t.lambda_mse,
            t.d_steps,
            self.episodes,
            self.frames,
            self.split,
            self.split_seed,
            self.threshold
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_preset_and_records_keys() {
        let mut s = Settings::from_preset(Preset::Desk);
        s.apply_text("# comment\nmemory_len = 8\n\nlr=0.01 # trailing\n", "test").unwrap();
        assert_eq!(s.model.memory_len, 8);
        assert_eq!(s.train.lr, 0.01);
        assert!(s.explicit.contains("memory-len"));
        assert_eq!(s.model.patches, 16);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let mut s = Settings::from_preset(Preset::Tiny);
        for text in ["colour=red", "steps=many", "no equals sign"] {
            let err = s.apply_text(text, "t").unwrap_err();
            assert!(err.downcast_ref::<UsageError>().is_some(), "{text}");
        }
    }

    #[test]
    fn split_needs_three_ratios() {
        assert_eq!(parse_split("0.8,0.1,0.1").unwrap(), (0.8, 0.1, 0.1));
        assert!(parse_split("0.5,0.5").is_err());
    }

    #[test]
    fn explicit_grid_must_match_data() {
        let mut s = Settings::from_preset(Preset::Full);
        s.adopt_grid(16, 16).unwrap();
        assert_eq!((s.model.patches, s.model.dim), (16, 16));
        s.set("patches", "8").unwrap();
        assert!(s.adopt_grid(16, 16).is_err());
    }
}
