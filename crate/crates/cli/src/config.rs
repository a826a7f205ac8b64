//! JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use dscnet::data::SynthConfig;
use dscnet::dmsk::{BankConfig, KernelStrategy};
use dscnet::train::{TrainConfig, DEFAULT_TAU};
use dscnet::ttt::TttConfig;
use dscnet::unet::{Placement, SkipMode, UNetConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Per-level widths; the level count is their number.
    pub channels: Vec<usize>,
    pub skip: SkipMode,
    #[serde(default)]
    pub placement: Placement,
    pub banks: BankConfig,
    #[serde(default)]
    pub strategy: KernelStrategy,
    #[serde(default)]
    pub ttt: TttConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_tau")]
    pub tau: usize,
}

fn default_tau() -> usize {
    DEFAULT_TAU
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    /// Relative paths resolve against the working directory.
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.inner().to_string();
            CliError::Config(describe(&path, &inner))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.unet().validate()?;
        self.train.validate()?;
        let m = 1usize << (self.model.channels.len().max(1) - 1);
        if self.data.h % m != 0 || self.data.w % m != 0 {
            return Err(CliError::Config(format!(
                "data.H and data.W must be divisible by {m} for {} levels",
                self.model.channels.len()
            )));
        }
        Ok(())
    }

    /// The network for single-channel images with `data.K` classes.
    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            classes: self.data.k,
            channels: self.model.channels.clone(),
            skip: self.model.skip,
            placement: self.model.placement,
            banks: self.model.banks.clone(),
            strategy: self.model.strategy,
            ttt: self.model.ttt.clone(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }
}

/// Rewrites serde's messages so they name the offending key in full,
/// e.g. `model.banks: missing key`.
fn describe(path: &str, msg: &str) -> String {
    let key = msg.split('`').nth(1);
    let join = |k: &str| if path.is_empty() || path == "." { k.to_string() } else { format!("{path}.{k}") };
    match key {
        Some(k) if msg.starts_with("missing field") => format!("{}: missing key", join(k)),
        Some(k) if msg.starts_with("unknown field") => format!("{}: unknown key", join(k)),
        _ if path.is_empty() || path == "." => msg.to_string(),
        _ => format!("{path}: {msg}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"{
        "data": {"seed": 1, "n": 4, "H": 32, "W": 32, "K": 2, "scale_mix": 0.5},
        "model": {
            "channels": [8, 16],
            "skip": "dsc",
            "placement": "all",
            "banks": {"small": [[3, 1], [5, 1]], "large": [[7, 2], [9, 3]]},
            "strategy": "both",
            "ttt": {"eta": 0.1}
        },
        "train": {"steps": 10, "batch_size": 2, "seed": 3},
        "eval": {"tau": 2},
        "out_dir": "runs/example"
    }"#;

    #[test]
    fn parses_example() {
        let cfg = RunConfig::parse(EXAMPLE).unwrap();
        assert_eq!(cfg.train.lr, 1e-2);
        assert_eq!(cfg.train.momentum, 0.99);
        assert_eq!(cfg.unet().classes, 2);
    }

    fn without(path: &[&str]) -> String {
        let mut v: serde_json::Value = serde_json::from_str(EXAMPLE).unwrap();
        let mut cur = &mut v;
        for p in &path[..path.len() - 1] {
            cur = &mut cur[*p];
        }
        cur.as_object_mut().unwrap().remove(path[path.len() - 1]);
        v.to_string()
    }

    #[test]
    fn missing_keys_are_named() {
        for (path, name) in [
            (&["model", "banks"][..], "model.banks"),
            (&["data", "K"][..], "data.K"),
            (&["out_dir"][..], "out_dir"),
        ] {
            match RunConfig::parse(&without(path)) {
                Err(CliError::Config(m)) => assert!(m.contains(name), "{m}"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = EXAMPLE.replace(r#""tau": 2"#, r#""tau": 2, "rho": 1"#);
        match RunConfig::parse(&text) {
            Err(CliError::Config(m)) => assert!(m.contains("eval.rho"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        for (from, to) in [
            (r#""H": 32"#, r#""H": 24"#),
            (r#"[3, 1], [5, 1]"#, r#"[4, 1]"#),
            (r#""channels": [8, 16]"#, r#""channels": [8, 16, 32, 64, 128, 256, 512]"#),
            (r#""steps": 10, "batch_size": 2"#, r#""steps": 10, "batch_size": 0"#),
        ] {
            let e = RunConfig::parse(&EXAMPLE.replace(from, to)).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{from} -> {to}: {e}");
        }
    }
}
