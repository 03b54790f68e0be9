//! Run configuration: defaults, then a TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use erasure_core::denoiser::{DiTConfig, DEFAULT_SAMPLE_STEPS};
use erasure_core::evalbench::EvalConfig;
use erasure_core::kgp::DEFAULT_WINDOW;
use erasure_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KgpConfig {
    pub window: usize,
    /// Euler steps per sampling call.
    pub sample_steps: usize,
    pub seed: u64,
}

impl Default for KgpConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            sample_steps: DEFAULT_SAMPLE_STEPS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Seeded random patch encoder built in-process.
    FrozenRandom,
    /// Precomputed `<dir>/<clip_id>.safetensors` feature files.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub dir: Option<PathBuf>,
    pub patch: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            kind: TeacherKind::FrozenRandom,
            dir: None,
            patch: 8,
            dim: 64,
            seed: 0x7eac_4e55,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dit: DiTConfig,
    pub train: TrainConfig,
    pub kgp: KgpConfig,
    pub teacher: TeacherConfig,
    pub eval: EvalConfig,
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Anything that parses as a TOML value is taken as one, otherwise as a bare string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` must be namespaced, e.g. `train.lambda`");
    }
    let (last, sections) = parts.split_last().expect("at least two parts");
    let mut table = root;
    for s in sections {
        table = table
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{s}` in `{key}` is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Defaults, overlaid with `file` (if any), overlaid with `key=value` overrides.
    /// Unknown sections or keys anywhere are rejected.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let user: toml::Table =
                toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            // Validate the file on its own so errors name the file.
            toml::Value::Table(user.clone())
                .try_into::<RunConfig>()
                .with_context(|| format!("invalid config {}", path.display()))?;
            merge(&mut table, user);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override `{o}` is not key=value"))?;
            set_path(&mut table, k.trim(), parse_scalar(v.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration override")?;
        cfg.dit.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
