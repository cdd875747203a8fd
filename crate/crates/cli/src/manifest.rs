//! Run manifests and config loading.

use std::fs;
use std::path::{Path, PathBuf};

use dualpl_core::bank::BANK_VERSION;
use dualpl_core::selftrain::checkpoint::CHECKPOINT_VERSION;
use dualpl_core::selftrain::RunConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{write_file, CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
/// Used by `gen-data`, whose `manifest.json` describes the dataset.
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Versions {
    pub cli: String,
    pub core: String,
    pub bank_format: u32,
    pub checkpoint_format: u32,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            cli: env!("CARGO_PKG_VERSION").into(),
            core: dualpl_core::VERSION.into(),
            bank_format: BANK_VERSION,
            checkpoint_format: CHECKPOINT_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub run: u64,
    pub data: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRecord {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

/// Everything needed to repeat a command: the resolved config, seeds and
/// command-specific inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub versions: Versions,
    pub seeds: Seeds,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationRecord>,
}

impl Manifest {
    pub fn new(command: &str, config: RunConfig) -> Self {
        Self {
            command: command.into(),
            versions: Versions::current(),
            seeds: Seeds {
                run: config.seed,
                data: config.data.seed,
            },
            config,
            data_dir: None,
            ablation: None,
        }
    }
}

pub fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    RunConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn read_manifest(path: &Path) -> CliResult<Manifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    m.config
        .validate()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(m)
}

pub fn validated(cfg: RunConfig) -> CliResult<RunConfig> {
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Creates `dir` and writes `config.json` and the manifest into it.
pub fn write_run_files(dir: &Path, manifest: &Manifest, manifest_name: &str) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(crate::runtime(&dir.display().to_string()))?;
    write_file(&dir.join(CONFIG_FILE), pretty(&manifest.config))?;
    write_file(&dir.join(manifest_name), pretty(manifest))
}

/// Dotted paths of the leaves where two JSON documents differ.
pub fn json_diff(a: &Value, b: &Value) -> Vec<String> {
    let mut out = Vec::new();
    diff_into(a, b, String::new(), &mut out);
    out
}

fn diff_into(a: &Value, b: &Value, path: String, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_into(u, v, p, out),
                    _ => out.push(p),
                }
            }
        }
        _ if a != b => out.push(path),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn diff_reports_leaf_paths() {
        let a = json!({"a": 1, "b": {"c": 2, "d": [1, 2]}});
        let b = json!({"a": 1, "b": {"c": 3, "d": [1, 2]}, "e": null});
        assert_eq!(json_diff(&a, &b), vec!["b.c", "e"]);
        assert!(json_diff(&a, &a).is_empty());
    }

    #[test]
    fn manifest_round_trips() {
        let m = Manifest::new("train", RunConfig::desk());
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<Manifest>(&text).unwrap(), m);
    }
}
