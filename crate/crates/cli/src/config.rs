//! JSON run configuration. Each section overlays a command-specific default,
//! and command-line flags overlay the result.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const OUT_DIR_ENV: &str = "STOS_OUT_DIR";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<Value>,
    pub schedule: Option<Value>,
    pub grid: Option<Value>,
    pub task: Option<Value>,
    pub graph: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if config.precision == Some(Precision::F32) {
            return Err(CliError::Config(
                "only 64-bit precision is implemented; set \"precision\": \"f64\"".into(),
            ));
        }
        Ok(config)
    }

    /// `--out`, then the config file, then `$STOS_OUT_DIR`, then `./stos-out`.
    pub fn out_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("stos-out"))
    }
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Deserializes `defaults` overlaid with a config section; unknown keys are
/// rejected by the target type.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    section: Option<&Value>,
    name: &str,
) -> Result<T, CliError> {
    let mut value = serde_json::to_value(defaults).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(overlay) = section {
        if !overlay.is_object() {
            return Err(CliError::Config(format!("section \"{name}\" must be an object")));
        }
        merge(&mut value, overlay);
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("section \"{name}\": {e}")))
}

/// Positive counts written as `"3"`, `"1..8"` (inclusive) or `"1,2,5"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counts(pub Vec<usize>);

impl std::str::FromStr for Counts {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_list(s).map(Counts)
    }
}

pub fn parse_list(text: &str) -> Result<Vec<usize>, String> {
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    if let Some((a, b)) = text.split_once("..") {
        let (a, b) = (parse(a)?, parse(b.trim_start_matches('='))?);
        if a > b {
            return Err(format!("empty range {text}"));
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use stos_core::engine::ModelConfig;

    #[test]
    fn lists() {
        assert_eq!(parse_list("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_list("500").unwrap(), vec![500]);
        assert_eq!(parse_list("2,3").unwrap(), vec![2, 3]);
        assert!(parse_list("4..1").is_err());
        assert!(parse_list("x").is_err());
    }

    #[test]
    fn sections_overlay_defaults_and_reject_typos() {
        let base = ModelConfig::default();
        let ok = serde_json::json!({"hidden_dim": 8, "temporal": {"type": "dilated", "reset": 3}});
        let c = resolve(&base, Some(&ok), "model").unwrap();
        assert_eq!(c.hidden_dim, 8);
        assert_eq!(c.window, base.window);
        let bad = serde_json::json!({"hiden_dim": 8});
        assert!(matches!(resolve(&base, Some(&bad), "model"), Err(CliError::Config(_))));
    }
}
