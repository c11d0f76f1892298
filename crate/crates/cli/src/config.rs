//! Run files: a mission config plus batch settings in one JSON object.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use sylva_core::simulation::{MissionConfig, Strategy};

use crate::CliError;

#[derive(Clone, Debug)]
pub struct RunFile {
    pub mission: MissionConfig,
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub timestamps: Vec<f64>,
    /// Whether the file set `record_trajectory` itself.
    pub trajectory_set: bool,
}

fn take<T: serde::de::DeserializeOwned>(obj: &mut Map<String, Value>, key: &str) -> Result<Option<T>, CliError> {
    obj.remove(key)
        .map(|v| serde_json::from_value(v).map_err(|e| CliError::usage(format!("{key}: {e}"))))
        .transpose()
}

/// Splits the run-file keys (`output_dir`, `seeds`, `strategies`,
/// `timestamps`) off and parses the rest strictly as a mission config.
/// Relative paths resolve against `base`.
pub fn parse(text: &str, base: &Path) -> Result<RunFile, CliError> {
    let value: Value = serde_json::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(CliError::usage("config: expected a JSON object"));
    };
    let output_dir: Option<PathBuf> = take(&mut obj, "output_dir")?;
    let seeds = take(&mut obj, "seeds")?.unwrap_or_default();
    let strategies = take(&mut obj, "strategies")?.unwrap_or_default();
    let timestamps = take(&mut obj, "timestamps")?.unwrap_or_default();
    let trajectory_set = obj.contains_key("record_trajectory");
    let mut mission: MissionConfig =
        serde_json::from_value(Value::Object(obj)).map_err(|e| CliError::usage(format!("config: {e}")))?;
    if let Some(w) = &mission.world_file {
        if w.is_relative() {
            mission.world_file = Some(base.join(w));
        }
    }
    Ok(RunFile {
        mission,
        output_dir: output_dir.map(|d| if d.is_relative() { base.join(d) } else { d }),
        seeds,
        strategies,
        timestamps,
        trajectory_set,
    })
}

pub fn load(path: &Path) -> Result<RunFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse(&text, base)
}

pub fn validate(cfg: &MissionConfig) -> Result<(), CliError> {
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))
}

pub fn parse_strategy(s: &str) -> Result<Strategy, String> {
    serde_json::from_value(Value::String(s.trim().to_string())).map_err(|_| {
        format!("unknown strategy `{s}` (adaptive, fixed_explorer, split_map_adaptive, split_map_fixed)")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_keys_are_split_off() {
        let f = parse(r#"{"n_agents": 2, "seeds": [1, 2], "output_dir": "out", "world_file": "w.json"}"#, Path::new("/cfg")).unwrap();
        assert_eq!(f.mission.n_agents, 2);
        assert_eq!(f.seeds, vec![1, 2]);
        assert_eq!(f.output_dir, Some(PathBuf::from("/cfg/out")));
        assert_eq!(f.mission.world_file, Some(PathBuf::from("/cfg/w.json")));
        assert!(!f.trajectory_set);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse(r#"{"n_agent": 2}"#, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("n_agent"), "{err}");
        let err = parse(r#"{"planner": {"weights": {"w_x": 1}}}"#, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("w_x"), "{err}");
    }

    #[test]
    fn strategy_names() {
        assert_eq!(parse_strategy("split_map_adaptive").unwrap(), Strategy::SplitMapAdaptive);
        assert!(parse_strategy("greedy").is_err());
    }
}
