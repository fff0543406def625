//! Config resolution and run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slipctl::scenario::{ControllerKind, ScenarioConfig, SurfaceSegment, SweepConfig};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Names accepted by `--config` in place of a file path.
pub const BUILTIN_NAMES: [&str; 2] = ["protocol", "switching"];

pub fn builtin(name: &str) -> Option<ScenarioConfig> {
    match name {
        "protocol" => Some(ScenarioConfig {
            name: "protocol".into(),
            ..ScenarioConfig::protocol("dry", 30.0, ControllerKind::Pid)
        }),
        "switching" => {
            let mut cfg = ScenarioConfig::protocol("dry", 30.0, ControllerKind::Pid);
            cfg.name = "switching".into();
            cfg.events.truncate(1);
            cfg.surface_timeline.extend([
                SurfaceSegment { time: 2.0, surface: "wet".into() },
                SurfaceSegment { time: 3.0, surface: "snow".into() },
            ]);
            cfg.controller.blend = true;
            Some(cfg)
        }
        _ => None,
    }
}

/// What a `--config` argument resolved to.
#[derive(Debug, Clone)]
pub enum Loaded {
    Scenario(ScenarioConfig),
    Sweep(SweepConfig),
}

impl Loaded {
    pub fn apply_overrides(&mut self, seed: Option<u64>, dt: Option<f64>) {
        let cfg = match self {
            Loaded::Scenario(c) => c,
            Loaded::Sweep(s) => &mut s.base,
        };
        if let Some(seed) = seed {
            cfg.noise.seed = seed;
        }
        if let Some(dt) = dt {
            cfg.dt = dt;
        }
    }

    pub fn into_scenario(self) -> Result<ScenarioConfig, CliError> {
        match self {
            Loaded::Scenario(c) => Ok(c),
            Loaded::Sweep(_) => {
                Err(CliError::Usage("this command takes a single scenario, not a sweep (use `batch`)".into()))
            }
        }
    }
}

/// Resolve `--config`: a builtin name, a scenario file, a sweep file or a
/// manifest written by an earlier run.
pub fn load(arg: Option<&str>) -> Result<Loaded, CliError> {
    let Some(arg) = arg else {
        return Ok(Loaded::Scenario(builtin("protocol").expect("builtin exists")));
    };
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(cfg) = builtin(arg) {
            return Ok(Loaded::Scenario(cfg));
        }
    }
    if !path.exists() {
        return Err(CliError::ConfigMissing(arg.into(), BUILTIN_NAMES.join(", ")));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::ConfigRead(arg.into(), e))?;
    parse(&text).map_err(|e| match e {
        CliError::Core(inner) => CliError::Usage(format!("{arg}: {inner}")),
        other => other,
    })
}

pub fn parse(text: &str) -> Result<Loaded, CliError> {
    let table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| CliError::Usage(format!("invalid TOML: {e}")))?;
    if table.contains_key("config_sha256") {
        let manifest: Manifest =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid manifest: {e}")))?;
        let expected = manifest.config_sha256.clone();
        let loaded = manifest.config()?;
        if loaded.sha256()? != expected {
            log::warn!("manifest hash does not match its embedded config; it was edited by hand");
        }
        return Ok(loaded);
    }
    if table.contains_key("base") || table.contains_key("sweep") {
        let sweep = SweepConfig::from_toml_str(text)?;
        sweep.base.validate()?;
        return Ok(Loaded::Sweep(sweep));
    }
    Ok(Loaded::Scenario(ScenarioConfig::from_toml_str(text)?))
}

impl Loaded {
    pub fn canonical_toml(&self) -> Result<String, CliError> {
        match self {
            Loaded::Scenario(c) => Ok(c.to_toml_string()?),
            Loaded::Sweep(s) => toml::to_string(s).map_err(|e| CliError::Usage(e.to_string())),
        }
    }

    pub fn sha256(&self) -> Result<String, CliError> {
        Ok(sha256_hex(self.canonical_toml()?.as_bytes()))
    }

    fn base(&self) -> &ScenarioConfig {
        match self {
            Loaded::Scenario(c) => c,
            Loaded::Sweep(s) => &s.base,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything needed to regenerate a run's outputs. Passing a manifest back
/// to `--config` reruns the embedded config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub dt: f64,
    /// SHA-256 of the embedded config in canonical TOML form.
    pub config_sha256: String,
    /// Subcommand options other than the global flags.
    #[serde(default)]
    pub arguments: toml::Table,
    /// Output file name to SHA-256 of its contents.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Manifest {
    pub fn new(command: &str, loaded: &Loaded, arguments: toml::Table) -> Result<Self, CliError> {
        let base = loaded.base();
        let (scenario, sweep) = match loaded {
            Loaded::Scenario(c) => (Some(c.clone()), None),
            Loaded::Sweep(s) => (None, Some(s.clone())),
        };
        Ok(Self {
            tool: env!("CARGO_BIN_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: base.noise.seed,
            dt: base.dt,
            config_sha256: loaded.sha256()?,
            arguments,
            outputs: BTreeMap::new(),
            scenario,
            sweep,
        })
    }

    fn config(self) -> Result<Loaded, CliError> {
        match (self.scenario, self.sweep) {
            (Some(c), None) => {
                c.validate()?;
                Ok(Loaded::Scenario(c))
            }
            (None, Some(s)) => {
                s.base.validate()?;
                Ok(Loaded::Sweep(s))
            }
            _ => Err(CliError::Usage("manifest must embed exactly one of [scenario] or [sweep]".into())),
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize manifest: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_valid() {
        for name in BUILTIN_NAMES {
            builtin(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn manifest_round_trips_to_the_same_config() {
        let loaded = Loaded::Scenario(builtin("protocol").unwrap());
        let m = Manifest::new("simulate", &loaded, toml::Table::new()).unwrap();
        let text = m.to_toml().unwrap();
        let again = parse(&text).unwrap();
        assert_eq!(again.sha256().unwrap(), m.config_sha256);
        let Loaded::Scenario(c) = again else { panic!("expected a scenario") };
        assert_eq!(c, builtin("protocol").unwrap());
    }

    #[test]
    fn sweep_files_are_recognized() {
        let text = "[base]\nduration = 2.0\n[sweep]\ninitial_speed = [10.0, 20.0]\n";
        assert!(matches!(parse(text).unwrap(), Loaded::Sweep(_)));
    }

    #[test]
    fn overrides_reach_the_scenario() {
        let mut loaded = Loaded::Scenario(ScenarioConfig::default());
        loaded.apply_overrides(Some(9), Some(5e-4));
        let c = loaded.into_scenario().unwrap();
        assert_eq!((c.noise.seed, c.dt), (9, 5e-4));
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let e = load(Some("/nonexistent/dir/cfg.toml")).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }
}
