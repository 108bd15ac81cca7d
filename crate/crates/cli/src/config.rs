//! Run configuration: a JSON file with one section per component, overridden
//! by command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tubelink::dataset_io::default_classes;
use tubelink::evaluation::EvalConfig;
use tubelink::linker::LinkerConfig;
use tubelink::simulator::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogLevel {
    Quiet,
    #[default]
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Class vocabulary; index `c` is the `c`-th detection score.
    pub classes: Vec<String>,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub log_level: LogLevel,
    pub linker: LinkerConfig,
    pub eval: EvalConfig,
    pub scenario: ScenarioConfig,
    /// Correlation gating radius in meters.
    pub radius: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            classes: default_classes(),
            seed: 0,
            threads: 0,
            log_level: LogLevel::Info,
            linker: LinkerConfig::default(),
            eval: EvalConfig::default(),
            scenario: ScenarioConfig::default(),
            radius: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Checks every section; the scenario seed and vocabulary follow the
    /// top-level values.
    pub fn finalize(mut self) -> Result<Self, String> {
        self.scenario.seed = self.seed;
        self.scenario.classes = self.classes.clone();
        if self.classes.is_empty() {
            return Err("classes must not be empty".into());
        }
        self.linker.validate().map_err(|e| e.to_string())?;
        self.eval.validate().map_err(|e| e.to_string())?;
        self.scenario.validate().map_err(|e| e.to_string())?;
        if let Some(r) = self.radius {
            if r.is_nan() || r < 0.0 {
                return Err("radius must be non-negative".into());
            }
        }
        Ok(self)
    }

    pub fn info(&self) -> bool {
        self.log_level == LogLevel::Info
    }
}
