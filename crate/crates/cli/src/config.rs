//! Pipeline configuration: one JSON document, env overrides for gateway
//! credentials only.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use scenechat_core::llm::{Fallback, FaultPlan, ModelProfile};
use scenechat_core::{GenerationParams, ReductionMode, SceneTreeParams};
use scenechat_gateway::{GatewayConfig, Mode};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}

/// Mirrors the columns of the efficiency ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Features {
    /// Verification against the full context plus the quality filter.
    pub filtering: bool,
    /// Scene tree serialization and description instead of plain box lists.
    pub bbox_conversion: bool,
    pub reduction: bool,
}

impl Features {
    pub const ALL: Features = Features {
        filtering: true,
        bbox_conversion: true,
        reduction: true,
    };

    pub const NONE: Features = Features {
        filtering: false,
        bbox_conversion: false,
        reduction: false,
    };
}

impl FromStr for Features {
    type Err = ConfigError;

    /// Comma-separated subset of `filtering,bbox,reduction`, or `all`/`none`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut f = Features::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "all" => f = Features::ALL,
                "none" | "direct" => {}
                "filtering" | "filter" => f.filtering = true,
                "bbox" | "bbox_conversion" => f.bbox_conversion = true,
                "reduction" | "reduce" => f.reduction = true,
                other => return Err(ConfigError::new(format!("unknown feature `{other}`"))),
            }
        }
        Ok(f)
    }
}

impl fmt::Display for Features {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.filtering, "filtering"),
            (self.bbox_conversion, "bbox"),
            (self.reduction, "reduction"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", names.join(","))
        }
    }
}

/// Settings for the scripted backend used in tests, benchmarks and offline runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptedConfig {
    /// JSON Lines of `{"digest", "response"}`.
    pub fixtures: Option<PathBuf>,
    pub fallback: Fallback,
    pub faults: FaultPlan,
    /// Simulated latency per LLM call.
    pub latency_ms: u64,
    /// Serve the script over a local HTTP server instead of in-process.
    pub over_http: bool,
}

impl Default for ScriptedConfig {
    fn default() -> Self {
        Self {
            fixtures: None,
            fallback: Fallback::Synthetic,
            faults: FaultPlan::default(),
            latency_ms: 0,
            over_http: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub registry_path: PathBuf,
    /// `builtin` or a directory with templates and `distribution.json`.
    pub prompts_set: String,
    pub generation: GenerationParams,
    pub scene: SceneTreeParams,
    pub gateway: GatewayConfig,
    pub model: ModelProfile,
    pub output_dir: PathBuf,
    pub shard_count: u32,
    pub rng_seed: u64,
    pub features: Features,
    /// Images processed concurrently by one worker.
    pub parallelism: usize,
    pub staleness_secs: u64,
    pub heartbeat_secs: u64,
    /// Simulated per-image cost of computing mask and depth sidecars when
    /// bbox conversion is on. Zero when sidecars are precomputed.
    pub sidecar_delay_ms: u64,
    pub scripted: ScriptedConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            registry_path: PathBuf::from("registry.json"),
            prompts_set: "builtin".into(),
            generation: GenerationParams::default(),
            scene: SceneTreeParams::default(),
            gateway: GatewayConfig::default(),
            model: ModelProfile::default(),
            output_dir: PathBuf::from("out"),
            shard_count: 1,
            rng_seed: 0,
            features: Features::ALL,
            parallelism: 4,
            staleness_secs: 300,
            heartbeat_secs: 30,
            sidecar_delay_ms: 0,
            scripted: ScriptedConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses the document and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.gateway = cfg.gateway.with_env_overrides();
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.registry_path = join(&self.registry_path);
        self.output_dir = join(&self.output_dir);
        if self.prompts_set != "builtin" {
            self.prompts_set = join(Path::new(&self.prompts_set)).to_string_lossy().into_owned();
        }
        self.scripted.fixtures = self.scripted.fixtures.as_deref().map(join);
    }

    /// Checks values and that referenced inputs exist. `need_registry` is
    /// false for commands that never read it.
    pub fn validate(&self, need_registry: bool) -> Result<(), ConfigError> {
        if self.shard_count == 0 {
            return Err(ConfigError::new("shard_count must be at least 1"));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::new("parallelism must be at least 1"));
        }
        if self.heartbeat_secs == 0 || self.staleness_secs <= self.heartbeat_secs {
            return Err(ConfigError::new("staleness_secs must exceed heartbeat_secs > 0"));
        }
        self.generation
            .validate()
            .map_err(|e| ConfigError::new(e.to_string()))?;
        self.scene.validate().map_err(|e| ConfigError::new(e.to_string()))?;
        self.gateway.validate().map_err(ConfigError::new)?;
        if need_registry && !self.registry_path.is_file() {
            return Err(ConfigError::new(format!(
                "registry {} does not exist",
                self.registry_path.display()
            )));
        }
        if self.prompts_set != "builtin" && !Path::new(&self.prompts_set).is_dir() {
            return Err(ConfigError::new(format!(
                "prompt set {} does not exist",
                self.prompts_set
            )));
        }
        if let Some(f) = &self.scripted.fixtures {
            if !f.is_file() {
                return Err(ConfigError::new(format!("fixtures {} do not exist", f.display())));
            }
        }
        Ok(())
    }

    /// Generation parameters with the feature toggles applied.
    pub fn effective_generation(&self) -> GenerationParams {
        let mut g = self.generation.clone();
        g.verify = g.verify && self.features.filtering;
        g.quality_filter = g.quality_filter && self.features.filtering;
        g.reduction = match (self.features.reduction, g.reduction) {
            (false, _) => ReductionMode::Off,
            (true, ReductionMode::Off) => ReductionMode::Llm,
            (true, m) => m,
        };
        g
    }

    pub fn is_scripted(&self) -> bool {
        self.gateway.mode == Mode::Scripted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_lists() {
        assert_eq!("none".parse::<Features>().unwrap(), Features::NONE);
        assert_eq!("all".parse::<Features>().unwrap(), Features::ALL);
        let f: Features = "bbox, reduction".parse().unwrap();
        assert!(!f.filtering && f.bbox_conversion && f.reduction);
        assert_eq!(f.to_string(), "bbox,reduction");
        assert!("gpu".parse::<Features>().is_err());
    }

    #[test]
    fn toggles_gate_generation() {
        let mut cfg = PipelineConfig {
            features: Features::NONE,
            ..Default::default()
        };
        let g = cfg.effective_generation();
        assert!(!g.verify && !g.quality_filter);
        assert_eq!(g.reduction, ReductionMode::Off);
        cfg.features = Features::ALL;
        cfg.generation.reduction = ReductionMode::Lexical;
        assert_eq!(cfg.effective_generation().reduction, ReductionMode::Lexical);
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(
            &p,
            r#"{"registry_path": "reg.json", "shard_count": 3, "output_dir": "/abs/out"}"#,
        )
        .unwrap();
        let cfg = PipelineConfig::load(&p).unwrap();
        assert_eq!(cfg.registry_path, dir.path().join("reg.json"));
        assert_eq!(cfg.output_dir, PathBuf::from("/abs/out"));
        assert_eq!(cfg.shard_count, 3);
        assert!(cfg.validate(true).is_err());
        assert!(cfg.validate(false).is_ok());
    }

    #[test]
    fn zero_shards_rejected() {
        let cfg = PipelineConfig {
            shard_count: 0,
            ..Default::default()
        };
        assert!(cfg.validate(false).unwrap_err().0.contains("shard_count"));
    }
}
