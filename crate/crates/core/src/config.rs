//! Pipeline configuration: a versioned JSON file with strict unknown-key
//! rejection, since silent config typos are the dominant failure mode for
//! batch pipelines.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::claims::EventKind;
use crate::cohort::CohortMode;
use crate::error::{Error, Result};
use crate::features::{ConceptDef, ConceptOrigin};
use crate::gbt::TrainConfig;
use crate::protocol::RegimeKind;
use crate::rcs::WindowSpec;
use crate::synth::SynthConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    pub claims: Option<PathBuf>,
    pub demographics: Option<PathBuf>,
    pub code_sets: Option<PathBuf>,
    pub kd_concepts: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSettings {
    pub modes: Vec<CohortMode>,
    pub control_ratio: u32,
}

impl Default for CohortSettings {
    fn default() -> Self {
        CohortSettings {
            modes: vec![CohortMode::NaflInclusive, CohortMode::NonNafl],
            control_ratio: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSettings {
    pub top_k_per_kind: usize,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        FeatureSettings { top_k_per_kind: 50 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RfeSettings {
    pub enabled: bool,
    pub drop_fraction: f64,
    pub min_features: usize,
}

impl Default for RfeSettings {
    fn default() -> Self {
        RfeSettings {
            enabled: false,
            drop_fraction: 0.2,
            min_features: 8,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// Hyperparameter grid; the built-in default grid when omitted.
    pub grid: Option<Vec<TrainConfig>>,
    pub rfe: RfeSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub paths: InputPaths,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    pub window: WindowSpec,
    #[serde(default)]
    pub cohort: CohortSettings,
    #[serde(default)]
    pub features: FeatureSettings,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<RegimeKind>,
    #[serde(default = "default_benchmarks")]
    pub benchmarks: Vec<String>,
}

fn default_regimes() -> Vec<RegimeKind> {
    RegimeKind::ALL.to_vec()
}

fn default_benchmarks() -> Vec<String> {
    vec!["nafl_screen".to_string(), "t2dm_screen".to_string()]
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<PipelineConfig> {
        let config: PipelineConfig = serde_json::from_str(text)?;
        if config.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {}; expected {CONFIG_VERSION}",
                config.version
            )));
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut config = Self::from_json(&text)?;
        // relative paths resolve against the config file's directory
        if let Some(base) = path.parent() {
            let fix = |p: &mut Option<PathBuf>| {
                if let Some(inner) = p {
                    if inner.is_relative() {
                        *inner = base.join(&inner);
                    }
                }
            };
            fix(&mut config.paths.claims);
            fix(&mut config.paths.demographics);
            fix(&mut config.paths.code_sets);
            fix(&mut config.paths.kd_concepts);
            if config.out_dir.is_relative() {
                config.out_dir = base.join(&config.out_dir);
            }
        }
        Ok(config)
    }

    /// Structural validation plus existence checks for referenced files.
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.cohort.modes.is_empty() {
            return Err(Error::Config("cohort.modes must not be empty".into()));
        }
        if self.cohort.control_ratio < 1 {
            return Err(Error::Config(
                "cohort.control_ratio must be at least 1".into(),
            ));
        }
        if self.regimes.is_empty() {
            return Err(Error::Config("regimes must not be empty".into()));
        }
        if self.features.top_k_per_kind == 0 {
            return Err(Error::Config(
                "features.top_k_per_kind must be positive".into(),
            ));
        }
        if let Some(grid) = &self.train.grid {
            if grid.is_empty() {
                return Err(Error::Config(
                    "train.grid must not be empty when given".into(),
                ));
            }
            for config in grid {
                config.validate()?;
            }
        }
        if self.train.rfe.enabled {
            if !(self.train.rfe.drop_fraction > 0.0 && self.train.rfe.drop_fraction < 1.0) {
                return Err(Error::Config(
                    "train.rfe.drop_fraction must lie in (0,1)".into(),
                ));
            }
            if self.train.rfe.min_features == 0 {
                return Err(Error::Config(
                    "train.rfe.min_features must be positive".into(),
                ));
            }
        }
        if let Some(synth) = &self.synth {
            synth.validate()?;
            if synth.study_start != self.window.study_start
                || synth.study_end != self.window.study_end
            {
                return Err(Error::Config(
                    "synth study period must match the window study period".into(),
                ));
            }
        } else {
            for (name, path) in [
                ("paths.claims", &self.paths.claims),
                ("paths.demographics", &self.paths.demographics),
            ] {
                if path.is_none() {
                    return Err(Error::Config(format!(
                        "{name} is required when no synthetic generator is configured"
                    )));
                }
            }
        }
        for (name, path) in [
            ("paths.code_sets", &self.paths.code_sets),
            ("paths.kd_concepts", &self.paths.kd_concepts),
        ] {
            if path.is_none() {
                return Err(Error::Config(format!("{name} is required")));
            }
        }
        // every provided path must exist now
        for path in [
            &self.paths.claims,
            &self.paths.demographics,
            &self.paths.code_sets,
            &self.paths.kd_concepts,
        ]
        .into_iter()
        .flatten()
        {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "referenced file does not exist: {}",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

/// One knowledge-driven concept as written in the concepts file; origin is
/// implied.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KdConceptEntry {
    name: String,
    kind: EventKind,
    codes: Vec<String>,
}

/// Load the knowledge-driven concept file (a JSON array of
/// `{name, kind, codes}` entries).
pub fn load_kd_concepts(path: &Path) -> Result<Vec<ConceptDef>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let entries: Vec<KdConceptEntry> = serde_json::from_str(&text)?;
    Ok(entries
        .into_iter()
        .map(|e| ConceptDef {
            name: e.name,
            kind: e.kind,
            codes: e.codes,
            origin: ConceptOrigin::KD,
        })
        .collect())
}

/// Load and validate the code-set config file.
pub fn load_code_sets(path: &Path) -> Result<crate::cohort::CodeSetConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let config: crate::cohort::CodeSetConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}
