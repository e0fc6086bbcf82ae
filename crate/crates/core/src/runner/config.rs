use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{MapperParams, MfParams};
use crate::llm_gateway::{BackendKind, GatewayConfig, ModelSpec};
use crate::promptgen::{PromptVariant, DEFAULT_MAX_PROMPT_CHARS};
use crate::respparse::{LabelMap, DEFAULT_SIMILARITY_THRESHOLD};
use crate::sampler::SplitConfig;
use crate::Error;

/// Raw inputs of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSource {
    pub domain: String,
    pub reviews: PathBuf,
    pub meta: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub name: String,
    #[serde(default)]
    pub source: Option<DomainSource>,
    #[serde(default)]
    pub target: Option<DomainSource>,
    /// Use this eval set instead of sampling one from the corpus.
    #[serde(default)]
    pub evalset: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub tgt: bool,
    pub cmf: bool,
    pub emcdr: bool,
    pub mf: MfParams,
    pub mapper: MapperParams,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            tgt: true,
            cmf: true,
            emcdr: true,
            mf: MfParams::default(),
            mapper: MapperParams::default(),
        }
    }
}

impl BaselineConfig {
    pub fn any(&self) -> bool {
        self.tgt || self.cmf || self.emcdr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelMapConfig {
    Preset(String),
    Values([f64; 6]),
}

impl Default for LabelMapConfig {
    fn default() -> Self {
        Self::Preset("default".into())
    }
}

impl LabelMapConfig {
    pub fn resolve(&self) -> Result<LabelMap, Error> {
        match self {
            Self::Preset(name) => {
                LabelMap::preset(name).ok_or_else(|| Error::Config(format!("unknown label map preset {name:?}")))
            }
            Self::Values(v) => Ok(LabelMap::new(*v)?),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Model label per pair name; pairs not listed use the first model.
    pub models: BTreeMap<String, String>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_variants() -> Vec<String> {
    PromptVariant::all().iter().map(|v| v.to_string()).collect()
}

fn default_max_prompt_chars() -> usize {
    DEFAULT_MAX_PROMPT_CHARS
}

fn default_threshold() -> f64 {
    DEFAULT_SIMILARITY_THRESHOLD
}

/// Top-level run configuration, read from TOML. Relative paths resolve
/// against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub pairs: Vec<PairConfig>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub label_map: LabelMapConfig,
    #[serde(default = "default_max_prompt_chars")]
    pub max_prompt_chars: usize,
    #[serde(default = "default_threshold")]
    pub similarity_threshold: f64,
    /// Ceiling on total tokens spent by networked backends in one invocation.
    #[serde(default)]
    pub cost_ceiling_tokens: Option<u64>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(t) = &mut self.templates_dir {
            fix(t);
        }
        for pair in &mut self.pairs {
            for d in [&mut pair.source, &mut pair.target].into_iter().flatten() {
                fix(&mut d.reviews);
                fix(&mut d.meta);
            }
            if let Some(e) = &mut pair.evalset {
                fix(e);
            }
        }
    }

    pub fn parsed_variants(&self) -> Result<Vec<PromptVariant>, Error> {
        self.variants
            .iter()
            .map(|v| v.parse().map_err(|_| Error::Config(format!("unknown prompt variant {v:?}"))))
            .collect()
    }

    pub fn validate(&self) -> Result<(), Error> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.pairs.is_empty() {
            return cfg("at least one pair is required".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for p in &self.pairs {
            if !names.insert(&p.name) {
                return cfg(format!("duplicate pair name {:?}", p.name));
            }
            match (&p.source, &p.target, &p.evalset) {
                (Some(_), Some(_), _) | (None, None, Some(_)) => {}
                _ => return cfg(format!("pair {:?} needs source and target, or an evalset", p.name)),
            }
            for d in [&p.source, &p.target].into_iter().flatten() {
                for f in [&d.reviews, &d.meta] {
                    if !f.exists() {
                        return cfg(format!("pair {:?}: {} does not exist", p.name, f.display()));
                    }
                }
            }
            if let Some(e) = &p.evalset {
                if !e.exists() {
                    return cfg(format!("pair {:?}: {} does not exist", p.name, e.display()));
                }
            }
        }
        self.split.validate()?;
        let variants = self.parsed_variants()?;
        let llm_cells = self.models.len() * variants.len();
        let baseline_cells = if self.baselines.any() && self.pairs.iter().any(|p| p.source.is_some()) {
            1
        } else {
            0
        };
        if llm_cells + baseline_cells == 0 {
            return cfg("nothing to run: configure at least one model and variant, or a baseline".into());
        }
        let mut labels = std::collections::BTreeSet::new();
        for m in &self.models {
            m.validate()?;
            if !labels.insert(m.display_name()) {
                return cfg(format!("duplicate model label {:?}", m.display_name()));
            }
            if m.backend == BackendKind::HttpOpenaiCompatible && self.cost_ceiling_tokens.is_none() {
                return cfg(format!(
                    "model {:?} uses a networked backend; set cost_ceiling_tokens",
                    m.display_name()
                ));
            }
        }
        for (pair, model) in &self.ablation.models {
            if !names.contains(pair) {
                return cfg(format!("ablation names unknown pair {pair:?}"));
            }
            if !labels.contains(model.as_str()) {
                return cfg(format!("ablation names unknown model {model:?}"));
            }
        }
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return cfg("similarity_threshold must be within [0, 1]".into());
        }
        self.label_map.resolve()?;
        Ok(())
    }

    pub fn model(&self, label: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.display_name() == label)
    }
}
