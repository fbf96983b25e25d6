//! Pipeline configuration file (TOML or JSON, chosen by extension).

use std::path::{Path, PathBuf};

use kipa_core::loss::LossConfig;
use kipa_core::pipeline::{Blend, PipelineSettings, StageConfig, StageId};
use kipa_core::postprocess::PostprocessConfig;
use kipa_core::preprocess::{ForegroundStats, DEFAULT_CROP_EXPANSION, TARGET_SPACING};
use kipa_core::volume::Vec3;
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::nifti::ReadOptions;
use crate::predictors::{PredictorHandle, PredictorKind};

fn target_spacing() -> Vec3 {
    TARGET_SPACING
}

fn one() -> usize {
    1
}

fn crop_expansion() -> f64 {
    DEFAULT_CROP_EXPANSION
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    /// Inline normalization statistics.
    #[serde(default)]
    pub stats: Option<ForegroundStats>,
    /// JSON file written by `kipa preprocess`; used when `stats` is absent.
    #[serde(default)]
    pub stats_file: Option<PathBuf>,
    #[serde(default = "crop_expansion")]
    pub crop_expansion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    #[serde(default)]
    pub patch_size: Option<[usize; 3]>,
    #[serde(default)]
    pub overlap_fraction: Option<f64>,
    #[serde(default)]
    pub blend: Option<Blend>,
    #[serde(default)]
    pub loss: Option<LossConfig>,
    pub predictor: PredictorHandle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagesSection {
    pub coarse_i: StageSection,
    pub coarse_ii: StageSection,
    pub fine_tumor: StageSection,
}

impl StagesSection {
    pub fn get(&self, id: StageId) -> &StageSection {
        match id {
            StageId::CoarseI => &self.coarse_i,
            StageId::CoarseII => &self.coarse_ii,
            StageId::FineTumor => &self.fine_tumor,
        }
    }

    fn get_mut(&mut self, id: StageId) -> &mut StageSection {
        match id {
            StageId::CoarseI => &mut self.coarse_i,
            StageId::CoarseII => &mut self.coarse_ii,
            StageId::FineTumor => &mut self.fine_tumor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Persist coarse probability maps with the other intermediates.
    #[serde(default = "yes")]
    pub probabilities: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { probabilities: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "target_spacing")]
    pub target_spacing: Vec3,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub preprocess: PreprocessSection,
    pub stages: StagesSection,
    #[serde(default)]
    pub postprocess: PostprocessConfig,
    /// Feed the voted tumor mask as a second fine-tumor input channel.
    #[serde(default = "yes")]
    pub fine_tumor_mask_channel: bool,
    #[serde(default)]
    pub io: ReadOptions,
    #[serde(default)]
    pub output: OutputSection,
}

fn parse_text(text: &str, json: bool) -> Result<PipelineConfig> {
    if json {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            EngineError::config(key, e.into_inner())
        })
    } else {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            EngineError::config(key, inner.message())
        })
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    /// Reads and validates a config; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(EngineError::io(path))?;
        let json = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => true,
            Some("toml") => false,
            _ => text.trim_start().starts_with('{'),
        };
        let mut cfg = parse_text(&text, json)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg = parse_text(text, false)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg = parse_text(text, true)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &self.preprocess.stats_file {
            self.preprocess.stats_file = Some(resolve(base, p));
        }
        if let Some(p) = &self.output_dir {
            self.output_dir = Some(resolve(base, p));
        }
        for id in StageId::ALL {
            let handle = &mut self.stages.get_mut(id).predictor;
            if handle.kind != PredictorKind::ExternalProcess {
                handle.endpoint = resolve(base, Path::new(&handle.endpoint)).display().to_string();
            }
        }
    }

    pub fn stats(&self) -> Result<ForegroundStats> {
        if let Some(s) = self.preprocess.stats {
            return Ok(s);
        }
        let Some(path) = &self.preprocess.stats_file else {
            return Err(EngineError::config("preprocess", "set either `stats` or `stats_file`"));
        };
        let text = std::fs::read_to_string(path).map_err(EngineError::io(path))?;
        let stats: ForegroundStats =
            serde_json::from_str(&text).map_err(|e| EngineError::config("preprocess.stats_file", e))?;
        stats.validate().map_err(|e| EngineError::config("preprocess.stats_file", e))?;
        Ok(stats)
    }

    pub fn stage_config(&self, id: StageId) -> StageConfig {
        let s = self.stages.get(id);
        let d = StageConfig::default_for(id);
        StageConfig {
            stage_id: id,
            patch_size: s.patch_size.unwrap_or(d.patch_size),
            num_classes: id.num_classes(),
            overlap_fraction: s.overlap_fraction.unwrap_or(d.overlap_fraction),
            blend: s.blend.unwrap_or(d.blend),
            loss: s.loss.unwrap_or(d.loss),
        }
    }

    /// Core pipeline settings; reads the stats file when needed.
    pub fn settings(&self) -> Result<PipelineSettings> {
        let mut s = PipelineSettings::new(self.stats()?);
        s.target_spacing = self.target_spacing;
        s.crop_expansion = self.preprocess.crop_expansion;
        s.coarse_i = self.stage_config(StageId::CoarseI);
        s.coarse_ii = self.stage_config(StageId::CoarseII);
        s.fine_tumor = self.stage_config(StageId::FineTumor);
        s.fine_tumor_mask_channel = self.fine_tumor_mask_channel;
        s.postprocess = self.postprocess.clone();
        s.keep_probabilities = self.output.probabilities;
        Ok(s)
    }

    /// Checks every invariant and names the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(EngineError::config("target_spacing", "components must be positive"));
        }
        if self.workers == 0 {
            return Err(EngineError::config("workers", "must be >= 1"));
        }
        if let Some(s) = &self.preprocess.stats {
            s.validate().map_err(|e| EngineError::config("preprocess.stats", e))?;
        } else if self.preprocess.stats_file.is_none() {
            return Err(EngineError::config("preprocess", "set either `stats` or `stats_file`"));
        }
        if !(1.0..=1.5).contains(&self.preprocess.crop_expansion) {
            return Err(EngineError::config("preprocess.crop_expansion", "must lie in [1.0, 1.5]"));
        }
        for id in StageId::ALL {
            let key = format!("stages.{}", id.name());
            self.stage_config(id).validate().map_err(|e| EngineError::config(&key, e))?;
            let handle = &self.stages.get(id).predictor;
            if handle.capacity == 0 {
                return Err(EngineError::config(format!("{key}.predictor.capacity"), "must be >= 1"));
            }
            if handle.endpoint.trim().is_empty() {
                return Err(EngineError::config(format!("{key}.predictor.endpoint"), "must not be empty"));
            }
        }
        self.postprocess.validate().map_err(|e| EngineError::config("postprocess", e))?;
        Ok(())
    }
}
