//! Multi-stage case pipeline: coarse I/II inference, fine kidney, fine tumor
//! and vessel fusion, then label fusion on the original grid.

pub mod phantom;
pub mod sliding;
pub mod stub;

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::cc3d::RoiBox;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::postprocess::{self, DistanceUnit, Filtered, PostprocessConfig, Removal};
use crate::preprocess::{self, ForegroundStats, Interpolation, DEFAULT_CROP_EXPANSION, TARGET_SPACING};
use crate::volume::{Class, LabelVolume, Mask, ProbVolume, ScalarVolume, Vec3};

pub use phantom::{generate_phantom, generate_phantom_with, Phantom, PhantomInfo, PhantomOptions};
pub use sliding::{sliding_window_predict, Blend, GridPlacement, PatchRequest, Predictor, SlidingStats};
pub use stub::{make_stub_predictor, BlobRegion, InjectedBlob, StubMode, StubPredictor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    CoarseI,
    CoarseII,
    FineTumor,
}

impl StageId {
    pub const ALL: [StageId; 3] = [StageId::CoarseI, StageId::CoarseII, StageId::FineTumor];

    pub fn name(self) -> &'static str {
        match self {
            StageId::CoarseI => "coarse_i",
            StageId::CoarseII => "coarse_ii",
            StageId::FineTumor => "fine_tumor",
        }
    }

    pub fn from_name(name: &str) -> Option<StageId> {
        StageId::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn num_classes(self) -> usize {
        match self {
            StageId::FineTumor => 2,
            _ => Class::COUNT,
        }
    }

    pub fn default_patch_size(self) -> [usize; 3] {
        match self {
            StageId::FineTumor => [80, 80, 80],
            _ => [160, 128, 112],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage_id: StageId,
    pub patch_size: [usize; 3],
    pub num_classes: usize,
    pub overlap_fraction: f64,
    pub blend: Blend,
    /// Training loss of the stage model; recorded for provenance only.
    pub loss: LossConfig,
}

impl StageConfig {
    pub fn default_for(stage: StageId) -> Self {
        let mut loss = LossConfig::default();
        if stage == StageId::CoarseII {
            loss.stage_combo = crate::loss::StageCombo::CoarseII;
        }
        StageConfig {
            stage_id: stage,
            patch_size: stage.default_patch_size(),
            num_classes: stage.num_classes(),
            overlap_fraction: 0.5,
            blend: Blend::Gaussian,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size.iter().any(|&p| p < 8) {
            return Err(Error::arg(alloc::format!(
                "{}: patch_size must be >= 8 per axis, got {:?}",
                self.stage_id.name(),
                self.patch_size
            )));
        }
        if self.num_classes != self.stage_id.num_classes() {
            return Err(Error::arg(alloc::format!(
                "{}: num_classes must be {}, got {}",
                self.stage_id.name(),
                self.stage_id.num_classes(),
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::arg(alloc::format!(
                "{}: overlap_fraction must lie in [0, 1)",
                self.stage_id.name()
            )));
        }
        self.loss.validate()
    }
}

/// Everything `run_case` needs apart from the predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub target_spacing: Vec3,
    pub stats: ForegroundStats,
    pub crop_expansion: f64,
    pub coarse_i: StageConfig,
    pub coarse_ii: StageConfig,
    pub fine_tumor: StageConfig,
    /// Feed the voted tumor mask as a second fine-tumor input channel.
    pub fine_tumor_mask_channel: bool,
    pub postprocess: PostprocessConfig,
    /// Keep the coarse probability maps among the intermediates.
    pub keep_probabilities: bool,
}

impl PipelineSettings {
    pub fn new(stats: ForegroundStats) -> Self {
        PipelineSettings {
            target_spacing: TARGET_SPACING,
            stats,
            crop_expansion: DEFAULT_CROP_EXPANSION,
            coarse_i: StageConfig::default_for(StageId::CoarseI),
            coarse_ii: StageConfig::default_for(StageId::CoarseII),
            fine_tumor: StageConfig::default_for(StageId::FineTumor),
            fine_tumor_mask_channel: true,
            postprocess: PostprocessConfig::default(),
            keep_probabilities: false,
        }
    }

    pub fn stage(&self, id: StageId) -> &StageConfig {
        match id {
            StageId::CoarseI => &self.coarse_i,
            StageId::CoarseII => &self.coarse_ii,
            StageId::FineTumor => &self.fine_tumor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::arg("target_spacing must be positive"));
        }
        self.stats.validate()?;
        if !(1.0..=1.5).contains(&self.crop_expansion) {
            return Err(Error::arg("crop_expansion must lie in [1.0, 1.5]"));
        }
        for id in StageId::ALL {
            let s = self.stage(id);
            if s.stage_id != id {
                return Err(Error::arg(alloc::format!(
                    "stage {} is configured with stage_id {}",
                    id.name(),
                    s.stage_id.name()
                )));
            }
            s.validate()?;
        }
        self.postprocess.validate()
    }
}

/// One predictor per stage.
#[derive(Clone, Copy)]
pub struct StagePredictors<'a> {
    pub coarse_i: &'a dyn Predictor,
    pub coarse_ii: &'a dyn Predictor,
    pub fine_tumor: &'a dyn Predictor,
}

/// Receives stage boundaries, e.g. for timing.
pub trait StageObserver {
    fn stage_started(&mut self, _stage: &'static str) {}
    fn stage_finished(&mut self, _stage: &'static str) {}
}

impl StageObserver for () {}

/// Pipeline stage names, in execution order.
pub const STAGES: [&str; 8] = [
    "preprocess",
    "coarse_i",
    "coarse_ii",
    "fine_kidney",
    "fine_tumor",
    "vessels",
    "fusion",
    "export",
];

#[derive(Debug, Clone, PartialEq)]
pub enum Intermediate {
    Probabilities(ProbVolume),
    Labels(LabelVolume),
    Mask(Mask),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRemoval {
    pub structure: Class,
    #[serde(flatten)]
    pub removal: Removal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAudit {
    pub stage: String,
    #[serde(flatten)]
    pub stats: SlidingStats,
}

/// Postprocessing and inference record of one case.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CaseAudit {
    pub case_id: String,
    pub resampled_shape: [usize; 3],
    pub tumor_rois: Vec<RoiBox>,
    pub inference: Vec<StageAudit>,
    pub removals: Vec<AuditRemoval>,
    pub warnings: Vec<String>,
}

impl CaseAudit {
    fn absorb(&mut self, structure: Class, f: Filtered) -> Mask {
        self.removals
            .extend(f.removed.into_iter().map(|removal| AuditRemoval { structure, removal }));
        self.warnings.extend(f.warnings);
        f.mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    /// Fused labels on the resampled inference grid.
    pub final_labels: LabelVolume,
    /// `final_labels` resampled back to the input grid.
    pub exported: LabelVolume,
    /// Named stage outputs on the inference grid.
    pub intermediates: Vec<(String, Intermediate)>,
    pub audit: CaseAudit,
}

impl CaseResult {
    pub fn intermediate(&self, name: &str) -> Option<&Intermediate> {
        self.intermediates.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

fn staged<T>(stage: &'static str, obs: &mut dyn StageObserver, f: impl FnOnce() -> Result<T>) -> Result<T> {
    obs.stage_started(stage);
    let out = f().map_err(|e| e.in_stage(stage));
    obs.stage_finished(stage);
    out
}

/// Runs the full pipeline on one image (HU, any grid).
pub fn run_case(
    case_id: &str,
    image: &ScalarVolume,
    settings: &PipelineSettings,
    predictors: StagePredictors<'_>,
    observer: &mut dyn StageObserver,
) -> Result<CaseResult> {
    settings.validate().map_err(|e| e.in_stage("config"))?;
    let post = &settings.postprocess;
    let conn = post.connectivity;
    let mut audit = CaseAudit {
        case_id: case_id.into(),
        ..Default::default()
    };
    let mut intermediates: Vec<(String, Intermediate)> = Vec::new();

    let (hu, normalized) = staged("preprocess", observer, || {
        let hu = preprocess::resample(image, settings.target_spacing, Interpolation::Linear)?;
        let normalized = preprocess::zscore_normalize(&hu, &settings.stats);
        Ok((hu, normalized))
    })?;
    let grid = hu.header().clone();
    audit.resampled_shape = grid.shape;
    let placement = GridPlacement {
        case_id,
        grid_shape: grid.shape,
        origin: [0; 3],
    };

    let mut coarse = |stage: &'static str, cfg: &StageConfig, p: &dyn Predictor, audit: &mut CaseAudit| {
        staged(stage, observer, || {
            let (prob, stats) = sliding_window_predict(&[&normalized], p, cfg, placement)?;
            audit.inference.push(StageAudit { stage: stage.into(), stats });
            Ok(prob)
        })
    };
    let prob_i = coarse("coarse_i", &settings.coarse_i, predictors.coarse_i, &mut audit)?;
    let prob_ii = coarse("coarse_ii", &settings.coarse_ii, predictors.coarse_ii, &mut audit)?;
    let labels_i = prob_i.argmax_labels();
    let labels_ii = prob_ii.argmax_labels();

    let kidney = staged("fine_kidney", observer, || {
        Ok(audit.absorb(Class::Kidney, postprocess::filter_kidney(&labels_i.class_mask(Class::Kidney), conn)))
    })?;

    let (voted, tumor) = staged("fine_tumor", observer, || {
        let t = Class::Tumor as usize;
        let voted = postprocess::vote_tumor_soft(&prob_i.channel_volume(t), &prob_ii.channel_volume(t))?;
        let crops = preprocess::self_adapting_crop(&voted, &hu, settings.crop_expansion, conn)?;
        let mut fine = Mask::empty_like(&grid);
        for rc in &crops {
            let roi = rc.roi;
            let img = preprocess::crop(&normalized, &roi)?;
            let mask_ch = rc.mask.map(|&m| m as u8 as f32);
            let inputs: Vec<&ScalarVolume> = if settings.fine_tumor_mask_channel {
                alloc::vec![&img, &mask_ch]
            } else {
                alloc::vec![&img]
            };
            let placed = GridPlacement {
                origin: core::array::from_fn(|a| roi.lower[a] as i64),
                ..placement
            };
            let (prob, stats) = sliding_window_predict(&inputs, predictors.fine_tumor, &settings.fine_tumor, placed)?;
            audit.inference.push(StageAudit {
                stage: StageId::FineTumor.name().into(),
                stats,
            });
            let ext = roi.extent();
            let local = prob.argmax();
            for (i, &l) in local.iter().enumerate() {
                if l == 1 {
                    let x = i % ext[0];
                    let y = (i / ext[0]) % ext[1];
                    let z = i / (ext[0] * ext[1]);
                    fine.set([roi.lower[0] + x, roi.lower[1] + y, roi.lower[2] + z], true);
                }
            }
            audit.tumor_rois.push(roi);
        }
        if crops.is_empty() {
            audit.warnings.push("no tumor component exceeds the crop threshold".into());
        }
        let fine = audit.absorb(Class::Tumor, postprocess::cyst_filter(&fine, &hu, post.cyst_hu_threshold, conn)?);
        let fine = audit.absorb(Class::Tumor, postprocess::size_filter(&fine, post.tumor_min_size, conn));
        Ok((voted, fine))
    })?;

    let (vein, artery) = staged("vessels", observer, || {
        let spacing = match post.distance_unit {
            DistanceUnit::Voxel => None,
            DistanceUnit::Mm => Some(grid.spacing),
        };
        let v = Class::Vein as usize;
        let vein = postprocess::ensemble_vein(&prob_i.channel_volume(v), &prob_ii.channel_volume(v), post.ensemble_weights)?;
        let vein = audit.absorb(Class::Vein, postprocess::filter_vessel(&vein, post.vein_max_dist, spacing, conn)?);
        let artery = postprocess::fuse_artery(
            &labels_i.class_mask(Class::Artery),
            &labels_ii.class_mask(Class::Artery),
            post,
        )?;
        let artery = audit.absorb(Class::Artery, postprocess::filter_vessel(&artery, post.artery_max_dist, spacing, conn)?);
        let artery = audit.absorb(
            Class::Artery,
            postprocess::filter_artery_hu(&artery, &hu, post.artery_hu_max, post.hu_aggregate, conn)?,
        );
        Ok((vein, artery))
    })?;

    let final_labels = staged("fusion", observer, || {
        postprocess::fuse_labels(&kidney, &tumor, &vein, &artery, &post.fusion_precedence)
    })?;

    let exported = staged("export", observer, || {
        let mut target = image.header().clone();
        target.intensity_scale = 1.0;
        target.intensity_offset = 0.0;
        let mut out = preprocess::resample_nearest_to(&final_labels, &target)?;
        *out.header_mut() = target;
        Ok(out)
    })?;

    if settings.keep_probabilities {
        intermediates.push(("coarse_i_prob".into(), Intermediate::Probabilities(prob_i)));
        intermediates.push(("coarse_ii_prob".into(), Intermediate::Probabilities(prob_ii)));
    }
    intermediates.push(("coarse_i_labels".into(), Intermediate::Labels(labels_i)));
    intermediates.push(("coarse_ii_labels".into(), Intermediate::Labels(labels_ii)));
    intermediates.push(("fine_kidney".into(), Intermediate::Mask(kidney)));
    intermediates.push(("voted_tumor".into(), Intermediate::Mask(voted)));
    intermediates.push(("fine_tumor".into(), Intermediate::Mask(tumor)));
    intermediates.push(("vein".into(), Intermediate::Mask(vein)));
    intermediates.push(("artery".into(), Intermediate::Mask(artery)));

    Ok(CaseResult {
        final_labels,
        exported,
        intermediates,
        audit,
    })
}
