//! Batch execution of the pipeline over a set of case images.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use kipa_core::pipeline::{
    make_stub_predictor, run_case, CaseResult, Intermediate, PipelineSettings, Predictor, StageId, StageObserver,
    StagePredictors,
};
use kipa_core::preprocess::{resample_labels, resampled_shape};
use kipa_core::volume::{LabelVolume, ScalarVolume, VolumeHeader};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{EngineError, Result};
use crate::fsutil::{case_id_of, write_json};
use crate::nifti;
use crate::predictors::{load_prob_field, Endpoint, ExternalPredictor, PredictorKind};

/// Image files matching `pattern`, keyed and sorted by case id.
pub fn discover_cases(pattern: &str) -> Result<Vec<(String, PathBuf)>> {
    let paths = glob::glob(pattern).map_err(|e| EngineError::config("cases", e))?;
    let mut cases = Vec::new();
    for p in paths {
        let p = p.map_err(|e| EngineError::Invalid(e.to_string()))?;
        if let Some(id) = case_id_of(&p) {
            cases.push((id, p));
        }
    }
    cases.sort();
    if let Some(w) = cases.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(EngineError::config("cases", format!("case id {:?} matched twice", w[0].0)));
    }
    Ok(cases)
}

/// 64-bit FNV-1a, used to derive per-case seeds from case ids.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn case_seed(seed: u64, case_id: &str) -> u64 {
    seed ^ fnv1a(case_id.as_bytes())
}

/// `{truth_dir}/{case_id}_truth.nii.gz`
pub fn truth_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}_truth.nii.gz"))
}

/// Header of the resampled grid inference runs on.
pub fn inference_grid(image: &VolumeHeader, target_spacing: [f64; 3]) -> VolumeHeader {
    image.with_grid(resampled_shape(image, target_spacing), target_spacing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Default)]
struct Timer {
    open: Option<(&'static str, Instant)>,
    done: Vec<StageTiming>,
}

impl StageObserver for Timer {
    fn stage_started(&mut self, stage: &'static str) {
        tracing::debug!(stage, "stage started");
        self.open = Some((stage, Instant::now()));
    }

    fn stage_finished(&mut self, stage: &'static str) {
        if let Some((s, t)) = self.open.take() {
            let seconds = t.elapsed().as_secs_f64();
            tracing::debug!(stage = s, seconds, "stage finished");
            self.done.push(StageTiming { stage: stage.into(), seconds });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub case_id: String,
    pub input: PathBuf,
    /// Pipeline stage that failed, when the error came from inside `run_case`.
    pub stage: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub succeeded: Vec<String>,
    pub failures: Vec<RunFailure>,
}

/// Predictors shared by every case (external processes).
struct Shared {
    external: [Option<ExternalPredictor>; 3],
}

impl Shared {
    fn new(cfg: &PipelineConfig) -> Result<Self> {
        let mut external = [None, None, None];
        for (slot, id) in external.iter_mut().zip(StageId::ALL) {
            let h = &cfg.stages.get(id).predictor;
            if h.kind == PredictorKind::ExternalProcess {
                *slot = Some(ExternalPredictor::new(Endpoint::parse(&h.endpoint)?, h.capacity)?);
            }
        }
        Ok(Shared { external })
    }
}

fn stage_index(id: StageId) -> usize {
    StageId::ALL.iter().position(|&s| s == id).expect("known stage")
}

/// Builds the predictor for one stage of one case.
fn case_predictor<'a>(
    cfg: &PipelineConfig,
    shared: &'a Shared,
    id: StageId,
    case_id: &str,
    grid: &VolumeHeader,
    truth: &mut Option<LabelVolume>,
) -> Result<Box<dyn Predictor + 'a>> {
    let h = &cfg.stages.get(id).predictor;
    Ok(match h.kind {
        PredictorKind::ExternalProcess => {
            Box::new(shared.external[stage_index(id)].as_ref().expect("external predictor built"))
        }
        PredictorKind::FileBacked => Box::new(load_prob_field(Path::new(&h.endpoint), case_id, id, grid, &cfg.io)?),
        PredictorKind::StubOracle => {
            let path = truth_path(Path::new(&h.endpoint), case_id);
            let t = match truth {
                Some(t) => t,
                None => {
                    let raw = nifti::read_labels(&path, &cfg.io)?;
                    truth.insert(resample_labels(&raw, cfg.target_spacing)?)
                }
            };
            let seed = case_seed(cfg.seed, case_id);
            Box::new(make_stub_predictor(&h.stub, t, grid, id, seed)?)
        }
    })
}

/// Runs one case against already-loaded inputs.
pub fn run_one(
    cfg: &PipelineConfig,
    settings: &PipelineSettings,
    case_id: &str,
    image: &ScalarVolume,
) -> Result<(CaseResult, Vec<StageTiming>)> {
    let shared = Shared::new(cfg)?;
    run_with(cfg, settings, &shared, case_id, image)
}

fn run_with(
    cfg: &PipelineConfig,
    settings: &PipelineSettings,
    shared: &Shared,
    case_id: &str,
    image: &ScalarVolume,
) -> Result<(CaseResult, Vec<StageTiming>)> {
    let grid = inference_grid(image.header(), cfg.target_spacing);
    let mut truth = None;
    let a = case_predictor(cfg, shared, StageId::CoarseI, case_id, &grid, &mut truth)?;
    let b = case_predictor(cfg, shared, StageId::CoarseII, case_id, &grid, &mut truth)?;
    let c = case_predictor(cfg, shared, StageId::FineTumor, case_id, &grid, &mut truth)?;
    let preds = StagePredictors {
        coarse_i: a.as_ref(),
        coarse_ii: b.as_ref(),
        fine_tumor: c.as_ref(),
    };
    let mut timer = Timer::default();
    let result = run_case(case_id, image, settings, preds, &mut timer)?;
    Ok((result, timer.done))
}

/// `{out}/{case_id}_seg.nii.gz`
pub fn seg_path(out: &Path, case_id: &str) -> PathBuf {
    out.join(format!("{case_id}_seg.nii.gz"))
}

/// Writes the final labels, audit, timings and intermediates of one case.
pub fn write_case(out: &Path, result: &CaseResult, timings: &[StageTiming]) -> Result<()> {
    let id = &result.audit.case_id;
    let case_dir = out.join(id);
    let inter = case_dir.join("intermediates");
    for (name, v) in &result.intermediates {
        match v {
            Intermediate::Labels(l) => nifti::write_labels(&inter.join(format!("{name}.nii.gz")), l)?,
            Intermediate::Mask(m) => {
                nifti::write_labels(&inter.join(format!("{name}.nii.gz")), &m.map(|&b| b as u8))?
            }
            Intermediate::Probabilities(p) => {
                for c in 0..p.num_classes() {
                    let vol = ScalarVolume::scalar(p.header().clone(), p.channel(c).to_vec())?;
                    nifti::write_scalar(&inter.join(format!("{name}_{c}.nii.gz")), &vol)?;
                }
            }
        }
    }
    write_json(&case_dir.join("audit.json"), &result.audit)?;
    write_json(&case_dir.join("timings.json"), &timings)?;
    nifti::write_labels(&seg_path(out, id), &result.exported)
}

fn process(
    cfg: &PipelineConfig,
    settings: &PipelineSettings,
    shared: &Shared,
    out: &Path,
    case_id: &str,
    input: &Path,
) -> Result<()> {
    let image = nifti::read_scalar(input, &cfg.io)?;
    let (result, timings) = run_with(cfg, settings, shared, case_id, &image)?;
    for r in &result.audit.removals {
        tracing::info!(case = case_id, structure = ?r.structure, rule = ?r.removal.rule, size = r.removal.size, "component removed");
    }
    write_case(out, &result, &timings)
}

/// Runs every case with `cfg.workers` threads and writes `failures.json`.
/// Per-case errors are recorded, not propagated.
pub fn run_batch(cfg: &PipelineConfig, cases: &[(String, PathBuf)], out: &Path) -> Result<RunSummary> {
    let settings = cfg.settings()?;
    settings.validate()?;
    let shared = Shared::new(cfg)?;
    std::fs::create_dir_all(out).map_err(EngineError::io(out))?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<()>)>> = Mutex::new(Vec::new());
    let workers = cfg.workers.min(cases.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((id, input)) = cases.get(i) else { break };
                tracing::info!(case = %id, input = %input.display(), "case started");
                let r = process(cfg, &settings, &shared, out, id, input);
                match &r {
                    Ok(()) => tracing::info!(case = %id, "case finished"),
                    Err(e) => tracing::error!(case = %id, error = %e, "case failed"),
                }
                results.lock().expect("results lock").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);
    let mut summary = RunSummary::default();
    for (i, r) in results {
        let (id, input) = &cases[i];
        match r {
            Ok(()) => summary.succeeded.push(id.clone()),
            Err(e) => summary.failures.push(RunFailure {
                case_id: id.clone(),
                input: input.clone(),
                stage: match &e {
                    EngineError::Core(c) => c.stage().map(str::to_string),
                    _ => None,
                },
                message: e.to_string(),
            }),
        }
    }
    write_json(&out.join("failures.json"), &summary.failures)?;
    Ok(summary)
}
