//! Oracle predictor answering patches from a ground-truth label volume.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sliding::{reflect_index, PatchRequest, Predictor};
use super::StageId;
use crate::error::{Error, Result};
use crate::volume::{Class, LabelVolume, Vec3, VolumeHeader};

/// Spurious structure written into the oracle response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BlobRegion {
    /// `lower` inclusive, `upper` exclusive.
    Box { lower: [usize; 3], upper: [usize; 3] },
    Sphere { center: Vec3, radius: f64 },
    /// 26-connected digital segment between two voxels, both included.
    Line { from: [usize; 3], to: [usize; 3] },
    Voxels { voxels: Vec<[usize; 3]> },
}

impl BlobRegion {
    /// Voxels of the region inside `shape`, deduplicated, in scan order for
    /// boxes and spheres and path order for lines.
    pub fn voxels(&self, shape: [usize; 3]) -> Vec<[usize; 3]> {
        let inside = |p: &[usize; 3]| (0..3).all(|a| p[a] < shape[a]);
        match self {
            BlobRegion::Box { lower, upper } => {
                let mut out = Vec::new();
                for z in lower[2]..upper[2].min(shape[2]) {
                    for y in lower[1]..upper[1].min(shape[1]) {
                        for x in lower[0]..upper[0].min(shape[0]) {
                            out.push([x, y, z]);
                        }
                    }
                }
                out
            }
            BlobRegion::Sphere { center, radius } => {
                let r2 = radius * radius;
                let lo: [usize; 3] = core::array::from_fn(|a| libm::floor(center[a] - radius).max(0.0) as usize);
                let hi: [usize; 3] = core::array::from_fn(|a| {
                    (libm::ceil(center[a] + radius).max(-1.0) as i64 + 1).clamp(0, shape[a] as i64) as usize
                });
                let mut out = Vec::new();
                for z in lo[2]..hi[2] {
                    for y in lo[1]..hi[1] {
                        for x in lo[0]..hi[0] {
                            let d2: f64 = [x, y, z]
                                .iter()
                                .zip(center)
                                .map(|(&i, &c)| (i as f64 - c) * (i as f64 - c))
                                .sum();
                            if d2 <= r2 {
                                out.push([x, y, z]);
                            }
                        }
                    }
                }
                out
            }
            BlobRegion::Line { from, to } => {
                let steps = (0..3).map(|a| from[a].abs_diff(to[a])).max().unwrap_or(0);
                let mut out: Vec<[usize; 3]> = Vec::with_capacity(steps + 1);
                for i in 0..=steps {
                    let t = if steps == 0 { 0.0 } else { i as f64 / steps as f64 };
                    let p: [usize; 3] = core::array::from_fn(|a| {
                        libm::floor(from[a] as f64 + t * (to[a] as f64 - from[a] as f64) + 0.5) as usize
                    });
                    if out.last() != Some(&p) && inside(&p) {
                        out.push(p);
                    }
                }
                out
            }
            BlobRegion::Voxels { voxels } => {
                let mut out: Vec<[usize; 3]> = voxels.iter().copied().filter(inside).collect();
                out.sort_by_key(|p| (p[2], p[1], p[0]));
                out.dedup();
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedBlob {
    pub class: Class,
    pub region: BlobRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum StubMode {
    Ideal,
    Noisy { sigma: f64 },
    FpInject { sigma: f64, blobs: Vec<InjectedBlob> },
}

/// Predictor answering from a precomputed probability field on the inference grid.
#[derive(Debug, Clone)]
pub struct StubPredictor {
    stage: StageId,
    shape: [usize; 3],
    field: Vec<Vec<f32>>,
}

fn stage_class(stage: StageId, class: Class) -> Option<usize> {
    match stage {
        StageId::CoarseI | StageId::CoarseII => Some(class.code() as usize),
        StageId::FineTumor => match class {
            Class::Background => Some(0),
            Class::Tumor => Some(1),
            _ => None,
        },
    }
}

/// Builds an oracle for `stage` from `truth`, which must lie on `grid`.
///
/// Noise is drawn from a ChaCha8 stream seeded by `seed` and the stage, so the
/// two coarse stages see independent noise.
pub fn make_stub_predictor(
    mode: &StubMode,
    truth: &LabelVolume,
    grid: &VolumeHeader,
    stage: StageId,
    seed: u64,
) -> Result<StubPredictor> {
    if !truth.header().same_grid(grid) {
        return Err(Error::arg(alloc::format!(
            "oracle truth (shape {:?}, spacing {:?}) is not aligned to the inference grid (shape {:?}, spacing {:?})",
            truth.shape(),
            truth.header().spacing,
            grid.shape,
            grid.spacing
        )));
    }
    let classes = stage.num_classes();
    let n = truth.len();
    let mut field = vec![vec![0.0f32; n]; classes];
    for (v, &l) in truth.data().iter().enumerate() {
        let class = Class::from_code(l).ok_or(Error::InvalidLabel { value: l as i64, index: v })?;
        field[stage_class(stage, class).unwrap_or(0)][v] = 1.0;
    }

    let (sigma, blobs): (f64, &[InjectedBlob]) = match mode {
        StubMode::Ideal => (0.0, &[]),
        StubMode::Noisy { sigma } => (*sigma, &[]),
        StubMode::FpInject { sigma, blobs } => (*sigma, blobs),
    };
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::arg("noise sigma must be finite and nonnegative"));
    }
    if sigma > 0.0 {
        let stream = seed ^ ((stage as u64 + 1) << 56);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let normal = Normal::new(0.0f64, sigma).map_err(|e| Error::arg(alloc::format!("{e}")))?;
        let mut p = vec![0.0f64; classes];
        for v in 0..n {
            let mut sum = 0.0;
            for c in 0..classes {
                p[c] = (field[c][v] as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0);
                sum += p[c];
            }
            // All-zero after clamping keeps the one-hot truth.
            if sum > 0.0 {
                for c in 0..classes {
                    field[c][v] = (p[c] / sum) as f32;
                }
            }
        }
    }
    for blob in blobs {
        let Some(target) = stage_class(stage, blob.class) else {
            continue;
        };
        for p in blob.region.voxels(grid.shape) {
            let v = grid.index(p);
            for (c, ch) in field.iter_mut().enumerate() {
                ch[v] = if c == target { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(StubPredictor {
        stage,
        shape: grid.shape,
        field,
    })
}

impl StubPredictor {
    /// Predictor answering from explicit per-class channels on a grid of `shape`.
    pub fn from_field(stage: StageId, shape: [usize; 3], field: Vec<Vec<f32>>) -> Result<Self> {
        let n = shape[0] * shape[1] * shape[2];
        if field.len() != stage.num_classes() || field.iter().any(|c| c.len() != n) {
            return Err(Error::arg(alloc::format!(
                "{} needs {} channels of {n} voxels",
                stage.name(),
                stage.num_classes()
            )));
        }
        Ok(StubPredictor { stage, shape, field })
    }

    pub fn stage(&self) -> StageId {
        self.stage
    }

    /// Full-grid probability channels the oracle answers from.
    pub fn field(&self) -> &[Vec<f32>] {
        &self.field
    }
}

impl Predictor for StubPredictor {
    fn predict(&self, req: &PatchRequest<'_>) -> core::result::Result<Vec<f32>, String> {
        if req.grid_shape != self.shape {
            return Err(alloc::format!(
                "request grid {:?} does not match oracle grid {:?}",
                req.grid_shape, self.shape
            ));
        }
        if req.stage != self.stage || req.num_classes != self.field.len() {
            return Err(alloc::format!(
                "oracle serves {} with {} classes, got {} with {}",
                self.stage.name(),
                self.field.len(),
                req.stage.name(),
                req.num_classes
            ));
        }
        let [px, py, pz] = req.shape;
        let pn = req.voxel_count();
        let idx: [Vec<usize>; 3] = core::array::from_fn(|a| {
            (0..req.shape[a])
                .map(|l| reflect_index(req.offset[a] + l as i64, self.shape[a]))
                .collect()
        });
        let mut out = vec![0.0f32; self.field.len() * pn];
        for (c, ch) in self.field.iter().enumerate() {
            let block = &mut out[c * pn..(c + 1) * pn];
            let mut k = 0;
            for &z in &idx[2][..pz] {
                for &y in &idx[1][..py] {
                    let base = self.shape[0] * (y + self.shape[1] * z);
                    for &x in &idx[0][..px] {
                        block[k] = ch[base + x];
                        k += 1;
                    }
                }
            }
        }
        Ok(out)
    }
}
