//! Patch tiling, predictor invocation and probability blending.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::{StageConfig, StageId};
use crate::error::{Error, Result};
use crate::volume::{ProbVolume, ScalarVolume};

/// Per-voxel sums further than this from 1 are renormalized and counted.
pub const RESPONSE_SUM_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    Uniform,
    #[default]
    Gaussian,
}

/// One patch handed to a predictor.
#[derive(Debug, Clone, Copy)]
pub struct PatchRequest<'a> {
    pub case_id: &'a str,
    pub stage: StageId,
    /// Index of this patch within the stage run (for error reports and request ids).
    pub patch_index: usize,
    /// Shape of the full inference grid the patch belongs to.
    pub grid_shape: [usize; 3],
    /// Lower corner of the patch in inference-grid voxel coordinates. Patch
    /// voxels at or beyond the grid edge hold reflected content.
    pub offset: [i64; 3],
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub num_classes: usize,
    /// Input channels, each `shape` voxels in x-fastest order.
    pub channels: &'a [Vec<f32>],
}

impl PatchRequest<'_> {
    pub fn voxel_count(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }
}

/// A segmentation model evaluated patch by patch.
///
/// Implementations return `num_classes` concatenated probability blocks in
/// class order, each `shape` voxels long.
pub trait Predictor: Sync {
    fn predict(&self, request: &PatchRequest<'_>) -> core::result::Result<Vec<f32>, String>;
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn predict(&self, request: &PatchRequest<'_>) -> core::result::Result<Vec<f32>, String> {
        (**self).predict(request)
    }
}

/// Reflects `i` into `[0, n)` (mirror without repeating the edge sample).
#[inline]
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Patch start positions along one axis. Axes shorter than the patch get a
/// single patch at 0; longer axes get evenly spaced patches covering `[0, n)`.
pub fn tile_starts(n: usize, patch: usize, step: usize) -> Vec<usize> {
    if n <= patch {
        return vec![0];
    }
    let span = n - patch;
    let steps = span.div_ceil(step.max(1)) + 1;
    (0..steps)
        .map(|i| {
            let pos = (i * span) as f64 / (steps - 1) as f64;
            libm::floor(pos + 0.5) as usize
        })
        .collect()
}

/// Blending weights over one patch, x-fastest.
pub fn blend_weights(patch: [usize; 3], blend: Blend) -> Vec<f64> {
    let axis = |p: usize| -> Vec<f64> {
        match blend {
            Blend::Uniform => vec![1.0; p],
            Blend::Gaussian => {
                let sigma = p as f64 / 8.0;
                let c = (p as f64 - 1.0) / 2.0;
                (0..p)
                    .map(|i| {
                        let d = i as f64 - c;
                        libm::exp(-d * d / (2.0 * sigma * sigma))
                    })
                    .collect()
            }
        }
    };
    let (wx, wy, wz) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut w = Vec::with_capacity(patch[0] * patch[1] * patch[2]);
    for &z in &wz {
        for &y in &wy {
            for &x in &wx {
                w.push(x * y * z);
            }
        }
    }
    let max = w.iter().copied().fold(0.0, f64::max);
    let floor = w.iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
    for v in &mut w {
        *v = (*v / max).max(floor / max);
    }
    w
}

/// Where the stage input sits within the full inference grid.
#[derive(Debug, Clone, Copy)]
pub struct GridPlacement<'a> {
    pub case_id: &'a str,
    pub grid_shape: [usize; 3],
    /// Inference-grid coordinate of the input's voxel `[0, 0, 0]`.
    pub origin: [i64; 3],
}

/// Counters gathered while predicting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlidingStats {
    pub patches: usize,
    /// Predictor voxels whose class probabilities had to be renormalized.
    pub renormalized_voxels: usize,
}

/// Tiles `inputs` (one or more channels on one grid) with `stage.patch_size`
/// patches, queries the predictor and blends the responses.
pub fn sliding_window_predict(
    inputs: &[&ScalarVolume],
    predictor: &dyn Predictor,
    stage: &StageConfig,
    placement: GridPlacement<'_>,
) -> Result<(ProbVolume, SlidingStats)> {
    stage.validate()?;
    let first = inputs.first().ok_or_else(|| Error::arg("no input channels"))?;
    let header = first.header();
    for other in &inputs[1..] {
        header.check_same_shape(other.header())?;
    }
    let shape = header.shape;
    let patch = stage.patch_size;
    let classes = stage.num_classes;
    let step: [usize; 3] =
        core::array::from_fn(|a| ((libm::floor(patch[a] as f64 * (1.0 - stage.overlap_fraction))) as usize).max(1));
    let starts: [Vec<usize>; 3] = core::array::from_fn(|a| tile_starts(shape[a], patch[a], step[a]));
    let weights = blend_weights(patch, stage.blend);
    let n = header.voxel_count();
    let pn = patch[0] * patch[1] * patch[2];

    let mut acc = vec![vec![0.0f64; n]; classes];
    let mut stats = SlidingStats::default();
    let mut buffers: Vec<Vec<f32>> = vec![vec![0.0; pn]; inputs.len()];
    let mut patch_index = 0usize;

    for &sz in &starts[2] {
        for &sy in &starts[1] {
            for &sx in &starts[0] {
                let start = [sx, sy, sz];
                // Gather with reflection beyond the input edge.
                let src_idx: [Vec<usize>; 3] = core::array::from_fn(|a| {
                    (0..patch[a])
                        .map(|l| reflect_index((start[a] + l) as i64, shape[a]))
                        .collect()
                });
                for (buf, vol) in buffers.iter_mut().zip(inputs) {
                    let data = vol.data();
                    let mut k = 0;
                    for &z in &src_idx[2] {
                        for &y in &src_idx[1] {
                            let base = shape[0] * (y + shape[1] * z);
                            for &x in &src_idx[0] {
                                buf[k] = data[base + x];
                                k += 1;
                            }
                        }
                    }
                }
                let request = PatchRequest {
                    case_id: placement.case_id,
                    stage: stage.stage_id,
                    patch_index,
                    grid_shape: placement.grid_shape,
                    offset: core::array::from_fn(|a| placement.origin[a] + start[a] as i64),
                    shape: patch,
                    spacing: header.spacing,
                    num_classes: classes,
                    channels: &buffers,
                };
                let fail = |message: String| Error::Predictor {
                    stage: stage.stage_id.name(),
                    patch: patch_index,
                    message,
                };
                let mut response = predictor.predict(&request).map_err(fail)?;
                if response.len() != classes * pn {
                    return Err(fail(alloc::format!(
                        "response has {} values, expected {}",
                        response.len(),
                        classes * pn
                    )));
                }
                stats.renormalized_voxels += normalize_response(&mut response, classes, pn).map_err(fail)?;

                let mut k = 0;
                for lz in 0..patch[2] {
                    let z = start[2] + lz;
                    for ly in 0..patch[1] {
                        let y = start[1] + ly;
                        for lx in 0..patch[0] {
                            let x = start[0] + lx;
                            if x < shape[0] && y < shape[1] && z < shape[2] {
                                let v = x + shape[0] * (y + shape[1] * z);
                                let w = weights[k];
                                for (c, a) in acc.iter_mut().enumerate() {
                                    a[v] += w * response[c * pn + k] as f64;
                                }
                            }
                            k += 1;
                        }
                    }
                }
                patch_index += 1;
            }
        }
    }
    stats.patches = patch_index;

    let mut channels = vec![vec![0.0f32; n]; classes];
    for v in 0..n {
        let total: f64 = acc.iter().map(|a| a[v]).sum();
        for c in 0..classes {
            channels[c][v] = if total > 0.0 {
                (acc[c][v] / total) as f32
            } else {
                1.0 / classes as f32
            };
        }
    }
    let prob = ProbVolume::new(header.clone(), channels)?;
    Ok((prob, stats))
}

/// Clamps negatives and renormalizes voxels whose class sum is off by more than
/// [`RESPONSE_SUM_TOL`]. Returns the number of renormalized voxels.
fn normalize_response(resp: &mut [f32], classes: usize, n: usize) -> core::result::Result<usize, String> {
    if let Some(i) = resp.iter().position(|v| !v.is_finite()) {
        return Err(alloc::format!("non-finite probability at response offset {i}"));
    }
    let mut fixed = 0;
    for v in 0..n {
        let mut sum = 0.0f64;
        for c in 0..classes {
            let p = &mut resp[c * n + v];
            if *p < 0.0 {
                *p = 0.0;
            }
            sum += *p as f64;
        }
        if libm::fabs(sum - 1.0) > RESPONSE_SUM_TOL {
            if !(sum > 0.0) {
                return Err(alloc::format!("all-zero probabilities at patch voxel {v}"));
            }
            for c in 0..classes {
                resp[c * n + v] = (resp[c * n + v] as f64 / sum) as f32;
            }
            fixed += 1;
        }
    }
    Ok(fixed)
}
