//! Resampling, intensity normalization, augmentation and ROI cropping.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cc3d::{connected_components, Connectivity};
use crate::error::{Error, Result};
pub use crate::cc3d::RoiBox;
use crate::volume::{LabelVolume, Mask, ScalarVolume, Vec3, Volume, VolumeHeader};

/// Isotropic spacing (mm) every case is resampled to before inference.
pub const TARGET_SPACING: Vec3 = [0.63281, 0.63281, 0.63281];

/// Components must be strictly larger than this to get their own ROI.
pub const ROI_MIN_COMPONENT_VOXELS: usize = 2000;

pub const DEFAULT_CROP_EXPANSION: f64 = 1.25;

#[inline]
pub(crate) fn round_half_up(x: f64) -> f64 {
    libm::floor(x + 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Linear,
    Nearest,
}

fn check_spacing(spacing: Vec3) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::arg(alloc::format!(
            "target spacing must be positive, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Output shape for resampling `header` to `target_spacing`.
pub fn resampled_shape(header: &VolumeHeader, target_spacing: Vec3) -> [usize; 3] {
    let mut shape = [1usize; 3];
    for a in 0..3 {
        let n = round_half_up(header.shape[a] as f64 * header.spacing[a] / target_spacing[a]);
        shape[a] = (n as usize).max(1);
    }
    shape
}

/// Per-axis sampling table: output index → (lower input index, upper input index, weight).
struct AxisTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w: Vec<f64>,
}

impl AxisTable {
    /// Linear taps; positions past the last sample extrapolate from the last cell
    /// so linear intensity fields are reproduced exactly up to the grid edge.
    fn linear(n_in: usize, n_out: usize, ratio: f64) -> Self {
        let mut t = AxisTable {
            lo: Vec::with_capacity(n_out),
            hi: Vec::with_capacity(n_out),
            w: Vec::with_capacity(n_out),
        };
        for j in 0..n_out {
            let p = j as f64 * ratio;
            if n_in == 1 {
                t.lo.push(0);
                t.hi.push(0);
                t.w.push(0.0);
                continue;
            }
            let i0 = (libm::floor(p).max(0.0) as usize).min(n_in - 2);
            t.lo.push(i0);
            t.hi.push(i0 + 1);
            t.w.push(p - i0 as f64);
        }
        t
    }

    fn nearest(n_in: usize, n_out: usize, ratio: f64) -> Vec<usize> {
        (0..n_out)
            .map(|j| {
                let p = round_half_up(j as f64 * ratio).max(0.0) as usize;
                p.min(n_in - 1)
            })
            .collect()
    }
}

fn check_target(header: &VolumeHeader, target: &VolumeHeader) -> Result<()> {
    target.validate()?;
    let close = |a: f64, b: f64| libm::fabs(a - b) <= 1e-9 * (1.0 + libm::fabs(a));
    if !(0..3).all(|i| close(header.origin[i], target.origin[i])) {
        return Err(Error::arg("resampling target must share the source origin"));
    }
    Ok(())
}

/// Trilinear resampling onto the grid described by `target` (same origin and direction).
pub fn resample_linear_to(volume: &ScalarVolume, target: &VolumeHeader) -> Result<ScalarVolume> {
    let h = volume.header();
    check_target(h, target)?;
    let tables: Vec<AxisTable> = (0..3)
        .map(|a| AxisTable::linear(h.shape[a], target.shape[a], target.spacing[a] / h.spacing[a]))
        .collect();
    let [nx, ny, _] = h.shape;
    let src = volume.data();
    let [ox, oy, oz] = target.shape;
    let mut out = Vec::with_capacity(ox * oy * oz);
    for k in 0..oz {
        let (z0, z1, wz) = (tables[2].lo[k], tables[2].hi[k], tables[2].w[k]);
        for j in 0..oy {
            let (y0, y1, wy) = (tables[1].lo[j], tables[1].hi[j], tables[1].w[j]);
            let rows = [
                (nx * (y0 + ny * z0), (1.0 - wy) * (1.0 - wz)),
                (nx * (y1 + ny * z0), wy * (1.0 - wz)),
                (nx * (y0 + ny * z1), (1.0 - wy) * wz),
                (nx * (y1 + ny * z1), wy * wz),
            ];
            for i in 0..ox {
                let (x0, x1, wx) = (tables[0].lo[i], tables[0].hi[i], tables[0].w[i]);
                let mut acc = 0.0f64;
                for &(base, w) in &rows {
                    if w == 0.0 {
                        continue;
                    }
                    let a = src[base + x0] as f64;
                    let b = src[base + x1] as f64;
                    acc += w * if wx == 0.0 { a } else { (1.0 - wx) * a + wx * b };
                }
                out.push(acc as f32);
            }
        }
    }
    Volume::new(target.clone(), out)
}

/// Nearest-neighbor resampling onto `target` (same origin and direction).
pub fn resample_nearest_to<T: Copy>(volume: &Volume<T>, target: &VolumeHeader) -> Result<Volume<T>> {
    let h = volume.header();
    check_target(h, target)?;
    let idx: Vec<Vec<usize>> = (0..3)
        .map(|a| AxisTable::nearest(h.shape[a], target.shape[a], target.spacing[a] / h.spacing[a]))
        .collect();
    let src = volume.data();
    let [nx, ny, _] = h.shape;
    let [ox, oy, oz] = target.shape;
    let mut out = Vec::with_capacity(ox * oy * oz);
    for &z in &idx[2] {
        for &y in &idx[1] {
            let base = nx * (y + ny * z);
            out.extend(idx[0].iter().map(|&x| src[base + x]));
        }
    }
    Volume::new(target.clone(), out)
}

/// Resamples a scalar volume to `target_spacing`, keeping origin and direction.
pub fn resample(volume: &ScalarVolume, target_spacing: Vec3, mode: Interpolation) -> Result<ScalarVolume> {
    check_spacing(target_spacing)?;
    let h = volume.header();
    let target = h.with_grid(resampled_shape(h, target_spacing), target_spacing);
    match mode {
        Interpolation::Linear => resample_linear_to(volume, &target),
        Interpolation::Nearest => resample_nearest_to(volume, &target),
    }
}

/// Nearest-neighbor resampling of a label volume to `target_spacing`.
pub fn resample_labels(labels: &LabelVolume, target_spacing: Vec3) -> Result<LabelVolume> {
    check_spacing(target_spacing)?;
    let h = labels.header();
    let target = h.with_grid(resampled_shape(h, target_spacing), target_spacing);
    resample_nearest_to(labels, &target)
}

/// Foreground intensity statistics used for z-score normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForegroundStats {
    pub mean: f64,
    pub std: f64,
    pub voxel_count: u64,
}

impl ForegroundStats {
    pub fn new(mean: f64, std: f64, voxel_count: u64) -> Result<Self> {
        let s = ForegroundStats {
            mean,
            std,
            voxel_count,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0) || !self.std.is_finite() || !self.mean.is_finite() {
            return Err(Error::arg("foreground std must be positive and finite"));
        }
        if self.voxel_count == 0 {
            return Err(Error::arg("foreground voxel count must be >= 1"));
        }
        Ok(())
    }
}

/// Single-pass (Welford) population statistics.
#[derive(Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    #[inline]
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn finish(self) -> Result<ForegroundStats> {
        if self.n == 0 {
            return Err(Error::EmptyForeground);
        }
        let std = libm::sqrt((self.m2 / self.n as f64).max(0.0));
        if !(std > 1e-12 * (1.0 + libm::fabs(self.mean))) {
            return Err(Error::EmptyForegroundVariance { mean: self.mean });
        }
        Ok(ForegroundStats {
            mean: self.mean,
            std,
            voxel_count: self.n,
        })
    }
}

/// Mean and population std over every `label > 0` voxel across all cases.
pub fn compute_foreground_stats(cases: &[(&ScalarVolume, &LabelVolume)]) -> Result<ForegroundStats> {
    let mut acc = Welford::default();
    for (image, labels) in cases {
        image.header().check_same_shape(labels.header())?;
        for (&v, &l) in image.data().iter().zip(labels.data()) {
            if l > 0 {
                acc.push(v as f64);
            }
        }
    }
    acc.finish()
}

/// Statistics over voxels whose intensity is at least `hu_min`, for inputs without annotation.
pub fn compute_threshold_stats(images: &[&ScalarVolume], hu_min: f32) -> Result<ForegroundStats> {
    let mut acc = Welford::default();
    for image in images {
        for &v in image.data() {
            if v >= hu_min {
                acc.push(v as f64);
            }
        }
    }
    acc.finish()
}

pub fn zscore_normalize(volume: &ScalarVolume, stats: &ForegroundStats) -> ScalarVolume {
    let (m, s) = (stats.mean, stats.std);
    volume.map(|&x| ((x as f64 - m) / s) as f32)
}

pub fn zscore_denormalize(volume: &ScalarVolume, stats: &ForegroundStats) -> ScalarVolume {
    let (m, s) = (stats.mean, stats.std);
    volume.map(|&x| (x as f64 * s + m) as f32)
}

/// Spatial augmentation parameters, applied about the volume center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Radians about x, y and z (applied in that order).
    pub rotation: Vec3,
    pub scale: f64,
    pub mirror: [bool; 3],
    pub seed: u64,
}

/// Ranges [`AugmentParams::sample`] draws from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub max_rotation: Vec3,
    pub scale: (f64, f64),
    pub mirror_probability: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            max_rotation: [0.52; 3],
            scale: (0.7, 1.4),
            mirror_probability: 0.5,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rotation: [0.0; 3],
            scale: 1.0,
            mirror: [false; 3],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=2.0).contains(&self.scale) {
            return Err(Error::arg("augmentation scale must lie in [0.5, 2.0]"));
        }
        if self
            .rotation
            .iter()
            .any(|r| !(-core::f64::consts::PI..=core::f64::consts::PI).contains(r))
        {
            return Err(Error::arg("rotation components must lie in [-pi, pi]"));
        }
        Ok(())
    }

    /// Draws parameters deterministically from `seed`.
    pub fn sample(seed: u64, ranges: &AugmentRanges) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rotation = [0.0; 3];
        for (r, &m) in rotation.iter_mut().zip(&ranges.max_rotation) {
            let m = m.clamp(0.0, core::f64::consts::PI);
            *r = if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        }
        let (lo, hi) = (ranges.scale.0.max(0.5), ranges.scale.1.min(2.0));
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let mut mirror = [false; 3];
        for m in &mut mirror {
            *m = rng.random_bool(ranges.mirror_probability.clamp(0.0, 1.0));
        }
        AugmentParams {
            rotation,
            scale,
            mirror,
            seed,
        }
    }

    /// `F·Rᵀ / s`: maps output offsets (mm) back to source offsets (mm).
    fn inverse_matrix(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.rotation;
        let (sx, cx) = (libm::sin(ax), libm::cos(ax));
        let (sy, cy) = (libm::sin(ay), libm::cos(ay));
        let (sz, cz) = (libm::sin(az), libm::cos(az));
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        let r = matmul(&rz, &matmul(&ry, &rx));
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            let f = if self.mirror[i] { -1.0 } else { 1.0 };
            for j in 0..3 {
                m[i][j] = f * r[j][i] / self.scale;
            }
        }
        m
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn trilinear_clamped(v: &ScalarVolume, p: Vec3) -> f64 {
    let h = v.header();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut w = [0.0f64; 3];
    for a in 0..3 {
        let n = h.shape[a];
        let q = p[a].clamp(0.0, (n - 1) as f64);
        let f = libm::floor(q);
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(n - 1);
        w[a] = q - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let pick = |a: usize| corner >> a & 1 == 1;
        let mut weight = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if pick(a) {
                weight *= w[a];
                idx[a] = hi[a];
            } else {
                weight *= 1.0 - w[a];
                idx[a] = lo[a];
            }
        }
        if weight != 0.0 {
            acc += weight * *v.get(idx) as f64;
        }
    }
    acc
}

/// Applies the same spatial transform to an image (trilinear) and its labels (nearest).
///
/// Out-of-bounds image samples take the volume minimum. Out-of-bounds label samples
/// take background when the input contains background, otherwise the smallest class present.
pub fn augment(
    image: &ScalarVolume,
    labels: &LabelVolume,
    params: &AugmentParams,
) -> Result<(ScalarVolume, LabelVolume)> {
    image.header().check_same_shape(labels.header())?;
    params.validate()?;
    let h = image.header();
    let m = params.inverse_matrix();
    let center: Vec3 = core::array::from_fn(|a| (h.shape[a] - 1) as f64 / 2.0);
    let sp = h.spacing;
    let fill_hu = image.min_value();
    let fill_label = labels.data().iter().copied().min().unwrap_or(0);

    // Index-space form of the physical map; exact ratios for isotropic grids.
    let mi: [[f64; 3]; 3] = core::array::from_fn(|a| core::array::from_fn(|b| m[a][b] * (sp[b] / sp[a])));

    let n = h.voxel_count();
    let mut out_img = Vec::with_capacity(n);
    let mut out_lab = Vec::with_capacity(n);
    for i in 0..n {
        let p = h.coords(i);
        let d: Vec3 = core::array::from_fn(|a| p[a] as f64 - center[a]);
        let src: Vec3 =
            core::array::from_fn(|a| center[a] + (mi[a][0] * d[0] + mi[a][1] * d[1] + mi[a][2] * d[2]));
        const EDGE_TOL: f64 = 1e-9;
        let inside = (0..3).all(|a| src[a] >= -EDGE_TOL && src[a] <= (h.shape[a] - 1) as f64 + EDGE_TOL);
        out_img.push(if inside {
            trilinear_clamped(image, src) as f32
        } else {
            fill_hu
        });
        let near: [f64; 3] = core::array::from_fn(|a| round_half_up(src[a]));
        let near_inside = (0..3).all(|a| near[a] >= 0.0 && near[a] <= (h.shape[a] - 1) as f64);
        out_lab.push(if near_inside {
            *labels.get(core::array::from_fn(|a| near[a] as usize))
        } else {
            fill_label
        });
    }
    Ok((image.like(out_img), labels.like(out_lab)))
}

/// Copies the voxels inside `roi` into a new volume whose origin is the ROI's lower corner.
pub fn crop<T: Copy>(volume: &Volume<T>, roi: &RoiBox) -> Result<Volume<T>> {
    let h = volume.header();
    if (0..3).any(|a| roi.lower[a] >= roi.upper[a] || roi.upper[a] > h.shape[a]) {
        return Err(Error::arg(alloc::format!("ROI {roi:?} outside volume {:?}", h.shape)));
    }
    let ext = roi.extent();
    let mut header = h.with_grid(ext, h.spacing);
    header.origin = h.voxel_to_world(core::array::from_fn(|a| roi.lower[a] as f64));
    let mut data = Vec::with_capacity(ext[0] * ext[1] * ext[2]);
    for z in roi.lower[2]..roi.upper[2] {
        for y in roi.lower[1]..roi.upper[1] {
            let base = h.index([0, y, z]);
            data.extend_from_slice(&volume.data()[base + roi.lower[0]..base + roi.upper[0]]);
        }
    }
    Volume::new(header, data)
}

/// Expands a tight bounding box about its center by `expansion`, clamped to `shape`.
pub fn expand_box(tight: &RoiBox, expansion: f64, shape: [usize; 3]) -> RoiBox {
    let mut lower = [0usize; 3];
    let mut upper = [0usize; 3];
    for a in 0..3 {
        let len = tight.upper[a] - tight.lower[a];
        let new_len = (round_half_up(len as f64 * expansion) as usize).max(len);
        let extra = new_len - len;
        let lo = tight.lower[a] as isize - (extra / 2) as isize;
        let hi = lo + new_len as isize;
        lower[a] = lo.max(0) as usize;
        upper[a] = (hi.min(shape[a] as isize)) as usize;
    }
    RoiBox {
        lower,
        upper,
        expansion,
    }
}

/// One ROI produced by [`self_adapting_crop`].
#[derive(Debug, Clone, PartialEq)]
pub struct RoiCrop {
    pub roi: RoiBox,
    pub component_size: usize,
    pub image: ScalarVolume,
    /// Only the generating component's voxels are set.
    pub mask: Mask,
}

/// One ROI per tumor component larger than [`ROI_MIN_COMPONENT_VOXELS`].
pub fn self_adapting_crop(
    tumor_mask: &Mask,
    image: &ScalarVolume,
    expansion: f64,
    connectivity: Connectivity,
) -> Result<Vec<RoiCrop>> {
    if !(1.0..=1.5).contains(&expansion) {
        return Err(Error::arg(alloc::format!(
            "crop expansion must lie in [1.0, 1.5], got {expansion}"
        )));
    }
    tumor_mask.header().check_same_shape(image.header())?;
    let set = connected_components(tumor_mask, connectivity);
    let mut crops = Vec::new();
    for comp in set.components.iter().filter(|c| c.size > ROI_MIN_COMPONENT_VOXELS) {
        let roi = expand_box(&comp.bbox, expansion, tumor_mask.shape());
        let only = set.label_map.map(|&l| l == comp.id);
        crops.push(RoiCrop {
            roi,
            component_size: comp.size,
            image: crop(image, &roi)?,
            mask: crop(&only, &roi)?,
        });
    }
    Ok(crops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn header(shape: [usize; 3], spacing: Vec3) -> VolumeHeader {
        VolumeHeader::new(shape, spacing).unwrap()
    }

    #[test]
    fn identity_resample_is_exact() {
        let h = header([5, 4, 3], [0.8, 0.8, 2.0]);
        let data: Vec<f32> = (0..60).map(|i| (i as f32) * 1.37 - 20.0).collect();
        let v = ScalarVolume::scalar(h.clone(), data).unwrap();
        let out = resample(&v, h.spacing, Interpolation::Linear).unwrap();
        assert_eq!(out, v);
        let labels = LabelVolume::labels(h.clone(), (0..60).map(|i| (i % 5) as u8).collect()).unwrap();
        assert_eq!(resample_labels(&labels, h.spacing).unwrap(), labels);
    }

    #[test]
    fn resampled_shape_rounds_half_up() {
        let h = header([10, 10, 3], [1.0, 1.0, 1.0]);
        assert_eq!(resampled_shape(&h, [2.0, 4.0, 2.0]), [5, 3, 2]);
        let h = header([1, 1, 1], [1.0; 3]);
        assert_eq!(resampled_shape(&h, [5.0; 3]), [1, 1, 1]);
    }

    #[test]
    fn rejects_non_positive_spacing() {
        let v = ScalarVolume::filled(header([2, 2, 2], [1.0; 3]), 0.0);
        assert!(resample(&v, [1.0, 0.0, 1.0], Interpolation::Linear).is_err());
        assert!(resample(&v, [1.0, -1.0, 1.0], Interpolation::Nearest).is_err());
    }

    #[test]
    fn two_point_stats() {
        let h = header([3, 1, 1], [1.0; 3]);
        let img = ScalarVolume::scalar(h.clone(), vec![10.0, 20.0, 500.0]).unwrap();
        let lab = LabelVolume::labels(h, vec![1, 2, 0]).unwrap();
        let s = compute_foreground_stats(&[(&img, &lab)]).unwrap();
        assert_eq!(s.mean, 15.0);
        assert_eq!(s.std, 5.0);
        assert_eq!(s.voxel_count, 2);
    }

    #[test]
    fn degenerate_stats() {
        let h = header([3, 1, 1], [1.0; 3]);
        let img = ScalarVolume::scalar(h.clone(), vec![7.0, 7.0, 1.0]).unwrap();
        let lab = LabelVolume::labels(h.clone(), vec![1, 1, 0]).unwrap();
        assert!(matches!(
            compute_foreground_stats(&[(&img, &lab)]),
            Err(Error::EmptyForegroundVariance { .. })
        ));
        let none = LabelVolume::labels(h, vec![0, 0, 0]).unwrap();
        assert_eq!(compute_foreground_stats(&[(&img, &none)]), Err(Error::EmptyForeground));
    }

    #[test]
    fn zscore_points() {
        let stats = ForegroundStats::new(40.0, 8.0, 10).unwrap();
        let v = ScalarVolume::scalar(header([2, 1, 1], [1.0; 3]), vec![40.0, 48.0]).unwrap();
        assert_eq!(zscore_normalize(&v, &stats).data(), &[0.0, 1.0]);
        assert!(ForegroundStats::new(0.0, 0.0, 1).is_err());
    }

    #[test]
    fn crop_box_of_cube() {
        let h = header([64, 64, 64], [1.0; 3]);
        let mut m = Mask::empty_like(&h);
        for z in 24..39 {
            for y in 24..39 {
                for x in 24..39 {
                    m.set([x, y, z], true);
                }
            }
        }
        let img = ScalarVolume::filled(h, 1.0);
        let crops = self_adapting_crop(&m, &img, 1.0, Connectivity::TwentySix).unwrap();
        assert_eq!(crops.len(), 1);
        assert_eq!(crops[0].roi.lower, [24; 3]);
        assert_eq!(crops[0].roi.upper, [39; 3]);
        let crops = self_adapting_crop(&m, &img, 1.5, Connectivity::TwentySix).unwrap();
        assert_eq!(crops[0].roi.extent(), [23; 3]);
        assert_eq!(crops[0].roi.lower, [20; 3]);
        assert_eq!(crops[0].mask.count(), 3375);
        assert!(self_adapting_crop(&m, &img, 1.6, Connectivity::TwentySix).is_err());
    }

    #[test]
    fn small_component_yields_no_roi() {
        let h = header([32, 32, 32], [1.0; 3]);
        let mut m = Mask::empty_like(&h);
        for z in 5..15 {
            for y in 5..15 {
                for x in 5..15 {
                    m.set([x, y, z], true);
                }
            }
        }
        let img = ScalarVolume::filled(h, 0.0);
        assert!(self_adapting_crop(&m, &img, 1.25, Connectivity::TwentySix)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn expansion_clamps_to_bounds() {
        let tight = RoiBox {
            lower: [0, 10, 50],
            upper: [10, 20, 60],
            expansion: 1.0,
        };
        let b = expand_box(&tight, 1.5, [64, 64, 62]);
        assert_eq!(b.lower, [0, 8, 48]);
        assert_eq!(b.upper, [13, 23, 62]);
    }

    #[test]
    fn crop_sets_origin() {
        let v = ScalarVolume::scalar(header([4, 4, 4], [2.0; 3]), (0..64).map(|i| i as f32).collect()).unwrap();
        let roi = RoiBox {
            lower: [1, 2, 3],
            upper: [3, 4, 4],
            expansion: 1.0,
        };
        let c = crop(&v, &roi).unwrap();
        assert_eq!(c.shape(), [2, 2, 1]);
        assert_eq!(c.header().origin, [2.0, 4.0, 6.0]);
        assert_eq!(c.data(), &[57.0, 58.0, 61.0, 62.0]);
    }

    #[test]
    fn identity_augment() {
        let h = header([5, 6, 7], [1.0, 1.0, 2.0]);
        let img = ScalarVolume::scalar(h.clone(), (0..210).map(|i| (i * 7 % 31) as f32).collect()).unwrap();
        let lab = LabelVolume::labels(h, (0..210).map(|i| (i % 5) as u8).collect()).unwrap();
        let (a, b) = augment(&img, &lab, &AugmentParams::identity()).unwrap();
        assert_eq!(b, lab);
        for (x, y) in a.data().iter().zip(img.data()) {
            assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn double_mirror_is_identity() {
        let h = header([5, 4, 3], [1.0; 3]);
        let img = ScalarVolume::scalar(h.clone(), (0..60).map(|i| i as f32).collect()).unwrap();
        let lab = LabelVolume::labels(h, (0..60).map(|i| (i % 3) as u8).collect()).unwrap();
        let p = AugmentParams {
            mirror: [true, false, false],
            ..AugmentParams::identity()
        };
        let (a, b) = augment(&img, &lab, &p).unwrap();
        assert_eq!(*a.get([0, 0, 0]), *img.get([4, 0, 0]));
        let (a2, b2) = augment(&a, &b, &p).unwrap();
        assert_eq!(a2, img);
        assert_eq!(b2, lab);
    }

    #[test]
    fn augment_rejects_mismatch() {
        let img = ScalarVolume::filled(header([2, 2, 2], [1.0; 3]), 0.0);
        let lab = LabelVolume::filled(header([2, 2, 3], [1.0; 3]), 0);
        assert!(augment(&img, &lab, &AugmentParams::identity()).is_err());
    }
}
