//! Dense 3D volumes with physical-space metadata.
//!
//! Voxels are stored x-fastest: the linear index of `[x, y, z]` is
//! `x + nx * (y + ny * z)`, matching the NIfTI on-disk layout.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
/// Row-major 3x3 matrix. Column `c` is the world direction of voxel axis `c`.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Tolerance on `|RᵀR − I|∞` for a direction matrix to count as orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-4;

/// Segmentation classes with their on-disk codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Kidney = 1,
    Tumor = 2,
    Vein = 3,
    Artery = 4,
}

impl Class {
    pub const ALL: [Class; 5] = [
        Class::Background,
        Class::Kidney,
        Class::Tumor,
        Class::Vein,
        Class::Artery,
    ];
    /// Foreground structures in code order.
    pub const STRUCTURES: [Class; 4] = [Class::Kidney, Class::Tumor, Class::Vein, Class::Artery];
    pub const COUNT: usize = 5;

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Class> {
        Class::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Kidney => "kidney",
            Class::Tumor => "tumor",
            Class::Vein => "vein",
            Class::Artery => "artery",
        }
    }
}

/// Maps raw integer codes found in third-party label files onto [`Class`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRemap {
    pub entries: Vec<(i64, Class)>,
}

impl Default for LabelRemap {
    fn default() -> Self {
        LabelRemap {
            entries: Class::ALL.iter().map(|c| (c.code() as i64, *c)).collect(),
        }
    }
}

impl LabelRemap {
    pub fn lookup(&self, raw: i64) -> Option<Class> {
        self.entries.iter().find(|(r, _)| *r == raw).map(|(_, c)| *c)
    }
}

/// Geometry and intensity calibration shared by every volume kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
    pub direction: Mat3,
    pub intensity_scale: f64,
    pub intensity_offset: f64,
}

impl VolumeHeader {
    /// Header with identity direction, zero origin and unit intensity calibration.
    pub fn new(shape: [usize; 3], spacing: Vec3) -> Result<Self> {
        let h = VolumeHeader {
            shape,
            spacing,
            origin: [0.0; 3],
            direction: IDENTITY,
            intensity_scale: 1.0,
            intensity_offset: 0.0,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::Header(alloc::format!(
                "shape components must be >= 1, got {:?}",
                self.shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Header(alloc::format!(
                "spacing components must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Header("origin must be finite".into()));
        }
        let dev = orthonormal_deviation(&self.direction);
        if !(dev < ORTHONORMAL_TOL) {
            return Err(Error::Header(alloc::format!(
                "direction matrix is not orthonormal (|RᵀR − I|∞ = {dev:e})"
            )));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    #[inline]
    pub fn index(&self, [x, y, z]: [usize; 3]) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// `world = origin + direction · (index ⊙ spacing)`.
    pub fn voxel_to_world(&self, index: Vec3) -> Vec3 {
        let scaled = [
            index[0] * self.spacing[0],
            index[1] * self.spacing[1],
            index[2] * self.spacing[2],
        ];
        let d = &self.direction;
        let mut w = self.origin;
        for (r, wr) in w.iter_mut().enumerate() {
            *wr += d[r][0] * scaled[0] + d[r][1] * scaled[1] + d[r][2] * scaled[2];
        }
        w
    }

    /// Inverse of [`voxel_to_world`](Self::voxel_to_world); uses `Rᵀ` since `R` is orthonormal.
    pub fn world_to_voxel(&self, world: Vec3) -> Vec3 {
        let rel = [
            world[0] - self.origin[0],
            world[1] - self.origin[1],
            world[2] - self.origin[2],
        ];
        let d = &self.direction;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let v = d[0][c] * rel[0] + d[1][c] * rel[1] + d[2][c] * rel[2];
            *o = v / self.spacing[c];
        }
        out
    }

    /// Same shape, and spacing/origin/direction agree within `1e-6`.
    pub fn same_grid(&self, other: &VolumeHeader) -> bool {
        let close = |a: f64, b: f64| libm::fabs(a - b) <= 1e-6 * (1.0 + libm::fabs(a));
        self.shape == other.shape
            && (0..3).all(|i| close(self.spacing[i], other.spacing[i]))
            && (0..3).all(|i| close(self.origin[i], other.origin[i]))
            && (0..3).all(|r| (0..3).all(|c| close(self.direction[r][c], other.direction[r][c])))
    }

    /// Copy of this header with a new shape and spacing, same origin and direction.
    pub fn with_grid(&self, shape: [usize; 3], spacing: Vec3) -> Self {
        VolumeHeader {
            shape,
            spacing,
            ..self.clone()
        }
    }

    pub(crate) fn check_same_shape(&self, other: &VolumeHeader) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                found: other.shape,
            });
        }
        Ok(())
    }
}

pub fn orthonormal_deviation(m: &Mat3) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max(libm::fabs(dot - target));
        }
    }
    worst
}

/// A dense voxel grid plus its header.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    header: VolumeHeader,
    data: Vec<T>,
}

pub type ScalarVolume = Volume<f32>;
/// Class codes in `0..=4`, see [`Class`].
pub type LabelVolume = Volume<u8>;
pub type Mask = Volume<bool>;

impl<T> Volume<T> {
    pub fn new(header: VolumeHeader, data: Vec<T>) -> Result<Self> {
        header.validate()?;
        if data.len() != header.voxel_count() {
            return Err(Error::arg(alloc::format!(
                "voxel count {} does not match shape {:?}",
                data.len(),
                header.shape
            )));
        }
        Ok(Volume { header, data })
    }

    pub fn filled(header: VolumeHeader, value: T) -> Self
    where
        T: Clone,
    {
        let n = header.voxel_count();
        Volume {
            header,
            data: vec![value; n],
        }
    }

    pub fn header(&self) -> &VolumeHeader {
        &self.header
    }

    pub fn header_mut(&mut self) -> &mut VolumeHeader {
        &mut self.header
    }

    pub fn shape(&self) -> [usize; 3] {
        self.header.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, xyz: [usize; 3]) -> &T {
        &self.data[self.header.index(xyz)]
    }

    #[inline]
    pub fn set(&mut self, xyz: [usize; 3], value: T) {
        let i = self.header.index(xyz);
        self.data[i] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Volume<U> {
        Volume {
            header: self.header.clone(),
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Builds a volume on this volume's grid from raw data of matching length.
    pub fn like<U>(&self, data: Vec<U>) -> Volume<U> {
        assert_eq!(data.len(), self.data.len(), "data length must match grid");
        Volume {
            header: self.header.clone(),
            data,
        }
    }
}

impl ScalarVolume {
    /// Validating constructor: rejects NaN/Inf voxels.
    pub fn scalar(header: VolumeHeader, data: Vec<f32>) -> Result<Self> {
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFinite { count: bad });
        }
        Volume::new(header, data)
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

impl LabelVolume {
    /// Validating constructor: every code must be a [`Class`].
    pub fn labels(header: VolumeHeader, data: Vec<u8>) -> Result<Self> {
        if let Some((i, &v)) = data.iter().enumerate().find(|(_, &v)| v as usize >= Class::COUNT) {
            return Err(Error::InvalidLabel {
                value: v as i64,
                index: i,
            });
        }
        Volume::new(header, data)
    }

    pub fn class_mask(&self, class: Class) -> Mask {
        let code = class.code();
        self.map(|&v| v == code)
    }

    pub fn classes_present(&self) -> [bool; Class::COUNT] {
        let mut present = [false; Class::COUNT];
        for &v in &self.data {
            if let Some(p) = present.get_mut(v as usize) {
                *p = true;
            }
        }
        present
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn empty_like(header: &VolumeHeader) -> Mask {
        Volume::filled(header.clone(), false)
    }

    pub fn union_with(&mut self, other: &Mask) -> Result<()> {
        self.header.check_same_shape(&other.header)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
        Ok(())
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Per-class probability maps on a shared grid, stored class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    header: VolumeHeader,
    channels: Vec<Vec<f32>>,
}

impl ProbVolume {
    pub fn new(header: VolumeHeader, channels: Vec<Vec<f32>>) -> Result<Self> {
        header.validate()?;
        let n = header.voxel_count();
        if channels.is_empty() {
            return Err(Error::arg("probability volume needs at least one channel"));
        }
        if let Some(c) = channels.iter().position(|ch| ch.len() != n) {
            return Err(Error::arg(alloc::format!(
                "channel {c} length {} does not match voxel count {n}",
                channels[c].len()
            )));
        }
        Ok(ProbVolume { header, channels })
    }

    pub fn header(&self) -> &VolumeHeader {
        &self.header
    }

    pub fn num_classes(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, class: usize) -> &[f32] {
        &self.channels[class]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn channel_volume(&self, class: usize) -> ScalarVolume {
        Volume {
            header: self.header.clone(),
            data: self.channels[class].clone(),
        }
    }

    /// Per-voxel argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.header.voxel_count();
        (0..n)
            .map(|i| {
                let mut best = 0usize;
                let mut best_p = self.channels[0][i];
                for (c, ch) in self.channels.iter().enumerate().skip(1) {
                    if ch[i] > best_p {
                        best = c;
                        best_p = ch[i];
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Argmax as a label volume (only meaningful for the 5-class layout).
    pub fn argmax_labels(&self) -> LabelVolume {
        Volume {
            header: self.header.clone(),
            data: self.argmax(),
        }
    }

    pub fn argmax_mask(&self, class: usize) -> Mask {
        let am = self.argmax();
        Volume {
            header: self.header.clone(),
            data: am.into_iter().map(|c| c as usize == class).collect(),
        }
    }

    /// Largest `|Σ_c p_c − 1|` over all voxels.
    pub fn max_sum_deviation(&self) -> f64 {
        let n = self.header.voxel_count();
        (0..n)
            .map(|i| {
                let s: f64 = self.channels.iter().map(|ch| ch[i] as f64).sum();
                libm::fabs(s - 1.0)
            })
            .fold(0.0, f64::max)
    }
}
