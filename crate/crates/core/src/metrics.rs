//! Overlap and surface-distance metrics: DSC, Hausdorff distance (HD) and
//! average Hausdorff distance (AVD).
//!
//! HD and AVD are computed between surface voxel sets. A surface voxel is a
//! foreground voxel with at least one 6-neighbor outside the mask (voxels on
//! the volume border count as surface). Distances are Euclidean in mm.
//! When exactly one mask is empty both distances are `f64::INFINITY`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Class, LabelVolume, Mask, Vec3};

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    a.header().check_same_shape(b.header())?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Surface voxels of `mask` in scan order.
pub fn surface_voxels(mask: &Mask) -> Vec<[usize; 3]> {
    let h = mask.header();
    let [nx, ny, nz] = h.shape;
    let d = mask.data();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !d[i] {
                    continue;
                }
                let border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                if border
                    || !d[i - 1]
                    || !d[i + 1]
                    || !d[i - nx]
                    || !d[i + nx]
                    || !d[i - nx * ny]
                    || !d[i + nx * ny]
                {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn to_mm(p: [usize; 3], spacing: Vec3) -> Vec3 {
    [p[0] as f64 * spacing[0], p[1] as f64 * spacing[1], p[2] as f64 * spacing[2]]
}

/// Static 3D k-d tree answering nearest-neighbor distance queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    // Implicit balanced layout: the median of points[lo..hi] sits at (lo+hi)/2.
    points: Vec<Vec3>,
}

impl KdTree {
    pub fn new(mut points: Vec<Vec3>) -> Self {
        let n = points.len();
        Self::build(&mut points, 0, n, 0);
        KdTree { points }
    }

    fn build(pts: &mut [Vec3], lo: usize, hi: usize, depth: usize) {
        if hi - lo <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = (lo + hi) / 2;
        pts[lo..hi].select_nth_unstable_by(mid - lo, |a, b| a[axis].total_cmp(&b[axis]));
        Self::build(pts, lo, mid, depth + 1);
        Self::build(pts, mid + 1, hi, depth + 1);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance to the nearest stored point (`∞` when empty).
    pub fn nearest_sq(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.points.len(), 0, &mut best);
        best
    }

    fn search(&self, q: Vec3, lo: usize, hi: usize, depth: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let p = self.points[mid];
        let d2 = (q[0] - p[0]) * (q[0] - p[0]) + (q[1] - p[1]) * (q[1] - p[1]) + (q[2] - p[2]) * (q[2] - p[2]);
        if d2 < *best {
            *best = d2;
        }
        let axis = depth % 3;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, depth + 1, best);
        if delta * delta < *best {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

/// Both directed surface-distance sets between two masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDistances {
    /// For each surface voxel of `a`, the distance (mm) to the nearest surface voxel of `b`.
    pub a_to_b: Vec<f64>,
    pub b_to_a: Vec<f64>,
}

impl SurfaceDistances {
    pub fn compute(a: &Mask, b: &Mask, spacing: Vec3) -> Result<Self> {
        a.header().check_same_shape(b.header())?;
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::arg("spacing must be positive"));
        }
        let sa: Vec<Vec3> = surface_voxels(a).into_iter().map(|p| to_mm(p, spacing)).collect();
        let sb: Vec<Vec3> = surface_voxels(b).into_iter().map(|p| to_mm(p, spacing)).collect();
        let directed = |from: &[Vec3], to: Vec<Vec3>| -> Vec<f64> {
            let tree = KdTree::new(to);
            from.iter().map(|&q| libm::sqrt(tree.nearest_sq(q))).collect()
        };
        Ok(SurfaceDistances {
            a_to_b: directed(&sa, sb.clone()),
            b_to_a: directed(&sb, sa),
        })
    }

    fn one_sided_empty(&self) -> bool {
        self.a_to_b.is_empty() != self.b_to_a.is_empty()
    }

    pub fn hausdorff(&self) -> f64 {
        if self.one_sided_empty() {
            return f64::INFINITY;
        }
        self.a_to_b.iter().chain(&self.b_to_a).copied().fold(0.0, f64::max)
    }

    pub fn average_hausdorff(&self) -> f64 {
        if self.one_sided_empty() {
            return f64::INFINITY;
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        (mean(&self.a_to_b) + mean(&self.b_to_a)) / 2.0
    }
}

/// Symmetric Hausdorff distance (mm) between surface voxel sets.
pub fn hausdorff(a: &Mask, b: &Mask, spacing: Vec3) -> Result<f64> {
    Ok(SurfaceDistances::compute(a, b, spacing)?.hausdorff())
}

/// Mean of the two directed mean surface distances (mm).
pub fn avg_hausdorff(a: &Mask, b: &Mask, spacing: Vec3) -> Result<f64> {
    Ok(SurfaceDistances::compute(a, b, spacing)?.average_hausdorff())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub structure: Class,
    pub dsc: f64,
    /// `∞` (serialized as `null`) when exactly one mask is empty.
    pub hd: f64,
    pub avd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub structures: Vec<StructureMetrics>,
}

impl CaseMetrics {
    pub fn get(&self, class: Class) -> Option<&StructureMetrics> {
        self.structures.iter().find(|s| s.structure == class)
    }
}

/// Metrics for the four foreground structures; distances use the truth spacing.
pub fn evaluate_case(case_id: &str, pred: &LabelVolume, truth: &LabelVolume) -> Result<CaseMetrics> {
    if !pred.header().same_grid(truth.header()) {
        return Err(Error::arg(alloc::format!(
            "prediction grid {:?} does not match truth grid {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let spacing = truth.header().spacing;
    let structures = Class::STRUCTURES
        .iter()
        .map(|&class| {
            let a = pred.class_mask(class);
            let b = truth.class_mask(class);
            let d = SurfaceDistances::compute(&a, &b, spacing)?;
            Ok(StructureMetrics {
                structure: class,
                dsc: dsc(&a, &b)?,
                hd: d.hausdorff(),
                avd: d.average_hausdorff(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseMetrics {
        case_id: case_id.into(),
        structures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub message: String,
}

/// Mean and population std of one metric over cases, excluding `∞` sentinels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub sentinels: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let mut finite = Vec::new();
        let mut sentinels = 0;
        for v in values {
            if v.is_finite() {
                finite.push(v);
            } else {
                sentinels += 1;
            }
        }
        let n = finite.len();
        let mean = if n == 0 { f64::NAN } else { finite.iter().sum::<f64>() / n as f64 };
        let var = if n == 0 {
            f64::NAN
        } else {
            finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
        };
        Summary {
            mean,
            std: libm::sqrt(var),
            count: n,
            sentinels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureAggregate {
    pub structure: Class,
    pub dsc: Summary,
    pub hd: Summary,
    pub avd: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub cases: Vec<CaseMetrics>,
    pub errors: Vec<CaseFailure>,
    pub aggregate: Vec<StructureAggregate>,
}

/// One evaluation input: case id, prediction, truth.
pub type EvalPair<'a> = (&'a str, &'a LabelVolume, &'a LabelVolume);

/// Evaluates every pair; failing cases are recorded and skipped.
pub fn evaluate_dataset(pairs: &[EvalPair<'_>]) -> DatasetReport {
    let mut cases = Vec::new();
    let mut errors = Vec::new();
    for &(id, pred, truth) in pairs {
        match evaluate_case(id, pred, truth) {
            Ok(m) => cases.push(m),
            Err(e) => errors.push(CaseFailure {
                case_id: id.into(),
                message: e.to_string(),
            }),
        }
    }
    let aggregate = aggregate(&cases);
    DatasetReport {
        cases,
        errors,
        aggregate,
    }
}

pub fn aggregate(cases: &[CaseMetrics]) -> Vec<StructureAggregate> {
    Class::STRUCTURES
        .iter()
        .map(|&class| {
            let rows: Vec<&StructureMetrics> = cases.iter().filter_map(|c| c.get(class)).collect();
            StructureAggregate {
                structure: class,
                dsc: Summary::of(rows.iter().map(|r| r.dsc)),
                hd: Summary::of(rows.iter().map(|r| r.hd)),
                avd: Summary::of(rows.iter().map(|r| r.avd)),
            }
        })
        .collect()
}
