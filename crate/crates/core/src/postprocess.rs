//! Rule-based filters and fusions applied to stage predictions.
//!
//! Every filter returns a voxel subset of its input together with an audit
//! record of the components it removed.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::cc3d::{avg_pool3, centroid_distance, connected_components, connected_components_with_image, max_component, Component, ComponentSet, Connectivity};
use crate::error::{Error, Result};
use crate::volume::{Class, LabelVolume, Mask, ScalarVolume, Volume};

/// Probability a fused or voted voxel must reach to become foreground.
pub const FUSION_THRESHOLD: f64 = 0.5;
/// Fused values within this distance of the threshold count as reaching it;
/// wide enough to absorb f32 rounding of exact ties such as 0.95 + 0.05.
pub const FUSION_TIE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceUnit {
    /// Voxel units on the resampled grid.
    #[default]
    Voxel,
    Mm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HuAggregate {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub vein_max_dist: f64,
    pub artery_max_dist: f64,
    pub distance_unit: DistanceUnit,
    pub artery_hu_max: f64,
    pub hu_aggregate: HuAggregate,
    pub tumor_min_size: usize,
    /// Components with mean HU below this are treated as fluid-filled cysts.
    pub cyst_hu_threshold: f64,
    pub ensemble_weights: [f64; 2],
    pub thin_block: [usize; 3],
    pub thin_density_max: f64,
    /// Highest precedence first.
    pub fusion_precedence: Vec<Class>,
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            vein_max_dist: 100.0,
            artery_max_dist: 92.0,
            distance_unit: DistanceUnit::Voxel,
            artery_hu_max: 2200.0,
            hu_aggregate: HuAggregate::Mean,
            tumor_min_size: 100,
            cyst_hu_threshold: 20.0,
            ensemble_weights: [0.4, 0.6],
            thin_block: [3, 3, 3],
            thin_density_max: 0.5,
            fusion_precedence: alloc::vec![Class::Tumor, Class::Artery, Class::Vein, Class::Kidney],
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let [w1, w2] = self.ensemble_weights;
        if w1 < 0.0 || w2 < 0.0 || libm::fabs(w1 + w2 - 1.0) > 1e-9 {
            return Err(Error::arg("ensemble weights must be nonnegative and sum to 1"));
        }
        for (name, v) in [
            ("vein_max_dist", self.vein_max_dist),
            ("artery_max_dist", self.artery_max_dist),
            ("artery_hu_max", self.artery_hu_max),
            ("cyst_hu_threshold", self.cyst_hu_threshold),
        ] {
            if !(v > 0.0) {
                return Err(Error::arg(alloc::format!("{name} must be positive")));
            }
        }
        if !(self.thin_density_max > 0.0 && self.thin_density_max <= 1.0) {
            return Err(Error::arg("thin_density_max must lie in (0, 1]"));
        }
        if self.thin_block.contains(&0) {
            return Err(Error::arg("thin_block must be >= 1 per axis"));
        }
        check_precedence(&self.fusion_precedence)
    }
}

fn check_precedence(order: &[Class]) -> Result<()> {
    let mut seen = [false; Class::COUNT];
    for &c in order {
        if c == Class::Background || core::mem::replace(&mut seen[c as usize], true) {
            return Err(Error::arg("fusion precedence must list each structure once"));
        }
    }
    if Class::STRUCTURES.iter().any(|&c| !seen[c as usize]) {
        return Err(Error::arg("fusion precedence must list all four structures"));
    }
    Ok(())
}

/// Which rule removed a component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    MaxComponent,
    CenterDistance,
    HuCeiling,
    Cyst,
    MinSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub rule: Rule,
    pub size: usize,
    pub centroid: [f64; 3],
    /// The quantity the rule tested (distance, HU or size).
    pub measured: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub mask: Mask,
    pub removed: Vec<Removal>,
    pub warnings: Vec<String>,
}

fn filter_components(
    set: &ComponentSet,
    mut verdict: impl FnMut(&Component) -> Option<Removal>,
) -> Filtered {
    let mut removed = Vec::new();
    let mask = set.select(|c| match verdict(c) {
        Some(r) => {
            removed.push(r);
            false
        }
        None => true,
    });
    Filtered {
        mask,
        removed,
        warnings: Vec::new(),
    }
}

fn removal(rule: Rule, c: &Component, measured: f64, limit: f64) -> Removal {
    Removal {
        rule,
        size: c.size,
        centroid: c.centroid,
        measured,
        limit,
    }
}

/// Keeps the largest kidney component.
pub fn filter_kidney(mask: &Mask, connectivity: Connectivity) -> Filtered {
    let set = connected_components(mask, connectivity);
    let Some(largest) = set.largest().map(|c| c.id) else {
        return Filtered {
            mask: mask.clone(),
            removed: Vec::new(),
            warnings: alloc::vec!["kidney mask is empty".into()],
        };
    };
    let biggest = set.components[largest as usize - 1].size as f64;
    filter_components(&set, |c| {
        (c.id != largest).then(|| removal(Rule::MaxComponent, c, c.size as f64, biggest))
    })
}

/// Keeps the largest component and every other component whose centroid lies
/// within `max_dist` of the largest component's centroid.
///
/// `spacing` switches the distance to mm; `None` measures in voxels.
pub fn filter_vessel(mask: &Mask, max_dist: f64, spacing: Option<[f64; 3]>, connectivity: Connectivity) -> Result<Filtered> {
    if !(max_dist > 0.0) {
        return Err(Error::arg("max_dist must be positive"));
    }
    let set = connected_components(mask, connectivity);
    let Some(main) = set.largest().cloned() else {
        return Ok(Filtered {
            mask: mask.clone(),
            removed: Vec::new(),
            warnings: Vec::new(),
        });
    };
    Ok(filter_components(&set, |c| {
        if c.id == main.id {
            return None;
        }
        let d = centroid_distance(c.centroid, main.centroid, spacing);
        (d > max_dist).then(|| removal(Rule::CenterDistance, c, d, max_dist))
    }))
}

fn hu_of(c: &Component, agg: HuAggregate) -> f64 {
    match agg {
        HuAggregate::Mean => c.mean_hu.unwrap_or(f64::NAN),
        HuAggregate::Max => c.max_hu.unwrap_or(f64::NAN),
    }
}

/// Removes components whose HU aggregate exceeds `hu_max`.
pub fn filter_artery_hu(
    mask: &Mask,
    image: &ScalarVolume,
    hu_max: f64,
    aggregate: HuAggregate,
    connectivity: Connectivity,
) -> Result<Filtered> {
    let set = connected_components_with_image(mask, connectivity, image)?;
    Ok(filter_components(&set, |c| {
        let hu = hu_of(c, aggregate);
        (hu > hu_max).then(|| removal(Rule::HuCeiling, c, hu, hu_max))
    }))
}

/// Removes components whose mean HU is below `hu_threshold` (fluid density).
pub fn cyst_filter(mask: &Mask, image: &ScalarVolume, hu_threshold: f64, connectivity: Connectivity) -> Result<Filtered> {
    let set = connected_components_with_image(mask, connectivity, image)?;
    Ok(filter_components(&set, |c| {
        let hu = hu_of(c, HuAggregate::Mean);
        (hu < hu_threshold).then(|| removal(Rule::Cyst, c, hu, hu_threshold))
    }))
}

/// Removes components with fewer than `min_size` voxels.
pub fn size_filter(mask: &Mask, min_size: usize, connectivity: Connectivity) -> Filtered {
    let set = connected_components(mask, connectivity);
    filter_components(&set, |c| {
        (c.size < min_size).then(|| removal(Rule::MinSize, c, c.size as f64, min_size as f64))
    })
}

#[inline]
fn reaches_threshold(v: f64) -> bool {
    v >= FUSION_THRESHOLD - FUSION_TIE_TOL
}

/// Convex combination of two vein probability maps, thresholded at 0.5.
pub fn ensemble_vein(prob_i: &ScalarVolume, prob_ii: &ScalarVolume, weights: [f64; 2]) -> Result<Mask> {
    prob_i.header().check_same_shape(prob_ii.header())?;
    let [w1, w2] = weights;
    if w1 < 0.0 || w2 < 0.0 || libm::fabs(w1 + w2 - 1.0) > 1e-9 {
        return Err(Error::arg("ensemble weights must be nonnegative and sum to 1"));
    }
    Ok(prob_i.like(
        prob_i
            .data()
            .iter()
            .zip(prob_ii.data())
            .map(|(&a, &b)| reaches_threshold(w1 * a as f64 + w2 * b as f64))
            .collect(),
    ))
}

/// Two-voter soft vote: mean probability thresholded at 0.5.
pub fn vote_tumor_soft(prob_i: &ScalarVolume, prob_ii: &ScalarVolume) -> Result<Mask> {
    ensemble_vein(prob_i, prob_ii, [0.5, 0.5])
}

/// Two-voter binary vote; the 0.5 mean threshold makes this the union.
pub fn vote_tumor_binary(pred_i: &Mask, pred_ii: &Mask) -> Result<Mask> {
    pred_i.header().check_same_shape(pred_ii.header())?;
    Ok(pred_i.like(
        pred_i
            .data()
            .iter()
            .zip(pred_ii.data())
            .map(|(&a, &b)| reaches_threshold((a as u8 as f64 + b as u8 as f64) / 2.0))
            .collect(),
    ))
}

/// Voxels of `mask` lying in pooled blocks of density in `(0, density_max]`.
pub fn thin_structure(mask: &Mask, block: [usize; 3], density_max: f64) -> Result<Mask> {
    let pooled = avg_pool3(mask, block)?;
    let h = mask.header();
    Ok(mask.like(
        mask.data()
            .iter()
            .enumerate()
            .map(|(i, &on)| {
                if !on {
                    return false;
                }
                let d = pooled.value_at_voxel(h.coords(i));
                d > 0.0 && d <= density_max
            })
            .collect(),
    ))
}

/// Main artery trunk from stage I joined with the thin structures of stage II.
pub fn fuse_artery(artery_i: &Mask, artery_ii: &Mask, config: &PostprocessConfig) -> Result<Mask> {
    artery_i.header().check_same_shape(artery_ii.header())?;
    let mut out = max_component(artery_i, config.connectivity);
    let thin = thin_structure(artery_ii, config.thin_block, config.thin_density_max)?;
    out.union_with(&thin)?;
    Ok(out)
}

/// Assigns each voxel the highest-precedence class whose mask claims it.
pub fn fuse_labels(
    kidney: &Mask,
    tumor: &Mask,
    vein: &Mask,
    artery: &Mask,
    precedence: &[Class],
) -> Result<LabelVolume> {
    check_precedence(precedence)?;
    for m in [tumor, vein, artery] {
        kidney.header().check_same_shape(m.header())?;
    }
    let mask_of = |c: Class| match c {
        Class::Kidney => kidney,
        Class::Tumor => tumor,
        Class::Vein => vein,
        Class::Artery => artery,
        Class::Background => unreachable!("precedence excludes background"),
    };
    let mut out: Volume<u8> = kidney.like(alloc::vec![0u8; kidney.len()]);
    // Paint lowest precedence first so higher classes overwrite.
    for &class in precedence.iter().rev() {
        let m = mask_of(class);
        for (o, &on) in out.data_mut().iter_mut().zip(m.data()) {
            if on {
                *o = class.code();
            }
        }
    }
    Ok(out)
}
