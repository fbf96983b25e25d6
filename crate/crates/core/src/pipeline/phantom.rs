//! Procedural renal CT phantoms with known ground truth.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::TARGET_SPACING;
use crate::volume::{Class, LabelVolume, ScalarVolume, Vec3, VolumeHeader};

pub const MIN_PHANTOM_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomOptions {
    /// Adds a fluid cyst (labeled background) next to the kidney.
    pub cyst: bool,
    /// Standard deviation of the additive image noise in HU.
    pub noise_hu: f64,
    /// Voxel position of the anatomy; the volume center when unset. The
    /// anatomy needs roughly 32 voxels of room on every side.
    pub anatomy_center: Option<Vec3>,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        PhantomOptions {
            cyst: false,
            noise_hu: 5.0,
            anatomy_center: None,
        }
    }
}

/// A tube between two points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub from: Vec3,
    pub to: Vec3,
    pub radius: f64,
}

impl Segment {
    fn point_at(&self, t: f64) -> Vec3 {
        core::array::from_fn(|a| self.from[a] + t * (self.to[a] - self.from[a]))
    }

    fn dist2(&self, p: Vec3) -> f64 {
        let d: Vec3 = core::array::from_fn(|a| self.to[a] - self.from[a]);
        let w: Vec3 = core::array::from_fn(|a| p[a] - self.from[a]);
        let len2 = dot(d, d);
        let t = if len2 > 0.0 { (dot(w, d) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let q = self.point_at(t);
        dist2(p, q)
    }
}

/// Geometry of a generated phantom in voxel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomInfo {
    pub kidney_center: Vec3,
    pub kidney_radii: Vec3,
    pub tumor_center: Vec3,
    pub tumor_radius: f64,
    pub vein: Vec<Segment>,
    pub artery: Vec<Segment>,
    pub cyst: Option<(Vec3, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: ScalarVolume,
    pub labels: LabelVolume,
    pub info: PhantomInfo,
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist2(a: Vec3, b: Vec3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn normalize(v: Vec3) -> Vec3 {
    let n = libm::sqrt(dot(v, v));
    core::array::from_fn(|a| v[a] / n)
}

/// Distance from the ellipsoid center to its surface along unit direction `u`.
fn ellipsoid_reach(radii: Vec3, u: Vec3) -> f64 {
    1.0 / libm::sqrt((0..3).map(|a| (u[a] / radii[a]) * (u[a] / radii[a])).sum::<f64>())
}

/// Image and truth labels of one phantom on the isotropic target grid.
pub fn generate_phantom(seed: u64, size: [usize; 3]) -> Result<(ScalarVolume, LabelVolume)> {
    let p = generate_phantom_with(seed, size, &PhantomOptions::default())?;
    Ok((p.image, p.labels))
}

pub fn generate_phantom_with(seed: u64, size: [usize; 3], options: &PhantomOptions) -> Result<Phantom> {
    if size.iter().any(|&n| n < MIN_PHANTOM_SIZE) {
        return Err(Error::arg(alloc::format!(
            "phantom size must be at least {MIN_PHANTOM_SIZE} per axis, got {size:?}"
        )));
    }
    if !(options.noise_hu >= 0.0) || !options.noise_hu.is_finite() {
        return Err(Error::arg("phantom noise must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uni = |lo: f64, hi: f64| rng.random_range(lo..hi);

    let base = options
        .anatomy_center
        .unwrap_or(core::array::from_fn(|a| size[a] as f64 / 2.0));
    // Kidney sits lateral (+x) of the anatomy center so the hilum vessels
    // have room medially.
    let kc: Vec3 = [base[0] + 6.0 + uni(-1.5, 1.5), base[1] + uni(-1.5, 1.5), base[2] + uni(-1.5, 1.5)];
    let kr: Vec3 = [uni(13.0, 14.0), uni(11.0, 12.5), uni(17.0, 18.5)];

    let u = normalize([1.0, uni(0.0, 0.5), uni(-0.4, 0.4)]);
    let reach = ellipsoid_reach(kr, u);
    let tumor_radius = uni(9.5, 10.5);
    let tumor_center: Vec3 = core::array::from_fn(|a| kc[a] + u[a] * 0.7 * reach);

    let hilum_x = kc[0] - 0.5 * kr[0];
    let vein_trunk = Segment {
        from: [hilum_x, kc[1] + 3.0, kc[2]],
        to: [base[0] - 29.5, kc[1] + 6.0 + uni(-2.0, 2.0), kc[2] + 3.0],
        radius: 2.2,
    };
    let vb = vein_trunk.point_at(0.5);
    let vein_branch = Segment {
        from: vb,
        to: [vb[0] - 2.0, vb[1] + 4.0, vb[2] + 12.0 + uni(-2.0, 2.0)],
        radius: 1.3,
    };
    let artery_trunk = Segment {
        from: [hilum_x, kc[1] - 3.0, kc[2]],
        to: [base[0] - 29.5, kc[1] - 6.0 + uni(-2.0, 2.0), kc[2] - 3.0],
        radius: 1.8,
    };
    let ab = artery_trunk.point_at(0.6);
    let artery_branch = Segment {
        from: ab,
        to: [ab[0] - 2.0, ab[1] - 4.0, ab[2] - 12.0 + uni(-2.0, 2.0)],
        radius: 0.9,
    };

    let cyst = options.cyst.then(|| {
        // Below and behind the kidney, away from the tumor and vessels.
        let d = normalize([0.0, -1.0, 1.0]);
        let r = 8.5;
        let dist = ellipsoid_reach(kr, d) + 2.5 + r;
        let c: Vec3 = core::array::from_fn(|a| kc[a] + d[a] * dist);
        (c, r)
    });

    let hu_kidney = uni(30.0, 40.0);
    let hu_tumor = uni(50.0, 70.0);
    let hu_vein = uni(150.0, 200.0);
    let hu_artery = uni(250.0, 300.0);
    let hu_cyst = uni(3.0, 10.0);
    let phase: [f64; 3] = [uni(0.0, 6.28), uni(0.0, 6.28), uni(0.0, 6.28)];

    let header = VolumeHeader::new(size, TARGET_SPACING)?;
    let n = header.voxel_count();
    let mut labels = Vec::with_capacity(n);
    let mut image = Vec::with_capacity(n);
    let noise = Normal::new(0.0, options.noise_hu).map_err(|e| Error::arg(alloc::format!("{e}")))?;
    let two_pi = 2.0 * core::f64::consts::PI;
    let tr2 = tumor_radius * tumor_radius;
    let in_tubes = |segs: &[Segment], p: Vec3| segs.iter().any(|s| s.dist2(p) <= s.radius * s.radius);
    let veins = [vein_trunk, vein_branch];
    let arteries = [artery_trunk, artery_branch];

    for z in 0..size[2] {
        for y in 0..size[1] {
            for x in 0..size[0] {
                let p = [x as f64, y as f64, z as f64];
                let in_kidney = (0..3)
                    .map(|a| ((p[a] - kc[a]) / kr[a]) * ((p[a] - kc[a]) / kr[a]))
                    .sum::<f64>()
                    <= 1.0;
                let class = if dist2(p, tumor_center) <= tr2 {
                    Class::Tumor
                } else if in_tubes(&arteries, p) {
                    Class::Artery
                } else if in_tubes(&veins, p) {
                    Class::Vein
                } else if in_kidney {
                    Class::Kidney
                } else {
                    Class::Background
                };
                let in_cyst = cyst.is_some_and(|(c, r)| dist2(p, c) <= r * r);
                let hu = match class {
                    Class::Tumor => hu_tumor,
                    Class::Artery => hu_artery,
                    Class::Vein => hu_vein,
                    Class::Kidney => hu_kidney,
                    Class::Background if in_cyst => hu_cyst,
                    Class::Background => {
                        20.0 * libm::sin(two_pi * p[0] / 37.0 + phase[0]) * libm::cos(two_pi * p[1] / 41.0 + phase[1])
                            + 15.0 * libm::sin(two_pi * p[2] / 29.0 + phase[2])
                    }
                };
                let eps = if options.noise_hu > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                labels.push(class.code());
                image.push((hu + eps) as f32);
            }
        }
    }

    Ok(Phantom {
        image: ScalarVolume::scalar(header.clone(), image)?,
        labels: LabelVolume::labels(header, labels)?,
        info: PhantomInfo {
            kidney_center: kc,
            kidney_radii: kr,
            tumor_center,
            tumor_radius,
            vein: veins.to_vec(),
            artery: arteries.to_vec(),
            cyst,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cc3d::{connected_components, Connectivity};

    #[test]
    fn deterministic_and_complete() {
        let a = generate_phantom_with(3, [64; 3], &PhantomOptions::default()).unwrap();
        let b = generate_phantom_with(3, [64; 3], &PhantomOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.labels.classes_present().iter().all(|&p| p));
        let c = generate_phantom_with(4, [64; 3], &PhantomOptions::default()).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn structures_are_single_components() {
        for seed in 0..6 {
            let p = generate_phantom_with(seed, [64; 3], &PhantomOptions { cyst: true, ..Default::default() }).unwrap();
            for class in Class::STRUCTURES {
                let set = connected_components(&p.labels.class_mask(class), Connectivity::TwentySix);
                assert_eq!(set.len(), 1, "seed {seed} {class:?}");
                if class == Class::Tumor {
                    assert!(set.components[0].size > 2000);
                }
            }
        }
    }

    #[test]
    fn cyst_is_large_fluid_background() {
        let p = generate_phantom_with(1, [64; 3], &PhantomOptions { cyst: true, ..Default::default() }).unwrap();
        let (c, r) = p.info.cyst.unwrap();
        let vox = crate::pipeline::stub::BlobRegion::Sphere { center: c, radius: r }.voxels([64; 3]);
        assert!(vox.len() > 2000);
        assert!(vox.iter().all(|&v| *p.labels.get(v) == 0));
        let mean = vox.iter().map(|&v| *p.image.get(v) as f64).sum::<f64>() / vox.len() as f64;
        assert!(mean < 20.0, "{mean}");
    }

    #[test]
    fn rejects_small_size() {
        assert!(generate_phantom(0, [63, 64, 64]).is_err());
    }
}
