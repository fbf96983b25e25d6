//! Brute-force reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::VecDeque;

use kipa_core::volume::{Mask, Volume, VolumeHeader};
use rand::Rng;

/// Random mask; `density` is the foreground probability per voxel.
pub fn random_mask(rng: &mut impl Rng, shape: [usize; 3], density: f64) -> Mask {
    let h = VolumeHeader::new(shape, [1.0; 3]).unwrap();
    let n = shape.iter().product();
    Volume::new(h, (0..n).map(|_| rng.random_bool(density)).collect()).unwrap()
}

/// Random mask with unit-free spacing drawn from `[0.5, 2]`.
pub fn random_mask_with_spacing(rng: &mut impl Rng, shape: [usize; 3], density: f64) -> Mask {
    let spacing = [0; 3].map(|_| rng.random_range(0.5..2.0));
    let h = VolumeHeader::new(shape, spacing).unwrap();
    let n = shape.iter().product();
    Volume::new(h, (0..n).map(|_| rng.random_bool(density)).collect()).unwrap()
}

fn offsets(six: bool) -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    for dz in -1..=1i64 {
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                if manhattan == 0 || (six && manhattan > 1) {
                    continue;
                }
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// Breadth-first flood fill. Components are numbered from 1 in the scan
/// order of their first voxel; background is 0.
pub fn flood_fill_labels(mask: &Mask, six: bool) -> Vec<u32> {
    let [nx, ny, nz] = mask.shape();
    let d = mask.data();
    let mut labels = vec![0u32; d.len()];
    let mut next = 0u32;
    let offs = offsets(six);
    for start in 0..d.len() {
        if !d[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (x, y, z) = ((i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64);
            for o in &offs {
                let (a, b, c) = (x + o[0], y + o[1], z + o[2]);
                if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                    continue;
                }
                let j = a as usize + nx * (b as usize + ny * c as usize);
                if d[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    labels
}

/// True when two labelings induce the same partition of the foreground.
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    use std::collections::HashMap;
    if a.len() != b.len() {
        return false;
    }
    let mut ab: HashMap<u32, u32> = HashMap::new();
    let mut ba: HashMap<u32, u32> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if (x == 0) != (y == 0) {
            return false;
        }
        if *ab.entry(x).or_insert(y) != y || *ba.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

pub fn brute_dsc(a: &Mask, b: &Mask) -> f64 {
    let na = a.data().iter().filter(|&&v| v).count();
    let nb = b.data().iter().filter(|&&v| v).count();
    let both = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Foreground voxels with a face neighbor that is background or outside the volume.
pub fn brute_surface(mask: &Mask) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = mask.shape();
    let inside = |x: i64, y: i64, z: i64| {
        x >= 0
            && y >= 0
            && z >= 0
            && x < nx as i64
            && y < ny as i64
            && z < nz as i64
            && mask.data()[x as usize + nx * (y as usize + ny * z as usize)]
    };
    let mut out = Vec::new();
    for z in 0..nz as i64 {
        for y in 0..ny as i64 {
            for x in 0..nx as i64 {
                if !inside(x, y, z) {
                    continue;
                }
                if offsets(true).iter().any(|o| !inside(x + o[0], y + o[1], z + o[2])) {
                    out.push([x as usize, y as usize, z as usize]);
                }
            }
        }
    }
    out
}

fn directed(from: &[[usize; 3]], to: &[[usize; 3]], s: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    (0..3)
                        .map(|a| {
                            let d = (p[a] as f64 - q[a] as f64) * s[a];
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// All-pairs (Hausdorff, average Hausdorff) over surface voxels.
pub fn brute_hd_avd(a: &Mask, b: &Mask, spacing: [f64; 3]) -> (f64, f64) {
    let (sa, sb) = (brute_surface(a), brute_surface(b));
    if sa.is_empty() && sb.is_empty() {
        return (0.0, 0.0);
    }
    if sa.is_empty() || sb.is_empty() {
        return (f64::INFINITY, f64::INFINITY);
    }
    let ab = directed(&sa, &sb, spacing);
    let ba = directed(&sb, &sa, spacing);
    let hd = ab.iter().chain(&ba).copied().fold(0.0, f64::max);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (hd, (mean(&ab) + mean(&ba)) / 2.0)
}

/// Nearest-neighbor resampling by exhaustive search over input voxel centers.
/// Equidistant candidates resolve to the larger index.
pub fn brute_nearest<T: Copy>(input: &Volume<T>, out_shape: [usize; 3], out_spacing: [f64; 3]) -> Vec<T> {
    let h = input.header();
    let [nx, ny, nz] = h.shape;
    let mut out = Vec::new();
    for k in 0..out_shape[2] {
        for j in 0..out_shape[1] {
            for i in 0..out_shape[0] {
                let target = [
                    i as f64 * out_spacing[0],
                    j as f64 * out_spacing[1],
                    k as f64 * out_spacing[2],
                ];
                let mut best: Option<(f64, usize)> = None;
                for z in 0..nz {
                    for y in 0..ny {
                        for x in 0..nx {
                            let p = [x as f64 * h.spacing[0], y as f64 * h.spacing[1], z as f64 * h.spacing[2]];
                            let d: f64 = (0..3).map(|a| (p[a] - target[a]).powi(2)).sum();
                            let idx = x + nx * (y + ny * z);
                            best = match best {
                                Some((b, bi)) => {
                                    let tol = 1e-9 * (1.0 + b);
                                    if d < b - tol || (d <= b + tol && idx > bi) {
                                        Some((d.min(b), idx))
                                    } else {
                                        Some((b, bi))
                                    }
                                }
                                None => Some((d, idx)),
                            };
                        }
                    }
                }
                out.push(input.data()[best.expect("nonempty input").1]);
            }
        }
    }
    out
}

/// Mirrors a volume along `axis`.
pub fn mirror<T: Copy>(v: &Volume<T>, axis: usize) -> Volume<T> {
    let [nx, ny, nz] = v.shape();
    let mut out = Vec::with_capacity(v.data().len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut p = [x, y, z];
                p[axis] = v.shape()[axis] - 1 - p[axis];
                out.push(v.data()[p[0] + nx * (p[1] + ny * p[2])]);
            }
        }
    }
    Volume::new(v.header().clone(), out).unwrap()
}
