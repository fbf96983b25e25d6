//! 3D connected-component labeling, per-component statistics and block
//! average pooling.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volume::{Mask, ScalarVolume, Vec3, Volume, VolumeHeader};

/// Voxel neighborhood used for labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbors only.
    #[serde(rename = "6")]
    Six,
    /// Face, edge and corner neighbors.
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    /// Neighbor offsets that precede a voxel in x-fastest scan order.
    fn backward_offsets(self) -> &'static [[isize; 3]] {
        const SIX: [[isize; 3]; 3] = [[-1, 0, 0], [0, -1, 0], [0, 0, -1]];
        const TWENTY_SIX: [[isize; 3]; 13] = [
            [-1, 0, 0],
            [-1, -1, 0],
            [0, -1, 0],
            [1, -1, 0],
            [-1, -1, -1],
            [0, -1, -1],
            [1, -1, -1],
            [-1, 0, -1],
            [0, 0, -1],
            [1, 0, -1],
            [-1, 1, -1],
            [0, 1, -1],
            [1, 1, -1],
        ];
        match self {
            Connectivity::Six => &SIX,
            Connectivity::TwentySix => &TWENTY_SIX,
        }
    }
}

/// Axis-aligned voxel box, `lower` inclusive and `upper` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub lower: [usize; 3],
    pub upper: [usize; 3],
    pub expansion: f64,
}

impl RoiBox {
    pub fn extent(&self) -> [usize; 3] {
        [
            self.upper[0] - self.lower[0],
            self.upper[1] - self.lower[1],
            self.upper[2] - self.lower[2],
        ]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lower[a] && p[a] < self.upper[a])
    }

    pub fn contains_point(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.lower[a] as f64 && p[a] <= (self.upper[a] - 1) as f64)
    }
}

/// Statistics for one connected component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub id: u32,
    pub size: usize,
    /// Mean voxel index of the component.
    pub centroid: Vec3,
    pub mean_hu: Option<f64>,
    pub max_hu: Option<f64>,
    pub bbox: RoiBox,
}

/// Result of labeling a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    /// 0 for background, `1..=K` for component ids.
    pub label_map: Volume<u32>,
    pub components: Vec<Component>,
    pub connectivity: Connectivity,
}

/// Serializable view of a [`ComponentSet`] without the label map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub connectivity: Connectivity,
    pub shape: [usize; 3],
    pub foreground_voxels: usize,
    pub components: Vec<Component>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Largest component; ties go to the smallest id.
    pub fn largest(&self) -> Option<&Component> {
        self.components
            .iter()
            .fold(None, |best: Option<&Component>, c| match best {
                Some(b) if b.size >= c.size => Some(b),
                _ => Some(c),
            })
    }

    pub fn component(&self, id: u32) -> Option<&Component> {
        self.components.get(id.checked_sub(1)? as usize)
    }

    /// Mask of the voxels whose component id satisfies `keep`.
    pub fn select(&self, mut keep: impl FnMut(&Component) -> bool) -> Mask {
        let flags: Vec<bool> = core::iter::once(false)
            .chain(self.components.iter().map(&mut keep))
            .collect();
        self.label_map.map(|&id| flags[id as usize])
    }

    pub fn report(&self) -> ComponentReport {
        ComponentReport {
            connectivity: self.connectivity,
            shape: self.label_map.shape(),
            foreground_voxels: self.components.iter().map(|c| c.size).sum(),
            components: self.components.clone(),
        }
    }
}

/// Neumaier compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub(crate) fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if libm::fabs(self.sum) >= libm::fabs(v) {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) -> u32 {
    let ra = find(parent, a);
    let rb = find(parent, b);
    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
    parent[hi as usize] = lo;
    lo
}

/// Labels the connected foreground components of `mask`.
///
/// Ids are assigned in the x-fastest scan order of each component's first voxel.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> ComponentSet {
    label_impl(mask, connectivity, None)
}

/// As [`connected_components`], additionally collecting per-component intensity
/// statistics from `image`.
pub fn connected_components_with_image(
    mask: &Mask,
    connectivity: Connectivity,
    image: &ScalarVolume,
) -> Result<ComponentSet> {
    mask.header().check_same_shape(image.header())?;
    Ok(label_impl(mask, connectivity, Some(image)))
}

fn label_impl(mask: &Mask, connectivity: Connectivity, image: Option<&ScalarVolume>) -> ComponentSet {
    let header = mask.header();
    let [nx, ny, nz] = header.shape;
    let data = mask.data();
    let mut provisional = vec![0u32; data.len()];
    // parent[0] is a dummy so provisional label k indexes parent[k].
    let mut parent: Vec<u32> = vec![0];
    let offsets = connectivity.backward_offsets();

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !data[i] {
                    continue;
                }
                let mut label = 0u32;
                for off in offsets {
                    let (xx, yy, zz) = (
                        x as isize + off[0],
                        y as isize + off[1],
                        z as isize + off[2],
                    );
                    if xx < 0
                        || yy < 0
                        || zz < 0
                        || xx >= nx as isize
                        || yy >= ny as isize
                    {
                        continue;
                    }
                    let j = xx as usize + nx * (yy as usize + ny * zz as usize);
                    let nl = provisional[j];
                    if nl == 0 {
                        continue;
                    }
                    label = if label == 0 {
                        find(&mut parent, nl)
                    } else {
                        union(&mut parent, label, nl)
                    };
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[i] = label;
            }
        }
    }

    // Roots are the smallest provisional label of their set, which is the
    // label of the set's first voxel; ascending roots give scan-order ids.
    let mut final_id = vec![0u32; parent.len()];
    let mut next = 0u32;
    for k in 1..parent.len() as u32 {
        let r = find(&mut parent, k);
        if r == k {
            next += 1;
            final_id[k as usize] = next;
        }
    }
    for k in 1..parent.len() as u32 {
        let r = find(&mut parent, k);
        final_id[k as usize] = final_id[r as usize];
    }

    let count = next as usize;
    let mut sizes = vec![0usize; count];
    let mut sums = vec![[CompensatedSum::default(); 3]; count];
    let mut hu = vec![CompensatedSum::default(); count];
    let mut hu_max = vec![f64::NEG_INFINITY; count];
    let mut lo = vec![[usize::MAX; 3]; count];
    let mut hi = vec![[0usize; 3]; count];
    for (i, p) in provisional.iter_mut().enumerate() {
        if *p == 0 {
            continue;
        }
        let id = final_id[*p as usize];
        *p = id;
        let c = (id - 1) as usize;
        let xyz = header.coords(i);
        sizes[c] += 1;
        for a in 0..3 {
            sums[c][a].add(xyz[a] as f64);
            lo[c][a] = lo[c][a].min(xyz[a]);
            hi[c][a] = hi[c][a].max(xyz[a]);
        }
        if let Some(img) = image {
            let v = img.data()[i] as f64;
            hu[c].add(v);
            hu_max[c] = hu_max[c].max(v);
        }
    }

    let components = (0..count)
        .map(|c| {
            let n = sizes[c] as f64;
            Component {
                id: c as u32 + 1,
                size: sizes[c],
                centroid: [
                    sums[c][0].value() / n,
                    sums[c][1].value() / n,
                    sums[c][2].value() / n,
                ],
                mean_hu: image.map(|_| hu[c].value() / n),
                max_hu: image.map(|_| hu_max[c]),
                bbox: RoiBox {
                    lower: lo[c],
                    upper: [hi[c][0] + 1, hi[c][1] + 1, hi[c][2] + 1],
                    expansion: 1.0,
                },
            }
        })
        .collect();

    ComponentSet {
        label_map: mask.like(provisional),
        components,
        connectivity,
    }
}

/// Keeps only the largest component (ties: smallest id). Empty in, empty out.
pub fn max_component(mask: &Mask, connectivity: Connectivity) -> Mask {
    let set = connected_components(mask, connectivity);
    match set.largest().map(|c| c.id) {
        Some(id) => set.label_map.map(|&l| l == id),
        None => Mask::empty_like(mask.header()),
    }
}

/// Euclidean distance between two voxel-space points, optionally scaled to mm.
pub fn centroid_distance(a: Vec3, b: Vec3, spacing: Option<Vec3>) -> f64 {
    let s = spacing.unwrap_or([1.0; 3]);
    let d2: f64 = (0..3)
        .map(|i| {
            let d = (a[i] - b[i]) * s[i];
            d * d
        })
        .sum();
    libm::sqrt(d2)
}

/// Non-overlapping block means of a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledGrid {
    pub shape: [usize; 3],
    pub block: [usize; 3],
    pub values: Vec<f64>,
}

impl PooledGrid {
    #[inline]
    pub fn value(&self, [bx, by, bz]: [usize; 3]) -> f64 {
        self.values[bx + self.shape[0] * (by + self.shape[1] * bz)]
    }

    /// Pooled value of the block containing voxel `xyz`.
    #[inline]
    pub fn value_at_voxel(&self, xyz: [usize; 3]) -> f64 {
        self.value([
            xyz[0] / self.block[0],
            xyz[1] / self.block[1],
            xyz[2] / self.block[2],
        ])
    }
}

/// Block average pooling with kernel = stride = `block`.
///
/// Ragged edge blocks average over their in-bounds voxels only.
pub fn avg_pool3(mask: &Mask, block: [usize; 3]) -> crate::error::Result<PooledGrid> {
    if block.contains(&0) {
        return Err(crate::error::Error::arg("pooling block must be >= 1 per axis"));
    }
    let h: &VolumeHeader = mask.header();
    let shape = [
        h.shape[0].div_ceil(block[0]),
        h.shape[1].div_ceil(block[1]),
        h.shape[2].div_ceil(block[2]),
    ];
    let nb = shape[0] * shape[1] * shape[2];
    let mut hits = vec![0u32; nb];
    for (i, &b) in mask.data().iter().enumerate() {
        if b {
            let [x, y, z] = h.coords(i);
            hits[x / block[0] + shape[0] * (y / block[1] + shape[1] * (z / block[2]))] += 1;
        }
    }
    let mut values = vec![0.0; nb];
    for bz in 0..shape[2] {
        let ez = block[2].min(h.shape[2] - bz * block[2]);
        for by in 0..shape[1] {
            let ey = block[1].min(h.shape[1] - by * block[1]);
            for bx in 0..shape[0] {
                let ex = block[0].min(h.shape[0] - bx * block[0]);
                let k = bx + shape[0] * (by + shape[1] * bz);
                values[k] = hits[k] as f64 / (ex * ey * ez) as f64;
            }
        }
    }
    Ok(PooledGrid {
        shape,
        block,
        values,
    })
}
