//! Segmentation metrics on dense binary volumes: Dice, HD95, soft Dice loss
//! and small-component removal.
//!
//! Conventions, pinned because HD95 values are not comparable across them:
//! boundary voxels are foreground voxels with a face neighbour (6-connectivity)
//! that is background or outside the volume; percentiles are nearest-rank;
//! connected components use 26-connectivity; Dice of two empty masks is 1.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Smoothing term in the soft Dice denominator.
pub const DICE_LOSS_EPS: f64 = 1e-5;

/// Post-processing threshold used for hippocampus masks, in mm³.
pub const DEFAULT_MIN_COMPONENT_MM3: f64 = 1000.0;

/// Binary volume, row-major over `(x, y, z)` with `z` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<u8>,
}

impl Mask3D {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<u8>) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "{} voxels do not fill dims {dims:?}",
                voxels.len()
            )));
        }
        if voxels.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { dims, spacing, voxels })
    }

    pub fn empty(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0)
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let z = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let x = idx / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[self.index(x, y, z)] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.index(x, y, z);
        self.voxels[i] = on as u8;
    }

    /// Foreground voxels with at least one background or out-of-bounds face neighbour.
    pub fn boundary(&self) -> Vec<[usize; 3]> {
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::new();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    if !self.get(x, y, z) {
                        continue;
                    }
                    let edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                    if edge
                        || !self.get(x - 1, y, z)
                        || !self.get(x + 1, y, z)
                        || !self.get(x, y - 1, z)
                        || !self.get(x, y + 1, z)
                        || !self.get(x, y, z - 1)
                        || !self.get(x, y, z + 1)
                    {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

/// Predicted foreground probabilities, same layout as [`Mask3D`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl ProbVolume {
    pub fn new(dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "{} values do not fill dims {dims:?}",
                values.len()
            )));
        }
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        Ok(Self { dims, values })
    }

    pub fn from_mask(m: &Mask3D) -> Self {
        Self {
            dims: m.dims,
            values: m.voxels.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn check_pair(a: &Mask3D, b: &Mask3D) -> Result<()> {
    if a.dims != b.dims || a.spacing != b.spacing {
        return Err(Error::invalid(format!(
            "mask geometry mismatch: dims {:?} / {:?}, spacing {:?} / {:?}",
            a.dims, b.dims, a.spacing, b.spacing
        )));
    }
    Ok(())
}

/// `2·|A∩B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    check_pair(a, b)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.voxels.iter().zip(&b.voxels) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Exact squared Euclidean distance transform along one axis
/// (lower envelope of parabolas), distances scaled by `spacing`.
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64], v: &mut Vec<usize>, zs: &mut Vec<f64>) {
    let n = f.len();
    let w = spacing * spacing;
    v.clear();
    zs.clear();
    let key = |q: usize| f[q] + w * (q * q) as f64;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zs.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = (key(q) - key(p)) / (2.0 * w * (q - p) as f64);
                    if s <= *zs.last().unwrap() {
                        v.pop();
                        zs.pop();
                    } else {
                        v.push(q);
                        zs.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while j + 1 < v.len() && zs[j + 1] < p as f64 {
            j += 1;
        }
        let q = v[j];
        let d = (p as f64 - q as f64) * spacing;
        *o = d * d + f[q];
    }
}

/// Squared distance (mm²) from every voxel to the nearest of `sites`.
fn squared_distance_field(dims: [usize; 3], spacing: [f64; 3], sites: &[[usize; 3]]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let idx = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
    let mut g = vec![f64::INFINITY; nx * ny * nz];
    for &[x, y, z] in sites {
        g[idx(x, y, z)] = 0.0;
    }
    let (mut v, mut zs) = (Vec::new(), Vec::new());
    // axis order x, y, z: partial sums accumulate dx², then dy², then dz²
    let mut line = vec![0.0; nx];
    let mut res = vec![0.0; nx];
    for y in 0..ny {
        for z in 0..nz {
            for x in 0..nx {
                line[x] = g[idx(x, y, z)];
            }
            edt_1d(&line, spacing[0], &mut res, &mut v, &mut zs);
            for x in 0..nx {
                g[idx(x, y, z)] = res[x];
            }
        }
    }
    let mut line = vec![0.0; ny];
    let mut res = vec![0.0; ny];
    for x in 0..nx {
        for z in 0..nz {
            for y in 0..ny {
                line[y] = g[idx(x, y, z)];
            }
            edt_1d(&line, spacing[1], &mut res, &mut v, &mut zs);
            for y in 0..ny {
                g[idx(x, y, z)] = res[y];
            }
        }
    }
    let mut res = vec![0.0; nz];
    for x in 0..nx {
        for y in 0..ny {
            let start = idx(x, y, 0);
            let line = g[start..start + nz].to_vec();
            edt_1d(&line, spacing[2], &mut res, &mut v, &mut zs);
            g[start..start + nz].copy_from_slice(&res);
        }
    }
    g
}

/// Nearest-rank percentile: the value at 1-based rank `⌈p·n/100⌉` of the sorted data.
pub fn nearest_rank_percentile(values: &mut [f64], percent: usize) -> f64 {
    assert!(!values.is_empty(), "percentile of empty data");
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = values.len();
    let rank = (percent * n).div_ceil(100).max(1);
    values[rank - 1]
}

/// Boundary-to-boundary minimum distances from `from` to `to`, in mm.
fn directed_distances(from: &[[usize; 3]], to: &Mask3D, to_boundary: &[[usize; 3]]) -> Vec<f64> {
    let field = squared_distance_field(to.dims, to.spacing, to_boundary);
    from.iter()
        .map(|&[x, y, z]| field[to.index(x, y, z)].sqrt())
        .collect()
}

/// 95th-percentile symmetric Hausdorff distance between mask boundaries, in mm.
pub fn hd95(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    check_pair(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("HD95 of an empty mask".into()));
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    let mut ab = directed_distances(&ba, b, &bb);
    let mut ba_d = directed_distances(&bb, a, &ba);
    Ok(nearest_rank_percentile(&mut ab, 95).max(nearest_rank_percentile(&mut ba_d, 95)))
}

fn check_batch(pred: &[ProbVolume], target: &[Mask3D]) -> Result<()> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::invalid(format!(
            "batch sizes {} and {} must be equal and nonzero",
            pred.len(),
            target.len()
        )));
    }
    for (n, (p, t)) in pred.iter().zip(target).enumerate() {
        if p.dims != t.dims {
            return Err(Error::invalid(format!(
                "sample {n}: prediction dims {:?} vs target {:?}",
                p.dims, t.dims
            )));
        }
    }
    Ok(())
}

/// Soft Dice loss `−(1/N) Σ_n 2Σyŷ / (Σy + Σŷ + ε)`.
pub fn dice_loss(pred: &[ProbVolume], target: &[Mask3D]) -> Result<f64> {
    Ok(dice_loss_with_grad(pred, target)?.0)
}

/// Loss and its gradient with respect to every predicted probability.
pub fn dice_loss_with_grad(pred: &[ProbVolume], target: &[Mask3D]) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(pred, target)?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let (l, g) = soft_dice_term(&p.values, &t.voxels);
        loss += l / n;
        grads.push(g.into_iter().map(|x| x / n).collect());
    }
    Ok((loss, grads))
}

/// `−2Σyŷ / (Σy + Σŷ + ε)` for one sample and its gradient in `ŷ`.
pub(crate) fn soft_dice_term(pred: &[f64], target: &[u8]) -> (f64, Vec<f64>) {
    let mut inter = 0.0;
    let mut denom = DICE_LOSS_EPS;
    for (&p, &y) in pred.iter().zip(target) {
        let y = y as f64;
        inter += y * p;
        denom += y + p;
    }
    let loss = -2.0 * inter / denom;
    let grad = target
        .iter()
        .map(|&y| -(2.0 * y as f64 / denom - 2.0 * inter / (denom * denom)))
        .collect();
    (loss, grad)
}

/// Foreground components under 26-connectivity, as lists of voxel indices.
pub fn connected_components(m: &Mask3D) -> Vec<Vec<usize>> {
    let [nx, ny, nz] = m.dims;
    let mut seen = vec![false; m.voxels.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..m.voxels.len() {
        if m.voxels[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let [x, y, z] = m.coords(i);
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dz in -1i64..=1 {
                        let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64 {
                            continue;
                        }
                        let j = m.index(xx as usize, yy as usize, zz as usize);
                        if m.voxels[j] == 1 && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// Clears every 26-connected component whose volume is below `min_volume_mm3`.
pub fn remove_small_components(m: &Mask3D, min_volume_mm3: f64) -> Mask3D {
    let vv = m.voxel_volume();
    let mut out = m.clone();
    for comp in connected_components(m) {
        if (comp.len() as f64) * vv < min_volume_mm3 {
            for i in comp {
                out.voxels[i] = 0;
            }
        }
    }
    out
}
