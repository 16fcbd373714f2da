//! Slow, independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the FFT or SVD code under test.

#![allow(dead_code)]

use lorapt::segmetrics::Mask3D;
use lorapt::Tensor3;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, n1: usize, n2: usize, n3: usize) -> Tensor3 {
    Tensor3::from_fn(n1, n2, n3, |_, _, _| rng.random_range(-1.0..1.0))
}

/// `C(:,:,k) = Σ_m A(:,:,(k−m) mod n3) · B(:,:,m)` by direct summation.
pub fn circular_tprod(a: &Tensor3, b: &Tensor3) -> Tensor3 {
    let (n1, n2, n3) = a.shape();
    let n4 = b.n2();
    let mut c = Tensor3::zeros(n1, n4, n3);
    for k in 0..n3 {
        for m in 0..n3 {
            let ka = (k + n3 - m) % n3;
            for i in 0..n1 {
                for j in 0..n4 {
                    let mut s = 0.0;
                    for t in 0..n2 {
                        s += a.get(i, t, ka) * b.get(t, j, m);
                    }
                    c.set(i, j, k, c.get(i, j, k) + s);
                }
            }
        }
    }
    c
}

/// Unnormalized DFT along the third mode, by the O(n3²) sum.
pub fn naive_dft(a: &Tensor3) -> Vec<DMatrix<Complex64>> {
    let (n1, n2, n3) = a.shape();
    (0..n3)
        .map(|k| {
            DMatrix::from_fn(n1, n2, |i, j| {
                (0..n3)
                    .map(|m| {
                        let ang = -2.0 * std::f64::consts::PI * (k * m) as f64 / n3 as f64;
                        Complex64::from_polar(a.get(i, j, m), ang)
                    })
                    .sum()
            })
        })
        .collect()
}

/// Dense DFT matrix `F[k, m] = ω^{km}`, `ω = e^{−2πi/n}`.
pub fn dft_matrix(n: usize) -> DMatrix<Complex64> {
    DMatrix::from_fn(n, n, |k, m| {
        Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * (k * m) as f64 / n as f64)
    })
}

/// Kronecker product of two complex matrices.
pub fn kron(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let (p, q) = a.shape();
    let (r, s) = b.shape();
    DMatrix::from_fn(p * r, q * s, |i, j| a[(i / r, j / s)] * b[(i % r, j % s)])
}

/// Block circulant matrix of `a` built from the definition: block `(i, j)`
/// is frontal slice `(i − j) mod n3`.
pub fn circulant_by_definition(a: &Tensor3) -> DMatrix<f64> {
    let (n1, n2, n3) = a.shape();
    DMatrix::from_fn(n1 * n3, n2 * n3, |r, c| {
        let (bi, i) = (r / n1, r % n1);
        let (bj, j) = (c / n2, c % n2);
        a.get(i, j, (bi + n3 - bj) % n3)
    })
}

/// One-sided Jacobi singular values of a real matrix, descending.
pub fn jacobi_singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let mut m = if a.nrows() >= a.ncols() { a.clone() } else { a.transpose() };
    let n = m.ncols();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = m.column(p).norm_squared();
                let beta: f64 = m.column(q).norm_squared();
                let gamma: f64 = m.column(p).dot(&m.column(q));
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt().max(f64::MIN_POSITIVE));
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m.nrows() {
                    let (x, y) = (m[(i, p)], m[(i, q)]);
                    m[(i, p)] = c * x - s * y;
                    m[(i, q)] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|j| m.column(j).norm()).collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

/// Singular values of a complex matrix via its real embedding
/// `[[Re, −Im], [Im, Re]]`, whose spectrum repeats each value twice.
pub fn complex_singular_values(a: &DMatrix<Complex64>) -> Vec<f64> {
    let (m, n) = a.shape();
    let e = DMatrix::from_fn(2 * m, 2 * n, |i, j| {
        let z = a[(i % m, j % n)];
        match (i < m, j < n) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    });
    jacobi_singular_values(&e).into_iter().step_by(2).collect()
}

/// Per-Fourier-slice singular values from the naive DFT and Jacobi.
pub fn oracle_fourier_sigmas(a: &Tensor3) -> Vec<Vec<f64>> {
    naive_dft(a).iter().map(complex_singular_values).collect()
}

pub fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3], density: f64) -> Mask3D {
    let n = dims[0] * dims[1] * dims[2];
    let vox = (0..n).map(|_| rng.random_bool(density) as u8).collect();
    Mask3D::new(dims, spacing, vox).unwrap()
}

pub fn brute_dice(a: &Mask3D, b: &Mask3D) -> f64 {
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (x, y) in a.voxels().iter().zip(b.voxels()) {
        inter += (*x & *y) as usize;
        sa += *x as usize;
        sb += *y as usize;
    }
    if sa + sb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sa + sb) as f64
    }
}

/// Foreground voxels with a face neighbour that is background or outside.
pub fn brute_boundary(m: &Mask3D) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = m.dims();
    let mut out = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if !m.get(x, y, z) {
                    continue;
                }
                let p = [x as i64, y as i64, z as i64];
                let edge = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)].iter().any(|&(ax, s)| {
                    let mut q = p;
                    q[ax] += s;
                    q.iter().zip([nx, ny, nz]).any(|(&c, n)| c < 0 || c >= n as i64)
                        || !m.get(q[0] as usize, q[1] as usize, q[2] as usize)
                });
                if edge {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], sp: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    (0..3)
                        .map(|i| ((a[i] as f64 - b[i] as f64) * sp[i]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn nearest_rank95(mut d: Vec<f64>) -> f64 {
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let k = (95 * d.len()).div_ceil(100).max(1);
    d[k - 1]
}

/// All-pairs HD95 over boundary voxels; `None` if either mask is empty.
pub fn brute_hd95(a: &Mask3D, b: &Mask3D) -> Option<f64> {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let sp = a.spacing();
    Some(nearest_rank95(directed_distances(&ba, &bb, sp)).max(nearest_rank95(directed_distances(&bb, &ba, sp))))
}

/// Classical Hausdorff distance between boundary sets.
pub fn brute_hausdorff(a: &Mask3D, b: &Mask3D) -> Option<f64> {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let sp = a.spacing();
    let m = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Some(m(directed_distances(&ba, &bb, sp)).max(m(directed_distances(&bb, &ba, sp))))
}

/// Recursive-free flood fill with 26-connectivity; returns a label per voxel
/// (0 = background) and each component's size.
pub fn flood_fill_labels(m: &Mask3D) -> (Vec<usize>, Vec<usize>) {
    let [nx, ny, nz] = m.dims();
    let mut label = vec![0usize; nx * ny * nz];
    let mut sizes = Vec::new();
    for start in 0..label.len() {
        if m.voxels()[start] == 0 || label[start] != 0 {
            continue;
        }
        let id = sizes.len() + 1;
        let mut size = 0;
        let mut stack = vec![start];
        label[start] = id;
        while let Some(v) = stack.pop() {
            size += 1;
            let [x, y, z] = m.coords(v);
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dz in -1i64..=1 {
                        let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64 {
                            continue;
                        }
                        let q = m.index(qx as usize, qy as usize, qz as usize);
                        if m.voxels()[q] == 1 && label[q] == 0 {
                            label[q] = id;
                            stack.push(q);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    (label, sizes)
}

/// Drops components whose volume is below the threshold.
pub fn flood_fill_filter(m: &Mask3D, min_volume_mm3: f64) -> Vec<u8> {
    let (label, sizes) = flood_fill_labels(m);
    let vv = m.voxel_volume();
    label
        .iter()
        .map(|&l| (l != 0 && sizes[l - 1] as f64 * vv >= min_volume_mm3) as u8)
        .collect()
}

pub fn rel_diff(a: &Tensor3, b: &Tensor3) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}
