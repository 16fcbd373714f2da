//! Tensor SVD computed slice by slice in the Fourier domain.
//!
//! Only the first `⌊n3/2⌋ + 1` Fourier slices are decomposed. The remaining
//! slices are filled with the complex conjugates of their mirrors, which is
//! what makes the inverse transform of every factor exactly real. The DC
//! slice (and the Nyquist slice for even `n3`) is real and goes through the
//! real SVD.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, MatSvd};
use crate::tensor3::{
    fft_mode3, fnorm, half_spectrum, ifft_real_scaled, mirror_spectrum, tprod, ttranspose,
    ComplexTensor3, Tensor3,
};

/// Default relative threshold for [`tubal_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// Full factorization `a = u * s * vᵀ`.
#[derive(Clone, Debug)]
pub struct TsvdFactors {
    /// `n1 × n1 × n3`, orthogonal.
    pub u: Tensor3,
    /// `n1 × n2 × n3`, f-diagonal.
    pub s: Tensor3,
    /// `n2 × n2 × n3`, orthogonal.
    pub v: Tensor3,
}

/// Rank-`r` factors: `u` is `n1 × r × n3`, `s` is `r × r × n3` and
/// f-diagonal, `v` is `n2 × r × n3`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactors {
    pub u: Tensor3,
    pub s: Tensor3,
    pub v: Tensor3,
    pub rank: usize,
}

impl LowRankFactors {
    pub fn new(u: Tensor3, s: Tensor3, v: Tensor3) -> Result<Self> {
        let rank = u.n2();
        if rank == 0
            || s.shape() != (rank, rank, u.n3())
            || v.n2() != rank
            || v.n3() != u.n3()
        {
            return Err(Error::invalid(format!(
                "inconsistent low-rank factor shapes: U {:?}, S {:?}, V {:?}",
                u.shape(),
                s.shape(),
                v.shape()
            )));
        }
        Ok(Self { u, s, v, rank })
    }

    /// Builds the factors from `rank × n3` singular-value tubes (row-major).
    pub fn from_tubes(u: Tensor3, tubes: &[f64], v: Tensor3) -> Result<Self> {
        let (rank, n3) = (u.n2(), u.n3());
        if tubes.len() != rank * n3 {
            return Err(Error::invalid(format!(
                "expected {rank}x{n3} singular-value tubes, got {} values",
                tubes.len()
            )));
        }
        let mut s = Tensor3::zeros(rank, rank, n3);
        for j in 0..rank {
            for k in 0..n3 {
                s.set(j, j, k, tubes[j * n3 + k]);
            }
        }
        Self::new(u, s, v)
    }

    /// The diagonal tubes of `s` as a row-major `rank × n3` array.
    pub fn tubes(&self) -> Vec<f64> {
        let n3 = self.s.n3();
        let mut out = vec![0.0; self.rank * n3];
        for j in 0..self.rank {
            for k in 0..n3 {
                out[j * n3 + k] = self.s.get(j, j, k);
            }
        }
        out
    }

    pub fn set_tubes(&mut self, tubes: &[f64]) {
        let n3 = self.s.n3();
        assert_eq!(tubes.len(), self.rank * n3, "tube count mismatch");
        for j in 0..self.rank {
            for k in 0..n3 {
                self.s.set(j, j, k, tubes[j * n3 + k]);
            }
        }
    }

    pub fn n3(&self) -> usize {
        self.u.n3()
    }

    /// Stored parameter count: both factor tensors plus the `rank` tubes.
    pub fn stored_len(&self) -> usize {
        self.u.len() + self.rank * self.n3() + self.v.len()
    }
}

fn is_self_conjugate(k: usize, n3: usize) -> bool {
    k == 0 || (n3 % 2 == 0 && k == n3 / 2)
}

fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

/// SVD of Fourier slice `k`. Self-conjugate slices are real and take the
/// real path so their factors stay real.
fn slice_svd(m: &DMatrix<Complex64>, k: usize, n3: usize, full: bool) -> Result<MatSvd<Complex64>> {
    let wrap = |reason: String| Error::Decomposition {
        tensor: "tensor".into(),
        slice: k,
        reason,
    };
    if is_self_conjugate(k, n3) {
        let re = m.map(|z| z.re);
        let s = if full { linalg::full_svd(&re) } else { linalg::thin_svd(&re) }.map_err(wrap)?;
        Ok(MatSvd {
            u: to_complex(&s.u),
            sigma: s.sigma,
            v: to_complex(&s.v),
        })
    } else if full {
        linalg::full_svd(m).map_err(wrap)
    } else {
        linalg::thin_svd(m).map_err(wrap)
    }
}

fn half_spectrum_svds(a: &Tensor3, full: bool) -> Result<(ComplexTensor3, Vec<MatSvd<Complex64>>)> {
    let fa = fft_mode3(a)?;
    let n3 = a.n3();
    let svds = (0..half_spectrum(n3).min(n3))
        .into_par_iter()
        .map(|k| slice_svd(&fa.slice_matrix(k), k, n3, full))
        .collect::<Result<Vec<_>>>()?;
    Ok((fa, svds))
}

/// Singular values of every Fourier slice, `n3` lists in descending order.
pub fn fourier_singular_values(a: &Tensor3) -> Result<Vec<Vec<f64>>> {
    let fa = fft_mode3(a)?;
    let n3 = a.n3();
    let h = half_spectrum(n3).min(n3);
    let half = (0..h)
        .into_par_iter()
        .map(|k| {
            let m = fa.slice_matrix(k);
            if is_self_conjugate(k, n3) {
                linalg::singular_values(&m.map(|z| z.re))
            } else {
                linalg::singular_values(&m)
            }
            .map_err(|reason| Error::Decomposition {
                tensor: "tensor".into(),
                slice: k,
                reason,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n3).map(|k| half[if k < h { k } else { n3 - k }].clone()).collect())
}

fn to_spatial(slices: Vec<DMatrix<Complex64>>, n3: usize, scale: f64) -> Result<Tensor3> {
    let mut slices = slices;
    mirror_spectrum(&mut slices, n3);
    let c = ComplexTensor3::from_slices(&slices)?;
    let s = scale.max(c.fnorm() / (n3 as f64).sqrt());
    ifft_real_scaled(&c, s)
}

/// Spatial f-diagonal tensor from per-slice singular values.
fn diagonal_from_sigmas(sigmas: &[&[f64]], rows: usize, cols: usize, n3: usize, scale: f64) -> Result<Tensor3> {
    let p = rows.min(cols);
    let mut tubes: Vec<DMatrix<Complex64>> = sigmas
        .iter()
        .map(|sig| DMatrix::from_fn(p, 1, |j, _| Complex64::new(sig[j], 0.0)))
        .collect();
    mirror_spectrum(&mut tubes, n3);
    let c = ComplexTensor3::from_slices(&tubes)?;
    let spatial = ifft_real_scaled(&c, scale.max(c.fnorm()))?;
    let mut s = Tensor3::zeros(rows, cols, n3);
    for j in 0..p {
        for k in 0..n3 {
            s.set(j, j, k, spatial.get(j, 0, k));
        }
    }
    Ok(s)
}

/// Full t-SVD `a = u * s * vᵀ`.
pub fn tsvd(a: &Tensor3) -> Result<TsvdFactors> {
    let (n1, n2, n3) = a.shape();
    let (_, svds) = half_spectrum_svds(a, true)?;
    let scale = fnorm(a);
    let sigmas: Vec<&[f64]> = svds.iter().map(|s| s.sigma.as_slice()).collect();
    let s = diagonal_from_sigmas(&sigmas, n1, n2, n3, scale)?;
    let u = to_spatial(svds.iter().map(|s| s.u.clone()).collect(), n3, 1.0)?;
    let v = to_spatial(svds.iter().map(|s| s.v.clone()).collect(), n3, 1.0)?;
    Ok(TsvdFactors { u, s, v })
}

fn check_rank(r: usize, n1: usize, n2: usize) -> Result<()> {
    if r == 0 || r > n1.min(n2) {
        return Err(Error::invalid(format!(
            "rank {r} out of range 1..={} for a {n1}x{n2} tensor",
            n1.min(n2)
        )));
    }
    Ok(())
}

/// Splits full factors at rank `r` into the principal factors and the
/// residual tensor formed from the complementary factor slices.
pub fn truncate_split(f: &TsvdFactors, r: usize) -> Result<(LowRankFactors, Tensor3)> {
    let (n1, n2, n3) = f.s.shape();
    check_rank(r, n1, n2)?;
    let principal = LowRankFactors::new(
        f.u.lateral(0..r),
        f.s.block(0..r, 0..r),
        f.v.lateral(0..r),
    )?;
    let residual = if r == n1 || r == n2 {
        Tensor3::zeros(n1, n2, n3)
    } else {
        let us = tprod(&f.u.lateral(r..n1), &f.s.block(r..n1, r..n2))?;
        tprod(&us, &ttranspose(&f.v.lateral(r..n2)))?
    };
    Ok((principal, residual))
}

/// Rank-`r` split computed from economy slice SVDs, without forming the
/// full orthogonal factors. Same result as `truncate_split(&tsvd(a)?, r)`
/// but memory stays proportional to the input.
pub fn split_low_rank(a: &Tensor3, r: usize) -> Result<(LowRankFactors, Tensor3)> {
    let (n1, n2, n3) = a.shape();
    check_rank(r, n1, n2)?;
    let (_, svds) = half_spectrum_svds(a, false)?;
    let scale = fnorm(a);
    let p = n1.min(n2);

    let head: Vec<&[f64]> = svds.iter().map(|s| &s.sigma[..r]).collect();
    let s = diagonal_from_sigmas(&head, r, r, n3, scale)?;
    let u = to_spatial(svds.iter().map(|s| s.u.columns(0, r).into_owned()).collect(), n3, 1.0)?;
    let v = to_spatial(svds.iter().map(|s| s.v.columns(0, r).into_owned()).collect(), n3, 1.0)?;

    let residual = if r == p {
        Tensor3::zeros(n1, n2, n3)
    } else {
        let res_slices = svds
            .iter()
            .map(|s| {
                let tail = p - r;
                let mut us = s.u.columns(r, tail).into_owned();
                for (j, mut col) in us.column_iter_mut().enumerate() {
                    col *= Complex64::new(s.sigma[r + j], 0.0);
                }
                us * s.v.columns(r, tail).adjoint()
            })
            .collect();
        to_spatial(res_slices, n3, scale)?
    };
    Ok((LowRankFactors::new(u, s, v)?, residual))
}

/// `u_r * s_r * v_rᵀ`.
pub fn reconstruct(p: &LowRankFactors) -> Result<Tensor3> {
    tprod(&tprod(&p.u, &p.s)?, &ttranspose(&p.v))
}

/// Largest per-Fourier-slice count of singular values above
/// `tol · σ_max`, with `σ_max` taken over all slices.
pub fn tubal_rank(a: &Tensor3, tol: f64) -> Result<usize> {
    let tol = tol.max(0.0);
    let sv = fourier_singular_values(a)?;
    let smax = sv
        .iter()
        .flat_map(|s| s.iter().copied())
        .fold(0.0f64, f64::max);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(sv
        .iter()
        .map(|s| s.iter().filter(|&&x| x > tol * smax).count())
        .max()
        .unwrap_or(0))
}
