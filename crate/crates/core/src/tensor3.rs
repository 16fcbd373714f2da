//! Dense third-order tensors and the t-product algebra.
//!
//! A [`Tensor3`] of shape `n1 × n2 × n3` is stored as `n3` row-major frontal
//! slices laid end to end: element `(i, j, k)` lives at `k·n1·n2 + i·n2 + j`.
//!
//! The mode-3 transform is the unnormalized DFT; its inverse carries the
//! `1/n3` factor. Every identity in this module and its tests is written
//! against that convention, e.g. `‖a‖² = ‖fft_mode3(a)‖² / n3`.

use std::ops::{Add, Sub};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Relative bound on the imaginary part discarded when a transform of
/// conjugate-symmetric data is brought back to the real domain.
pub const IMAG_RESIDUE_TOL: f64 = 1e-9;

/// Largest `n1·n3` accepted by [`tprod_oracle`].
pub const ORACLE_LIMIT: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    n1: usize,
    n2: usize,
    n3: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    /// Builds a tensor from its flat data, checking length and finiteness.
    pub fn new(n1: usize, n2: usize, n3: usize, data: Vec<f64>) -> Result<Self> {
        if n1 == 0 || n2 == 0 || n3 == 0 {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {n1}x{n2}x{n3}"
            )));
        }
        if data.len() != n1 * n2 * n3 {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {n1}x{n2}x{n3}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite entry at offset {pos}")));
        }
        Ok(Self { n1, n2, n3, data })
    }

    /// Zero tensor. Zero-sized dimensions are allowed here so that callers can
    /// represent empty factor blocks; most operations reject them.
    pub fn zeros(n1: usize, n2: usize, n3: usize) -> Self {
        Self {
            n1,
            n2,
            n3,
            data: vec![0.0; n1 * n2 * n3],
        }
    }

    pub fn from_fn(n1: usize, n2: usize, n3: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(n1, n2, n3);
        for k in 0..n3 {
            for i in 0..n1 {
                for j in 0..n2 {
                    t.data[k * n1 * n2 + i * n2 + j] = f(i, j, k);
                }
            }
        }
        t
    }

    /// Stacks equally shaped matrices as frontal slices.
    pub fn from_slices(slices: &[DMatrix<f64>]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::invalid("no frontal slices given"))?;
        let (n1, n2) = first.shape();
        let mut t = Self::zeros(n1, n2, slices.len());
        for (k, m) in slices.iter().enumerate() {
            if m.shape() != (n1, n2) {
                return Err(Error::invalid(format!(
                    "frontal slice {k} has shape {:?}, expected {:?}",
                    m.shape(),
                    (n1, n2)
                )));
            }
            t.set_slice(k, m);
        }
        Ok(t)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n1, self.n2, self.n3)
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn n3(&self) -> usize {
        self.n3
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        k * self.n1 * self.n2 + i * self.n2 + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    /// Row-major view of frontal slice `k`.
    pub fn slice(&self, k: usize) -> &[f64] {
        let s = self.n1 * self.n2;
        &self.data[k * s..(k + 1) * s]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let s = self.n1 * self.n2;
        &mut self.data[k * s..(k + 1) * s]
    }

    pub fn slice_matrix(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n1, self.n2, self.slice(k))
    }

    pub fn set_slice(&mut self, k: usize, m: &DMatrix<f64>) {
        assert_eq!(m.shape(), (self.n1, self.n2), "slice shape mismatch");
        let (n1, n2) = (self.n1, self.n2);
        let dst = self.slice_mut(k);
        for i in 0..n1 {
            for j in 0..n2 {
                dst[i * n2 + j] = m[(i, j)];
            }
        }
    }

    /// Sub-tensor `rows × cols × n3` (all frontal slices).
    pub fn block(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Tensor3 {
        assert!(rows.end <= self.n1 && cols.end <= self.n2, "block out of range");
        let (r0, c0) = (rows.start, cols.start);
        Tensor3::from_fn(rows.len(), cols.len(), self.n3, |i, j, k| {
            self.get(r0 + i, c0 + j, k)
        })
    }

    /// Lateral slices `cols` (columns of every frontal slice).
    pub fn lateral(&self, cols: std::ops::Range<usize>) -> Tensor3 {
        self.block(0..self.n1, cols)
    }

    pub fn scale(&self, c: f64) -> Tensor3 {
        Tensor3 {
            data: self.data.iter().map(|x| x * c).collect(),
            ..self.clone()
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest entrywise absolute difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Add for &Tensor3 {
    type Output = Tensor3;

    fn add(self, rhs: &Tensor3) -> Tensor3 {
        assert_eq!(self.shape(), rhs.shape(), "shape mismatch in tensor add");
        Tensor3 {
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
            ..self.clone()
        }
    }
}

impl Sub for &Tensor3 {
    type Output = Tensor3;

    fn sub(self, rhs: &Tensor3) -> Tensor3 {
        assert_eq!(self.shape(), rhs.shape(), "shape mismatch in tensor sub");
        Tensor3 {
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
            ..self.clone()
        }
    }
}

/// Complex tensor holding a mode-3 spectrum; same layout as [`Tensor3`].
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor3 {
    n1: usize,
    n2: usize,
    n3: usize,
    data: Vec<Complex64>,
}

impl ComplexTensor3 {
    pub fn zeros(n1: usize, n2: usize, n3: usize) -> Self {
        Self {
            n1,
            n2,
            n3,
            data: vec![Complex64::new(0.0, 0.0); n1 * n2 * n3],
        }
    }

    pub fn from_slices(slices: &[DMatrix<Complex64>]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::invalid("no frontal slices given"))?;
        let (n1, n2) = first.shape();
        let mut t = Self::zeros(n1, n2, slices.len());
        for (k, m) in slices.iter().enumerate() {
            if m.shape() != (n1, n2) {
                return Err(Error::invalid(format!(
                    "frontal slice {k} has shape {:?}, expected {:?}",
                    m.shape(),
                    (n1, n2)
                )));
            }
            t.set_slice(k, m);
        }
        Ok(t)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n1, self.n2, self.n3)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> Complex64 {
        self.data[k * self.n1 * self.n2 + i * self.n2 + j]
    }

    pub fn slice(&self, k: usize) -> &[Complex64] {
        let s = self.n1 * self.n2;
        &self.data[k * s..(k + 1) * s]
    }

    pub fn slice_matrix(&self, k: usize) -> DMatrix<Complex64> {
        DMatrix::from_row_slice(self.n1, self.n2, self.slice(k))
    }

    pub fn set_slice(&mut self, k: usize, m: &DMatrix<Complex64>) {
        assert_eq!(m.shape(), (self.n1, self.n2), "slice shape mismatch");
        let (n1, n2) = (self.n1, self.n2);
        let s = n1 * n2;
        let dst = &mut self.data[k * s..(k + 1) * s];
        for i in 0..n1 {
            for j in 0..n2 {
                dst[i * n2 + j] = m[(i, j)];
            }
        }
    }

    pub fn fnorm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest deviation from conjugate symmetry along mode 3, relative to
    /// the tensor norm. Zero for the spectrum of a real tensor.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let scale = self.fnorm().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for k in 0..self.n3 {
            let mirror = (self.n3 - k) % self.n3;
            for (a, b) in self.slice(k).iter().zip(self.slice(mirror)) {
                worst = worst.max((a - b.conj()).norm());
            }
        }
        worst / scale
    }
}

/// In-place DFT of every mode-3 tube of slice-major data.
fn transform_tubes(data: &mut [Complex64], tube_count: usize, n3: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n3)
    } else {
        planner.plan_fft_forward(n3)
    };
    // gather tubes contiguously, transform as a batch, scatter back
    let mut tubes = vec![Complex64::new(0.0, 0.0); tube_count * n3];
    for k in 0..n3 {
        for t in 0..tube_count {
            tubes[t * n3 + k] = data[k * tube_count + t];
        }
    }
    fft.process(&mut tubes);
    for k in 0..n3 {
        for t in 0..tube_count {
            data[k * tube_count + t] = tubes[t * n3 + k];
        }
    }
}

/// Unnormalized DFT of every mode-3 tube.
pub fn fft_mode3(t: &Tensor3) -> Result<ComplexTensor3> {
    let (n1, n2, n3) = t.shape();
    if n1 == 0 || n2 == 0 || n3 == 0 {
        return Err(Error::invalid(format!(
            "fft_mode3 needs positive dimensions, got {n1}x{n2}x{n3}"
        )));
    }
    let mut data: Vec<Complex64> = t.data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    transform_tubes(&mut data, n1 * n2, n3, false);
    Ok(ComplexTensor3 { n1, n2, n3, data })
}

/// Inverse DFT along mode 3 with the `1/n3` factor, keeping the complex result.
pub fn ifft_mode3_complex(t: &ComplexTensor3) -> Result<ComplexTensor3> {
    let (n1, n2, n3) = t.shape();
    if n1 == 0 || n2 == 0 || n3 == 0 {
        return Err(Error::invalid(format!(
            "ifft_mode3 needs positive dimensions, got {n1}x{n2}x{n3}"
        )));
    }
    let mut data = t.data.clone();
    transform_tubes(&mut data, n1 * n2, n3, true);
    let inv = 1.0 / n3 as f64;
    for z in &mut data {
        *z *= inv;
    }
    Ok(ComplexTensor3 { n1, n2, n3, data })
}

/// Inverse transform back to a real tensor. The discarded imaginary part
/// must not exceed `IMAG_RESIDUE_TOL · scale`.
pub(crate) fn ifft_real_scaled(t: &ComplexTensor3, scale: f64) -> Result<Tensor3> {
    let c = ifft_mode3_complex(t)?;
    let residue = c.data.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
    if residue > IMAG_RESIDUE_TOL * scale.max(f64::MIN_POSITIVE) && residue > f64::MIN_POSITIVE {
        return Err(Error::Numeric(format!(
            "imaginary residue {residue:.3e} after inverse FFT exceeds tolerance (scale {scale:.3e})"
        )));
    }
    Ok(Tensor3 {
        n1: c.n1,
        n2: c.n2,
        n3: c.n3,
        data: c.data.iter().map(|z| z.re).collect(),
    })
}

/// Inverse DFT along mode 3 (includes the `1/n3` factor). The input should
/// be conjugate symmetric; an imaginary residue larger than `1e-9·‖t‖` is an
/// error rather than being silently dropped.
pub fn ifft_mode3(t: &ComplexTensor3) -> Result<Tensor3> {
    ifft_real_scaled(t, t.fnorm())
}

/// Number of leading Fourier slices that determine a real spectrum.
#[inline]
pub(crate) fn half_spectrum(n3: usize) -> usize {
    n3 / 2 + 1
}

/// Fills slices beyond the half spectrum by conjugate mirroring.
pub(crate) fn mirror_spectrum(slices: &mut Vec<DMatrix<Complex64>>, n3: usize) {
    let h = half_spectrum(n3).min(n3);
    slices.truncate(h);
    for k in h..n3 {
        let m = slices[n3 - k].map(|z| z.conj());
        slices.push(m);
    }
}

fn check_conformable(a: &Tensor3, b: &Tensor3) -> Result<()> {
    if a.n2 != b.n1 || a.n3 != b.n3 {
        return Err(Error::invalid(format!(
            "t-product shape mismatch: {}x{}x{} * {}x{}x{}",
            a.n1, a.n2, a.n3, b.n1, b.n2, b.n3
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("t-product of an empty tensor"));
    }
    Ok(())
}

/// t-product via the Fourier domain: one complex matrix product per
/// frontal slice of the spectra, then an inverse transform.
pub fn tprod(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    check_conformable(a, b)?;
    let n3 = a.n3;
    let fa = fft_mode3(a)?;
    let fb = fft_mode3(b)?;
    let mut slices: Vec<DMatrix<Complex64>> = (0..half_spectrum(n3).min(n3))
        .into_par_iter()
        .map(|k| fa.slice_matrix(k) * fb.slice_matrix(k))
        .collect();
    mirror_spectrum(&mut slices, n3);
    let fc = ComplexTensor3::from_slices(&slices)?;
    let (na, nb) = (fnorm(a), fnorm(b));
    ifft_real_scaled(&fc, na.max(nb).max(na * nb))
}

/// `circ(a)`: the `(n1·n3) × (n2·n3)` block-circulant matrix whose block
/// `(p, q)` is frontal slice `(p − q) mod n3`.
pub fn block_circulant(a: &Tensor3) -> DMatrix<f64> {
    let (n1, n2, n3) = a.shape();
    DMatrix::from_fn(n1 * n3, n2 * n3, |row, col| {
        let (p, i) = (row / n1, row % n1);
        let (q, j) = (col / n2, col % n2);
        a.get(i, j, (p + n3 - q) % n3)
    })
}

/// `MatVec(b)`: frontal slices stacked vertically.
pub fn unfold(b: &Tensor3) -> DMatrix<f64> {
    let (n1, n2, n3) = b.shape();
    DMatrix::from_fn(n1 * n3, n2, |row, j| b.get(row % n1, j, row / n1))
}

/// Inverse of [`unfold`] for a block column of `n3` blocks.
pub fn fold(m: &DMatrix<f64>, n3: usize) -> Result<Tensor3> {
    if n3 == 0 || m.nrows() % n3 != 0 {
        return Err(Error::invalid(format!(
            "cannot fold {} rows into {n3} frontal slices",
            m.nrows()
        )));
    }
    let n1 = m.nrows() / n3;
    Ok(Tensor3::from_fn(n1, m.ncols(), n3, |i, j, k| m[(k * n1 + i, j)]))
}

/// Reference t-product `fold(circ(a)·MatVec(b))`, materializing the
/// block-circulant matrix. Quadratic in `n3`; meant for verification only.
pub fn tprod_oracle(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    check_conformable(a, b)?;
    if a.n1 * a.n3 > ORACLE_LIMIT {
        return Err(Error::invalid(format!(
            "oracle guard: n1·n3 = {} exceeds {ORACLE_LIMIT}",
            a.n1 * a.n3
        )));
    }
    fold(&(block_circulant(a) * unfold(b)), a.n3)
}

/// Tensor transpose: each frontal slice transposed, slices 2..n3 in reverse order.
pub fn ttranspose(a: &Tensor3) -> Tensor3 {
    let (n1, n2, n3) = a.shape();
    Tensor3::from_fn(n2, n1, n3, |i, j, k| a.get(j, i, (n3 - k) % n3))
}

/// Identity for the t-product: identity first slice, zeros elsewhere.
pub fn identity_tensor(n: usize, n3: usize) -> Tensor3 {
    let mut t = Tensor3::zeros(n, n, n3);
    for i in 0..n {
        t.set(i, i, 0, 1.0);
    }
    t
}

pub fn fnorm(a: &Tensor3) -> f64 {
    a.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n1: usize, n2: usize, n3: usize, rng: &mut ChaCha8Rng) -> Tensor3 {
        Tensor3::from_fn(n1, n2, n3, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn layout_is_slice_major() {
        let t = Tensor3::from_fn(2, 3, 2, |i, j, k| (100 * k + 10 * i + j) as f64);
        assert_eq!(t.data()[1 * 6 + 1 * 3 + 2], 112.0);
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(Tensor3::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Tensor3::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(Tensor3::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn fft_single_slice_is_identity_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random(3, 2, 1, &mut rng);
        let f = fft_mode3(&t).unwrap();
        for (z, x) in f.data().iter().zip(t.data()) {
            assert_eq!(z.re, *x);
            assert_eq!(z.im, 0.0);
        }
    }

    #[test]
    fn fft_of_constant_tube() {
        let t = Tensor3::new(1, 1, 4, vec![1.0; 4]).unwrap();
        let f = fft_mode3(&t).unwrap();
        let expect = [4.0, 0.0, 0.0, 0.0];
        for (z, e) in f.data().iter().zip(expect) {
            assert!((z.re - e).abs() < 1e-15 && z.im.abs() < 1e-15);
        }
    }

    #[test]
    fn fft_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random(3, 4, 5, &mut rng);
        let back = ifft_mode3(&fft_mode3(&t).unwrap()).unwrap();
        assert!(fnorm(&(&back - &t)) <= 1e-12 * fnorm(&t));
    }

    #[test]
    fn fft_rejects_empty() {
        assert!(matches!(
            fft_mode3(&Tensor3::zeros(0, 2, 2)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn ifft_rejects_non_symmetric_input() {
        let mut c = ComplexTensor3::zeros(1, 1, 3);
        c.data[1] = Complex64::new(0.0, 1.0);
        assert!(matches!(ifft_mode3(&c), Err(Error::Numeric(_))));
    }

    #[test]
    fn spectrum_is_conjugate_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n3 in 1..8 {
            let f = fft_mode3(&random(2, 3, n3, &mut rng)).unwrap();
            assert!(f.conjugate_asymmetry() <= 1e-12, "n3 = {n3}");
        }
    }

    #[test]
    fn oracle_delta_and_convolution() {
        let a = Tensor3::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let delta = Tensor3::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(tprod_oracle(&a, &delta).unwrap().data(), &[1.0, 2.0, 3.0]);
        let b = Tensor3::new(1, 1, 3, vec![4.0, 5.0, 6.0]).unwrap();
        // (1,2,3) circularly convolved with (4,5,6)
        assert_eq!(tprod_oracle(&a, &b).unwrap().data(), &[31.0, 31.0, 28.0]);
        let fast = tprod(&a, &b).unwrap();
        assert!(fast.max_abs_diff(&tprod_oracle(&a, &b).unwrap()) < 1e-12);
    }

    #[test]
    fn oracle_identity_left() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random(3, 2, 4, &mut rng);
        assert_eq!(tprod_oracle(&identity_tensor(3, 4), &b).unwrap(), b);
    }

    #[test]
    fn oracle_guard() {
        let a = Tensor3::zeros(1025, 1, 4);
        let b = Tensor3::zeros(1, 1, 4);
        assert!(tprod_oracle(&a, &b).is_err());
    }

    #[test]
    fn tprod_identity_and_single_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(3, 4, 5, &mut rng);
        assert!(tprod(&a, &identity_tensor(4, 5)).unwrap().max_abs_diff(&a) < 1e-12);

        let a1 = random(3, 4, 1, &mut rng);
        let b1 = random(4, 2, 1, &mut rng);
        let expect = a1.slice_matrix(0) * b1.slice_matrix(0);
        let got = tprod(&a1, &b1).unwrap().slice_matrix(0);
        assert!((got - expect).amax() < 1e-14);
    }

    #[test]
    fn tprod_matches_oracle_on_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(3, 4, 5, &mut rng);
        let b = random(4, 2, 5, &mut rng);
        let d = tprod(&a, &b).unwrap().max_abs_diff(&tprod_oracle(&a, &b).unwrap());
        assert!(d <= 1e-10, "{d}");
    }

    #[test]
    fn tprod_shape_error_names_both_shapes() {
        let err = tprod(&Tensor3::zeros(2, 3, 2), &Tensor3::zeros(4, 1, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3x2") && msg.contains("4x1x2"), "{msg}");
        assert!(tprod(&Tensor3::zeros(2, 3, 2), &Tensor3::zeros(3, 1, 3)).is_err());
    }

    #[test]
    fn transpose_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random(3, 2, 1, &mut rng);
        assert_eq!(ttranspose(&m).slice_matrix(0), m.slice_matrix(0).transpose());

        let a = random(3, 4, 5, &mut rng);
        assert_eq!(ttranspose(&ttranspose(&a)), a);

        let b = random(4, 2, 5, &mut rng);
        let lhs = ttranspose(&tprod_oracle(&a, &b).unwrap());
        let rhs = tprod_oracle(&ttranspose(&b), &ttranspose(&a)).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
        let fast = tprod(&ttranspose(&b), &ttranspose(&a)).unwrap();
        assert!(lhs.max_abs_diff(&fast) <= 1e-10);
    }

    #[test]
    fn identity_tensor_spectrum_is_all_identity() {
        assert_eq!(identity_tensor(2, 1).slice_matrix(0), DMatrix::identity(2, 2));
        let f = fft_mode3(&identity_tensor(3, 4)).unwrap();
        for k in 0..4 {
            let s = f.slice_matrix(k);
            let eye = DMatrix::<Complex64>::identity(3, 3);
            assert!((s - eye).camax() < 1e-15);
        }
    }

    #[test]
    fn norms() {
        assert_eq!(fnorm(&Tensor3::zeros(2, 2, 2)), 0.0);
        assert_eq!(fnorm(&Tensor3::new(1, 1, 2, vec![3.0, 4.0]).unwrap()), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(4, 3, 6, &mut rng);
        let spatial = fnorm(&a);
        let fourier = fft_mode3(&a).unwrap().fnorm() / (6f64).sqrt();
        assert!((spatial - fourier).abs() <= 1e-10 * spatial);
    }

    #[test]
    fn fold_inverts_unfold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random(3, 2, 4, &mut rng);
        assert_eq!(fold(&unfold(&b), 4).unwrap(), b);
        assert!(fold(&unfold(&b), 5).is_err());
    }
}
