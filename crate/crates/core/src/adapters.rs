//! Encoder weight tensorization and the three adapter families.
//!
//! An encoder with `L` layers and hidden size `d` is stacked into
//!
//! * `w_sa`: `d × d × 4L`, slice `4ℓ + t` holding `(W_q, W_k, W_v, W_o)[t]` of layer `ℓ`
//! * `w_up`: `d × 4d × L`
//! * `w_down`: `4d × d × L`
//!
//! [`LoraPtAdapter`] splits each stacked tensor at tubal rank `r` and keeps
//! the residual frozen. [`MatrixAdapterSet`] adapts each matrix separately,
//! either LoRA-style (`W + A·B`) or PISSA-style (frozen residual plus
//! trainable principal SVD factors).

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor3::{tprod, ttranspose, Tensor3};
use crate::tsvd::{reconstruct, split_low_rank, LowRankFactors};

/// The six adapted matrices of one transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::Q, Role::K, Role::V, Role::O, Role::Up, Role::Down];
    pub const ATTENTION: [Role; 4] = [Role::Q, Role::K, Role::V, Role::O];

    pub fn name(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::O => "o",
            Role::Up => "up",
            Role::Down => "down",
        }
    }

    pub fn from_name(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.name() == s)
    }

    /// Matrix shape for hidden size `d`.
    pub fn shape(self, d: usize) -> (usize, usize) {
        match self {
            Role::Up => (d, 4 * d),
            Role::Down => (4 * d, d),
            _ => (d, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub o: DMatrix<f64>,
    pub up: DMatrix<f64>,
    pub down: DMatrix<f64>,
}

impl LayerWeights {
    pub fn zeros(d: usize) -> Self {
        let sq = || DMatrix::zeros(d, d);
        Self {
            q: sq(),
            k: sq(),
            v: sq(),
            o: sq(),
            up: DMatrix::zeros(d, 4 * d),
            down: DMatrix::zeros(4 * d, d),
        }
    }

    pub fn get(&self, role: Role) -> &DMatrix<f64> {
        match role {
            Role::Q => &self.q,
            Role::K => &self.k,
            Role::V => &self.v,
            Role::O => &self.o,
            Role::Up => &self.up,
            Role::Down => &self.down,
        }
    }

    pub fn get_mut(&mut self, role: Role) -> &mut DMatrix<f64> {
        match role {
            Role::Q => &mut self.q,
            Role::K => &mut self.k,
            Role::V => &mut self.v,
            Role::O => &mut self.o,
            Role::Up => &mut self.up,
            Role::Down => &mut self.down,
        }
    }
}

/// Per-layer encoder matrices. Biases are not part of this type; callers
/// that carry them keep them alongside, untouched by any adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    d: usize,
    layers: Vec<LayerWeights>,
}

impl EncoderWeights {
    pub fn new(d: usize, layers: Vec<LayerWeights>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("hidden dimension must be positive"));
        }
        for (l, lw) in layers.iter().enumerate() {
            for role in Role::ALL {
                let m = lw.get(role);
                if m.shape() != role.shape(d) {
                    return Err(Error::invalid(format!(
                        "layer {}: W_{} has shape {:?}, expected {:?}",
                        l + 1,
                        role.name(),
                        m.shape(),
                        role.shape(d)
                    )));
                }
                if m.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid(format!(
                        "layer {}: W_{} has non-finite entries",
                        l + 1,
                        role.name()
                    )));
                }
            }
        }
        Ok(Self { d, layers })
    }

    pub fn zeros(d: usize, layers: usize) -> Self {
        Self {
            d,
            layers: (0..layers).map(|_| LayerWeights::zeros(d)).collect(),
        }
    }

    /// Gaussian entries with standard deviation `scale / √d`.
    pub fn random(d: usize, layers: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale / (d as f64).sqrt()).expect("valid std");
        let mut w = Self::zeros(d, layers);
        for lw in &mut w.layers {
            for role in Role::ALL {
                for x in lw.get_mut(role).iter_mut() {
                    *x = normal.sample(&mut rng);
                }
            }
        }
        w
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.layers[l]
    }

    /// Mutable access to one matrix; shape changes are a caller bug and panic
    /// on the next validated use.
    pub fn matrix_mut(&mut self, l: usize, role: Role) -> &mut DMatrix<f64> {
        self.layers[l].get_mut(role)
    }

    /// Largest relative Frobenius difference over all matrices.
    pub fn max_rel_diff(&self, other: &EncoderWeights) -> f64 {
        assert_eq!(self.layers.len(), other.layers.len(), "layer count mismatch");
        let mut worst: f64 = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for role in Role::ALL {
                let (x, y) = (a.get(role), b.get(role));
                let diff = (x - y).norm();
                let scale = y.norm().max(f64::MIN_POSITIVE);
                worst = worst.max(if y.norm() == 0.0 { diff } else { diff / scale });
            }
        }
        worst
    }
}

/// Slice order used when stacking the attention matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StackOrder {
    /// Layer-major, `(q, k, v, o)` within a layer.
    #[default]
    LayerMajorQkvo,
}

impl StackOrder {
    pub fn tag(self) -> &'static str {
        match self {
            StackOrder::LayerMajorQkvo => "layer-major-qkvo",
        }
    }
}

impl FromStr for StackOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer-major-qkvo" => Ok(StackOrder::LayerMajorQkvo),
            other => Err(Error::invalid(format!("unknown stack order {other:?}"))),
        }
    }
}

impl fmt::Display for StackOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Names of the three stacked tensors, in storage order.
pub const TENSOR_NAMES: [&str; 3] = ["w_sa", "w_up", "w_down"];

#[derive(Clone, Debug, PartialEq)]
pub struct StackedTensors {
    pub w_sa: Tensor3,
    pub w_up: Tensor3,
    pub w_down: Tensor3,
    pub stack_order: StackOrder,
}

impl StackedTensors {
    pub fn tensors(&self) -> [&Tensor3; 3] {
        [&self.w_sa, &self.w_up, &self.w_down]
    }
}

/// Shapes of `(w_sa, w_up, w_down)` for hidden size `d` and `layers` layers.
pub fn stacked_shapes(d: usize, layers: usize) -> [(usize, usize, usize); 3] {
    [(d, d, 4 * layers), (d, 4 * d, layers), (4 * d, d, layers)]
}

pub fn tensorize(w: &EncoderWeights) -> Result<StackedTensors> {
    let (d, n) = (w.d, w.layers.len());
    if n == 0 {
        return Err(Error::invalid("cannot tensorize an encoder with no layers"));
    }
    // revalidate: EncoderWeights may have been mutated through matrix_mut
    let w = EncoderWeights::new(d, w.layers.clone())?;
    let mut sa = Vec::with_capacity(4 * n);
    for lw in &w.layers {
        for role in Role::ATTENTION {
            sa.push(lw.get(role).clone());
        }
    }
    let up: Vec<_> = w.layers.iter().map(|lw| lw.up.clone()).collect();
    let down: Vec<_> = w.layers.iter().map(|lw| lw.down.clone()).collect();
    Ok(StackedTensors {
        w_sa: Tensor3::from_slices(&sa)?,
        w_up: Tensor3::from_slices(&up)?,
        w_down: Tensor3::from_slices(&down)?,
        stack_order: StackOrder::LayerMajorQkvo,
    })
}

pub fn detensorize(s: &StackedTensors) -> Result<EncoderWeights> {
    let (d, _, sa_slices) = s.w_sa.shape();
    if sa_slices % 4 != 0 {
        return Err(Error::invalid(format!(
            "w_sa has {sa_slices} frontal slices, not a multiple of 4"
        )));
    }
    let layers = sa_slices / 4;
    let [_, up_shape, down_shape] = stacked_shapes(d, layers);
    if s.w_sa.shape() != (d, d, 4 * layers) || s.w_up.shape() != up_shape || s.w_down.shape() != down_shape
    {
        return Err(Error::invalid(format!(
            "inconsistent stacked shapes: w_sa {:?}, w_up {:?}, w_down {:?}",
            s.w_sa.shape(),
            s.w_up.shape(),
            s.w_down.shape()
        )));
    }
    match s.stack_order {
        StackOrder::LayerMajorQkvo => {}
    }
    let out = (0..layers)
        .map(|l| LayerWeights {
            q: s.w_sa.slice_matrix(4 * l),
            k: s.w_sa.slice_matrix(4 * l + 1),
            v: s.w_sa.slice_matrix(4 * l + 2),
            o: s.w_sa.slice_matrix(4 * l + 3),
            up: s.w_up.slice_matrix(l),
            down: s.w_down.slice_matrix(l),
        })
        .collect();
    Ok(EncoderWeights { d, layers: out })
}

/// Adapter family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    LoraPt,
    Lora,
    Pissa,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::LoraPt, Method::Lora, Method::Pissa];

    pub fn name(self) -> &'static str {
        match self {
            Method::LoraPt => "lora-pt",
            Method::Lora => "lora",
            Method::Pissa => "pissa",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Trainable adapter parameters for an encoder of `layers` layers.
/// Biases and the decoder are never counted.
pub fn param_count(method: Method, d: u64, layers: u64, r: u64) -> u64 {
    match method {
        Method::LoraPt => 4 * layers * r * (2 * d + 1) + 2 * layers * r * (5 * d + 1),
        Method::Lora => 4 * layers * 2 * d * r + 2 * layers * 5 * d * r,
        Method::Pissa => 4 * layers * (2 * d + 1) * r + 2 * layers * (5 * d + 1) * r,
    }
}

/// Principal factors and frozen residual of one stacked tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSplit {
    pub principal: LowRankFactors,
    residual: Tensor3,
}

impl TensorSplit {
    pub fn new(principal: LowRankFactors, residual: Tensor3) -> Result<Self> {
        let (n1, n2, n3) = residual.shape();
        if principal.u.shape() != (n1, principal.rank, n3) || principal.v.shape() != (n2, principal.rank, n3) {
            return Err(Error::invalid(format!(
                "factor shapes U {:?}, V {:?} do not match residual {:?}",
                principal.u.shape(),
                principal.v.shape(),
                residual.shape()
            )));
        }
        Ok(Self { principal, residual })
    }

    pub fn residual(&self) -> &Tensor3 {
        &self.residual
    }

    pub fn effective(&self) -> Result<Tensor3> {
        Ok(&self.residual + &reconstruct(&self.principal)?)
    }
}

/// Tensor-structured adapter: three t-SVD splits with frozen residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPtAdapter {
    splits: [TensorSplit; 3],
    rank: usize,
    d: usize,
    layers: usize,
    stack_order: StackOrder,
}

pub fn build_lorapt(s: &StackedTensors, r: usize) -> Result<LoraPtAdapter> {
    let d = s.w_sa.n1();
    if r == 0 || r > d {
        return Err(Error::invalid(format!("rank {r} out of range 1..={d}")));
    }
    let mut splits = Vec::with_capacity(3);
    for (name, t) in TENSOR_NAMES.iter().zip(s.tensors()) {
        let (principal, residual) = split_low_rank(t, r).map_err(|e| e.in_tensor(name))?;
        splits.push(TensorSplit::new(principal, residual)?);
    }
    let splits: [TensorSplit; 3] = splits.try_into().expect("three splits");
    LoraPtAdapter::from_splits(splits, s.stack_order)
}

impl LoraPtAdapter {
    /// Reassembles an adapter from its parts, e.g. after deserialization.
    pub fn from_splits(splits: [TensorSplit; 3], stack_order: StackOrder) -> Result<Self> {
        let d = splits[0].residual.n1();
        let layers = splits[1].residual.n3();
        let rank = splits[0].principal.rank;
        let expected = stacked_shapes(d, layers);
        for (i, sp) in splits.iter().enumerate() {
            if sp.residual.shape() != expected[i] || sp.principal.rank != rank {
                return Err(Error::invalid(format!(
                    "{}: residual {:?} rank {} inconsistent with d = {d}, layers = {layers}, rank = {rank}",
                    TENSOR_NAMES[i],
                    sp.residual.shape(),
                    sp.principal.rank
                )));
            }
        }
        Ok(Self {
            splits,
            rank,
            d,
            layers,
            stack_order,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn stack_order(&self) -> StackOrder {
        self.stack_order
    }

    pub fn splits(&self) -> &[TensorSplit; 3] {
        &self.splits
    }

    /// Principal factors of tensor `i` (`0 = w_sa, 1 = w_up, 2 = w_down`).
    /// The residuals have no mutable accessor.
    pub fn principal_mut(&mut self, i: usize) -> &mut LowRankFactors {
        &mut self.splits[i].principal
    }

    pub fn effective_stacked(&self) -> Result<StackedTensors> {
        Ok(StackedTensors {
            w_sa: self.splits[0].effective()?,
            w_up: self.splits[1].effective()?,
            w_down: self.splits[2].effective()?,
            stack_order: self.stack_order,
        })
    }

    pub fn effective_weights(&self) -> Result<EncoderWeights> {
        detensorize(&self.effective_stacked()?)
    }

    pub fn trainable_len(&self) -> usize {
        self.splits.iter().map(|s| s.principal.stored_len()).sum()
    }

    /// Flat order: for each tensor, `U` data, then the diagonal tubes, then `V` data.
    pub fn trainable_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for sp in &self.splits {
            out.extend_from_slice(sp.principal.u.data());
            out.extend(sp.principal.tubes());
            out.extend_from_slice(sp.principal.v.data());
        }
        out
    }

    pub fn set_trainable_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.trainable_len(), "parameter length mismatch");
        let mut off = 0;
        for sp in &mut self.splits {
            let f = &mut sp.principal;
            let nu = f.u.len();
            f.u.data_mut().copy_from_slice(&p[off..off + nu]);
            off += nu;
            let nt = f.rank * f.n3();
            f.set_tubes(&p[off..off + nt]);
            off += nt;
            let nv = f.v.len();
            f.v.data_mut().copy_from_slice(&p[off..off + nv]);
            off += nv;
        }
    }

    /// Maps gradients with respect to the effective weights onto the
    /// trainable factors. For `W = U * S * Vᵀ` and upstream `G`:
    /// `∂U = G * V * Sᵀ`, `∂V = Gᵀ * U * S`, `∂S = diag(Uᵀ * G * V)`,
    /// the last keeping only the f-diagonal tubes.
    pub fn chain_gradient(&self, grad: &EncoderWeights) -> Result<Vec<f64>> {
        let g = tensorize(grad)?;
        let mut out = Vec::with_capacity(self.trainable_len());
        for (sp, gt) in self.splits.iter().zip(g.tensors()) {
            let f = &sp.principal;
            let gu = tprod(&tprod(gt, &f.v)?, &ttranspose(&f.s))?;
            let ut_g = tprod(&ttranspose(&f.u), gt)?;
            let gs = tprod(&ut_g, &f.v)?;
            let gv = tprod(&tprod(&ttranspose(gt), &f.u)?, &f.s)?;
            out.extend_from_slice(gu.data());
            for j in 0..f.rank {
                for k in 0..f.n3() {
                    out.push(gs.get(j, j, k));
                }
            }
            out.extend_from_slice(gv.data());
        }
        Ok(out)
    }
}

/// Trainable part of a [`MatrixAdapter`].
#[derive(Clone, Debug, PartialEq)]
pub enum LowRankUpdate {
    /// `A` is `m × r`, `B` is `r × n`; contributes `A·B`.
    Lora { a: DMatrix<f64>, b: DMatrix<f64> },
    /// `U` is `m × r`, `V` is `n × r`; contributes `U·diag(σ)·Vᵀ`.
    Pissa {
        u: DMatrix<f64>,
        sigma: Vec<f64>,
        v: DMatrix<f64>,
    },
}

impl LowRankUpdate {
    pub fn rank(&self) -> usize {
        match self {
            LowRankUpdate::Lora { a, .. } => a.ncols(),
            LowRankUpdate::Pissa { sigma, .. } => sigma.len(),
        }
    }

    pub fn product(&self) -> DMatrix<f64> {
        match self {
            LowRankUpdate::Lora { a, b } => a * b,
            LowRankUpdate::Pissa { u, sigma, v } => scale_columns(u, sigma) * v.transpose(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LowRankUpdate::Lora { a, b } => a.len() + b.len(),
            LowRankUpdate::Pissa { u, sigma, v } => u.len() + sigma.len() + v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            LowRankUpdate::Lora { a, b } => {
                out.extend_from_slice(a.as_slice());
                out.extend_from_slice(b.as_slice());
            }
            LowRankUpdate::Pissa { u, sigma, v } => {
                out.extend_from_slice(u.as_slice());
                out.extend_from_slice(sigma);
                out.extend_from_slice(v.as_slice());
            }
        }
    }

    fn read_params(&mut self, p: &[f64]) -> usize {
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&p[off..off + dst.len()]);
            off += dst.len();
        };
        match self {
            LowRankUpdate::Lora { a, b } => {
                take(a.as_mut_slice());
                take(b.as_mut_slice());
            }
            LowRankUpdate::Pissa { u, sigma, v } => {
                take(u.as_mut_slice());
                take(sigma);
                take(v.as_mut_slice());
            }
        }
        off
    }

    /// Gradient of the factors given the gradient `g` of the effective matrix.
    fn chain(&self, g: &DMatrix<f64>, out: &mut Vec<f64>) {
        match self {
            LowRankUpdate::Lora { a, b } => {
                out.extend_from_slice((g * b.transpose()).as_slice());
                out.extend_from_slice((a.transpose() * g).as_slice());
            }
            LowRankUpdate::Pissa { u, sigma, v } => {
                let gv = g * v;
                out.extend_from_slice(scale_columns(&gv, sigma).as_slice());
                out.extend((0..sigma.len()).map(|j| u.column(j).dot(&gv.column(j))));
                out.extend_from_slice(scale_columns(&(g.transpose() * u), sigma).as_slice());
            }
        }
    }
}

fn scale_columns(m: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= s[j];
    }
    out
}

/// One adapted matrix: frozen part plus trainable low-rank update.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixAdapter {
    frozen: DMatrix<f64>,
    pub update: LowRankUpdate,
}

impl MatrixAdapter {
    /// The frozen base (LoRA) or residual (PISSA) matrix.
    pub fn frozen(&self) -> &DMatrix<f64> {
        &self.frozen
    }

    pub fn effective(&self) -> DMatrix<f64> {
        &self.frozen + self.update.product()
    }
}

/// PISSA split of one matrix at rank `r`: the residual is formed from the
/// singular triplets beyond `r`.
pub fn pissa_split(w: &DMatrix<f64>, r: usize) -> Result<MatrixAdapter> {
    let (m, n) = w.shape();
    if r == 0 || r > m.min(n) {
        return Err(Error::invalid(format!(
            "rank {r} out of range 1..={} for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    let svd = linalg::thin_svd(w).map_err(|reason| Error::Decomposition {
        tensor: "matrix".into(),
        slice: 0,
        reason,
    })?;
    let p = m.min(n);
    let u = svd.u.columns(0, r).into_owned();
    let v = svd.v.columns(0, r).into_owned();
    let sigma = svd.sigma[..r].to_vec();
    let frozen = if r == p {
        DMatrix::zeros(m, n)
    } else {
        scale_columns(&svd.u.columns(r, p - r).into_owned(), &svd.sigma[r..])
            * svd.v.columns(r, p - r).transpose()
    };
    Ok(MatrixAdapter {
        frozen,
        update: LowRankUpdate::Pissa { u, sigma, v },
    })
}

/// Per-matrix adapters for a whole encoder, indexed `[layer][role]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixAdapterSet {
    method: Method,
    rank: usize,
    d: usize,
    layers: Vec<Vec<MatrixAdapter>>,
}

pub fn build_matrix_lora(w: &EncoderWeights, r: usize, seed: u64) -> Result<MatrixAdapterSet> {
    if r == 0 || r > w.d {
        return Err(Error::invalid(format!("rank {r} out of range 1..={}", w.d)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (1.0 / r as f64).sqrt()).expect("valid std");
    let layers = w
        .layers
        .iter()
        .map(|lw| {
            Role::ALL
                .into_iter()
                .map(|role| {
                    let base = lw.get(role).clone();
                    let (m, n) = base.shape();
                    let a = DMatrix::from_fn(m, r, |_, _| normal.sample(&mut rng));
                    MatrixAdapter {
                        frozen: base,
                        update: LowRankUpdate::Lora {
                            a,
                            b: DMatrix::zeros(r, n),
                        },
                    }
                })
                .collect()
        })
        .collect();
    Ok(MatrixAdapterSet {
        method: Method::Lora,
        rank: r,
        d: w.d,
        layers,
    })
}

pub fn build_pissa(w: &EncoderWeights, r: usize) -> Result<MatrixAdapterSet> {
    if r == 0 || r > w.d {
        return Err(Error::invalid(format!("rank {r} out of range 1..={}", w.d)));
    }
    let layers = w
        .layers
        .iter()
        .map(|lw| {
            Role::ALL
                .into_iter()
                .map(|role| pissa_split(lw.get(role), r))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MatrixAdapterSet {
        method: Method::Pissa,
        rank: r,
        d: w.d,
        layers,
    })
}

impl MatrixAdapterSet {
    pub fn method(&self) -> Method {
        self.method
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn get(&self, layer: usize, role: Role) -> &MatrixAdapter {
        &self.layers[layer][role as usize]
    }

    pub fn get_mut(&mut self, layer: usize, role: Role) -> &mut MatrixAdapter {
        &mut self.layers[layer][role as usize]
    }

    pub fn effective_weights(&self) -> Result<EncoderWeights> {
        let layers = self
            .layers
            .iter()
            .map(|ms| LayerWeights {
                q: ms[0].effective(),
                k: ms[1].effective(),
                v: ms[2].effective(),
                o: ms[3].effective(),
                up: ms[4].effective(),
                down: ms[5].effective(),
            })
            .collect();
        EncoderWeights::new(self.d, layers)
    }

    pub fn trainable_len(&self) -> usize {
        self.layers.iter().flatten().map(|m| m.update.len()).sum()
    }

    pub fn trainable_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for m in self.layers.iter().flatten() {
            m.update.write_params(&mut out);
        }
        out
    }

    pub fn set_trainable_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.trainable_len(), "parameter length mismatch");
        let mut off = 0;
        for m in self.layers.iter_mut().flatten() {
            off += m.update.read_params(&p[off..]);
        }
    }

    pub fn chain_gradient(&self, grad: &EncoderWeights) -> Result<Vec<f64>> {
        if grad.layers.len() != self.layers.len() {
            return Err(Error::invalid("gradient layer count mismatch"));
        }
        let mut out = Vec::with_capacity(self.trainable_len());
        for (ms, g) in self.layers.iter().zip(&grad.layers) {
            for (m, role) in ms.iter().zip(Role::ALL) {
                m.update.chain(g.get(role), &mut out);
            }
        }
        Ok(out)
    }

    /// Frozen matrices in `[layer][role]` order.
    pub fn frozen_matrices(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.layers.iter().flatten().map(|m| &m.frozen)
    }
}

/// Any of the three adapter families behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    LoraPt(LoraPtAdapter),
    Matrix(MatrixAdapterSet),
}

impl Adapter {
    pub fn build(method: Method, w: &EncoderWeights, r: usize, seed: u64) -> Result<Adapter> {
        Ok(match method {
            Method::LoraPt => Adapter::LoraPt(build_lorapt(&tensorize(w)?, r)?),
            Method::Lora => Adapter::Matrix(build_matrix_lora(w, r, seed)?),
            Method::Pissa => Adapter::Matrix(build_pissa(w, r)?),
        })
    }

    pub fn method(&self) -> Method {
        match self {
            Adapter::LoraPt(_) => Method::LoraPt,
            Adapter::Matrix(m) => m.method,
        }
    }

    pub fn effective_weights(&self) -> Result<EncoderWeights> {
        match self {
            Adapter::LoraPt(a) => a.effective_weights(),
            Adapter::Matrix(m) => m.effective_weights(),
        }
    }

    pub fn trainable_len(&self) -> usize {
        match self {
            Adapter::LoraPt(a) => a.trainable_len(),
            Adapter::Matrix(m) => m.trainable_len(),
        }
    }

    pub fn trainable_params(&self) -> Vec<f64> {
        match self {
            Adapter::LoraPt(a) => a.trainable_params(),
            Adapter::Matrix(m) => m.trainable_params(),
        }
    }

    pub fn set_trainable_params(&mut self, p: &[f64]) {
        match self {
            Adapter::LoraPt(a) => a.set_trainable_params(p),
            Adapter::Matrix(m) => m.set_trainable_params(p),
        }
    }

    pub fn chain_gradient(&self, grad: &EncoderWeights) -> Result<Vec<f64>> {
        match self {
            Adapter::LoraPt(a) => a.chain_gradient(grad),
            Adapter::Matrix(m) => m.chain_gradient(grad),
        }
    }

    /// Copies of every frozen array, for freeze checks.
    pub fn frozen_snapshot(&self) -> Vec<Vec<f64>> {
        match self {
            Adapter::LoraPt(a) => a.splits.iter().map(|s| s.residual.data().to_vec()).collect(),
            Adapter::Matrix(m) => m.frozen_matrices().map(|f| f.as_slice().to_vec()).collect(),
        }
    }
}
