//! Forward and backward passes of the encoder building blocks.
//!
//! Activations are `seq_len × d` matrices, one token per row.

use nalgebra::{DMatrix, DVector};

use crate::adapters::{EncoderWeights, LayerWeights, Role};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Scale and shift of one layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) struct LnCache {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &DMatrix<f64>, p: &LayerNormParams) -> (DMatrix<f64>, LnCache) {
    let (n, d) = x.shape();
    let mut xhat = DMatrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for t in 0..n {
        let row = x.row(t);
        let mean = row.mean();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            xhat[(t, j)] = (x[(t, j)] - mean) * is;
        }
    }
    let mut y = xhat.clone();
    for t in 0..n {
        for j in 0..d {
            y[(t, j)] = p.gamma[j] * xhat[(t, j)] + p.beta[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates `dγ`, `dβ`.
pub(crate) fn layer_norm_backward(
    dy: &DMatrix<f64>,
    p: &LayerNormParams,
    c: &LnCache,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> DMatrix<f64> {
    let (n, d) = dy.shape();
    let mut dx = DMatrix::zeros(n, d);
    for t in 0..n {
        let mut dxhat = vec![0.0; d];
        for j in 0..d {
            dgamma[j] += dy[(t, j)] * c.xhat[(t, j)];
            dbeta[j] += dy[(t, j)];
            dxhat[j] = dy[(t, j)] * p.gamma[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = (0..d).map(|j| dxhat[j] * c.xhat[(t, j)]).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[(t, j)] = c.inv_std[t] * (dxhat[j] - m1 - c.xhat[(t, j)] * m2);
        }
    }
    dx
}

fn softmax_rows(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN in softmax input".into()));
    }
    let mut p = s.clone();
    for mut row in p.row_iter_mut() {
        let mx = row.max();
        row.apply(|x| *x = (*x - mx).exp());
        let z = row.sum();
        row /= z;
    }
    Ok(p)
}

pub(crate) struct HeadCache {
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    p: DMatrix<f64>,
    z: DMatrix<f64>,
}

pub(crate) struct MhsaCache {
    x: DMatrix<f64>,
    heads: Vec<HeadCache>,
}

/// `Σ_i softmax(X W_q⁽ⁱ⁾ W_k⁽ⁱ⁾ᵀ Xᵀ / √d) X W_v⁽ⁱ⁾ W_o⁽ⁱ⁾ᵀ`, head `i` owning
/// columns `i·d/N_h .. (i+1)·d/N_h` of each matrix. The scale is `√d`, not
/// `√(d/N_h)`.
pub fn mhsa_forward(x: &DMatrix<f64>, w: &LayerWeights, n_heads: usize) -> Result<DMatrix<f64>> {
    Ok(mhsa(x, w, n_heads)?.0)
}

pub(crate) fn mhsa(x: &DMatrix<f64>, w: &LayerWeights, n_heads: usize) -> Result<(DMatrix<f64>, MhsaCache)> {
    let (n, d) = x.shape();
    if n_heads == 0 || d % n_heads != 0 || w.q.shape() != (d, d) {
        return Err(Error::invalid(format!(
            "MHSA shape mismatch: input {n}x{d}, W_q {:?}, {n_heads} heads",
            w.q.shape()
        )));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = DMatrix::zeros(n, d);
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let cols = i * dh;
        let q = x * w.q.columns(cols, dh);
        let k = x * w.k.columns(cols, dh);
        let v = x * w.v.columns(cols, dh);
        let p = softmax_rows(&((&q * k.transpose()) * scale))?;
        let z = &p * &v;
        out += &z * w.o.columns(cols, dh).transpose();
        heads.push(HeadCache { q, k, v, p, z });
    }
    Ok((out, MhsaCache { x: x.clone(), heads }))
}

/// Returns `dx`; adds weight gradients into `gw`.
pub(crate) fn mhsa_backward(dout: &DMatrix<f64>, w: &LayerWeights, c: &MhsaCache, gw: &mut LayerWeights) -> DMatrix<f64> {
    let (n, d) = c.x.shape();
    let n_heads = c.heads.len();
    let dh = d / n_heads;
    let scale = 1.0 / (d as f64).sqrt();
    let xt = c.x.transpose();
    let mut dx = DMatrix::zeros(n, d);
    for (i, h) in c.heads.iter().enumerate() {
        let cols = i * dh;
        let wo = w.o.columns(cols, dh);
        let dz = dout * wo;
        add_columns(&mut gw.o, cols, &(dout.transpose() * &h.z));
        let dp = &dz * h.v.transpose();
        let dv = h.p.transpose() * &dz;
        let mut ds = DMatrix::zeros(n, n);
        for t in 0..n {
            let dot: f64 = (0..n).map(|s| dp[(t, s)] * h.p[(t, s)]).sum();
            for s in 0..n {
                ds[(t, s)] = h.p[(t, s)] * (dp[(t, s)] - dot) * scale;
            }
        }
        let dq = &ds * &h.k;
        let dk = ds.transpose() * &h.q;
        add_columns(&mut gw.q, cols, &(&xt * &dq));
        add_columns(&mut gw.k, cols, &(&xt * &dk));
        add_columns(&mut gw.v, cols, &(&xt * &dv));
        dx += dq * w.q.columns(cols, dh).transpose();
        dx += dk * w.k.columns(cols, dh).transpose();
        dx += dv * w.v.columns(cols, dh).transpose();
    }
    dx
}

fn add_columns(dst: &mut DMatrix<f64>, start: usize, delta: &DMatrix<f64>) {
    let mut view = dst.columns_mut(start, delta.ncols());
    view += delta;
}

pub(crate) struct MlpCache {
    x: DMatrix<f64>,
    h: DMatrix<f64>,
    a: DMatrix<f64>,
}

/// `GELU(X W_up) W_down`.
pub fn mlp_forward(x: &DMatrix<f64>, up: &DMatrix<f64>, down: &DMatrix<f64>) -> DMatrix<f64> {
    mlp(x, up, down).0
}

pub(crate) fn mlp(x: &DMatrix<f64>, up: &DMatrix<f64>, down: &DMatrix<f64>) -> (DMatrix<f64>, MlpCache) {
    let h = x * up;
    let a = h.map(gelu);
    let out = &a * down;
    (out, MlpCache { x: x.clone(), h, a })
}

pub(crate) fn mlp_backward(dout: &DMatrix<f64>, w: &LayerWeights, c: &MlpCache, gw: &mut LayerWeights) -> DMatrix<f64> {
    gw.down += c.a.transpose() * dout;
    let da = dout * w.down.transpose();
    let dh = da.zip_map(&c.h, |g, h| g * gelu_grad(h));
    gw.up += c.x.transpose() * &dh;
    dh * w.up.transpose()
}

pub(crate) struct BlockCache {
    ln1: LnCache,
    attn: MhsaCache,
    ln2: LnCache,
    mlp: MlpCache,
}

/// Trainable parameters outside the adapted matrices: per-layer layer norms
/// and the linear token head.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxParams {
    pub ln1: Vec<LayerNormParams>,
    pub ln2: Vec<LayerNormParams>,
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

impl AuxParams {
    pub fn new(d: usize, layers: usize, head_w: Vec<f64>, head_b: f64) -> Self {
        assert_eq!(head_w.len(), d, "head width mismatch");
        Self {
            ln1: vec![LayerNormParams::identity(d); layers],
            ln2: vec![LayerNormParams::identity(d); layers],
            head_w,
            head_b,
        }
    }

    pub fn len(&self) -> usize {
        let d = self.head_w.len();
        4 * d * self.ln1.len() + d + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat order: per layer `γ₁, β₁, γ₂, β₂`, then the head weights and bias.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (a, b) in self.ln1.iter().zip(&self.ln2) {
            out.extend_from_slice(&a.gamma);
            out.extend_from_slice(&a.beta);
            out.extend_from_slice(&b.gamma);
            out.extend_from_slice(&b.beta);
        }
        out.extend_from_slice(&self.head_w);
        out.push(self.head_b);
        out
    }

    pub fn set_from(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.len(), "aux parameter length mismatch");
        let d = self.head_w.len();
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&p[off..off + d]);
            off += d;
        };
        for (a, b) in self.ln1.iter_mut().zip(self.ln2.iter_mut()) {
            take(&mut a.gamma);
            take(&mut a.beta);
            take(&mut b.gamma);
            take(&mut b.beta);
        }
        take(&mut self.head_w);
        self.head_b = p[p.len() - 1];
    }

    pub(crate) fn zeros_like(&self) -> AuxParams {
        let d = self.head_w.len();
        let z = LayerNormParams {
            gamma: vec![0.0; d],
            beta: vec![0.0; d],
        };
        Self {
            ln1: vec![z.clone(); self.ln1.len()],
            ln2: vec![z; self.ln2.len()],
            head_w: vec![0.0; d],
            head_b: 0.0,
        }
    }
}

pub(crate) struct EncoderCache {
    blocks: Vec<BlockCache>,
}

/// Pre-LN blocks: `X ← X + MHSA(LN₁(X))`, then `X ← X + MLP(LN₂(X))`.
pub(crate) fn encoder(
    x: &DMatrix<f64>,
    w: &EncoderWeights,
    aux: &AuxParams,
    n_heads: usize,
) -> Result<(DMatrix<f64>, EncoderCache)> {
    let mut h = x.clone();
    let mut blocks = Vec::with_capacity(w.num_layers());
    for (l, lw) in w.layers().iter().enumerate() {
        let (n1, ln1) = layer_norm(&h, &aux.ln1[l]);
        let (a, attn) = mhsa(&n1, lw, n_heads).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("layer {}: {m}", l + 1)),
            other => other,
        })?;
        h += a;
        let (n2, ln2) = layer_norm(&h, &aux.ln2[l]);
        let (m, mlp_c) = mlp(&n2, &lw.up, &lw.down);
        h += m;
        blocks.push(BlockCache {
            ln1,
            attn,
            ln2,
            mlp: mlp_c,
        });
    }
    Ok((h, EncoderCache { blocks }))
}

/// Backpropagates `dout` through the encoder, accumulating weight gradients
/// into `gw` and layer-norm gradients into `gaux`.
pub(crate) fn encoder_backward(
    dout: &DMatrix<f64>,
    w: &EncoderWeights,
    aux: &AuxParams,
    cache: &EncoderCache,
    gw: &mut EncoderWeights,
    gaux: &mut AuxParams,
) -> DMatrix<f64> {
    let mut g = dout.clone();
    for l in (0..w.num_layers()).rev() {
        let lw = w.layer(l);
        let c = &cache.blocks[l];
        let mut glw = gw.layer(l).clone();
        let dn2 = mlp_backward(&g, lw, &c.mlp, &mut glw);
        let lnp = &mut gaux.ln2[l];
        let (dg, db) = (&mut lnp.gamma, &mut lnp.beta);
        g += layer_norm_backward(&dn2, &aux.ln2[l], &c.ln2, dg, db);
        let dn1 = mhsa_backward(&g, lw, &c.attn, &mut glw);
        let lnp = &mut gaux.ln1[l];
        let (dg, db) = (&mut lnp.gamma, &mut lnp.beta);
        g += layer_norm_backward(&dn1, &aux.ln1[l], &c.ln1, dg, db);
        for role in Role::ALL {
            *gw.matrix_mut(l, role) = glw.get(role).clone();
        }
    }
    g
}

/// Token head `y_t = h_t · w + b`.
pub(crate) fn head(h: &DMatrix<f64>, aux: &AuxParams) -> DVector<f64> {
    let w = DVector::from_column_slice(&aux.head_w);
    h * w + DVector::from_element(h.nrows(), aux.head_b)
}
