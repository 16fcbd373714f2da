//! Array naming conventions for checkpoints, stacked tensors, adapters and
//! masks on top of the raw container.
//!
//! * checkpoint: `layer.{ℓ}.{q|k|v|o|up|down}`, `ℓ` counted from 1, each a
//!   row-major `m × n` matrix. Any other array is carried along untouched.
//! * stacked: `w_sa`, `w_up`, `w_down` as `n1 × n2 × n3` tensors.
//! * adapter: `{t}.U` (`n1 × r × n3`), `{t}.S_tubes` (`r × n3`), `{t}.V`
//!   (`n2 × r × n3`) and `{t}.residual` (`n1 × n2 × n3`) for each stacked
//!   tensor `t`, plus meta keys `rank`, `d`, `layers`, `stack_order`, `method`.
//! * mask: a single 3-D array (preferably named `mask`) of 0/1 values, with
//!   optional meta `spacing: [sx, sy, sz]` in mm.

use lorapt::adapters::{
    stacked_shapes, EncoderWeights, LayerWeights, LoraPtAdapter, Method, Role, StackOrder, StackedTensors, TensorSplit,
    TENSOR_NAMES,
};
use lorapt::segmetrics::Mask3D;
use lorapt::tsvd::LowRankFactors;
use lorapt::Tensor3;
use nalgebra::DMatrix;
use serde_json::Value;

use crate::container::{Array, ArrayData, Container, ContainerError, Dtype};

fn schema(msg: impl Into<String>) -> ContainerError {
    ContainerError::Schema(msg.into())
}

pub fn matrix_to_array(name: &str, m: &DMatrix<f64>, dtype: Dtype) -> Result<Array, ContainerError> {
    let (r, c) = m.shape();
    let values: Vec<f64> = (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect();
    Array::from_f64(name, vec![r, c], &values, dtype)
}

pub fn array_to_matrix(a: &Array, shape: (usize, usize)) -> Result<DMatrix<f64>, ContainerError> {
    if a.shape != [shape.0, shape.1] {
        return Err(schema(format!("{}: shape {:?}, expected {:?}", a.name, a.shape, [shape.0, shape.1])));
    }
    let v = a.to_f64();
    Ok(DMatrix::from_row_slice(shape.0, shape.1, &v))
}

pub fn tensor_to_array(name: &str, t: &Tensor3, dtype: Dtype) -> Result<Array, ContainerError> {
    let (n1, n2, n3) = t.shape();
    let mut values = Vec::with_capacity(t.len());
    for i in 0..n1 {
        for j in 0..n2 {
            for k in 0..n3 {
                values.push(t.get(i, j, k));
            }
        }
    }
    Array::from_f64(name, vec![n1, n2, n3], &values, dtype)
}

pub fn array_to_tensor(a: &Array, shape: (usize, usize, usize)) -> Result<Tensor3, ContainerError> {
    let (n1, n2, n3) = shape;
    if a.shape != [n1, n2, n3] {
        return Err(schema(format!("{}: shape {:?}, expected {:?}", a.name, a.shape, [n1, n2, n3])));
    }
    let v = a.to_f64();
    Ok(Tensor3::from_fn(n1, n2, n3, |i, j, k| v[(i * n2 + j) * n3 + k]))
}

fn check_finite(a: &Array) -> Result<(), ContainerError> {
    if a.to_f64().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(schema(format!("{}: contains non-finite values", a.name)))
    }
}

pub fn weight_name(layer: usize, role: Role) -> String {
    format!("layer.{}.{}", layer + 1, role.name())
}

/// Splits a checkpoint name into its 0-based layer index and role.
fn parse_weight_name(name: &str) -> Option<(usize, Role)> {
    let rest = name.strip_prefix("layer.")?;
    let (l, role) = rest.split_once('.')?;
    if l.is_empty() || l.starts_with('0') || !l.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let l: usize = l.parse().ok()?;
    Some((l - 1, Role::from_name(role)?))
}

pub fn weights_to_container(w: &EncoderWeights, dtype: Dtype, extras: &[Array]) -> Result<Container, ContainerError> {
    let mut c = Container::new();
    for l in 0..w.num_layers() {
        for role in Role::ALL {
            c.push(matrix_to_array(&weight_name(l, role), w.layer(l).get(role), dtype)?)?;
        }
    }
    for e in extras {
        c.push(e.clone())?;
    }
    c.meta.insert("kind".into(), "checkpoint".into());
    c.meta.insert("d".into(), w.d().into());
    c.meta.insert("layers".into(), w.num_layers().into());
    Ok(c)
}

/// Reads encoder weights; returns them with every array that is not a weight.
pub fn weights_from_container(c: &Container) -> Result<(EncoderWeights, Vec<Array>), ContainerError> {
    let mut layers = 0;
    let mut extras = Vec::new();
    for a in &c.arrays {
        match parse_weight_name(&a.name) {
            Some((l, _)) => layers = layers.max(l + 1),
            None => extras.push(a.clone()),
        }
    }
    if layers == 0 {
        return Err(schema("no layer.{l}.{role} weight arrays found"));
    }
    let q = c.require(&weight_name(0, Role::Q))?;
    let d = q.shape.first().copied().unwrap_or(0);
    if d == 0 {
        return Err(schema("layer.1.q has an empty or scalar shape"));
    }
    for (key, want) in [("d", d), ("layers", layers)] {
        if c.meta.contains_key(key) && c.meta_usize(key)? != want {
            return Err(schema(format!("meta {key} = {} but the arrays imply {want}", c.meta[key])));
        }
    }
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut lw = LayerWeights::zeros(d);
        for role in Role::ALL {
            let a = c.require(&weight_name(l, role))?;
            check_finite(a)?;
            *lw.get_mut(role) = array_to_matrix(a, role.shape(d))?;
        }
        out.push(lw);
    }
    let w = EncoderWeights::new(d, out).map_err(|e| schema(e.to_string()))?;
    Ok((w, extras))
}

pub fn stacked_to_container(s: &StackedTensors, dtype: Dtype) -> Result<Container, ContainerError> {
    let mut c = Container::new();
    for (name, t) in TENSOR_NAMES.iter().zip(s.tensors()) {
        c.push(tensor_to_array(name, t, dtype)?)?;
    }
    let (d, layers) = (s.w_sa.n1(), s.w_up.n3());
    c.meta.insert("kind".into(), "stacked".into());
    c.meta.insert("d".into(), d.into());
    c.meta.insert("layers".into(), layers.into());
    c.meta.insert("stack_order".into(), s.stack_order.tag().into());
    Ok(c)
}

pub fn adapter_to_container(a: &LoraPtAdapter, dtype: Dtype, extras: &[Array]) -> Result<Container, ContainerError> {
    let mut c = Container::new();
    for (name, sp) in TENSOR_NAMES.iter().zip(a.splits()) {
        let p = &sp.principal;
        c.push(tensor_to_array(&format!("{name}.U"), &p.u, dtype)?)?;
        c.push(Array::from_f64(format!("{name}.S_tubes"), vec![p.rank, p.n3()], &p.tubes(), dtype)?)?;
        c.push(tensor_to_array(&format!("{name}.V"), &p.v, dtype)?)?;
        c.push(tensor_to_array(&format!("{name}.residual"), sp.residual(), dtype)?)?;
    }
    for e in extras {
        c.push(e.clone())?;
    }
    c.meta.insert("kind".into(), "adapter".into());
    c.meta.insert("method".into(), Method::LoraPt.name().into());
    c.meta.insert("rank".into(), a.rank().into());
    c.meta.insert("d".into(), a.d().into());
    c.meta.insert("layers".into(), a.num_layers().into());
    c.meta.insert("stack_order".into(), a.stack_order().tag().into());
    Ok(c)
}

fn is_adapter_array(name: &str) -> bool {
    TENSOR_NAMES.iter().any(|t| {
        name.strip_prefix(t)
            .and_then(|rest| rest.strip_prefix('.'))
            .is_some_and(|part| matches!(part, "U" | "S_tubes" | "V" | "residual"))
    })
}

/// Reads a LoRA-PT adapter; returns it with every array it does not own.
pub fn adapter_from_container(c: &Container) -> Result<(LoraPtAdapter, Vec<Array>), ContainerError> {
    let method = c.meta_str("method")?;
    if method != Method::LoraPt.name() {
        return Err(schema(format!("adapter method {method:?} is not lora-pt")));
    }
    let rank = c.meta_usize("rank")?;
    let d = c.meta_usize("d")?;
    let layers = c.meta_usize("layers")?;
    let order: StackOrder = c.meta_str("stack_order")?.parse().map_err(|e: lorapt::Error| schema(e.to_string()))?;
    if rank == 0 || d == 0 || layers == 0 || rank > d {
        return Err(schema(format!("meta rank = {rank}, d = {d}, layers = {layers} is inconsistent")));
    }
    let shapes = stacked_shapes(d, layers);
    let mut splits = Vec::with_capacity(3);
    for (name, &(n1, n2, n3)) in TENSOR_NAMES.iter().zip(&shapes) {
        let get = |part: &str| {
            let a = c.require(&format!("{name}.{part}"))?;
            check_finite(a)?;
            Ok::<_, ContainerError>(a)
        };
        let u = array_to_tensor(get("U")?, (n1, rank, n3))?;
        let v = array_to_tensor(get("V")?, (n2, rank, n3))?;
        let tubes = get("S_tubes")?;
        if tubes.shape != [rank, n3] {
            return Err(schema(format!("{}: shape {:?}, expected {:?}", tubes.name, tubes.shape, [rank, n3])));
        }
        let residual = array_to_tensor(get("residual")?, (n1, n2, n3))?;
        let principal = LowRankFactors::from_tubes(u, &tubes.to_f64(), v).map_err(|e| schema(e.to_string()))?;
        splits.push(TensorSplit::new(principal, residual).map_err(|e| schema(e.to_string()))?);
    }
    let splits: [TensorSplit; 3] = splits.try_into().expect("three tensors");
    let adapter = LoraPtAdapter::from_splits(splits, order).map_err(|e| schema(e.to_string()))?;
    let extras = c.arrays.iter().filter(|a| !is_adapter_array(&a.name)).cloned().collect();
    Ok((adapter, extras))
}

pub fn mask_to_container(m: &Mask3D) -> Result<Container, ContainerError> {
    let mut c = Container::new();
    let vals: Vec<f64> = m.voxels().iter().map(|&v| v as f64).collect();
    c.push(Array::from_f64("mask", m.dims().to_vec(), &vals, Dtype::F32)?)?;
    c.meta.insert("kind".into(), "mask".into());
    c.meta.insert("spacing".into(), m.spacing().iter().map(|&s| Value::from(s)).collect::<Vec<_>>().into());
    Ok(c)
}

pub fn mask_from_container(c: &Container) -> Result<Mask3D, ContainerError> {
    let a = match c.get("mask") {
        Some(a) => a,
        None if c.arrays.len() == 1 => &c.arrays[0],
        None => return Err(schema("expected an array named \"mask\" or a single array")),
    };
    let dims: [usize; 3] = a
        .shape
        .clone()
        .try_into()
        .map_err(|_| schema(format!("{}: mask must be 3-D, got shape {:?}", a.name, a.shape)))?;
    let voxels = match &a.data {
        ArrayData::U8(v) => v.clone(),
        ArrayData::F32(_) | ArrayData::F64(_) => a
            .to_f64()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0u8),
                1.0 => Ok(1u8),
                other => Err(schema(format!("{}: mask value {other} is not 0 or 1", a.name))),
            })
            .collect::<Result<_, _>>()?,
    };
    let spacing = match c.meta.get("spacing") {
        None => [1.0; 3],
        Some(v) => {
            let s: Vec<f64> = v
                .as_array()
                .map(|xs| xs.iter().filter_map(Value::as_f64).collect())
                .unwrap_or_default();
            s.try_into().map_err(|_| schema("meta spacing must be three numbers"))?
        }
    };
    Mask3D::new(dims, spacing, voxels).map_err(|e| schema(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_names_are_one_based() {
        assert_eq!(weight_name(0, Role::Up), "layer.1.up");
        assert_eq!(parse_weight_name("layer.12.down"), Some((11, Role::Down)));
        assert_eq!(parse_weight_name("layer.0.q"), None);
        assert_eq!(parse_weight_name("layer.+1.q"), None);
        assert_eq!(parse_weight_name("layer.1.gate"), None);
        assert_eq!(parse_weight_name("head.w"), None);
    }

    #[test]
    fn tensors_are_row_major() {
        let t = Tensor3::from_fn(2, 3, 4, |i, j, k| (100 * i + 10 * j + k) as f64);
        let a = tensor_to_array("t", &t, Dtype::F64).unwrap();
        assert_eq!(&a.to_f64()[..5], &[0.0, 1.0, 2.0, 3.0, 10.0]);
        assert_eq!(array_to_tensor(&a, (2, 3, 4)).unwrap(), t);
        assert!(array_to_tensor(&a, (3, 2, 4)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_keeps_extras() {
        let w = EncoderWeights::random(4, 2, 1.0, 1);
        let extra = Array::from_f64("head.w", vec![4], &[1.0, 2.0, 3.0, 4.0], Dtype::F64).unwrap();
        let c = weights_to_container(&w, Dtype::F64, std::slice::from_ref(&extra)).unwrap();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        let (w2, extras) = weights_from_container(&back).unwrap();
        assert_eq!(w2, w);
        assert_eq!(extras, vec![extra]);
    }

    #[test]
    fn missing_weight_is_a_schema_error() {
        let w = EncoderWeights::random(4, 2, 1.0, 1);
        let mut c = weights_to_container(&w, Dtype::F64, &[]).unwrap();
        c.arrays.retain(|a| a.name != "layer.2.v");
        assert!(matches!(weights_from_container(&c), Err(ContainerError::Schema(_))));
        let mut c = weights_to_container(&w, Dtype::F64, &[]).unwrap();
        c.meta.insert("layers".into(), 3.into());
        assert!(weights_from_container(&c).is_err());
    }

    #[test]
    fn masks_accept_u8_and_reject_fractions() {
        let mut c = Container::new();
        c.push(Array::new("x", vec![1, 2, 1], ArrayData::U8(vec![0, 1])).unwrap()).unwrap();
        assert_eq!(mask_from_container(&c).unwrap().count(), 1);
        let mut c = Container::new();
        c.push(Array::from_f64("mask", vec![1, 2, 1], &[0.0, 0.5], Dtype::F32).unwrap()).unwrap();
        assert!(mask_from_container(&c).is_err());
        let m = Mask3D::new([2, 1, 1], [0.5, 1.0, 2.0], vec![1, 0]).unwrap();
        let c = mask_to_container(&m).unwrap();
        assert_eq!(mask_from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap(), m);
    }
}
