//! A desk-scale transformer encoder for exercising the adapters end to end.
//!
//! Tokens flow through `L` pre-LN blocks and a linear token head. Two toy
//! tasks sit on top: regression of per-token targets, and a binary "voxel"
//! task where each token is one voxel of a `seq_len × 1 × 1` volume scored
//! with the soft Dice loss. Gradients are computed in closed form by
//! reverse-mode passes through every block and then mapped onto whichever
//! adapter parametrization is being trained.

mod layers;
mod train;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::adapters::{Adapter, EncoderWeights};
use crate::error::{Error, Result};
use crate::segmetrics::{soft_dice_term, Mask3D};

pub use layers::{gelu, gelu_grad, mhsa_forward, mlp_forward, AuxParams, LayerNormParams, LN_EPS};
pub use train::{
    finite_diff_check, gradient_check, run_training, train_step, AdamState, FdReport, TrainConfig, TrainReport, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPS, GRAD_CHECK_CONFIG,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Regression,
    BinaryVoxelToy,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::BinaryVoxelToy => "binary-voxel-toy",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "binary-voxel-toy" | "voxel" => Ok(Task::BinaryVoxelToy),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub n_heads: usize,
    pub layers: usize,
    pub seq_len: usize,
    pub task: Task,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.seq_len == 0 {
            return Err(Error::invalid("d, n_heads and seq_len must be positive"));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Regression(Vec<f64>),
    Mask(Mask3D),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: DMatrix<f64>,
    pub target: Target,
}

/// Runs the encoder stack on one token matrix.
pub fn encoder_forward(x: &DMatrix<f64>, w: &EncoderWeights, aux: &AuxParams, config: &ModelConfig) -> Result<DMatrix<f64>> {
    config.validate()?;
    if x.ncols() != w.d() || aux.ln1.len() != w.num_layers() {
        return Err(Error::invalid(format!(
            "input width {} / {} layer norms do not match d = {}, {} layers",
            x.ncols(),
            aux.ln1.len(),
            w.d(),
            w.num_layers()
        )));
    }
    Ok(layers::encoder(x, w, aux, config.n_heads)?.0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Task head output: raw values for regression, probabilities for the voxel task.
pub fn predict(sample_x: &DMatrix<f64>, w: &EncoderWeights, aux: &AuxParams, config: &ModelConfig) -> Result<Vec<f64>> {
    let h = encoder_forward(sample_x, w, aux, config)?;
    let y = layers::head(&h, aux);
    Ok(match config.task {
        Task::Regression => y.iter().copied().collect(),
        Task::BinaryVoxelToy => y.iter().map(|&v| sigmoid(v)).collect(),
    })
}

/// Per-sample loss and its gradient with respect to the head output.
fn sample_loss(y: &[f64], target: &Target, task: Task) -> Result<(f64, Vec<f64>)> {
    match (task, target) {
        (Task::Regression, Target::Regression(t)) => {
            let n = y.len() as f64;
            let loss = y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
            let grad = y.iter().zip(t).map(|(a, b)| 2.0 * (a - b) / n).collect();
            Ok((loss, grad))
        }
        (Task::BinaryVoxelToy, Target::Mask(m)) => {
            let p: Vec<f64> = y.iter().map(|&v| sigmoid(v)).collect();
            let (loss, dp) = soft_dice_term(&p, m.voxels());
            let grad = dp.iter().zip(&p).map(|(g, p)| g * p * (1.0 - p)).collect();
            Ok((loss, grad))
        }
        _ => Err(Error::invalid("target kind does not match the task")),
    }
}

/// Gradients of the batch loss with respect to the effective encoder
/// weights and the auxiliary parameters.
pub struct WeightGradients {
    pub loss: f64,
    pub weights: EncoderWeights,
    pub aux: Vec<f64>,
}

/// Batch-mean loss and reverse-mode gradients for raw encoder weights.
/// Samples are processed in parallel and reduced in batch order.
pub fn loss_and_grad(
    config: &ModelConfig,
    w: &EncoderWeights,
    aux: &AuxParams,
    batch: &[Sample],
) -> Result<WeightGradients> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let per_sample = batch
        .par_iter()
        .map(|s| {
            let (h, cache) = layers::encoder(&s.x, w, aux, config.n_heads)?;
            let y = layers::head(&h, aux);
            let y: Vec<f64> = y.iter().copied().collect();
            let (loss, dy) = sample_loss(&y, &s.target, config.task)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {loss}")));
            }
            let mut gaux = aux.zeros_like();
            for (j, gw) in gaux.head_w.iter_mut().enumerate() {
                *gw = (0..h.nrows()).map(|t| dy[t] * h[(t, j)]).sum();
            }
            gaux.head_b = dy.iter().sum();
            let dh = DMatrix::from_fn(h.nrows(), h.ncols(), |t, j| dy[t] * aux.head_w[j]);
            let mut gw = EncoderWeights::zeros(w.d(), w.num_layers());
            layers::encoder_backward(&dh, w, aux, &cache, &mut gw, &mut gaux);
            Ok((loss, gw, gaux.to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;

    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut gw = EncoderWeights::zeros(w.d(), w.num_layers());
    let mut gaux = vec![0.0; aux.len()];
    for (l, g, a) in per_sample {
        loss += l * inv;
        for layer in 0..w.num_layers() {
            for role in crate::adapters::Role::ALL {
                *gw.matrix_mut(layer, role) += g.layer(layer).get(role) * inv;
            }
        }
        for (acc, x) in gaux.iter_mut().zip(a) {
            *acc += x * inv;
        }
    }
    Ok(WeightGradients {
        loss,
        weights: gw,
        aux: gaux,
    })
}

/// Batch-mean loss only.
pub fn batch_loss(config: &ModelConfig, w: &EncoderWeights, aux: &AuxParams, batch: &[Sample]) -> Result<f64> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let losses = batch
        .par_iter()
        .map(|s| {
            let h = layers::encoder(&s.x, w, aux, config.n_heads)?.0;
            let y: Vec<f64> = layers::head(&h, aux).iter().copied().collect();
            Ok(sample_loss(&y, &s.target, config.task)?.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    let inv = 1.0 / batch.len() as f64;
    Ok(losses.iter().map(|l| l * inv).sum())
}

/// Gradients with respect to every trainable parameter when training
/// through `adapter`: first the adapter's own parameters, then `aux`.
pub struct ParamGradients {
    pub loss: f64,
    pub adapter: Vec<f64>,
    pub aux: Vec<f64>,
}

impl ParamGradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut g = self.adapter.clone();
        g.extend_from_slice(&self.aux);
        g
    }
}

pub fn grad_adapter(config: &ModelConfig, adapter: &Adapter, aux: &AuxParams, batch: &[Sample]) -> Result<ParamGradients> {
    let w = adapter.effective_weights()?;
    let g = loss_and_grad(config, &w, aux, batch)?;
    Ok(ParamGradients {
        loss: g.loss,
        adapter: adapter.chain_gradient(&g.weights)?,
        aux: g.aux,
    })
}

/// Flattened trainable vector `[adapter params, aux params]`.
pub fn trainable_vector(adapter: &Adapter, aux: &AuxParams) -> Vec<f64> {
    let mut p = adapter.trainable_params();
    p.extend(aux.to_vec());
    p
}

pub fn set_trainable_vector(adapter: &mut Adapter, aux: &mut AuxParams, p: &[f64]) {
    let n = adapter.trainable_len();
    adapter.set_trainable_params(&p[..n]);
    aux.set_from(&p[n..]);
}

/// Seeded synthetic task: a "pre-trained" base encoder plus a teacher whose
/// weights differ by a perturbation shared across layers, and data labelled
/// by the teacher.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub config: ModelConfig,
    pub base: EncoderWeights,
    pub aux: AuxParams,
    pub samples: Vec<Sample>,
}

impl ToyTask {
    pub fn generate(config: ModelConfig, n_samples: usize, seed: u64) -> Result<ToyTask> {
        config.validate()?;
        let (d, layers) = (config.d, config.layers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = EncoderWeights::random(d, layers, 1.0, seed ^ 0x5eed_0001);

        // teacher: the same rank-one direction added to every matrix of a role
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut teacher = base.clone();
        for role in crate::adapters::Role::ALL {
            let (m, n) = role.shape(d);
            let u = DMatrix::from_fn(m, 1, |_, _| normal.sample(&mut rng));
            let v = DMatrix::from_fn(1, n, |_, _| normal.sample(&mut rng));
            let delta = (&u * &v) * (0.5 / ((m * n) as f64).sqrt());
            for l in 0..layers {
                *teacher.matrix_mut(l, role) += &delta;
            }
        }
        let head_std = 1.0 / (d as f64).sqrt();
        let head_normal = Normal::new(0.0, head_std).expect("valid std");
        let teacher_head: Vec<f64> = (0..d).map(|_| head_normal.sample(&mut rng)).collect();
        let teacher_aux = AuxParams::new(d, layers, teacher_head, 0.0);
        let student_head: Vec<f64> = (0..d).map(|_| head_normal.sample(&mut rng)).collect();
        let aux = AuxParams::new(d, layers, student_head, 0.0);

        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let x = DMatrix::from_fn(config.seq_len, d, |_, _| normal.sample(&mut rng));
            let y = predict(&x, &teacher, &teacher_aux, &config)?;
            let target = match config.task {
                Task::Regression => Target::Regression(y),
                Task::BinaryVoxelToy => {
                    let mut vox: Vec<u8> = y.iter().map(|&p| (p > 0.5) as u8).collect();
                    if vox.iter().all(|&v| v == 0) {
                        vox[0] = 1;
                    }
                    Target::Mask(Mask3D::new([config.seq_len, 1, 1], [1.0; 3], vox)?)
                }
            };
            samples.push(Sample { x, target });
        }
        Ok(ToyTask {
            config,
            base,
            aux,
            samples,
        })
    }

    /// Deterministic cyclic minibatch for iteration `t`.
    pub fn batch(&self, t: usize, size: usize) -> Vec<Sample> {
        let n = self.samples.len();
        (0..size).map(|i| self.samples[(t * size + i) % n].clone()).collect()
    }
}
