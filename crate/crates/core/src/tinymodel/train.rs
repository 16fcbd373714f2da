//! Adam with a poly learning-rate schedule, the training loop, and the
//! central-difference gradient oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{Adapter, Method};
use crate::error::{Error, Result};

use super::{batch_loss, grad_adapter, set_trainable_vector, trainable_vector, AuxParams, ModelConfig, Sample, ToyTask};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub total_iters: usize,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            total_iters: 200,
            poly_power: 0.9,
            weight_decay: 1e-5,
            batch: 4,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 || self.batch == 0 {
            return Err(Error::invalid("total_iters and batch must be positive"));
        }
        if !(self.lr0 >= 0.0) || !(self.weight_decay >= 0.0) || !(self.poly_power > 0.0) {
            return Err(Error::invalid("lr0 and weight_decay must be nonnegative, poly_power positive"));
        }
        Ok(())
    }

    /// `lr0·(1 − t/T)^p`, zero from `t = T` on.
    pub fn lr(&self, t: usize) -> f64 {
        if t >= self.total_iters {
            return 0.0;
        }
        self.lr0 * (1.0 - t as f64 / self.total_iters as f64).powf(self.poly_power)
    }
}

/// Moment estimates for the trainable vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One Adam update with decoupled weight decay, in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * params[i]);
        }
    }
}

/// One optimizer step at iteration `t`; returns the batch loss before the update.
pub fn train_step(
    state: &mut AdamState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    adapter: &mut Adapter,
    aux: &mut AuxParams,
    batch: &[Sample],
    t: usize,
) -> Result<f64> {
    if t >= cfg.total_iters {
        return Err(Error::invalid(format!(
            "iteration {t} is past total_iters = {}",
            cfg.total_iters
        )));
    }
    let g = grad_adapter(model, adapter, aux, batch)?;
    let mut p = trainable_vector(adapter, aux);
    state.update(&mut p, &g.flat(), cfg.lr(t), cfg.weight_decay);
    set_trainable_vector(adapter, aux, &p);
    Ok(g.loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Loss over the whole data set before the first step.
    pub initial_loss: f64,
    /// Loss over the whole data set after the last step.
    pub final_loss: f64,
    /// Minibatch loss at every step, before its update.
    pub step_losses: Vec<f64>,
    pub trainable_params: usize,
}

pub fn run_training(task: &ToyTask, adapter: &mut Adapter, aux: &mut AuxParams, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let loss_all = |adapter: &Adapter, aux: &AuxParams| -> Result<f64> {
        batch_loss(&task.config, &adapter.effective_weights()?, aux, &task.samples)
    };
    let initial_loss = loss_all(adapter, aux)?;
    let mut state = AdamState::new(adapter.trainable_len() + aux.len());
    let mut step_losses = Vec::with_capacity(cfg.total_iters);
    for t in 0..cfg.total_iters {
        let batch = task.batch(t, cfg.batch);
        let l = train_step(&mut state, &task.config, cfg, adapter, aux, &batch, t)?;
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {t}")));
        }
        step_losses.push(l);
    }
    let final_loss = loss_all(adapter, aux)?;
    if !final_loss.is_finite() {
        return Err(Error::Numeric("non-finite final loss".into()));
    }
    Ok(TrainReport {
        initial_loss,
        final_loss,
        step_losses,
        trainable_params: adapter.trainable_len() + aux.len(),
    })
}

/// Worst disagreement between an analytic gradient and central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Max `|g − fd| / max(|g|, |fd|)` over coordinates with magnitude ≥ `small`.
    pub max_rel_err: f64,
    /// Max `|g − fd|` over the remaining coordinates.
    pub max_abs_err_small: f64,
    pub worst_index: Option<usize>,
    pub coordinates: usize,
    pub small: f64,
}

impl FdReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol && self.max_abs_err_small <= self.small
    }
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` per coordinate, compared
/// against `grad`. Coordinates where both values are below `1e-8` are
/// compared absolutely.
pub fn finite_diff_check<F>(f: F, params: &[f64], grad: &[f64], h: f64) -> Result<FdReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if params.len() != grad.len() {
        return Err(Error::invalid("gradient length does not match parameters"));
    }
    let small = 1e-8;
    let mut x = params.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        max_abs_err_small: 0.0,
        worst_index: None,
        coordinates: params.len(),
        small,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x)?;
        x[i] = orig - h;
        let fm = f(&x)?;
        x[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let g = grad[i];
        let scale = g.abs().max(fd.abs());
        if scale < small {
            report.max_abs_err_small = report.max_abs_err_small.max((g - fd).abs());
        } else {
            let rel = (g - fd).abs() / scale;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_index = Some(i);
            }
        }
    }
    Ok(report)
}

/// Dimensions of the gradient-check model.
pub const GRAD_CHECK_CONFIG: ModelConfig = ModelConfig {
    d: 8,
    n_heads: 2,
    layers: 2,
    seq_len: 4,
    task: super::Task::Regression,
};

/// Central-difference check of every trainable coordinate of `method` on a
/// seeded toy batch. The adapter and auxiliary parameters are first moved
/// off their initial values so that no gradient block vanishes identically.
pub fn gradient_check(model: &ModelConfig, method: Method, rank: usize, seed: u64, h: f64) -> Result<FdReport> {
    let toy = ToyTask::generate(*model, 3, seed)?;
    let mut adapter = Adapter::build(method, &toy.base, rank, seed)?;
    let mut aux = toy.aux.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d_c4ec);
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let mut p = trainable_vector(&adapter, &aux);
    for v in p.iter_mut() {
        *v += noise.sample(&mut rng);
    }
    set_trainable_vector(&mut adapter, &mut aux, &p);

    let g = grad_adapter(model, &adapter, &aux, &toy.samples)?;
    let f = |q: &[f64]| {
        let mut a = adapter.clone();
        let mut x = aux.clone();
        set_trainable_vector(&mut a, &mut x, q);
        batch_loss(model, &a.effective_weights()?, &x, &toy.samples)
    };
    finite_diff_check(f, &p, &g.flat(), h)
}
