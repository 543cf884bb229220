//! Flow-matching machinery: the linear reference flow, noise schedules and
//! the drift conversion, time grids with tail refinement, pre-training, and
//! ODE/SDE samplers.

use crate::error::{Error, Result};
use crate::model::nets::Adam;
use crate::model::{EpochRecord, VectorFieldModel, VelocityField};
use crate::rng::{standard_normal, stream_rng, Rng};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Linear (optimal-transport) reference flow `X_t = beta_t X_1 + gamma_t X_0`
/// with `beta_t = t`, `gamma_t = 1 - t`.
pub struct ReferenceFlow;

impl ReferenceFlow {
    pub fn beta(t: f64) -> f64 {
        t
    }

    pub fn gamma(t: f64) -> f64 {
        1.0 - t
    }
}

/// `eta_t = gamma_t ((beta'/beta) gamma_t - gamma'_t)`, which reduces to
/// `(1-t)/t` for the linear schedule. Undefined at `t = 0`.
pub fn eta(t: f64) -> Result<f64> {
    if t <= 0.0 {
        return Err(Error::config("eta is undefined at t = 0"));
    }
    Ok((1.0 - t) / t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseSchedule {
    Zero,
    /// Memoryless schedule regularized by the solver step `h`:
    /// `sigma(t) = sqrt(2 (1 - t + h) / (t + h))`.
    Memoryless { h: f64 },
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if let NoiseSchedule::Memoryless { h } = self {
            if !(*h > 0.0) {
                return Err(Error::config("memoryless schedule needs h > 0"));
            }
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Zero => 0.0,
            NoiseSchedule::Memoryless { h } => (2.0 * (1.0 - t + h) / (t + h)).sqrt(),
        }
    }

    /// Coefficient `sigma(t)^2 / (2 eta_t)` with eta regularized by the
    /// same `h` as sigma, so the pair stays consistent down to `t = 0`.
    pub fn drift_coefficient(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Zero => 0.0,
            NoiseSchedule::Memoryless { h } => {
                let eta_reg = (1.0 - t + h) / (t + h);
                self.sigma(t) * self.sigma(t) / (2.0 * eta_reg)
            }
        }
    }

    /// Regularized interpolant rate `beta'/beta = 1/(t+h)` (plain `1/t`
    /// for the zero schedule, where it is never evaluated at `t = 0`).
    fn rate(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Zero => 1.0 / t,
            NoiseSchedule::Memoryless { h } => 1.0 / (t + h),
        }
    }
}

/// SDE drift `b = v + (sigma^2 / 2 eta) (v - x (beta'/beta))`; the zero
/// schedule returns the plain velocity.
pub fn drift(v: &Tensor, x: &Tensor, t: f64, schedule: NoiseSchedule) -> Tensor {
    match schedule {
        NoiseSchedule::Zero => v.clone(),
        NoiseSchedule::Memoryless { .. } => {
            let c = schedule.drift_coefficient(t);
            let rate = schedule.rate(t);
            let mut out = v.clone();
            for (o, (&vv, &xv)) in out.data_mut().iter_mut().zip(v.data().iter().zip(x.data())) {
                *o = vv + c * (vv - xv * rate);
            }
            out
        }
    }
}

/// Euler-Maruyama update `x + h b + sigma sqrt(h) eps`.
pub fn sde_step(x: &Tensor, b: &Tensor, sigma: f64, h_step: f64, rng: &mut Rng) -> Result<Tensor> {
    if h_step <= 0.0 {
        return Err(Error::config("sde_step needs a positive step"));
    }
    let mut out = x.clone();
    if sigma != 0.0 {
        let eps = standard_normal(rng, x.len());
        let sq = sigma * h_step.sqrt();
        for ((o, &bv), e) in out.data_mut().iter_mut().zip(b.data()).zip(eps) {
            *o += h_step * bv + sq * e;
        }
    } else {
        out.axpy(h_step, b);
    }
    if !out.all_finite() {
        return Err(Error::numerical("sde_step produced non-finite state"));
    }
    Ok(out)
}

/// Strictly increasing time nodes over [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(t_nodes: usize) -> Result<TimeGrid> {
        if t_nodes < 2 {
            return Err(Error::config("time grid needs at least 2 nodes"));
        }
        Ok(TimeGrid {
            nodes: (0..t_nodes)
                .map(|i| i as f64 / (t_nodes - 1) as f64)
                .collect(),
        })
    }

    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Tail refinement: counting intervals from the end, interval `m` is
    /// split into `k_sub - m` equal sub-steps for `m = 0..k_sub`. Coarse
    /// nodes are preserved.
    pub fn augment(&self, k_sub: usize) -> Result<TimeGrid> {
        if k_sub == 0 {
            return Ok(self.clone());
        }
        if k_sub >= self.nodes.len() {
            return Err(Error::config("k_sub must be smaller than the node count"));
        }
        let n_int = self.nodes.len() - 1;
        let mut nodes = Vec::new();
        for i in 0..n_int {
            let m_from_end = n_int - 1 - i;
            let splits = if m_from_end < k_sub { k_sub - m_from_end } else { 1 };
            let (a, b) = (self.nodes[i], self.nodes[i + 1]);
            for s in 0..splits {
                nodes.push(a + (b - a) * s as f64 / splits as f64);
            }
        }
        nodes.push(1.0);
        Ok(TimeGrid { nodes })
    }
}

/// Deterministic Euler rollout of the probability-flow ODE from `x0`.
pub fn sample_ode(model: &dyn VelocityField, x0: &Tensor, timegrid: &TimeGrid) -> Result<Tensor> {
    let mut x = x0.clone();
    for i in 0..timegrid.n_steps() {
        let t = timegrid.nodes[i];
        let h = timegrid.nodes[i + 1] - t;
        let v = model.eval(&x, t)?;
        x.axpy(h, &v);
        if !x.all_finite() {
            return Err(Error::numerical(format!(
                "ode rollout produced non-finite state at step {i} (t = {t:.4})"
            )));
        }
    }
    Ok(x)
}

/// Euler-Maruyama rollout under a noise schedule.
pub fn sample_sde(
    model: &dyn VelocityField,
    x0: &Tensor,
    timegrid: &TimeGrid,
    schedule: NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    schedule.validate()?;
    let mut x = x0.clone();
    for i in 0..timegrid.n_steps() {
        let t = timegrid.nodes[i];
        let h = timegrid.nodes[i + 1] - t;
        let v = model.eval(&x, t)?;
        let b = drift(&v, &x, t, schedule);
        x = sde_step(&x, &b, schedule.sigma(t), h, rng)
            .map_err(|e| Error::numerical(format!("sde rollout step {i}: {e}")))?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Halve the learning rate every this many epochs.
    pub lr_halve_every: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl FmTrainConfig {
    pub fn new(epochs: usize, seed: u64) -> FmTrainConfig {
        FmTrainConfig {
            epochs,
            lr: 3e-4,
            lr_halve_every: Some(100),
            batch_size: 16,
            seed,
        }
    }
}

/// Scalar standardization constants of a dataset (mean, std over every
/// value of every sample).
pub fn standardization_constants(samples: &[Tensor]) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for s in samples {
        for &v in s.data() {
            sum += v;
            sum_sq += v * v;
        }
        n += s.len();
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    (mean, var.sqrt().max(1e-12))
}

/// Conditional flow-matching pre-training: minimizes
/// `E || v(X_t, t) - (X_1 - X_0) ||^2` with `X_t = t X_1 + (1-t) X_0`,
/// `X_0 ~ N(0,I)`, `t ~ U[0,1]`. Samples are standardized internally and
/// the constants stored on the model.
pub fn fm_pretrain(
    model: &mut VectorFieldModel,
    dataset: &[Tensor],
    cfg: &FmTrainConfig,
) -> Result<Vec<EpochRecord>> {
    if dataset.is_empty() {
        return Err(Error::config("fm_pretrain needs a dataset"));
    }
    let (mean, std) = standardization_constants(dataset);
    model.standardization = (mean, std);
    let data: Vec<Tensor> = dataset.iter().map(|s| s.map(|v| (v - mean) / std)).collect();
    let n_el = data[0].len();
    let mut opt = Adam::new(cfg.lr, &model.trunk.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut initial = None;
    for epoch in 0..cfg.epochs {
        if let Some(every) = cfg.lr_halve_every {
            opt.lr = cfg.lr * 0.5f64.powi((epoch / every.max(1)) as i32);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut stream_rng(cfg.seed, 500_000 + epoch as u64));
        }
        let mut epoch_loss = 0.0;
        let mut n_terms = 0usize;
        // cycle the shuffled order so datasets smaller than a batch still
        // produce full batches (with fresh noise/time draws per element)
        let steps = data.len().div_ceil(cfg.batch_size);
        for bi in 0..steps {
            let batch: Vec<usize> = (0..cfg.batch_size)
                .map(|k| order[(bi * cfg.batch_size + k) % data.len()])
                .collect();
            let results: Vec<Result<(Vec<Tensor>, f64)>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &si)| {
                    let mut rng = stream_rng(
                        cfg.seed,
                        1_000_000 + ((epoch * 10_007 + bi * 127 + k) as u64),
                    );
                    let x1 = &data[si];
                    let x0 = Tensor::new(x1.shape().to_vec(), standard_normal(&mut rng, n_el))?;
                    let t: f64 = rand::Rng::gen(&mut rng);
                    let mut xt = x1.scale(t);
                    xt.axpy(1.0 - t, &x0);
                    let target = x1.sub(&x0);
                    let v = model.forward_base(&xt, t)?;
                    let resid = v.sub(&target);
                    let loss = resid.norm_sq() / n_el as f64;
                    let cot = resid.scale(2.0 / n_el as f64);
                    let grads = model.param_gradient(&xt, t, &cot)?;
                    Ok((grads, loss))
                })
                .collect();
            let mut acc: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (g, l) = r?;
                batch_loss += l;
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => {
                        for (ai, gi) in a.iter_mut().zip(&g) {
                            ai.axpy(1.0, gi);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = acc.unwrap().into_iter().map(|g| g.scale(scale)).collect();
            opt.step(&mut model.trunk.params, &grads);
            epoch_loss += batch_loss;
            n_terms += batch.len();
        }
        epoch_loss /= n_terms as f64;
        let init = *initial.get_or_insert(epoch_loss);
        if !epoch_loss.is_finite() || epoch_loss > 10.0 * init.max(1e-12) {
            return Err(Error::numerical(format!(
                "flow-matching training diverged at epoch {epoch}: {epoch_loss:.3e}"
            )));
        }
        history.push(EpochRecord { epoch, loss: epoch_loss });
    }
    Ok(history)
}

/// Draws terminal samples from the model with the deterministic sampler.
/// Outputs stay in standardized units; use the model's constants to map
/// back to data units.
pub fn sample_terminal(
    model: &VectorFieldModel,
    shape: &[usize],
    timegrid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let n_el: usize = shape.iter().product();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let x0 = Tensor::new(shape.to_vec(), standard_normal(&mut rng, n_el))?;
            sample_ode(model, &x0, timegrid)
        })
        .collect()
}
