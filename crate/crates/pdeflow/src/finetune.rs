//! Reward fine-tuning by adjoint matching on the joint evolution of state
//! and latent parameter: rollouts under the memoryless noise schedule, the
//! lean-adjoint backward solve with the running-cost source term, the
//! clipped consistency loss whose gradient flows only through the control,
//! and the epoch loop tying it together.

use crate::error::{Error, Result};
use crate::flow::{drift, NoiseSchedule, TimeGrid};
use crate::model::nets::Adam;
use crate::model::{FinetuneModel, InverseMap, VelocityField};
use crate::rng::{standard_normal, stream_rng, Rng};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One-step terminal estimate `x + (1-t) v`; at `t = 1` the state itself.
pub fn one_step_estimate(x: &Tensor, v: &Tensor, t: f64) -> Tensor {
    if t >= 1.0 {
        return x.clone();
    }
    let mut out = x.clone();
    out.axpy(1.0 - t, v);
    out
}

/// Surrogate base flow for the parameter: `(alpha1_hat - alpha_t) / (1-t)`
/// with the division guarded by `max(1-t, guard)`.
pub fn surrogate_alpha_field(alpha_t: &Tensor, alpha1_hat: &Tensor, t: f64, guard: f64) -> Tensor {
    let d = (1.0 - t).max(guard);
    alpha1_hat.sub(alpha_t).scale(1.0 / d)
}

/// Regularization field pointing from the fine-tuned parameter state to the
/// parameter recovered along the base trajectory.
pub fn reg_field(alpha_ft: &Tensor, alpha1_hat_base: &Tensor, t: f64, guard: f64) -> Tensor {
    surrogate_alpha_field(alpha_ft, alpha1_hat_base, t, guard)
}

/// Running cost `f = lambda_f ||v_alpha_ft - v_reg||^2_w` and its cotangent
/// with respect to `v_alpha_ft` (the state gradients are assembled by the
/// adjoint solver through the model and surrogate chains).
pub fn running_cost(
    v_alpha_ft: &Tensor,
    v_reg: &Tensor,
    lambda_f: f64,
    weights: &[f64],
) -> (f64, Tensor) {
    let mut value = 0.0;
    let mut cot = Tensor::zeros(v_alpha_ft.shape());
    {
        let cd = cot.data_mut();
        for i in 0..cd.len() {
            let d = v_alpha_ft.data()[i] - v_reg.data()[i];
            value += weights[i] * d * d;
            cd[i] = 2.0 * lambda_f * weights[i] * d;
        }
    }
    (lambda_f * value, cot)
}

/// Trainable controlled model: the plain velocity correction in x-only
/// mode, or the joint (x, alpha) heads.
pub trait JointModel: Sync {
    fn has_alpha(&self) -> bool;
    fn params(&self) -> Vec<Tensor>;
    fn set_params(&mut self, p: &[Tensor]);
    /// `v_prelim` is the base velocity at `x`, supplied by the engine so
    /// the base net is evaluated once per step.
    fn eval(
        &self,
        x: &Tensor,
        alpha: Option<&Tensor>,
        v_alpha_base: Option<&Tensor>,
        v_prelim: &Tensor,
        t: f64,
    ) -> Result<(Tensor, Option<Tensor>)>;
    /// Backward pass with the recorded tensors as constants.
    fn backward(
        &self,
        x: &Tensor,
        alpha: Option<&Tensor>,
        v_alpha_base: Option<&Tensor>,
        v_prelim: &Tensor,
        t: f64,
        cot_vx: Option<&Tensor>,
        cot_valpha: Option<&Tensor>,
    ) -> Result<ModelGrads>;
}

pub struct ModelGrads {
    pub params: Vec<Tensor>,
    pub gx: Tensor,
    pub galpha: Option<Tensor>,
    pub gvab: Option<Tensor>,
}

impl JointModel for FinetuneModel {
    fn has_alpha(&self) -> bool {
        true
    }

    fn params(&self) -> Vec<Tensor> {
        self.head_params()
    }

    fn set_params(&mut self, p: &[Tensor]) {
        self.set_head_params(p);
    }

    fn eval(
        &self,
        x: &Tensor,
        alpha: Option<&Tensor>,
        v_alpha_base: Option<&Tensor>,
        v_prelim: &Tensor,
        t: f64,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let (alpha, vab) = joint_inputs(alpha, v_alpha_base)?;
        let out = self.forward_with_prelim(x, alpha, vab, v_prelim, t)?;
        Ok((out.0, Some(out.1)))
    }

    fn backward(
        &self,
        x: &Tensor,
        alpha: Option<&Tensor>,
        v_alpha_base: Option<&Tensor>,
        v_prelim: &Tensor,
        t: f64,
        cot_vx: Option<&Tensor>,
        cot_valpha: Option<&Tensor>,
    ) -> Result<ModelGrads> {
        let (alpha, vab) = joint_inputs(alpha, v_alpha_base)?;
        let bw = self.backward_with_prelim(x, alpha, vab, v_prelim, t, cot_vx, cot_valpha)?;
        Ok(ModelGrads {
            params: bw.head_grads,
            gx: bw.gx,
            galpha: Some(bw.galpha),
            gvab: Some(bw.gvab),
        })
    }
}

fn joint_inputs<'a>(
    alpha: Option<&'a Tensor>,
    vab: Option<&'a Tensor>,
) -> Result<(&'a Tensor, &'a Tensor)> {
    match (alpha, vab) {
        (Some(a), Some(v)) => Ok((a, v)),
        _ => Err(Error::config("joint model requires alpha and surrogate velocity")),
    }
}

/// x-only controlled model: a single correction head on top of a frozen
/// base velocity (used by the exactly-solvable Gaussian tilting bench and
/// any fine-tuning without latent parameters).
#[derive(Debug, Clone)]
pub struct XOnlyControlModel {
    pub head: crate::model::nets::HeadNet,
}

impl XOnlyControlModel {
    pub fn init(state_channels: usize, hidden: usize, seed: u64) -> Self {
        XOnlyControlModel {
            head: crate::model::nets::HeadNet::init(
                crate::model::nets::HeadConfig {
                    in_channels: 2 * state_channels,
                    out_channels: state_channels,
                    hidden,
                    pos_freqs: 0,
                    time_channels: 8,
                },
                &mut stream_rng(seed, 3),
            ),
        }
    }
}

impl JointModel for XOnlyControlModel {
    fn has_alpha(&self) -> bool {
        false
    }

    fn params(&self) -> Vec<Tensor> {
        self.head.params.clone()
    }

    fn set_params(&mut self, p: &[Tensor]) {
        self.head.params.clone_from_slice(p);
    }

    fn eval(
        &self,
        x: &Tensor,
        _alpha: Option<&Tensor>,
        _vab: Option<&Tensor>,
        v_prelim: &Tensor,
        t: f64,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = crate::model::tape::Tape::new();
        let vp = tape.constant(v_prelim.clone());
        let xid = tape.constant(x.clone());
        let input = tape.concat_c(&[vp, xid]);
        let corr = self.head.forward_on_tape(&mut tape, input, Some(t), None)?;
        let out = tape.add(vp, corr);
        Ok((tape.value(out).clone(), None))
    }

    fn backward(
        &self,
        x: &Tensor,
        _alpha: Option<&Tensor>,
        _vab: Option<&Tensor>,
        v_prelim: &Tensor,
        t: f64,
        cot_vx: Option<&Tensor>,
        _cot_valpha: Option<&Tensor>,
    ) -> Result<ModelGrads> {
        let mut tape = crate::model::tape::Tape::new();
        let vp = tape.constant(v_prelim.clone());
        let xid = tape.input(0, x.clone());
        let input = tape.concat_c(&[vp, xid]);
        let corr = self.head.forward_on_tape(&mut tape, input, Some(t), Some(0))?;
        let out = tape.add(vp, corr);
        let mut seeds = Vec::new();
        if let Some(c) = cot_vx {
            seeds.push((out, c.clone()));
        }
        let grads = tape.backward(&seeds, self.head.n_params(), 1);
        Ok(ModelGrads {
            params: grads
                .params
                .into_iter()
                .zip(&self.head.params)
                .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect(),
            gx: grads.inputs.into_iter().next().flatten().unwrap_or_else(|| Tensor::zeros(x.shape())),
            galpha: None,
            gvab: None,
        })
    }
}

/// Terminal reward cost `g` with gradients; fine-tuning steers toward
/// `exp(-lambda g)`-tilted samples.
pub trait TerminalCost: Sync {
    fn eval_grad(
        &self,
        x_std: &Tensor,
        alpha: Option<&Tensor>,
        rng: &mut Rng,
    ) -> Result<TerminalGrad>;
}

pub struct TerminalGrad {
    pub value: f64,
    pub gx: Tensor,
    pub galpha: Option<Tensor>,
}

/// Fine-tuning configuration (Algorithm hyperparameters).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lambda_x: f64,
    pub lambda_alpha: f64,
    pub lambda_f: f64,
    /// Noise floor; `None` uses the coarse solver step `1/(t_nodes-1)`.
    pub schedule_h: Option<f64>,
    pub t_nodes: usize,
    pub k_sub: usize,
    /// Fraction of trailing augmented steps always in the loss subset.
    pub k_last: f64,
    /// Number of uniformly sampled earlier steps added to the subset.
    pub k_random: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Loss clipping thresholds; `None` defaults to `1.6 lambda^2`.
    pub clip_x: Option<f64>,
    pub clip_alpha: Option<f64>,
    /// Also push the running-cost gradient directly into the weight
    /// update (off: the running cost acts only through the adjoint).
    pub running_cost_in_update: bool,
}

impl FinetuneConfig {
    pub fn new(lambda_x: f64, lambda_alpha: f64, lambda_f: f64, epochs: usize, seed: u64) -> Self {
        FinetuneConfig {
            lambda_x,
            lambda_alpha,
            lambda_f,
            schedule_h: None,
            t_nodes: 64,
            k_sub: 5,
            k_last: 0.20,
            k_random: 20,
            batch_size: 4,
            epochs,
            lr: 2e-5,
            seed,
            clip_x: None,
            clip_alpha: None,
            running_cost_in_update: false,
        }
    }

    pub fn h(&self) -> f64 {
        self.schedule_h.unwrap_or(1.0 / (self.t_nodes - 1) as f64)
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::Memoryless { h: self.h() }
    }

    pub fn lct_x(&self) -> f64 {
        self.clip_x.unwrap_or(1.6 * self.lambda_x * self.lambda_x)
    }

    pub fn lct_alpha(&self) -> f64 {
        self.clip_alpha.unwrap_or(1.6 * self.lambda_alpha * self.lambda_alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_x < 0.0 || self.lambda_alpha < 0.0 || self.lambda_f < 0.0 {
            return Err(Error::config("reward scales must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.k_last) {
            return Err(Error::config("k_last is a fraction in [0,1]"));
        }
        if self.t_nodes < 2 || self.k_sub >= self.t_nodes {
            return Err(Error::config("need t_nodes >= 2 and k_sub < t_nodes"));
        }
        Ok(())
    }
}

/// Immutable problem wiring for the engine.
pub struct Setup<'a> {
    pub base: &'a dyn VelocityField,
    pub phi: Option<&'a dyn InverseMap>,
    pub cost: &'a dyn TerminalCost,
    pub x_shape: Vec<usize>,
    pub alpha_shape: Option<Vec<usize>>,
    /// Per-node quadrature weights for x-space norms, normalized to sum 1.
    pub wx: Vec<f64>,
    /// Same for alpha-space; required in joint mode.
    pub wa: Vec<f64>,
}

impl<'a> Setup<'a> {
    pub fn uniform_weights(shape: &[usize]) -> Vec<f64> {
        let n: usize = shape.iter().product();
        vec![1.0 / n as f64; n]
    }
}

/// Everything recorded at one augmented-grid step of a joint rollout.
pub struct StepRecord {
    pub t: f64,
    pub h: f64,
    pub sigma: f64,
    pub x_base: Tensor,
    pub x_ft: Tensor,
    pub alpha_ft: Option<Tensor>,
    /// Base velocity evaluated at the fine-tuned state.
    pub v_base_at_ft: Tensor,
    pub v_x_ft: Tensor,
    pub v_alpha_base: Option<Tensor>,
    pub v_alpha_ft: Option<Tensor>,
    /// One-step state estimate on the fine-tuned trajectory (input to phi).
    pub x1_hat_ft: Option<Tensor>,
    /// Parameter recovered from the base trajectory (target of v_reg).
    pub alpha1_hat_base: Option<Tensor>,
    /// Controls (b_ft - b_base)/sigma; absent for the zero schedule.
    pub u_x: Option<Tensor>,
    pub u_alpha: Option<Tensor>,
}

pub struct JointTrajectory {
    pub steps: Vec<StepRecord>,
    pub x1_base: Tensor,
    pub x1_ft: Tensor,
    pub alpha1_ft: Option<Tensor>,
    /// (seed, stream) provenance of the noise draws.
    pub rng_provenance: (u64, u64),
}

/// How the two trajectories consume noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseCoupling {
    /// Base and fine-tuned x-updates draw independent increments.
    Independent,
    /// Both x-updates share the same increments (zero-init equivalence).
    Shared,
}

/// Rolls the base and fine-tuned trajectories jointly over an augmented
/// time grid, recording everything the adjoint solve needs.
#[allow(clippy::too_many_arguments)]
pub fn rollout_joint(
    setup: &Setup,
    model: &dyn JointModel,
    x0: &Tensor,
    alpha0: Option<&Tensor>,
    grid: &TimeGrid,
    schedule: NoiseSchedule,
    guard: f64,
    coupling: NoiseCoupling,
    rng: &mut Rng,
    provenance: (u64, u64),
) -> Result<JointTrajectory> {
    schedule.validate()?;
    let with_alpha = model.has_alpha();
    if with_alpha != alpha0.is_some() || with_alpha != setup.phi.is_some() {
        return Err(Error::config("alpha wiring inconsistent between model, phi and alpha0"));
    }
    let mut x_base = x0.clone();
    let mut x_ft = x0.clone();
    let mut alpha_ft = alpha0.cloned();
    let n = grid.n_steps();
    let mut steps = Vec::with_capacity(n);
    for i in 0..n {
        let t = grid.nodes[i];
        let h = grid.nodes[i + 1] - t;
        let sigma = schedule.sigma(t);

        // base trajectory drift
        let v_base_b = setup.base.eval(&x_base, t)?;
        let b_base_traj = drift(&v_base_b, &x_base, t, schedule);

        // fine-tuned trajectory pieces
        let v_base_at_ft = setup.base.eval(&x_ft, t)?;
        let (v_alpha_base, x1_hat_ft, alpha1_hat_base) = if with_alpha {
            let phi = setup.phi.unwrap();
            let x1_hat = one_step_estimate(&x_ft, &v_base_at_ft, t);
            let alpha1_hat = phi.eval(&x1_hat)?;
            let vab = surrogate_alpha_field(alpha_ft.as_ref().unwrap(), &alpha1_hat, t, guard);
            let x1_hat_base = one_step_estimate(&x_base, &v_base_b, t);
            let a1_base = phi.eval(&x1_hat_base)?;
            (Some(vab), Some(x1_hat), Some(a1_base))
        } else {
            (None, None, None)
        };
        let (v_x_ft, v_alpha_ft) = model.eval(
            &x_ft,
            alpha_ft.as_ref(),
            v_alpha_base.as_ref(),
            &v_base_at_ft,
            t,
        )?;

        let b_x_base_at_ft = drift(&v_base_at_ft, &x_ft, t, schedule);
        let b_x_ft = drift(&v_x_ft, &x_ft, t, schedule);
        let (b_alpha_base, b_alpha_ft) = if with_alpha {
            let a = alpha_ft.as_ref().unwrap();
            (
                Some(drift(v_alpha_base.as_ref().unwrap(), a, t, schedule)),
                Some(drift(v_alpha_ft.as_ref().unwrap(), a, t, schedule)),
            )
        } else {
            (None, None)
        };

        let (u_x, u_alpha) = if sigma > 0.0 {
            let ux = b_x_ft.sub(&b_x_base_at_ft).scale(1.0 / sigma);
            let ua = b_alpha_ft
                .as_ref()
                .map(|bf| bf.sub(b_alpha_base.as_ref().unwrap()).scale(1.0 / sigma));
            (Some(ux), ua)
        } else {
            (None, None)
        };

        steps.push(StepRecord {
            t,
            h,
            sigma,
            x_base: x_base.clone(),
            x_ft: x_ft.clone(),
            alpha_ft: alpha_ft.clone(),
            v_base_at_ft: v_base_at_ft.clone(),
            v_x_ft: v_x_ft.clone(),
            v_alpha_base: v_alpha_base.clone(),
            v_alpha_ft: v_alpha_ft.clone(),
            x1_hat_ft,
            alpha1_hat_base,
            u_x,
            u_alpha,
        });

        // advance; the base draw comes first so shared coupling reuses it
        let nx = x0.len();
        let eps_base = standard_normal(rng, nx);
        let eps_ft = match coupling {
            NoiseCoupling::Shared => eps_base.clone(),
            NoiseCoupling::Independent => standard_normal(rng, nx),
        };
        let advance = |x: &Tensor, b: &Tensor, eps: &[f64]| -> Result<Tensor> {
            let mut out = x.clone();
            let sq = sigma * h.sqrt();
            for ((o, &bv), &e) in out.data_mut().iter_mut().zip(b.data()).zip(eps) {
                *o += h * bv + sq * e;
            }
            if !out.all_finite() {
                return Err(Error::numerical(format!(
                    "joint rollout produced non-finite state at step {i} (t = {t:.4})"
                )));
            }
            Ok(out)
        };
        x_base = advance(&x_base, &b_base_traj, &eps_base)?;
        x_ft = advance(&x_ft, &b_x_ft, &eps_ft)?;
        if with_alpha {
            let a = alpha_ft.as_ref().unwrap();
            let eps_a = standard_normal(rng, a.len());
            alpha_ft = Some(advance(a, b_alpha_ft.as_ref().unwrap(), &eps_a).map_err(|e| {
                Error::numerical(format!("alpha update: {e}"))
            })?);
        }
    }
    Ok(JointTrajectory {
        steps,
        x1_base: x_base,
        x1_ft: x_ft,
        alpha1_ft: alpha_ft,
        rng_provenance: provenance,
    })
}

/// Lean adjoint states at every node of the augmented grid (index aligned
/// with `grid.nodes`; entry i is the adjoint at `t_i`).
pub struct LeanAdjoint {
    pub a_x: Vec<Tensor>,
    pub a_alpha: Option<Vec<Tensor>>,
}

/// Running-cost pieces before the shared phi/base chain: head-only state
/// gradients plus the cotangent still to be pushed through
/// `phi(one_step_estimate(x))`.
struct RunningCostPieces {
    value: f64,
    gx_head: Tensor,
    galpha: Tensor,
    phi_cot: Tensor,
}

fn running_cost_pieces(
    setup: &Setup,
    model: &dyn JointModel,
    step: &StepRecord,
    lambda_f: f64,
    guard: f64,
) -> Result<RunningCostPieces> {
    let alpha = step.alpha_ft.as_ref().unwrap();
    let v_alpha_ft = step.v_alpha_ft.as_ref().unwrap();
    let v_reg = reg_field(alpha, step.alpha1_hat_base.as_ref().unwrap(), step.t, guard);
    let (value, cot) = running_cost(v_alpha_ft, &v_reg, lambda_f, &setup.wa);
    // chain through the model's alpha head with frozen weights
    let bw = model.backward(
        &step.x_ft,
        Some(alpha),
        step.v_alpha_base.as_ref(),
        &step.v_base_at_ft,
        step.t,
        None,
        Some(&cot),
    )?;
    let d = (1.0 - step.t).max(guard);
    let mut galpha = bw.galpha.unwrap();
    let gvab = bw.gvab.unwrap();
    // v_alpha_base = (phi(x1_hat) - alpha)/d: diagonal alpha part here,
    // the x part joins the adjoint's phi cotangent
    galpha.axpy(-1.0 / d, &gvab);
    // v_reg = (alpha1_hat_base - alpha)/d enters f with a minus sign
    galpha.axpy(1.0 / d, &cot);
    Ok(RunningCostPieces {
        value,
        gx_head: bw.gx,
        galpha,
        phi_cot: gvab.scale(1.0 / d),
    })
}

/// Full running-cost state gradients `(f, df/dx, df/dalpha)` at one step,
/// assembled through the alpha head, the surrogate field and the
/// regularization field. The adjoint solver fuses the same pieces with its
/// Jacobian products; this standalone form exists for gradient validation.
pub fn running_cost_state_grad(
    setup: &Setup,
    model: &dyn JointModel,
    step: &StepRecord,
    lambda_f: f64,
    guard: f64,
) -> Result<(f64, Tensor, Tensor)> {
    let p = running_cost_pieces(setup, model, step, lambda_f, guard)?;
    let y = setup
        .phi
        .unwrap()
        .vjp(step.x1_hat_ft.as_ref().unwrap(), &p.phi_cot)?;
    let mut gx = p.gx_head;
    gx.axpy(1.0, &y);
    gx.axpy(
        1.0 - step.t,
        &setup.base.vjp(&step.x_ft, step.t, &y)?,
    );
    Ok((p.value, gx, p.galpha))
}

/// Backward (in time) explicit integration of the lean adjoint along a
/// recorded trajectory. `terminal` carries the reward-scaled gradients of
/// the terminal cost at `(x1_ft, alpha1_ft)`.
pub fn solve_lean_adjoint(
    setup: &Setup,
    model: &dyn JointModel,
    traj: &JointTrajectory,
    terminal_gx: &Tensor,
    terminal_galpha: Option<&Tensor>,
    schedule: NoiseSchedule,
    lambda_f: f64,
    guard: f64,
) -> Result<LeanAdjoint> {
    let with_alpha = model.has_alpha();
    let n = traj.steps.len();
    let mut a_x = vec![Tensor::zeros(&traj.x1_ft.shape().to_vec()); n + 1];
    let mut a_alpha = if with_alpha {
        Some(vec![
            Tensor::zeros(traj.alpha1_ft.as_ref().unwrap().shape());
            n + 1
        ])
    } else {
        None
    };
    a_x[n] = terminal_gx.clone();
    if let Some(aa) = &mut a_alpha {
        aa[n] = terminal_galpha
            .cloned()
            .ok_or_else(|| Error::config("joint adjoint needs a terminal alpha gradient"))?;
    }
    for i in (0..n).rev() {
        let step = &traj.steps[i];
        let t = step.t;
        let h = step.h;
        let c = schedule.drift_coefficient(t);
        let rate = match schedule {
            NoiseSchedule::Zero => 0.0,
            NoiseSchedule::Memoryless { h } => c / (t + h),
        };
        let a_x_next = a_x[i + 1].clone();

        // J_xx^T a_x: through the base velocity plus the linear drift part
        let mut src_x = Tensor::zeros(a_x_next.shape());
        let mut base_cot = a_x_next.scale(1.0 + c);
        let mut src_alpha: Option<Tensor> = None;

        if with_alpha {
            let a_a_next = a_alpha.as_ref().unwrap()[i + 1].clone();
            let d = (1.0 - t).max(guard);
            // J_alpha,alpha^T a_alpha (diagonal)
            let diag = -(1.0 + c) / d - rate;
            let mut sa = a_a_next.scale(diag);
            // one phi cotangent serves both J_alpha,x^T a_alpha and the
            // running-cost chain through the surrogate field
            let mut phi_cot = a_a_next.scale((1.0 + c) / d);
            if lambda_f > 0.0 {
                let p = running_cost_pieces(setup, model, step, lambda_f, guard)?;
                src_x.axpy(1.0, &p.gx_head);
                sa.axpy(1.0, &p.galpha);
                phi_cot.axpy(1.0, &p.phi_cot);
            }
            // (I + (1-t) dv_base^T) phi^T applied to the combined cotangent
            let y = setup
                .phi
                .unwrap()
                .vjp(step.x1_hat_ft.as_ref().unwrap(), &phi_cot)?;
            src_x.axpy(1.0, &y);
            base_cot.axpy(1.0 - t, &y);
            src_alpha = Some(sa);
        }

        let vjp = setup.base.vjp(&step.x_ft, t, &base_cot)?;
        src_x.axpy(1.0, &vjp);
        src_x.axpy(-rate, &a_x_next);

        let mut ax = a_x_next;
        ax.axpy(h, &src_x);
        if !ax.all_finite() {
            return Err(Error::numerical(format!("lean adjoint diverged at step {i}")));
        }
        a_x[i] = ax;
        if let Some(sa) = src_alpha {
            let mut aa = a_alpha.as_ref().unwrap()[i + 1].clone();
            aa.axpy(h, &sa);
            if !aa.all_finite() {
                return Err(Error::numerical(format!(
                    "lean alpha-adjoint diverged at step {i}"
                )));
            }
            a_alpha.as_mut().unwrap()[i] = aa;
        }
    }
    Ok(LeanAdjoint { a_x, a_alpha })
}

/// Loss subset: every step in the trailing `k_last` fraction plus
/// `k_random` uniform draws from the remainder.
pub fn loss_step_subset(n_steps: usize, k_last: f64, k_random: usize, rng: &mut Rng) -> Vec<usize> {
    let tail = ((n_steps as f64) * k_last).round() as usize;
    let cut = n_steps.saturating_sub(tail);
    let mut subset: Vec<usize> = (cut..n_steps).collect();
    let mut earlier: Vec<usize> = (0..cut).collect();
    use rand::seq::SliceRandom;
    earlier.shuffle(rng);
    subset.extend(earlier.into_iter().take(k_random));
    subset.sort_unstable();
    subset
}

pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub clipped: usize,
    pub terms: usize,
}

/// Clipped adjoint-matching consistency loss over a step subset, with the
/// gradient taken only through the control (adjoints constant). Per-step
/// squared norms `||u + sigma a||^2_w` exceeding the thresholds are
/// dropped.
pub fn adjoint_matching_loss(
    setup: &Setup,
    model: &dyn JointModel,
    traj: &JointTrajectory,
    adjoint: &LeanAdjoint,
    subset: &[usize],
    cfg: &FinetuneConfig,
) -> Result<LossOutput> {
    if subset.is_empty() {
        return Err(Error::config("adjoint matching loss needs a nonempty step subset"));
    }
    let schedule = cfg.schedule();
    let mut loss = 0.0;
    let mut clipped = 0;
    let mut terms = 0;
    let mut grads: Option<Vec<Tensor>> = None;
    for &i in subset {
        let step = &traj.steps[i];
        let sigma = step.sigma;
        let u_x = step
            .u_x
            .as_ref()
            .ok_or_else(|| Error::config("loss needs controls; roll out with noise"))?;
        let c = schedule.drift_coefficient(step.t);
        let du_dv = (1.0 + c) / sigma;

        // residual r = u + sigma a, squared norm under the x weights
        let a_x = &adjoint.a_x[i];
        let mut r_x = u_x.clone();
        r_x.axpy(sigma, a_x);
        let norm_x: f64 = r_x
            .data()
            .iter()
            .zip(&setup.wx)
            .map(|(&r, &w)| w * r * r)
            .sum();
        terms += 1;
        let mut cot_vx = None;
        if norm_x > cfg.lct_x() {
            clipped += 1;
        } else {
            loss += 0.5 * step.h * norm_x;
            let mut cv = Tensor::zeros(r_x.shape());
            for ((o, &r), &w) in cv.data_mut().iter_mut().zip(r_x.data()).zip(&setup.wx) {
                *o = step.h * w * r * du_dv;
            }
            cot_vx = Some(cv);
        }

        let mut cot_va = None;
        if model.has_alpha() {
            let u_a = step.u_alpha.as_ref().unwrap();
            let a_a = &adjoint.a_alpha.as_ref().unwrap()[i];
            let mut r_a = u_a.clone();
            r_a.axpy(sigma, a_a);
            let norm_a: f64 = r_a
                .data()
                .iter()
                .zip(&setup.wa)
                .map(|(&r, &w)| w * r * r)
                .sum();
            terms += 1;
            if norm_a > cfg.lct_alpha() {
                clipped += 1;
            } else {
                loss += 0.5 * step.h * norm_a;
                let mut cv = Tensor::zeros(r_a.shape());
                for ((o, &r), &w) in cv.data_mut().iter_mut().zip(r_a.data()).zip(&setup.wa) {
                    *o = step.h * w * r * du_dv;
                }
                cot_va = Some(cv);
            }
        }

        if cot_vx.is_none() && cot_va.is_none() {
            continue;
        }
        let bw = model.backward(
            &step.x_ft,
            step.alpha_ft.as_ref(),
            step.v_alpha_base.as_ref(),
            &step.v_base_at_ft,
            step.t,
            cot_vx.as_ref(),
            cot_va.as_ref(),
        )?;
        match &mut grads {
            None => grads = Some(bw.params),
            Some(g) => {
                for (gi, bi) in g.iter_mut().zip(&bw.params) {
                    gi.axpy(1.0, bi);
                }
            }
        }
        // optional extra pathway: running cost differentiated directly
        // into the weight update
        if cfg.running_cost_in_update && cfg.lambda_f > 0.0 && model.has_alpha() {
            let v_reg = reg_field(
                step.alpha_ft.as_ref().unwrap(),
                step.alpha1_hat_base.as_ref().unwrap(),
                step.t,
                cfg.h(),
            );
            let (_, cot) = running_cost(
                step.v_alpha_ft.as_ref().unwrap(),
                &v_reg,
                cfg.lambda_f * step.h,
                &setup.wa,
            );
            let bw = model.backward(
                &step.x_ft,
                step.alpha_ft.as_ref(),
                step.v_alpha_base.as_ref(),
                &step.v_base_at_ft,
                step.t,
                None,
                Some(&cot),
            )?;
            if let Some(g) = &mut grads {
                for (gi, bi) in g.iter_mut().zip(&bw.params) {
                    gi.axpy(1.0, bi);
                }
            }
        }
    }
    let grads = grads.unwrap_or_else(|| {
        model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect()
    });
    Ok(LossOutput { loss, grads, clipped, terms })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneEpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub mean_terminal_cost: f64,
    pub clip_rate: f64,
}

/// The full training loop: per epoch, roll a batch of joint trajectories
/// under the memoryless schedule, solve the lean adjoint with the terminal
/// reward gradient, and take one optimizer step on the clipped consistency
/// loss. The base model and inverse predictor stay frozen throughout.
pub fn finetune<M: JointModel>(
    setup: &Setup,
    model: &mut M,
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(&FinetuneEpochStats, &M) -> Result<()>,
) -> Result<Vec<FinetuneEpochStats>> {
    cfg.validate()?;
    let schedule = cfg.schedule();
    let guard = cfg.h();
    let grid = TimeGrid::uniform(cfg.t_nodes)?.augment(cfg.k_sub)?;
    let mut params = model.params();
    let mut opt = Adam::new(cfg.lr, &params);
    let n_x: usize = setup.x_shape.iter().product();
    let n_a: usize = setup.alpha_shape.as_ref().map(|s| s.iter().product()).unwrap_or(0);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let results: Vec<Result<(Vec<Tensor>, f64, f64, usize, usize)>> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|k| {
                let stream = (epoch * cfg.batch_size + k) as u64;
                let mut rng = stream_rng(cfg.seed, stream);
                let x0 = Tensor::new(setup.x_shape.clone(), standard_normal(&mut rng, n_x))?;
                let alpha0 = match &setup.alpha_shape {
                    Some(s) => Some(Tensor::new(s.clone(), standard_normal(&mut rng, n_a))?),
                    None => None,
                };
                let traj = rollout_joint(
                    setup,
                    model,
                    &x0,
                    alpha0.as_ref(),
                    &grid,
                    schedule,
                    guard,
                    NoiseCoupling::Independent,
                    &mut rng,
                    (cfg.seed, stream),
                )?;
                let term = setup
                    .cost
                    .eval_grad(&traj.x1_ft, traj.alpha1_ft.as_ref(), &mut rng)?;
                let adj = solve_lean_adjoint(
                    setup,
                    model,
                    &traj,
                    &term.gx.scale(cfg.lambda_x),
                    term.galpha.as_ref().map(|g| g.scale(cfg.lambda_alpha)).as_ref(),
                    schedule,
                    cfg.lambda_f,
                    guard,
                )?;
                let subset =
                    loss_step_subset(traj.steps.len(), cfg.k_last, cfg.k_random, &mut rng);
                let out = adjoint_matching_loss(setup, model, &traj, &adj, &subset, cfg)?;
                Ok((out.grads, out.loss, term.value, out.clipped, out.terms))
            })
            .collect();
        let mut acc: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        let mut cost_sum = 0.0;
        let mut clipped = 0usize;
        let mut terms = 0usize;
        for r in results {
            let (g, l, c, cl, tm) = r?;
            loss_sum += l;
            cost_sum += c;
            clipped += cl;
            terms += tm;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => {
                    for (ai, gi) in a.iter_mut().zip(&g) {
                        ai.axpy(1.0, gi);
                    }
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        let grads: Vec<Tensor> = acc.unwrap().into_iter().map(|g| g.scale(scale)).collect();
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::numerical(format!(
                "fine-tuning gradients diverged at epoch {epoch}"
            )));
        }
        opt.step(&mut params, &grads);
        model.set_params(&params);
        let stats = FinetuneEpochStats {
            epoch,
            loss: loss_sum * scale,
            mean_terminal_cost: cost_sum * scale,
            clip_rate: if terms > 0 { clipped as f64 / terms as f64 } else { 0.0 },
        };
        on_epoch(&stats, model)?;
        history.push(stats);
    }
    Ok(history)
}

/// Exactly solvable scalar benchmarks for validating the control loop.
pub mod bench {
    use super::*;

    /// Marginal velocity field of the linear-interpolation flow that
    /// transports N(0,1) to N(mu, s^2) under independent coupling:
    /// `v(x,t) = mu + (t s^2 - (1-t)) (x - t mu) / V_t` with
    /// `V_t = (1-t)^2 + t^2 s^2`.
    pub struct AnalyticGaussianFlow {
        pub mu: f64,
        pub s: f64,
    }

    impl AnalyticGaussianFlow {
        fn slope(&self, t: f64) -> f64 {
            let v_t = (1.0 - t) * (1.0 - t) + t * t * self.s * self.s;
            (t * self.s * self.s - (1.0 - t)) / v_t
        }
    }

    impl VelocityField for AnalyticGaussianFlow {
        fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
            let k = self.slope(t);
            Ok(x.map(|xv| self.mu + k * (xv - t * self.mu)))
        }

        fn vjp(&self, _x: &Tensor, t: f64, cot: &Tensor) -> Result<Tensor> {
            Ok(cot.scale(self.slope(t)))
        }
    }

    /// Terminal cost `g(x) = -c <x>` (reward `r = c <x>`); tilting a
    /// Gaussian by this reward shifts its mean by `lambda c s^2` and
    /// preserves the variance.
    pub struct LinearRewardCost {
        pub c: f64,
    }

    impl TerminalCost for LinearRewardCost {
        fn eval_grad(
            &self,
            x: &Tensor,
            _alpha: Option<&Tensor>,
            _rng: &mut Rng,
        ) -> Result<TerminalGrad> {
            let n = x.len() as f64;
            Ok(TerminalGrad {
                value: -self.c * x.data().iter().sum::<f64>() / n,
                gx: Tensor::full(x.shape(), -self.c / n),
                galpha: None,
            })
        }
    }
}

/// Deterministic joint sampling with the fine-tuned model (zero noise):
/// returns `(x1, alpha1)` in the model's working units.
pub fn sample_joint(
    setup: &Setup,
    model: &dyn JointModel,
    x0: &Tensor,
    alpha0: Option<&Tensor>,
    grid: &TimeGrid,
    guard: f64,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut rng = stream_rng(0, 0); // unused at zero noise
    let traj = rollout_joint(
        setup,
        model,
        x0,
        alpha0,
        grid,
        NoiseSchedule::Zero,
        guard,
        NoiseCoupling::Shared,
        &mut rng,
        (0, 0),
    )?;
    Ok((traj.x1_ft, traj.alpha1_ft))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FinetuneModel, InversePredictor, VectorFieldModel};

    #[test]
    fn one_step_and_surrogate_fields() {
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let v = Tensor::from_vec(vec![2.0, -1.0]);
        let est = one_step_estimate(&x, &v, 0.5);
        assert_eq!(est.data(), &[1.0, 0.5]);
        assert_eq!(one_step_estimate(&x, &v, 1.0), x);
        // t=0, x_t=x0, v = x1-x0 lands exactly on x1
        let x0 = Tensor::from_vec(vec![1.0]);
        let x1 = Tensor::from_vec(vec![4.0]);
        let est = one_step_estimate(&x0, &x1.sub(&x0), 0.0);
        assert_eq!(est, x1);

        let alpha = Tensor::from_vec(vec![1.0]);
        let target = Tensor::from_vec(vec![1.0]);
        let v = surrogate_alpha_field(&alpha, &target, 0.3, 1e-3);
        assert_eq!(v.data(), &[0.0]);
        let v = surrogate_alpha_field(&Tensor::from_vec(vec![0.0]), &Tensor::from_vec(vec![1.0]), 0.0, 1e-3);
        assert_eq!(v.data(), &[1.0]);
        // magnitude grows like 1/(1-t) for a fixed gap
        let g1 = reg_field(&alpha, &Tensor::from_vec(vec![2.0]), 0.5, 1e-6).data()[0];
        let g2 = reg_field(&alpha, &Tensor::from_vec(vec![2.0]), 0.75, 1e-6).data()[0];
        assert!((g2 / g1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn running_cost_trivial_cases() {
        let v = Tensor::from_vec(vec![1.0, 2.0]);
        let w = vec![0.5, 0.5];
        let (f, cot) = running_cost(&v, &v, 0.7, &w);
        assert_eq!(f, 0.0);
        assert!(cot.data().iter().all(|&c| c == 0.0));
        let (f, cot) = running_cost(&v, &Tensor::zeros(&[2]), 0.0, &w);
        assert_eq!(f, 0.0);
        assert!(cot.data().iter().all(|&c| c == 0.0));
    }

    fn tiny_joint_problem(
        seed: u64,
    ) -> (VectorFieldModel, InversePredictor, FinetuneModel) {
        let base = VectorFieldModel::init(1, 4, seed);
        let phi = InversePredictor::init(1, 4, (3.0, 12.0), seed + 1);
        let mut ft = FinetuneModel::init(base.clone(), 4, (3.0, 12.0), seed + 2);
        // non-zero heads so every gradient path is live
        let mut rng = stream_rng(seed, 77);
        for p in ft.x_head.params.iter_mut().chain(ft.a_head.params.iter_mut()) {
            for (v, n) in p
                .data_mut()
                .iter_mut()
                .zip(standard_normal(&mut rng, 100_000))
            {
                *v += 0.05 * n;
            }
        }
        (base, phi, ft)
    }

    struct ZeroCost;
    impl TerminalCost for ZeroCost {
        fn eval_grad(&self, x: &Tensor, alpha: Option<&Tensor>, _rng: &mut Rng) -> Result<TerminalGrad> {
            Ok(TerminalGrad {
                value: 0.0,
                gx: Tensor::zeros(x.shape()),
                galpha: alpha.map(|a| Tensor::zeros(a.shape())),
            })
        }
    }

    fn joint_setup<'a>(
        base: &'a VectorFieldModel,
        phi: &'a InversePredictor,
        cost: &'a dyn TerminalCost,
        n: usize,
    ) -> Setup<'a> {
        Setup {
            base,
            phi: Some(phi),
            cost,
            x_shape: vec![1, n, n],
            alpha_shape: Some(vec![1, n, n]),
            wx: Setup::uniform_weights(&[1, n, n]),
            wa: Setup::uniform_weights(&[1, n, n]),
        }
    }

    #[test]
    fn zero_init_rollout_matches_base_bitwise_under_shared_noise() {
        let base = VectorFieldModel::init(1, 4, 80);
        let phi = InversePredictor::init(1, 4, (3.0, 12.0), 81);
        let ft = FinetuneModel::init(base.clone(), 4, (3.0, 12.0), 82);
        let cost = ZeroCost;
        let setup = joint_setup(&base, &phi, &cost, 9);
        let grid = TimeGrid::uniform(9).unwrap().augment(2).unwrap();
        let mut rng = stream_rng(83, 0);
        let x0 = Tensor::new(vec![1, 9, 9], standard_normal(&mut rng, 81)).unwrap();
        let a0 = Tensor::new(vec![1, 9, 9], standard_normal(&mut rng, 81)).unwrap();
        let schedule = NoiseSchedule::Memoryless { h: 1.0 / 8.0 };
        let traj = rollout_joint(
            &setup, &ft, &x0, Some(&a0), &grid, schedule, 1.0 / 8.0,
            NoiseCoupling::Shared, &mut stream_rng(83, 1), (83, 1),
        )
        .unwrap();
        for (i, s) in traj.steps.iter().enumerate() {
            assert_eq!(s.x_base, s.x_ft, "trajectories diverged at step {i}");
        }
        assert_eq!(traj.x1_base, traj.x1_ft);
    }

    #[test]
    fn recorded_controls_satisfy_drift_identity() {
        let (base, phi, ft) = tiny_joint_problem(90);
        let cost = ZeroCost;
        let setup = joint_setup(&base, &phi, &cost, 9);
        let grid = TimeGrid::uniform(7).unwrap();
        let schedule = NoiseSchedule::Memoryless { h: 1.0 / 6.0 };
        let mut rng = stream_rng(91, 0);
        let x0 = Tensor::new(vec![1, 9, 9], standard_normal(&mut rng, 81)).unwrap();
        let a0 = Tensor::new(vec![1, 9, 9], standard_normal(&mut rng, 81)).unwrap();
        let traj = rollout_joint(
            &setup, &ft, &x0, Some(&a0), &grid, schedule, 1.0 / 6.0,
            NoiseCoupling::Independent, &mut rng, (91, 0),
        )
        .unwrap();
        for s in &traj.steps {
            // b_ft = b_base + sigma u at every node
            let b_base = drift(&s.v_base_at_ft, &s.x_ft, s.t, schedule);
            let b_ft = drift(&s.v_x_ft, &s.x_ft, s.t, schedule);
            let u = s.u_x.as_ref().unwrap();
            for i in 0..u.len() {
                let lhs = b_ft.data()[i];
                let rhs = b_base.data()[i] + s.sigma * u.data()[i];
                assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn running_cost_state_grad_matches_finite_differences() {
        let (base, phi, ft) = tiny_joint_problem(100);
        let cost = ZeroCost;
        let setup = joint_setup(&base, &phi, &cost, 9);
        let schedule = NoiseSchedule::Memoryless { h: 0.125 };
        let guard = 0.125;
        let t = 0.55;
        let mut rng = stream_rng(101, 0);
        let x = Tensor::new(vec![1, 9, 9], standard_normal(&mut rng, 81)).unwrap();
        let alpha = Tensor::new(vec![1, 9, 9], standard_normal(&mut rng, 81))
            .unwrap()
            .map(|v| 7.0 + 2.0 * v);
        let lambda_f = 0.4;

        // assemble the step record exactly as the rollout would
        let make_step = |x: &Tensor, alpha: &Tensor| -> StepRecord {
            let v_base = base.eval(x, t).unwrap();
            let x1_hat = one_step_estimate(x, &v_base, t);
            let a1_hat = phi.eval(&x1_hat).unwrap();
            let vab = surrogate_alpha_field(alpha, &a1_hat, t, guard);
            let (v_x_ft, v_a_ft) = JointModel::eval(&ft, x, Some(alpha), Some(&vab), &v_base, t).unwrap();
            StepRecord {
                t,
                h: 0.1,
                sigma: schedule.sigma(t),
                x_base: x.clone(),
                x_ft: x.clone(),
                alpha_ft: Some(alpha.clone()),
                v_base_at_ft: v_base,
                v_x_ft,
                v_alpha_base: Some(vab),
                v_alpha_ft: v_a_ft,
                x1_hat_ft: Some(x1_hat),
                alpha1_hat_base: Some(Tensor::full(&[1, 9, 9], 6.0)),
                u_x: None,
                u_alpha: None,
            }
        };
        let f_value = |x: &Tensor, alpha: &Tensor| -> f64 {
            let s = make_step(x, alpha);
            let v_reg = reg_field(alpha, s.alpha1_hat_base.as_ref().unwrap(), t, guard);
            running_cost(s.v_alpha_ft.as_ref().unwrap(), &v_reg, lambda_f, &setup.wa).0
        };
        let step = make_step(&x, &alpha);
        let (f0, gx, ga) = running_cost_state_grad(&setup, &ft, &step, lambda_f, guard).unwrap();
        assert!((f0 - f_value(&x, &alpha)).abs() < 1e-12);
        let eps = 1e-5;
        for probe in 0..40 {
            let idx = (probe * 131) % 81;
            let on_x = probe % 2 == 0;
            let (field, grad): (&Tensor, &Tensor) = if on_x { (&x, &gx) } else { (&alpha, &ga) };
            let mut plus = field.clone();
            plus.data_mut()[idx] += eps;
            let mut minus = field.clone();
            minus.data_mut()[idx] -= eps;
            let (fp, fm) = if on_x {
                (f_value(&plus, &alpha), f_value(&minus, &alpha))
            } else {
                (f_value(&x, &plus), f_value(&x, &minus))
            };
            let fd = (fp - fm) / (2.0 * eps);
            let an = grad.data()[idx];
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6),
                "probe {probe} (x={on_x}) idx {idx}: fd {fd} vs {an}"
            );
        }
    }

    /// Scalar linear base drift for the closed-form adjoint oracle.
    struct ScalarLinear {
        c: f64,
    }
    impl VelocityField for ScalarLinear {
        fn eval(&self, x: &Tensor, _t: f64) -> Result<Tensor> {
            Ok(x.scale(self.c))
        }
        fn vjp(&self, _x: &Tensor, _t: f64, cot: &Tensor) -> Result<Tensor> {
            Ok(cot.scale(self.c))
        }
    }

    struct IdentityControl;
    impl JointModel for IdentityControl {
        fn has_alpha(&self) -> bool {
            false
        }
        fn params(&self) -> Vec<Tensor> {
            vec![]
        }
        fn set_params(&mut self, _p: &[Tensor]) {}
        fn eval(
            &self,
            _x: &Tensor,
            _a: Option<&Tensor>,
            _v: Option<&Tensor>,
            v_prelim: &Tensor,
            _t: f64,
        ) -> Result<(Tensor, Option<Tensor>)> {
            Ok((v_prelim.clone(), None))
        }
        fn backward(
            &self,
            x: &Tensor,
            _a: Option<&Tensor>,
            _v: Option<&Tensor>,
            _vp: &Tensor,
            _t: f64,
            _cvx: Option<&Tensor>,
            _cva: Option<&Tensor>,
        ) -> Result<ModelGrads> {
            Ok(ModelGrads {
                params: vec![],
                gx: Tensor::zeros(x.shape()),
                galpha: None,
                gvab: None,
            })
        }
    }

    #[test]
    fn lean_adjoint_zero_and_linear_oracle() {
        let c = 0.8;
        let base = ScalarLinear { c };
        let cost = ZeroCost;
        let setup = Setup {
            base: &base,
            phi: None,
            cost: &cost,
            x_shape: vec![1, 1, 1],
            alpha_shape: None,
            wx: vec![1.0],
            wa: vec![],
        };
        let model = IdentityControl;
        let grid = TimeGrid::uniform(201).unwrap();
        let mut rng = stream_rng(110, 0);
        let x0 = Tensor::scalar(1.3);
        // zero-noise rollout keeps the drift purely linear
        let traj = rollout_joint(
            &setup, &model, &x0, None, &grid, NoiseSchedule::Zero, 1e-3,
            NoiseCoupling::Shared, &mut rng, (110, 0),
        )
        .unwrap();
        // zero terminal gradient, zero running cost: adjoint identically zero
        let adj = solve_lean_adjoint(
            &setup, &model, &traj, &Tensor::scalar(0.0), None,
            NoiseSchedule::Zero, 0.0, 1e-3,
        )
        .unwrap();
        assert!(adj.a_x.iter().all(|a| a.data()[0] == 0.0));

        // g = x1^2/2: terminal gradient x1, analytic a(t) = x1 exp(c (1-t))
        let x1 = traj.x1_ft.data()[0];
        let adj = solve_lean_adjoint(
            &setup, &model, &traj, &Tensor::scalar(x1), None,
            NoiseSchedule::Zero, 0.0, 1e-3,
        )
        .unwrap();
        let mut worst: f64 = 0.0;
        for (i, t) in grid.nodes.iter().enumerate() {
            let exact = x1 * (c * (1.0 - t)).exp();
            worst = worst.max((adj.a_x[i].data()[0] - exact).abs() / exact.abs());
        }
        assert!(worst <= 3.0 * c / 200.0, "adjoint error {worst}");

        // linearity: doubling the terminal gradient doubles the adjoint
        let adj2 = solve_lean_adjoint(
            &setup, &model, &traj, &Tensor::scalar(2.0 * x1), None,
            NoiseSchedule::Zero, 0.0, 1e-3,
        )
        .unwrap();
        for (a, b) in adj.a_x.iter().zip(&adj2.a_x) {
            assert!((2.0 * a.data()[0] - b.data()[0]).abs() < 1e-12 * b.data()[0].abs().max(1e-12));
        }
        // superposition on two terminal conditions
        let adj_sum = solve_lean_adjoint(
            &setup, &model, &traj, &Tensor::scalar(3.0 * x1), None,
            NoiseSchedule::Zero, 0.0, 1e-3,
        )
        .unwrap();
        for i in 0..adj.a_x.len() {
            let lhs = adj.a_x[i].data()[0] + adj2.a_x[i].data()[0];
            assert!((lhs - adj_sum.a_x[i].data()[0]).abs() <= 1e-12 * lhs.abs().max(1e-12));
        }
    }

    #[test]
    fn loss_subset_and_clipping_rules() {
        let mut rng = stream_rng(120, 0);
        let subset = loss_step_subset(73, 0.2, 20, &mut rng);
        let tail = (73.0f64 * 0.2).round() as usize;
        assert_eq!(subset.len(), tail + 20);
        assert!(subset.windows(2).all(|w| w[1] > w[0]));
        for i in (73 - tail)..73 {
            assert!(subset.contains(&i));
        }

        // hand-built one-step trajectory against a zero base field
        struct ZeroV;
        impl VelocityField for ZeroV {
            fn eval(&self, x: &Tensor, _t: f64) -> Result<Tensor> {
                Ok(Tensor::zeros(x.shape()))
            }
            fn vjp(&self, x: &Tensor, _t: f64, _c: &Tensor) -> Result<Tensor> {
                Ok(Tensor::zeros(x.shape()))
            }
        }
        let base = ZeroV;
        let cost = ZeroCost;
        let setup = Setup {
            base: &base,
            phi: None,
            cost: &cost,
            x_shape: vec![1, 1, 1],
            alpha_shape: None,
            wx: vec![1.0],
            wa: vec![],
        };
        let model = IdentityControl;
        let mut cfg = FinetuneConfig::new(1.0, 0.0, 0.0, 1, 0);
        cfg.t_nodes = 2;
        cfg.k_sub = 0;
        let schedule = cfg.schedule();
        let t = 0.5;
        let sigma = schedule.sigma(t);
        let u_val = 0.7;
        let mk_traj = |u: f64, x: f64| JointTrajectory {
            steps: vec![StepRecord {
                t,
                h: 0.5,
                sigma,
                x_base: Tensor::scalar(x),
                x_ft: Tensor::scalar(x),
                alpha_ft: None,
                v_base_at_ft: Tensor::scalar(0.0),
                v_x_ft: Tensor::scalar(0.0),
                v_alpha_base: None,
                v_alpha_ft: None,
                x1_hat_ft: None,
                alpha1_hat_base: None,
                u_x: Some(Tensor::scalar(u)),
                u_alpha: None,
            }],
            x1_base: Tensor::scalar(x),
            x1_ft: Tensor::scalar(x),
            alpha1_ft: None,
            rng_provenance: (0, 0),
        };
        // u = -sigma a: consistency fixed point, zero loss
        let traj = mk_traj(u_val, 0.2);
        let adj = LeanAdjoint {
            a_x: vec![Tensor::scalar(-u_val / sigma); 2],
            a_alpha: None,
        };
        let out = adjoint_matching_loss(&setup, &model, &traj, &adj, &[0], &cfg).unwrap();
        assert!(out.loss.abs() < 1e-24);
        // a = 0: pure control cost 1/2 h u^2
        let adj0 = LeanAdjoint { a_x: vec![Tensor::scalar(0.0); 2], a_alpha: None };
        let out = adjoint_matching_loss(&setup, &model, &traj, &adj0, &[0], &cfg).unwrap();
        assert!((out.loss - 0.5 * 0.5 * u_val * u_val).abs() < 1e-14);
        assert_eq!(out.clipped, 0);
        // a term exceeding the threshold is dropped: ||u||^2 = 2 LCT_x
        let mut cfg2 = cfg.clone();
        cfg2.clip_x = Some(u_val * u_val / 2.0);
        let out = adjoint_matching_loss(&setup, &model, &traj, &adj0, &[0], &cfg2).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.clipped, 1);
    }

    #[test]
    fn uncontrolled_memoryless_rollout_preserves_marginals() {
        // with zero control the memoryless SDE must reproduce the target
        // marginals of the analytic base flow
        let flow = bench::AnalyticGaussianFlow { mu: 1.0, s: 0.5 };
        let cost = ZeroCost;
        let setup = Setup {
            base: &flow,
            phi: None,
            cost: &cost,
            x_shape: vec![1, 1, 1],
            alpha_shape: None,
            wx: vec![1.0],
            wa: vec![],
        };
        let model = IdentityControl;
        let grid = TimeGrid::uniform(64).unwrap().augment(5).unwrap();
        let schedule = NoiseSchedule::Memoryless { h: 1.0 / 63.0 };
        let n = 4000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            let mut rng = stream_rng(130, i);
            let x0 = Tensor::new(vec![1, 1, 1], standard_normal(&mut rng, 1)).unwrap();
            let traj = rollout_joint(
                &setup, &model, &x0, None, &grid, schedule, 1.0 / 63.0,
                NoiseCoupling::Shared, &mut rng, (130, i),
            )
            .unwrap();
            let v = traj.x1_ft.data()[0];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!((mean - 1.0).abs() <= 0.05, "mean {mean}");
        assert!((std - 0.5).abs() <= 0.05, "std {std}");
    }

    #[test]
    fn zero_reward_finetune_is_a_fixed_point() {
        let base = VectorFieldModel::init(1, 4, 140);
        let phi = InversePredictor::init(1, 4, (3.0, 12.0), 141);
        let mut ft = FinetuneModel::init(base.clone(), 4, (3.0, 12.0), 142);
        let before = ft.head_params();
        let cost = ZeroCost;
        let setup = joint_setup(&base, &phi, &cost, 9);
        let mut cfg = FinetuneConfig::new(0.0, 0.0, 0.0, 3, 143);
        cfg.t_nodes = 6;
        cfg.k_sub = 2;
        cfg.k_random = 2;
        cfg.batch_size = 2;
        finetune(&setup, &mut ft, &cfg, |_, _| Ok(())).unwrap();
        // zero terminal gradient and zero-init heads: u = 0 and a = 0, so
        // the consistency loss gradient vanishes and nothing moves
        for (a, b) in before.iter().zip(ft.head_params().iter()) {
            assert_eq!(a, b);
        }
    }

    use crate::rng::stream_rng;
}
