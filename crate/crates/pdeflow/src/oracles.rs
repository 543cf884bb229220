//! Self-contained verification oracles: the exactly solvable Gaussian
//! tilting benchmark, manufactured-solution and eigenmode convergence
//! checks, and finite-difference validation of every analytic gradient.
//! The acceptance tests assert on these outcomes; the CLI prints them.

use crate::error::Result;
use crate::finetune::bench::{AnalyticGaussianFlow, LinearRewardCost};
use crate::finetune::{
    finetune, one_step_estimate, reg_field, running_cost, running_cost_state_grad,
    surrogate_alpha_field, FinetuneConfig, JointModel, Setup, StepRecord, XOnlyControlModel,
};
use crate::flow::{sample_ode, NoiseSchedule, TimeGrid};
use crate::grid::{sample_grf, threshold_binary, Grid, GridField, GrfConfig};
use crate::model::{
    FinetuneModel, InverseMap, InversePredictor, VectorFieldModel, VelocityField,
};
use crate::pde::{
    acoustic_energy_trace, gaussian_bumps, simulate_acoustic, solve_darcy, AcousticProblem,
    DarcyProblem,
};
use crate::rng::{standard_normal, stream_rng, Rng};
use crate::tensor::Tensor;
use crate::weakform::{
    grad_weak_residual, sample_test_batch, weak_residual, NormalizerKind, PdeKind,
    TestBatchConfig,
};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Outcome of the Gaussian exponential-tilting benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianTiltOutcome {
    pub mean: f64,
    pub std: f64,
    pub target_mean: f64,
    pub target_std: f64,
    pub final_loss: f64,
}

impl GaussianTiltOutcome {
    pub fn passes(&self) -> bool {
        (self.mean - self.target_mean).abs() <= 0.05 * self.target_mean
            && (self.std - self.target_std).abs() <= 0.15 * self.target_std
    }
}

struct ControlledScalar<'a> {
    base: &'a AnalyticGaussianFlow,
    model: &'a XOnlyControlModel,
}

impl<'a> VelocityField for ControlledScalar<'a> {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let vb = self.base.eval(x, t)?;
        let (v, _) = self.model.eval(x, None, None, &vb, t)?;
        Ok(v)
    }
    fn vjp(&self, x: &Tensor, _t: f64, _cot: &Tensor) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape()))
    }
}

/// Fine-tunes an analytic 1D base flow N(0,1) -> N(mu, s^2) toward the
/// reward `r(x) = x` with `lambda = 1` under the memoryless schedule; the
/// tilted target is N(mu + s^2, s^2).
pub fn gaussian_tilt(epochs: usize, batch: usize, n_eval: usize, seed: u64) -> Result<GaussianTiltOutcome> {
    let mu = 1.0;
    let s = 0.5;
    let flow = AnalyticGaussianFlow { mu, s };
    let cost = LinearRewardCost { c: 1.0 };
    let setup = Setup {
        base: &flow,
        phi: None,
        cost: &cost,
        x_shape: vec![1, 1, 1],
        alpha_shape: None,
        wx: vec![1.0],
        wa: vec![],
    };
    let mut model = XOnlyControlModel::init(1, 16, seed);
    let mut cfg = FinetuneConfig::new(1.0, 0.0, 0.0, epochs, seed + 1);
    cfg.t_nodes = 64;
    cfg.schedule_h = Some(1.0 / 64.0);
    cfg.k_sub = 5;
    cfg.k_last = 0.20;
    cfg.k_random = 20;
    cfg.batch_size = batch;
    cfg.lr = 2e-3;
    let hist = finetune(&setup, &mut model, &cfg, |_, _| Ok(()))?;

    let controlled = ControlledScalar { base: &flow, model: &model };
    let tg = TimeGrid::uniform(64)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..n_eval {
        let mut rng = stream_rng(seed + 2, i as u64);
        let x0 = Tensor::new(vec![1, 1, 1], standard_normal(&mut rng, 1))?;
        let x1 = sample_ode(&controlled, &x0, &tg)?;
        let v = x1.data()[0];
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n_eval as f64;
    let std = (sum_sq / n_eval as f64 - mean * mean).sqrt();
    Ok(GaussianTiltOutcome {
        mean,
        std,
        target_mean: mu + s * s,
        target_std: s,
        final_loss: hist.last().map(|h| h.loss).unwrap_or(f64::NAN),
    })
}

/// Max-norm error of the Darcy solver against the manufactured solution
/// `u = sin(pi x) sin(pi y)` at a given resolution.
pub fn darcy_manufactured_error(n: usize) -> Result<f64> {
    let grid = Grid::unit_square(n)?;
    let a = GridField::constant(&grid, 1.0);
    let exact = GridField::from_fn(&grid, |x| (PI * x[1]).sin() * (PI * x[0]).sin());
    let f = GridField::new(
        grid.clone(),
        exact.values.scale(2.0 * PI * PI),
        crate::grid::BcTag::None,
    )?;
    let u = solve_darcy(&DarcyProblem::new(a, f, crate::grid::BcTag::DirichletZero)?)?;
    Ok(u.values
        .data()
        .iter()
        .zip(exact.values.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConvergenceOutcome {
    pub darcy_ratio: f64,
    pub eigenmode_l2: f64,
    pub energy_drift: f64,
}

impl SolverConvergenceOutcome {
    pub fn passes(&self) -> bool {
        self.darcy_ratio >= 3.2
            && self.darcy_ratio <= 4.8
            && self.eigenmode_l2 <= 0.02
            && self.energy_drift <= 0.01
    }
}

/// Manufactured Darcy refinement ratio plus acoustic eigenmode accuracy
/// and leapfrog energy drift at 65^2.
pub fn solver_convergence() -> Result<SolverConvergenceOutcome> {
    let darcy_ratio = darcy_manufactured_error(33)? / darcy_manufactured_error(65)?;

    let n = 65;
    let grid = Grid::unit_square(n)?;
    let c = 2.0;
    let speed = GridField::constant(&grid, c);
    let init = GridField::from_fn(&grid, |x| (PI * x[1]).cos() * (PI * x[0]).cos());
    let problem = AcousticProblem::new(speed.clone(), init.clone(), 1e-3, 64, 0.315)?;
    let sol = simulate_acoustic(&problem)?;
    let omega = (2.0f64).sqrt() * PI * c;
    let mut worst: f64 = 0.0;
    for frame in 0..64 {
        let t = sol.grid.coord(0, frame);
        let factor = (omega * t).cos();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n * n {
            let exact = factor * init.values.data()[i];
            let got = sol.values.data()[frame * n * n + i];
            num += (got - exact) * (got - exact);
            den += init.values.data()[i] * init.values.data()[i];
        }
        worst = worst.max((num / den).sqrt());
    }

    let bumps = gaussian_bumps(&grid, &crate::pde::default_bump_centers(), 1e-2)?;
    let energy = acoustic_energy_trace(&AcousticProblem::new(speed, bumps, 1e-3, 64, 0.315)?)?;
    let e0 = energy[0];
    let drift = energy
        .iter()
        .fold(0.0f64, |m, &e| m.max((e - e0).abs() / e0));

    Ok(SolverConvergenceOutcome {
        darcy_ratio,
        eigenmode_l2: worst,
        energy_drift: drift,
    })
}

/// Worst relative finite-difference error over a set of probes.
fn fd_worst(
    mut eval: impl FnMut(&Tensor) -> f64,
    at: &Tensor,
    grad: &Tensor,
    probes: usize,
    eps: f64,
    rng: &mut Rng,
) -> f64 {
    let scale = grad.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let idx = rand::Rng::gen_range(rng, 0..at.len());
        let mut plus = at.clone();
        plus.data_mut()[idx] += eps;
        let mut minus = at.clone();
        minus.data_mut()[idx] -= eps;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let an = grad.data()[idx];
        let denom = fd.abs().max(an.abs()).max(1e-6 * scale.max(1e-12));
        worst = worst.max((fd - an).abs() / denom);
    }
    worst
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckOutcome {
    pub weak_darcy_state: f64,
    pub weak_darcy_param: f64,
    pub weak_acoustic_state: f64,
    pub weak_acoustic_param: f64,
    pub running_cost_x: f64,
    pub running_cost_alpha: f64,
    pub model_vjp: f64,
    pub model_params: f64,
    pub probes_per_check: usize,
}

impl GradCheckOutcome {
    pub fn worst(&self) -> f64 {
        [
            self.weak_darcy_state,
            self.weak_darcy_param,
            self.weak_acoustic_state,
            self.weak_acoustic_param,
            self.running_cost_x,
            self.running_cost_alpha,
            self.model_vjp,
            self.model_params,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.worst() <= 1e-4
    }
}

/// Central finite-difference validation of the weak-residual gradients
/// (Darcy and acoustic forms), the running-cost state gradients, and the
/// network VJP and parameter gradients.
pub fn gradcheck(probes: usize, seed: u64) -> Result<GradCheckOutcome> {
    let mut rng = stream_rng(seed, 0);
    let eps = 1e-5;

    // Darcy weak residual
    let grid = Grid::unit_square(17)?;
    let a = threshold_binary(&sample_grf(&grid, &GrfConfig::darcy(), &mut rng)?, 3.0, 12.0)?;
    let u = solve_darcy(&DarcyProblem::with_unit_forcing(a.clone())?)?;
    let tf_cfg = TestBatchConfig {
        n_test: 48,
        sigma_range: (2.0, 5.0),
        wavelet_prob: 0.5,
        per_grid_point: false,
    };
    let tfs = sample_test_batch(&grid, &tf_cfg, &mut rng)?;
    let kind = PdeKind::darcy();
    let norm = NormalizerKind::PsiWeighted;
    let (gu, ga, _) = grad_weak_residual(&u, &a, kind, &tfs, norm)?;
    let weak_darcy_state = fd_worst(
        |x| {
            let f = GridField::new(grid.clone(), x.clone(), crate::grid::BcTag::None).unwrap();
            weak_residual(&f, &a, kind, &tfs, norm).unwrap()
        },
        &u.values,
        &gu.values,
        probes,
        eps,
        &mut rng,
    );
    let weak_darcy_param = fd_worst(
        |x| {
            let f = GridField::new(grid.clone(), x.clone(), crate::grid::BcTag::None).unwrap();
            weak_residual(&u, &f, kind, &tfs, norm).unwrap()
        },
        &a.values,
        &ga.values,
        probes,
        eps,
        &mut rng,
    );

    // acoustic weak residual
    let sgrid = Grid::unit_square(13)?;
    let c = threshold_binary(&sample_grf(&sgrid, &GrfConfig::acoustic(), &mut rng)?, 2.0, 3.0)?;
    let init = gaussian_bumps(&sgrid, &crate::pde::default_bump_centers(), 1e-2)?;
    let p = simulate_acoustic(&AcousticProblem::new(c.clone(), init, 1e-3, 9, 0.1)?)?;
    let tfs3 = sample_test_batch(
        &p.grid,
        &TestBatchConfig {
            n_test: 24,
            sigma_range: (2.0, 4.0),
            wavelet_prob: 0.5,
            per_grid_point: false,
        },
        &mut rng,
    )?;
    let (gp, gc, _) = grad_weak_residual(&p, &c, PdeKind::Acoustic, &tfs3, norm)?;
    let weak_acoustic_state = fd_worst(
        |x| {
            let f = GridField::new(p.grid.clone(), x.clone(), crate::grid::BcTag::None).unwrap();
            weak_residual(&f, &c, PdeKind::Acoustic, &tfs3, norm).unwrap()
        },
        &p.values,
        &gp.values,
        probes,
        eps,
        &mut rng,
    );
    let weak_acoustic_param = fd_worst(
        |x| {
            let f = GridField::new(sgrid.clone(), x.clone(), crate::grid::BcTag::None).unwrap();
            weak_residual(&p, &f, PdeKind::Acoustic, &tfs3, norm).unwrap()
        },
        &c.values,
        &gc.values,
        probes,
        eps,
        &mut rng,
    );

    // running-cost state gradients through the joint model chain
    let base = VectorFieldModel::init(1, 4, seed + 10);
    let phi = InversePredictor::init(1, 4, (3.0, 12.0), seed + 11);
    let mut ft = FinetuneModel::init(base.clone(), 4, (3.0, 12.0), seed + 12);
    for pteil in ft.x_head.params.iter_mut().chain(ft.a_head.params.iter_mut()) {
        for (v, n) in pteil
            .data_mut()
            .iter_mut()
            .zip(standard_normal(&mut rng, 100_000))
        {
            *v += 0.05 * n;
        }
    }
    struct NoCost;
    impl crate::finetune::TerminalCost for NoCost {
        fn eval_grad(
            &self,
            x: &Tensor,
            a: Option<&Tensor>,
            _rng: &mut Rng,
        ) -> Result<crate::finetune::TerminalGrad> {
            Ok(crate::finetune::TerminalGrad {
                value: 0.0,
                gx: Tensor::zeros(x.shape()),
                galpha: a.map(|a| Tensor::zeros(a.shape())),
            })
        }
    }
    let cost = NoCost;
    let setup = Setup {
        base: &base,
        phi: Some(&phi),
        cost: &cost,
        x_shape: vec![1, 9, 9],
        alpha_shape: Some(vec![1, 9, 9]),
        wx: Setup::uniform_weights(&[1, 9, 9]),
        wa: Setup::uniform_weights(&[1, 9, 9]),
    };
    let t = 0.55;
    let guard = 0.125;
    let schedule = NoiseSchedule::Memoryless { h: 0.125 };
    let lambda_f = 0.4;
    let x = Tensor::new(vec![1, 9, 9], standard_normal(&mut rng, 81))?;
    let alpha = Tensor::new(vec![1, 9, 9], standard_normal(&mut rng, 81))?.map(|v| 7.0 + 2.0 * v);
    let alpha1_base = Tensor::full(&[1, 9, 9], 6.0);
    let make_step = |x: &Tensor, alpha: &Tensor| -> Result<StepRecord> {
        let v_base = base.eval(x, t)?;
        let x1_hat = one_step_estimate(x, &v_base, t);
        let a1_hat = phi.eval(&x1_hat)?;
        let vab = surrogate_alpha_field(alpha, &a1_hat, t, guard);
        let (v_x_ft, v_a_ft) = JointModel::eval(&ft, x, Some(alpha), Some(&vab), &v_base, t)?;
        Ok(StepRecord {
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
            alpha1_hat_base: Some(alpha1_base.clone()),
            u_x: None,
            u_alpha: None,
        })
    };
    let f_value = |x: &Tensor, alpha: &Tensor| -> f64 {
        let s = make_step(x, alpha).unwrap();
        let v_reg = reg_field(alpha, &alpha1_base, t, guard);
        running_cost(s.v_alpha_ft.as_ref().unwrap(), &v_reg, lambda_f, &setup.wa).0
    };
    let step = make_step(&x, &alpha)?;
    let (_, gx_f, ga_f) = running_cost_state_grad(&setup, &ft, &step, lambda_f, guard)?;
    let running_cost_x = fd_worst(
        |xv| f_value(xv, &alpha),
        &x,
        &gx_f,
        probes,
        eps,
        &mut rng,
    );
    let running_cost_alpha = fd_worst(
        |av| f_value(&x, av),
        &alpha,
        &ga_f,
        probes,
        eps,
        &mut rng,
    );

    // model input VJP and parameter gradients
    let m = VectorFieldModel::init(2, 5, seed + 20);
    let xm = Tensor::new(vec![2, 9, 9], standard_normal(&mut rng, 162))?;
    let cot = Tensor::new(vec![2, 9, 9], standard_normal(&mut rng, 162))?;
    let gx_m = m.vjp(&xm, 0.6, &cot)?;
    let model_vjp = fd_worst(
        |xv| m.forward_base(xv, 0.6).unwrap().dot(&cot),
        &xm,
        &gx_m,
        probes,
        1e-6,
        &mut rng,
    );
    let grads = m.param_gradient(&xm, 0.6, &cot)?;
    let mut model_params: f64 = 0.0;
    let mut checked = 0;
    let mut li = 0;
    while checked < probes {
        let layer = li % grads.len();
        li += 1;
        if m.trunk.params[layer].is_empty() {
            continue;
        }
        let pi = rand::Rng::gen_range(&mut rng, 0..m.trunk.params[layer].len());
        let mut mp = m.clone();
        mp.trunk.params[layer].data_mut()[pi] += 1e-6;
        let mut mm = m.clone();
        mm.trunk.params[layer].data_mut()[pi] -= 1e-6;
        let fd = (mp.forward_base(&xm, 0.6)?.dot(&cot) - mm.forward_base(&xm, 0.6)?.dot(&cot))
            / 2e-6;
        let an = grads[layer].data()[pi];
        let denom = fd.abs().max(an.abs()).max(1e-4);
        model_params = model_params.max((fd - an).abs() / denom);
        checked += 1;
    }

    Ok(GradCheckOutcome {
        weak_darcy_state,
        weak_darcy_param,
        weak_acoustic_state,
        weak_acoustic_param,
        running_cost_x,
        running_cost_alpha,
        model_vjp,
        model_params,
        probes_per_check: probes,
    })
}
