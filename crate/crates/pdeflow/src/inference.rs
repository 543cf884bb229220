//! Post-training consumption: steering generation toward sparse parameter
//! observations, super-resolution residual evaluation, pointwise
//! distribution statistics, and the residual summary tables.

use crate::error::{Error, Result};
use crate::finetune::{one_step_estimate, surrogate_alpha_field, JointModel};
use crate::flow::{sample_ode, TimeGrid};
use crate::grid::{resample_multilinear, BcTag, Grid, GridField};
use crate::model::{
    field_to_tensor, tensor_to_field, FinetuneModel, InverseMap, InversePredictor,
    VectorFieldModel, VelocityField,
};
use crate::rng::{standard_normal, stream_rng, Rng};
use crate::tensor::Tensor;
use crate::weakform::{
    boundary_residual, sample_test_batch, strong_residual, weak_residual, NormalizerKind,
    PdeKind, StrongStencil, TestBatchConfig,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Sparse parameter observations: flat node indices into the (spatial)
/// parameter grid with target values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseObservations {
    pub points: Vec<(usize, f64)>,
}

impl SparseObservations {
    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::config("need at least one observation"));
        }
        if self.points.iter().any(|&(i, _)| i >= n_nodes) {
            return Err(Error::config("observation location outside the grid"));
        }
        Ok(())
    }

    /// Draws `m` observation sites uniformly without replacement from the
    /// nodes of a ground-truth parameter field.
    pub fn draw_from_field(param: &GridField, m: usize, rng: &mut Rng) -> Result<Self> {
        let n = param.values.len();
        if m == 0 || m > n {
            return Err(Error::config(format!("cannot draw {m} observations from {n} nodes")));
        }
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.truncate(m);
        idx.sort_unstable();
        Ok(SparseObservations {
            points: idx.into_iter().map(|i| (i, param.values.data()[i])).collect(),
        })
    }
}

/// Mean squared mismatch of the one-step parameter estimate at the
/// observed sites.
pub fn guidance_loss(alpha1_hat: &Tensor, obs: &SparseObservations) -> Result<f64> {
    obs.validate(alpha1_hat.len())?;
    let m = obs.points.len() as f64;
    Ok(obs
        .points
        .iter()
        .map(|&(i, v)| {
            let d = alpha1_hat.data()[i] - v;
            d * d
        })
        .sum::<f64>()
        / m)
}

/// Frozen pieces needed to sample the fine-tuned joint model.
pub struct JointSampler<'a> {
    pub base: &'a dyn VelocityField,
    pub phi: &'a dyn InverseMap,
    pub model: &'a dyn JointModel,
    /// Division guard for the surrogate field, normally the coarse step.
    pub guard: f64,
}

impl<'a> JointSampler<'a> {
    pub fn from_finetuned(ft: &'a FinetuneModel, phi: &'a InversePredictor, guard: f64) -> Self {
        JointSampler { base: &ft.base, phi, model: ft, guard }
    }

    fn velocities(
        &self,
        x: &Tensor,
        alpha: &Tensor,
        t: f64,
    ) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let v_base = self.base.eval(x, t)?;
        let x1_hat = one_step_estimate(x, &v_base, t);
        let alpha1_hat = self.phi.eval(&x1_hat)?;
        let vab = surrogate_alpha_field(alpha, &alpha1_hat, t, self.guard);
        let (v_x, v_alpha) = self.model.eval(x, Some(alpha), Some(&vab), &v_base, t)?;
        let v_alpha =
            v_alpha.ok_or_else(|| Error::config("joint sampler needs an alpha velocity"))?;
        Ok((v_x, v_alpha, vab, x1_hat))
    }

    /// Deterministic joint sample (zero injected noise).
    pub fn sample(&self, x0: &Tensor, alpha0: &Tensor, tg: &TimeGrid) -> Result<(Tensor, Tensor)> {
        self.sample_guided_inner(x0, alpha0, tg, None, 0.0)
    }

    /// Guided sampling: every Euler step descends the observation
    /// mismatch of the one-step parameter estimate, with the gradient
    /// taken on the joint state through the alpha head, the surrogate
    /// field and the inverse predictor.
    pub fn sample_guided(
        &self,
        x0: &Tensor,
        alpha0: &Tensor,
        tg: &TimeGrid,
        obs: &SparseObservations,
        zeta: f64,
    ) -> Result<(Tensor, Tensor)> {
        if !zeta.is_finite() || zeta < 0.0 {
            return Err(Error::config("guidance strength must be finite and >= 0"));
        }
        obs.validate(alpha0.len())?;
        self.sample_guided_inner(x0, alpha0, tg, Some(obs), zeta)
    }

    fn sample_guided_inner(
        &self,
        x0: &Tensor,
        alpha0: &Tensor,
        tg: &TimeGrid,
        obs: Option<&SparseObservations>,
        zeta: f64,
    ) -> Result<(Tensor, Tensor)> {
        let mut x = x0.clone();
        let mut alpha = alpha0.clone();
        for i in 0..tg.n_steps() {
            let t = tg.nodes[i];
            let h = tg.nodes[i + 1] - t;
            let (v_x, v_alpha, _, x1_hat) = self.velocities(&x, &alpha, t)?;
            let mut dx = v_x.scale(h);
            let mut dalpha = v_alpha.scale(h);
            if let (Some(obs), true) = (obs, zeta > 0.0) {
                // alpha1_hat_ft = alpha + (1-t) v_alpha_ft
                let mut est = alpha.clone();
                est.axpy(1.0 - t, &v_alpha);
                let m = obs.points.len() as f64;
                let mut g_obs = Tensor::zeros(alpha.shape());
                for &(idx, target) in &obs.points {
                    g_obs.data_mut()[idx] = 2.0 * (est.data()[idx] - target) / m;
                }
                let cot_va = g_obs.scale(1.0 - t);
                let bw = self.model.backward(
                    &x,
                    Some(&alpha),
                    Some(&surrogate_alpha_field(
                        &alpha,
                        &self.phi.eval(&x1_hat)?,
                        t,
                        self.guard,
                    )),
                    &self.base.eval(&x, t)?,
                    t,
                    None,
                    Some(&cot_va),
                )?;
                let d = (1.0 - t).max(self.guard);
                let gvab = bw.gvab.unwrap();
                let mut galpha = g_obs;
                galpha.axpy(1.0, bw.galpha.as_ref().unwrap());
                galpha.axpy(-1.0 / d, &gvab);
                let y = self.phi.vjp(&x1_hat, &gvab.scale(1.0 / d))?;
                let mut gx = bw.gx;
                gx.axpy(1.0, &y);
                gx.axpy(1.0 - t, &self.base.vjp(&x, t, &y)?);
                dx.axpy(-zeta * h, &gx);
                dalpha.axpy(-zeta * h, &galpha);
            }
            x.axpy(1.0, &dx);
            alpha.axpy(1.0, &dalpha);
            if !x.all_finite() || !alpha.all_finite() {
                return Err(Error::numerical(format!(
                    "guided sampling produced non-finite state at step {i}"
                )));
            }
        }
        Ok((x, alpha))
    }
}

/// Pointwise distribution statistics normalized by the average data
/// variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatReport {
    pub mmse_rel: f64,
    pub smse_rel: f64,
    pub diversity_rel: f64,
}

/// Mean/spread mismatch and ensemble diversity between generated and data
/// sample sets (population statistics per grid point).
pub fn stat_report(gen: &[Tensor], data: &[Tensor]) -> Result<StatReport> {
    if gen.len() < 2 || data.len() < 2 {
        return Err(Error::config("stat_report needs at least 2 samples per set"));
    }
    let n = gen[0].len();
    if data[0].len() != n {
        return Err(Error::config("sample shapes differ between sets"));
    }
    let moments = |set: &[Tensor]| -> (Vec<f64>, Vec<f64>) {
        let count = set.len() as f64;
        let mut mean = vec![0.0; n];
        for s in set {
            for (m, &v) in mean.iter_mut().zip(s.data()) {
                *m += v / count;
            }
        }
        let mut var = vec![0.0; n];
        for s in set {
            for ((va, &v), &m) in var.iter_mut().zip(s.data()).zip(&mean) {
                *va += (v - m) * (v - m) / count;
            }
        }
        (mean, var)
    };
    let (mu_g, var_g) = moments(gen);
    let (mu_d, var_d) = moments(data);
    let s_data = var_d.iter().sum::<f64>() / n as f64;
    if s_data <= 0.0 {
        return Err(Error::config("data set has zero variance"));
    }
    let scale = 1.0 / (s_data * n as f64);
    let mmse_rel = mu_g
        .iter()
        .zip(&mu_d)
        .map(|(g, d)| (g - d) * (g - d))
        .sum::<f64>()
        * scale;
    let smse_rel = var_g
        .iter()
        .zip(&var_d)
        .map(|(g, d)| (g.sqrt() - d.sqrt()) * (g.sqrt() - d.sqrt()))
        .sum::<f64>()
        * scale;
    let diversity_rel = var_g.iter().sum::<f64>() * scale;
    Ok(StatReport { mmse_rel, smse_rel, diversity_rel })
}

/// One row of the residual summary table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub n: usize,
    pub weak_mean: f64,
    pub weak_std: f64,
    pub strong_mean: f64,
    pub strong_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Weak and strong residual statistics for a set of physical
/// (state, parameter) pairs; a fresh test batch is drawn per sample.
#[allow(clippy::too_many_arguments)]
pub fn residual_row(
    label: &str,
    pairs: &[(GridField, GridField)],
    pde: PdeKind,
    tf_cfg: &TestBatchConfig,
    norm: NormalizerKind,
    stencil: StrongStencil,
    seed: u64,
) -> Result<TableRow> {
    if pairs.is_empty() {
        return Err(Error::config("residual_row needs samples"));
    }
    let rows: Vec<Result<(f64, f64)>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (state, param))| {
            let tfs = sample_test_batch(&state.grid, tf_cfg, &mut stream_rng(seed, i as u64))?;
            let w = weak_residual(state, param, pde, &tfs, norm)?;
            let s = strong_residual(state, param, pde, stencil)?;
            Ok((w, s))
        })
        .collect();
    let mut weak = Vec::with_capacity(pairs.len());
    let mut strong = Vec::with_capacity(pairs.len());
    for r in rows {
        let (w, s) = r?;
        weak.push(w);
        strong.push(s);
    }
    let (wm, ws) = mean_std(&weak);
    let (sm, ss) = mean_std(&strong);
    Ok(TableRow {
        label: label.to_string(),
        n: pairs.len(),
        weak_mean: wm,
        weak_std: ws,
        strong_mean: sm,
        strong_std: ss,
    })
}

/// Where a table row's samples come from.
pub enum RowSource<'a> {
    /// Terminal samples of a base model; the parameter comes from phi.
    BaseModel(&'a VectorFieldModel),
    /// Joint samples of a fine-tuned model; the parameter still comes
    /// from phi applied to the state, matching the reporting convention.
    FinetunedModel(&'a FinetuneModel),
    /// Ground-truth dataset pairs (physical units).
    Dataset(Vec<(GridField, GridField)>),
}

/// Generates `n` samples per source and evaluates residual statistics.
#[allow(clippy::too_many_arguments)]
pub fn residual_table(
    rows: &[(String, RowSource)],
    phi: &InversePredictor,
    pde: PdeKind,
    state_grid: &Grid,
    tf_cfg: &TestBatchConfig,
    n: usize,
    t_nodes: usize,
    seed: u64,
) -> Result<Vec<TableRow>> {
    let mut out = Vec::with_capacity(rows.len());
    for (k, (label, source)) in rows.iter().enumerate() {
        let pairs = match source {
            RowSource::Dataset(pairs) => pairs.clone(),
            RowSource::BaseModel(m) => {
                generate_pairs(*m, None, phi, state_grid, n, t_nodes, seed + 1000 * k as u64)?
            }
            RowSource::FinetunedModel(ft) => generate_pairs(
                &ft.base,
                Some(*ft),
                phi,
                state_grid,
                n,
                t_nodes,
                seed + 1000 * k as u64,
            )?,
        };
        out.push(residual_row(
            label,
            &pairs,
            pde,
            tf_cfg,
            NormalizerKind::PsiWeighted,
            StrongStencil::CentralAssembly,
            seed + 1000 * k as u64 + 500,
        )?);
    }
    Ok(out)
}

/// Draws `n` (state, parameter) pairs from a model: deterministic rollout
/// of the state, parameter recovered by the inverse predictor, both mapped
/// to physical units.
pub fn generate_pairs(
    base: &VectorFieldModel,
    ft: Option<&FinetuneModel>,
    phi: &InversePredictor,
    state_grid: &Grid,
    n: usize,
    t_nodes: usize,
    seed: u64,
) -> Result<Vec<(GridField, GridField)>> {
    let tg = TimeGrid::uniform(t_nodes)?;
    let shape = state_shape(state_grid);
    let n_el: usize = shape.iter().product();
    let (mean, std) = base.standardization;
    let spatial = state_grid.spatial_grid()?;
    let alpha_shape = vec![1, spatial.dims()[0], spatial.dims()[1]];
    let n_alpha: usize = alpha_shape.iter().product();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let x0 = Tensor::new(shape.clone(), standard_normal(&mut rng, n_el))?;
            let x1_std = match ft {
                None => sample_ode(base, &x0, &tg)?,
                Some(ft) => {
                    let a0 = Tensor::new(alpha_shape.clone(), standard_normal(&mut rng, n_alpha))?;
                    let sampler = JointSampler::from_finetuned(ft, phi, 1.0 / (t_nodes - 1) as f64);
                    sampler.sample(&x0, &a0, &tg)?.0
                }
            };
            let alpha = phi.eval(&x1_std)?;
            let x_phys = x1_std.map(|v| mean + std * v);
            Ok((
                tensor_to_field(&x_phys, state_grid, BcTag::None)?,
                tensor_to_field(&alpha, &spatial, BcTag::None)?,
            ))
        })
        .collect()
}

pub fn state_shape(grid: &Grid) -> Vec<usize> {
    let dims = grid.dims();
    match dims.len() {
        2 => vec![1, dims[0], dims[1]],
        _ => dims.to_vec(),
    }
}

/// Super-resolution residual report: weak residual and boundary penalty of
/// factor-upsampled samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperresReport {
    pub label: String,
    pub n: usize,
    pub factor: usize,
    pub weak_mean: f64,
    pub weak_std: f64,
    pub bc_mean: f64,
    pub bc_std: f64,
}

/// Evaluates factor-upsampled weak and boundary residuals on physical
/// (state, parameter) pairs; `factor = 1` reduces to plain evaluation.
#[allow(clippy::too_many_arguments)]
pub fn superres_evaluate(
    label: &str,
    pairs: &[(GridField, GridField)],
    pde: PdeKind,
    bc: BcTag,
    factor: usize,
    tf_cfg: &TestBatchConfig,
    norm: NormalizerKind,
    seed: u64,
) -> Result<SuperresReport> {
    if pairs.is_empty() {
        return Err(Error::config("superres_evaluate needs samples"));
    }
    let rows: Vec<Result<(f64, f64)>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (state, param))| {
            let fine_state = resample_multilinear(state, factor)?;
            let fine_param = resample_multilinear(param, factor)?;
            let tfs =
                sample_test_batch(&fine_state.grid, tf_cfg, &mut stream_rng(seed, i as u64))?;
            let w = weak_residual(&fine_state, &fine_param, pde, &tfs, norm)?;
            let b = boundary_residual(&fine_state, bc)?;
            Ok((w, b))
        })
        .collect();
    let mut weak = Vec::new();
    let mut bcs = Vec::new();
    for r in rows {
        let (w, b) = r?;
        weak.push(w);
        bcs.push(b);
    }
    let (wm, ws) = mean_std(&weak);
    let (bm, bs) = mean_std(&bcs);
    Ok(SuperresReport {
        label: label.to_string(),
        n: pairs.len(),
        factor,
        weak_mean: wm,
        weak_std: ws,
        bc_mean: bm,
        bc_std: bs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InversePredictor;

    #[test]
    fn guidance_loss_examples() {
        let alpha = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let obs = SparseObservations { points: vec![(0, 1.0), (2, 3.0)] };
        assert_eq!(guidance_loss(&alpha, &obs).unwrap(), 0.0);
        let obs = SparseObservations { points: vec![(1, 4.0)] };
        assert_eq!(guidance_loss(&alpha, &obs).unwrap(), 4.0);
        // invariant to ordering
        let a = SparseObservations { points: vec![(0, 0.0), (3, 1.0)] };
        let b = SparseObservations { points: vec![(3, 1.0), (0, 0.0)] };
        assert_eq!(
            guidance_loss(&alpha, &a).unwrap(),
            guidance_loss(&alpha, &b).unwrap()
        );
        let bad = SparseObservations { points: vec![(99, 0.0)] };
        assert!(guidance_loss(&alpha, &bad).is_err());
    }

    #[test]
    fn zeta_zero_matches_unguided_bitwise() {
        let base = VectorFieldModel::init(1, 4, 200);
        let phi = InversePredictor::init(1, 4, (3.0, 12.0), 201);
        let mut ft = FinetuneModel::init(base, 4, (3.0, 12.0), 202);
        let mut rng = stream_rng(203, 0);
        for p in ft.x_head.params.iter_mut().chain(ft.a_head.params.iter_mut()) {
            for (v, n) in p.data_mut().iter_mut().zip(standard_normal(&mut rng, 100_000)) {
                *v += 0.03 * n;
            }
        }
        let sampler = JointSampler::from_finetuned(&ft, &phi, 1.0 / 8.0);
        let tg = TimeGrid::uniform(9).unwrap();
        let x0 = Tensor::new(vec![1, 9, 9], standard_normal(&mut rng, 81)).unwrap();
        let a0 = Tensor::new(vec![1, 9, 9], standard_normal(&mut rng, 81)).unwrap();
        let obs = SparseObservations { points: vec![(0, 5.0), (40, 7.0)] };
        let (x1, al1) = sampler.sample(&x0, &a0, &tg).unwrap();
        let (x2, al2) = sampler.sample_guided(&x0, &a0, &tg, &obs, 0.0).unwrap();
        assert_eq!(x1, x2);
        assert_eq!(al1, al2);
        // matches the finetune-module joint sampler as well
        struct NullCost;
        impl crate::finetune::TerminalCost for NullCost {
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
        let cost = NullCost;
        let setup = crate::finetune::Setup {
            base: &ft.base,
            phi: Some(&phi),
            cost: &cost,
            x_shape: vec![1, 9, 9],
            alpha_shape: Some(vec![1, 9, 9]),
            wx: crate::finetune::Setup::uniform_weights(&[1, 9, 9]),
            wa: crate::finetune::Setup::uniform_weights(&[1, 9, 9]),
        };
        let (x3, al3) =
            crate::finetune::sample_joint(&setup, &ft, &x0, Some(&a0), &tg, 1.0 / 8.0).unwrap();
        assert_eq!(x1, x3);
        assert_eq!(al1, al3.unwrap());
    }

    #[test]
    fn guidance_gradient_direction_reduces_loss() {
        // a single guided step from the same state must reduce the
        // observation mismatch of the one-step estimate for small zeta
        let base = VectorFieldModel::init(1, 4, 210);
        let phi = InversePredictor::init(1, 4, (3.0, 12.0), 211);
        let mut ft = FinetuneModel::init(base, 4, (3.0, 12.0), 212);
        let mut rng = stream_rng(213, 0);
        for p in ft.x_head.params.iter_mut().chain(ft.a_head.params.iter_mut()) {
            for (v, n) in p.data_mut().iter_mut().zip(standard_normal(&mut rng, 100_000)) {
                *v += 0.05 * n;
            }
        }
        let sampler = JointSampler::from_finetuned(&ft, &phi, 0.05);
        let x = Tensor::new(vec![1, 9, 9], standard_normal(&mut rng, 81)).unwrap();
        let alpha = Tensor::new(vec![1, 9, 9], standard_normal(&mut rng, 81))
            .unwrap()
            .map(|v| 7.0 + v);
        let obs = SparseObservations { points: vec![(10, 12.0), (50, 3.0), (70, 12.0)] };
        let t = 0.4;
        let est = |x: &Tensor, alpha: &Tensor| -> Tensor {
            let (_, v_alpha, _, _) = sampler.velocities(x, alpha, t).unwrap();
            let mut e = alpha.clone();
            e.axpy(1.0 - t, &v_alpha);
            e
        };
        let l0 = guidance_loss(&est(&x, &alpha), &obs).unwrap();
        // single Euler step over [t, t+h] with and without guidance
        let tg_step = TimeGrid { nodes: vec![t, t + 0.05] };
        let (xg, ag) = sampler.sample_guided(&x, &alpha, &tg_step, &obs, 40.0).unwrap();
        let (xu, au) = sampler.sample(&x, &alpha, &tg_step).unwrap();
        let lg = guidance_loss(&est(&xg, &ag), &obs).unwrap();
        let lu = guidance_loss(&est(&xu, &au), &obs).unwrap();
        assert!(lg < lu, "guided {lg} vs unguided {lu} (start {l0})");
    }

    #[test]
    fn stat_report_identities() {
        let mut rng = stream_rng(220, 0);
        let data: Vec<Tensor> = (0..8)
            .map(|_| Tensor::from_vec(standard_normal(&mut rng, 16)))
            .collect();
        let rep = stat_report(&data, &data).unwrap();
        assert!(rep.mmse_rel.abs() < 1e-14);
        assert!(rep.smse_rel.abs() < 1e-14);
        assert!((rep.diversity_rel - 1.0).abs() < 1e-12);

        // constant shift moves only the mean mismatch
        let c = 0.7;
        let shifted: Vec<Tensor> = data.iter().map(|s| s.map(|v| v + c)).collect();
        let rep = stat_report(&shifted, &data).unwrap();
        let s_data = {
            let r = stat_report(&data, &data).unwrap();
            let _ = r;
            // recompute the normalizer directly for the check
            let n = 16.0;
            let count = data.len() as f64;
            let mut mean = vec![0.0; 16];
            for s in &data {
                for (m, &v) in mean.iter_mut().zip(s.data()) {
                    *m += v / count;
                }
            }
            let mut var = vec![0.0; 16];
            for s in &data {
                for ((va, &v), &m) in var.iter_mut().zip(s.data()).zip(&mean) {
                    *va += (v - m) * (v - m) / count;
                }
            }
            var.iter().sum::<f64>() / n
        };
        assert!((rep.mmse_rel - c * c / s_data).abs() < 1e-12);
        assert!(rep.smse_rel.abs() < 1e-14);

        // collapse: one repeated sample has zero diversity
        let one = data[0].clone();
        let collapsed = vec![one.clone(), one.clone(), one];
        let rep = stat_report(&collapsed, &data).unwrap();
        assert!(rep.diversity_rel <= 1e-30);

        // dimensionless: common rescaling changes nothing
        let gen2: Vec<Tensor> = shifted.iter().map(|s| s.scale(3.0)).collect();
        let data2: Vec<Tensor> = data.iter().map(|s| s.scale(3.0)).collect();
        let a = stat_report(&shifted, &data).unwrap();
        let b = stat_report(&gen2, &data2).unwrap();
        assert!((a.mmse_rel - b.mmse_rel).abs() < 1e-10);
        assert!((a.smse_rel - b.smse_rel).abs() < 1e-10);
        assert!((a.diversity_rel - b.diversity_rel).abs() < 1e-10);

        assert!(stat_report(&data[..1], &data).is_err());
    }

    #[test]
    fn residual_row_single_sample_and_determinism() {
        let grid = Grid::unit_square(17).unwrap();
        let mut rng = stream_rng(230, 0);
        let raw = crate::grid::sample_grf(&grid, &crate::grid::GrfConfig::darcy(), &mut rng)
            .unwrap();
        let a = crate::grid::threshold_binary(&raw, 3.0, 12.0).unwrap();
        let u = crate::pde::solve_darcy(
            &crate::pde::DarcyProblem::with_unit_forcing(a.clone()).unwrap(),
        )
        .unwrap();
        let cfg = TestBatchConfig {
            n_test: 64,
            sigma_range: (2.0, 5.0),
            wavelet_prob: 0.5,
            per_grid_point: false,
        };
        let pairs = vec![(u, a)];
        let row = residual_row(
            "data",
            &pairs,
            PdeKind::darcy(),
            &cfg,
            NormalizerKind::PsiWeighted,
            StrongStencil::CentralAssembly,
            9,
        )
        .unwrap();
        assert_eq!(row.n, 1);
        assert_eq!(row.weak_std, 0.0);
        assert_eq!(row.strong_std, 0.0);
        let row2 = residual_row(
            "data",
            &pairs,
            PdeKind::darcy(),
            &cfg,
            NormalizerKind::PsiWeighted,
            StrongStencil::CentralAssembly,
            9,
        )
        .unwrap();
        assert_eq!(row.weak_mean, row2.weak_mean);
    }

    #[test]
    fn superres_factor_one_is_plain_evaluation() {
        let grid = Grid::unit_square(17).unwrap();
        let mut rng = stream_rng(240, 0);
        let raw = crate::grid::sample_grf(&grid, &crate::grid::GrfConfig::darcy(), &mut rng)
            .unwrap();
        let a = crate::grid::threshold_binary(&raw, 3.0, 12.0).unwrap();
        let u = crate::pde::solve_darcy(
            &crate::pde::DarcyProblem::with_unit_forcing(a.clone()).unwrap(),
        )
        .unwrap();
        let cfg = TestBatchConfig {
            n_test: 32,
            sigma_range: (2.0, 4.0),
            wavelet_prob: 0.0,
            per_grid_point: false,
        };
        let pairs = vec![(u.clone(), a.clone())];
        let rep = superres_evaluate(
            "m",
            &pairs,
            PdeKind::darcy(),
            BcTag::DirichletZero,
            1,
            &cfg,
            NormalizerKind::PsiWeighted,
            77,
        )
        .unwrap();
        let tfs = sample_test_batch(&grid, &cfg, &mut stream_rng(77, 0)).unwrap();
        let w = weak_residual(&u, &a, PdeKind::darcy(), &tfs, NormalizerKind::PsiWeighted)
            .unwrap();
        assert!((rep.weak_mean - w).abs() <= 1e-12 * w.max(1.0));
        let b = boundary_residual(&u, BcTag::DirichletZero).unwrap();
        assert!((rep.bc_mean - b).abs() <= 1e-14);
    }

    use crate::model::VectorFieldModel;
}
