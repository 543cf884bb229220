//! Ground-truth data generation: steady Darcy flow, acoustic wave
//! propagation, initial conditions, observation noise and dataset assembly.

use crate::error::{Error, Result};
use crate::grid::{sample_grf, threshold_binary, BcTag, Grid, GridField, GrfConfig};
use crate::rng::{standard_normal, stream_rng, Rng};
use crate::store::{Dtype, Manifest, ManifestEntry, Role, TensorRecord};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Steady Darcy problem `-div(a grad u) = f` with Dirichlet data.
#[derive(Debug, Clone)]
pub struct DarcyProblem {
    pub permeability: GridField,
    pub forcing: GridField,
    pub bc: BcTag,
}

impl DarcyProblem {
    pub fn new(permeability: GridField, forcing: GridField, bc: BcTag) -> Result<Self> {
        if permeability.grid != forcing.grid {
            return Err(Error::config("permeability and forcing grids differ"));
        }
        if permeability.values.min() <= 0.0 {
            return Err(Error::config("permeability must be strictly positive"));
        }
        if !forcing.values.all_finite() {
            return Err(Error::config("forcing must be finite"));
        }
        match bc {
            BcTag::DirichletZero | BcTag::DirichletTopSin => {}
            _ => return Err(Error::config("Darcy supports Dirichlet boundary tags")),
        }
        Ok(DarcyProblem { permeability, forcing, bc })
    }

    /// Unit forcing, zero Dirichlet.
    pub fn with_unit_forcing(permeability: GridField) -> Result<Self> {
        let f = GridField::constant(&permeability.grid, 1.0);
        DarcyProblem::new(permeability, f, BcTag::DirichletZero)
    }
}

/// Dirichlet boundary values for a tag, zero in the interior.
pub fn dirichlet_values(grid: &Grid, bc: BcTag) -> Result<GridField> {
    let dims = grid.spatial_dims();
    if dims.len() != 2 {
        return Err(Error::config("dirichlet_values expects a 2D spatial grid"));
    }
    let (ny, nx) = (dims[0], dims[1]);
    let mut vals = Tensor::zeros(&[ny, nx]);
    if bc == BcTag::DirichletTopSin {
        let sgrid = grid.spatial_grid()?;
        let data = vals.data_mut();
        for ix in 0..nx {
            let x = sgrid.coord(1, ix);
            data[(ny - 1) * nx + ix] = (std::f64::consts::PI * x).sin();
        }
    }
    GridField::new(grid.spatial_grid()?, vals, bc)
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// `-div(a grad u)` with harmonic face averaging on interior nodes;
/// boundary entries of the output are zero. This is the exact operator the
/// Darcy solver inverts.
pub(crate) fn darcy_harmonic_apply(
    a: &[f64],
    u: &[f64],
    ny: usize,
    nx: usize,
    hy: f64,
    hx: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; ny * nx];
    let ix2 = 1.0 / (hx * hx);
    let iy2 = 1.0 / (hy * hy);
    for iy in 1..ny - 1 {
        for ix in 1..nx - 1 {
            let c = iy * nx + ix;
            let ae = harmonic(a[c], a[c + 1]);
            let aw = harmonic(a[c], a[c - 1]);
            let an = harmonic(a[c], a[c + nx]);
            let as_ = harmonic(a[c], a[c - nx]);
            out[c] = -(ae * (u[c + 1] - u[c]) - aw * (u[c] - u[c - 1])) * ix2
                - (an * (u[c + nx] - u[c]) - as_ * (u[c] - u[c - nx])) * iy2;
        }
    }
    out
}

/// Conjugate-gradient solve of the five-point harmonic-averaged Darcy
/// system with Dirichlet values imposed exactly on boundary nodes.
pub fn solve_darcy(problem: &DarcyProblem) -> Result<GridField> {
    let grid = &problem.permeability.grid;
    let dims = grid.dims();
    if dims.len() != 2 {
        return Err(Error::config("solve_darcy expects a 2D spatial grid"));
    }
    let (ny, nx) = (dims[0], dims[1]);
    if ny < 3 || nx < 3 {
        return Err(Error::config("solve_darcy needs at least 3 points per axis"));
    }
    let (hy, hx) = (grid.spacing()[0], grid.spacing()[1]);
    let a = problem.permeability.values.data();
    let f = problem.forcing.values.data();
    let bc_field = dirichlet_values(grid, problem.bc)?;
    let g = bc_field.values.data();

    // unknowns = interior nodes
    let m = (ny - 2) * (nx - 2);
    let to_flat = |k: usize| {
        let iy = k / (nx - 2) + 1;
        let ix = k % (nx - 2) + 1;
        iy * nx + ix
    };
    let ix2 = 1.0 / (hx * hx);
    let iy2 = 1.0 / (hy * hy);
    // per-unknown face coefficients
    let mut ae = vec![0.0; m];
    let mut aw = vec![0.0; m];
    let mut an = vec![0.0; m];
    let mut as_ = vec![0.0; m];
    let mut diag = vec![0.0; m];
    for k in 0..m {
        let c = to_flat(k);
        ae[k] = harmonic(a[c], a[c + 1]) * ix2;
        aw[k] = harmonic(a[c], a[c - 1]) * ix2;
        an[k] = harmonic(a[c], a[c + nx]) * iy2;
        as_[k] = harmonic(a[c], a[c - nx]) * iy2;
        diag[k] = ae[k] + aw[k] + an[k] + as_[k];
    }
    // rhs = f + boundary contributions
    let mut b = vec![0.0; m];
    for k in 0..m {
        let c = to_flat(k);
        let iy = c / nx;
        let ix = c % nx;
        let mut rhs = f[c];
        if ix + 2 == nx {
            rhs += ae[k] * g[c + 1];
        }
        if ix == 1 {
            rhs += aw[k] * g[c - 1];
        }
        if iy + 2 == ny {
            rhs += an[k] * g[c + nx];
        }
        if iy == 1 {
            rhs += as_[k] * g[c - nx];
        }
        b[k] = rhs;
    }

    let apply = |x: &[f64], out: &mut [f64]| {
        let w = nx - 2;
        for k in 0..m {
            let iy_in = k / w;
            let ix_in = k % w;
            let mut v = diag[k] * x[k];
            if ix_in + 1 < w {
                v -= ae[k] * x[k + 1];
            }
            if ix_in > 0 {
                v -= aw[k] * x[k - 1];
            }
            if iy_in + 1 < ny - 2 {
                v -= an[k] * x[k + w];
            }
            if iy_in > 0 {
                v -= as_[k] * x[k - w];
            }
            out[k] = v;
        }
    };

    // preconditioned CG (Jacobi)
    let tol = 1e-10;
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; m];
    if bnorm > 0.0 {
        let mut r = b.clone();
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut ap = vec![0.0; m];
        let max_iter = 20 * m + 100;
        let mut converged = false;
        for _ in 0..max_iter {
            apply(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                return Err(Error::numerical("darcy CG lost positive definiteness"));
            }
            let alpha = rz / pap;
            for i in 0..m {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rnorm <= tol * bnorm {
                converged = true;
                break;
            }
            for i in 0..m {
                z[i] = r[i] / diag[i];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..m {
                p[i] = z[i] + beta * p[i];
            }
        }
        if !converged {
            return Err(Error::numerical("darcy CG did not reach tolerance"));
        }
    }

    let mut u = g.to_vec();
    for k in 0..m {
        u[to_flat(k)] = x[k];
    }
    GridField::new(grid.clone(), Tensor::new(dims.to_vec(), u)?, problem.bc)
}

/// Acoustic wave problem on the unit square with reflective boundaries.
#[derive(Debug, Clone)]
pub struct AcousticProblem {
    pub speed: GridField,
    pub initial: GridField,
    pub dt: f64,
    pub record_stride: usize,
    pub frames: usize,
}

impl AcousticProblem {
    /// Derives the recording stride from the requested horizon:
    /// `stride = round(T / (dt (frames-1)))`; the realized horizon is
    /// `dt * stride * (frames-1)`.
    pub fn new(
        speed: GridField,
        initial: GridField,
        dt: f64,
        frames: usize,
        horizon: f64,
    ) -> Result<Self> {
        if speed.grid != initial.grid {
            return Err(Error::config("speed and initial-condition grids differ"));
        }
        if speed.values.min() <= 0.0 {
            return Err(Error::config("sound speed must be positive"));
        }
        if frames < 2 || dt <= 0.0 || horizon <= 0.0 {
            return Err(Error::config("need frames >= 2, dt > 0, horizon > 0"));
        }
        let stride = (horizon / (dt * (frames - 1) as f64)).round().max(1.0) as usize;
        Ok(AcousticProblem { speed, initial, dt, record_stride: stride, frames })
    }

    pub fn horizon(&self) -> f64 {
        self.dt * (self.record_stride * (self.frames - 1)) as f64
    }

    fn check_cfl(&self) -> Result<()> {
        let sp = self.speed.grid.spacing();
        let hmin = sp.iter().cloned().fold(f64::INFINITY, f64::min);
        let cfl = self.speed.values.max() * self.dt / hmin;
        if cfl > std::f64::consts::FRAC_1_SQRT_2 {
            return Err(Error::config(format!(
                "CFL number {cfl:.4} exceeds 1/sqrt(2); reduce dt"
            )));
        }
        Ok(())
    }
}

/// Five-point Laplacian with even (mirror) padding across the boundary,
/// which realizes the reflective condition on a node-centered grid.
pub(crate) fn laplacian_mirror(p: &[f64], ny: usize, nx: usize, hy: f64, hx: f64) -> Vec<f64> {
    let mut out = vec![0.0; ny * nx];
    let ix2 = 1.0 / (hx * hx);
    let iy2 = 1.0 / (hy * hy);
    let mirror = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * (n - 1) - i as usize
        } else {
            i as usize
        }
    };
    for iy in 0..ny {
        let yn = mirror(iy as isize - 1, ny);
        let yp = mirror(iy as isize + 1, ny);
        for ix in 0..nx {
            let xn = mirror(ix as isize - 1, nx);
            let xp = mirror(ix as isize + 1, nx);
            let c = p[iy * nx + ix];
            out[iy * nx + ix] = (p[iy * nx + xp] - 2.0 * c + p[iy * nx + xn]) * ix2
                + (p[yp * nx + ix] - 2.0 * c + p[yn * nx + ix]) * iy2;
        }
    }
    out
}

/// Leapfrog simulation recording `frames` snapshots every `record_stride`
/// steps (frame 0 is the initial condition). Output layout `[nt, ny, nx]`.
pub fn simulate_acoustic(problem: &AcousticProblem) -> Result<GridField> {
    problem.check_cfl()?;
    let grid = &problem.speed.grid;
    let (ny, nx) = (grid.dims()[0], grid.dims()[1]);
    let (hy, hx) = (grid.spacing()[0], grid.spacing()[1]);
    let c = problem.speed.values.data();
    let dt2c2: Vec<f64> = c.iter().map(|&ci| (problem.dt * ci) * (problem.dt * ci)).collect();

    let mut prev = problem.initial.values.data().to_vec();
    let lap0 = laplacian_mirror(&prev, ny, nx, hy, hx);
    // first step from rest: p^1 = p^0 + (c dt)^2/2 * Lap p^0
    let mut curr: Vec<f64> = prev
        .iter()
        .zip(&lap0)
        .zip(&dt2c2)
        .map(|((&p, &l), &k)| p + 0.5 * k * l)
        .collect();

    let total_steps = problem.record_stride * (problem.frames - 1);
    let mut out = Vec::with_capacity(problem.frames * ny * nx);
    out.extend_from_slice(&prev);
    for step in 1..=total_steps {
        if step > 1 {
            let lap = laplacian_mirror(&curr, ny, nx, hy, hx);
            for i in 0..ny * nx {
                let next = 2.0 * curr[i] - prev[i] + dt2c2[i] * lap[i];
                prev[i] = next;
            }
            std::mem::swap(&mut prev, &mut curr);
        }
        if step % problem.record_stride == 0 {
            if curr.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "acoustic simulation produced non-finite values at step {step}"
                )));
            }
            out.extend_from_slice(&curr);
        }
    }
    let st_grid = Grid::spacetime(problem.frames, ny, nx, problem.horizon())?;
    GridField::new(
        st_grid,
        Tensor::new(vec![problem.frames, ny, nx], out)?,
        BcTag::NeumannReflective,
    )
}

/// Discrete energy of the leapfrog iteration at every solver step:
/// `1/2 ||(p^{n+1}-p^n)/dt||^2 - 1/2 <c^2 Lap p^n, p^{n+1}>` under the
/// trapezoidal node weights (the mirror Laplacian is self-adjoint in that
/// inner product). For constant speed this quantity is an exact invariant
/// of the scheme, so any drift exposes an implementation error.
pub fn acoustic_energy_trace(problem: &AcousticProblem) -> Result<Vec<f64>> {
    problem.check_cfl()?;
    let grid = &problem.speed.grid;
    let (ny, nx) = (grid.dims()[0], grid.dims()[1]);
    let (hy, hx) = (grid.spacing()[0], grid.spacing()[1]);
    let c = problem.speed.values.data();
    let dt = problem.dt;
    let dt2c2: Vec<f64> = c.iter().map(|&ci| (dt * ci) * (dt * ci)).collect();
    let weights: Vec<f64> = (0..ny * nx)
        .map(|i| grid.quad_weight(&[i / nx, i % nx]))
        .collect();

    let mut prev = problem.initial.values.data().to_vec();
    let lap0 = laplacian_mirror(&prev, ny, nx, hy, hx);
    let mut curr: Vec<f64> = prev
        .iter()
        .zip(&lap0)
        .zip(&dt2c2)
        .map(|((&p, &l), &k)| p + 0.5 * k * l)
        .collect();
    let total_steps = problem.record_stride * (problem.frames - 1);
    let mut energies = Vec::with_capacity(total_steps);
    let energy = |p_n: &[f64], p_np1: &[f64]| -> f64 {
        let lap = laplacian_mirror(p_n, ny, nx, hy, hx);
        let mut kin = 0.0;
        let mut pot = 0.0;
        for i in 0..ny * nx {
            let v = (p_np1[i] - p_n[i]) / dt;
            kin += weights[i] * v * v;
            pot -= weights[i] * c[i] * c[i] * lap[i] * p_np1[i];
        }
        0.5 * (kin + pot)
    };
    energies.push(energy(&prev, &curr));
    for _ in 2..=total_steps {
        let lap = laplacian_mirror(&curr, ny, nx, hy, hx);
        for i in 0..ny * nx {
            let next = 2.0 * curr[i] - prev[i] + dt2c2[i] * lap[i];
            prev[i] = next;
        }
        std::mem::swap(&mut prev, &mut curr);
        energies.push(energy(&prev, &curr));
    }
    Ok(energies)
}

pub fn default_bump_centers() -> Vec<(f64, f64)> {
    let mut c = Vec::new();
    for i in 1..=2 {
        for j in 1..=2 {
            c.push((i as f64 / 3.0, j as f64 / 3.0));
        }
    }
    c
}

/// Superposition of isotropic Gaussians `exp(-|xi - c|^2 / (2 variance))`.
/// Centers are given as (xi2, xi1) pairs matching the field layout.
pub fn gaussian_bumps(grid: &Grid, centers: &[(f64, f64)], variance: f64) -> Result<GridField> {
    if variance <= 0.0 {
        return Err(Error::config("bump variance must be positive"));
    }
    Ok(GridField::from_fn(grid, |x| {
        centers
            .iter()
            .map(|&(cy, cx)| {
                let d2 = (x[0] - cy).powi(2) + (x[1] - cx).powi(2);
                (-d2 / (2.0 * variance)).exp()
            })
            .sum()
    }))
}

/// `x + sigma * eps`, i.i.d. standard normal per node.
pub fn add_observation_noise(field: &GridField, sigma: f64, rng: &mut Rng) -> Result<GridField> {
    if sigma < 0.0 {
        return Err(Error::config("noise sigma must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(field.clone());
    }
    let eps = standard_normal(rng, field.values.len());
    let mut v = field.values.clone();
    for (x, e) in v.data_mut().iter_mut().zip(&eps) {
        *x += sigma * e;
    }
    GridField::new(field.grid.clone(), v, field.bc_tag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Darcy,
    DarcyNoisy,
    DarcyMisspec,
    Acoustic,
}

impl ProblemKind {
    pub fn parse(s: &str) -> Result<ProblemKind> {
        match s {
            "darcy" => Ok(ProblemKind::Darcy),
            "darcy-noisy" => Ok(ProblemKind::DarcyNoisy),
            "darcy-misspec" => Ok(ProblemKind::DarcyMisspec),
            "acoustic" => Ok(ProblemKind::Acoustic),
            _ => Err(Error::config(format!("unknown problem kind '{s}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemKind::Darcy => "darcy",
            ProblemKind::DarcyNoisy => "darcy-noisy",
            ProblemKind::DarcyMisspec => "darcy-misspec",
            ProblemKind::Acoustic => "acoustic",
        }
    }

    pub fn bc(&self) -> BcTag {
        match self {
            ProblemKind::Darcy | ProblemKind::DarcyNoisy => BcTag::DirichletZero,
            ProblemKind::DarcyMisspec => BcTag::DirichletTopSin,
            ProblemKind::Acoustic => BcTag::NeumannReflective,
        }
    }

    pub fn is_acoustic(&self) -> bool {
        matches!(self, ProblemKind::Acoustic)
    }

    /// Binary parameter levels: permeability {3,12}, sound speed {2,3}.
    pub fn param_levels(&self) -> (f64, f64) {
        if self.is_acoustic() {
            (2.0, 3.0)
        } else {
            (3.0, 12.0)
        }
    }

    pub fn grf(&self) -> GrfConfig {
        if self.is_acoustic() {
            GrfConfig::acoustic()
        } else {
            GrfConfig::darcy()
        }
    }
}

/// Dataset generation request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: ProblemKind,
    /// `[ny, nx]` for Darcy, `[nt, ny, nx]` for acoustics.
    pub dims: Vec<usize>,
    pub n_samples: usize,
    pub grf: GrfConfig,
    /// `None` on DarcyNoisy means 0.1 x dataset std of the clean states.
    pub noise_sigma: Option<f64>,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(kind: ProblemKind, dims: Vec<usize>, n_samples: usize, seed: u64) -> Result<Self> {
        if n_samples < 1 {
            return Err(Error::config("need at least one sample"));
        }
        let expect = if kind.is_acoustic() { 3 } else { 2 };
        if dims.len() != expect {
            return Err(Error::config(format!(
                "{} expects {} dims, got {:?}",
                kind.as_str(),
                expect,
                dims
            )));
        }
        Ok(DatasetSpec { kind, dims, n_samples, grf: kind.grf(), noise_sigma: None, seed })
    }

    pub fn spatial_grid(&self) -> Result<Grid> {
        let d = if self.kind.is_acoustic() { &self.dims[1..] } else { &self.dims[..] };
        Grid::new(d, &[(0.0, 1.0), (0.0, 1.0)], false)
    }
}

/// Draws the latent parameter field for one sample: GRF then binary
/// threshold to the problem's levels.
pub fn sample_parameter(spec: &DatasetSpec, rng: &mut Rng) -> Result<GridField> {
    let grid = spec.spatial_grid()?;
    let raw = sample_grf(&grid, &spec.grf, rng)?;
    let (lo, hi) = spec.kind.param_levels();
    threshold_binary(&raw, lo, hi)
}

/// Solves one clean sample from its parameter field.
pub fn solve_sample(spec: &DatasetSpec, param: &GridField) -> Result<GridField> {
    if spec.kind.is_acoustic() {
        let init = gaussian_bumps(&param.grid, &default_bump_centers(), 1e-2)?;
        let problem = AcousticProblem::new(param.clone(), init, 1e-3, spec.dims[0], 0.315)?;
        simulate_acoustic(&problem)
    } else {
        let forcing = GridField::constant(&param.grid, 1.0);
        let problem = DarcyProblem::new(param.clone(), forcing, spec.kind.bc())?;
        solve_darcy(&problem)
    }
}

/// Generates the dataset into `dir`: per sample, draw the parameter, solve,
/// optionally add observation noise, and persist both state and parameter.
/// The parameter is stored for evaluation only.
pub fn generate_dataset(spec: &DatasetSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let results: Vec<Result<(GridField, GridField)>> = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(spec.seed, i as u64);
            let param = sample_parameter(spec, &mut rng)?;
            let state = solve_sample(spec, &param)
                .map_err(|e| Error::numerical(format!("sample {i}: {e}")))?;
            Ok((state, param))
        })
        .collect();
    let mut pairs = Vec::with_capacity(spec.n_samples);
    for r in results {
        pairs.push(r?);
    }

    // noise sigma: explicit, or the DarcyNoisy default of 0.1 x data std
    let sigma = match (spec.noise_sigma, spec.kind) {
        (Some(s), _) => s,
        (None, ProblemKind::DarcyNoisy) => {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut n = 0usize;
            for (state, _) in &pairs {
                for &v in state.values.data() {
                    sum += v;
                    sum_sq += v * v;
                }
                n += state.values.len();
            }
            let mean = sum / n as f64;
            0.1 * (sum_sq / n as f64 - mean * mean).max(0.0).sqrt()
        }
        (None, _) => 0.0,
    };
    if sigma > 0.0 {
        // separate noise streams so clean regeneration stays aligned
        pairs = pairs
            .into_par_iter()
            .enumerate()
            .map(|(i, (state, param))| {
                let mut rng = stream_rng(spec.seed, (1 << 32) + i as u64);
                Ok((add_observation_noise(&state, sigma, &mut rng)?, param))
            })
            .collect::<Result<Vec<_>>>()?;
    }

    let grid = pairs[0].0.grid.clone();
    let mut entries = Vec::new();
    for (i, (state, param)) in pairs.iter().enumerate() {
        let sname = format!("sample_{i:05}_state.pdfl");
        let pname = format!("sample_{i:05}_param.pdfl");
        crate::store::save_tensor(
            dir.join(&sname),
            &TensorRecord::from_tensor(&state.values, Dtype::F32),
        )?;
        crate::store::save_tensor(
            dir.join(&pname),
            &TensorRecord::from_tensor(&param.values, Dtype::F32),
        )?;
        entries.push(ManifestEntry {
            name: sname,
            role: Role::State,
            seed: spec.seed,
            stream: i as u64,
        });
        entries.push(ManifestEntry {
            name: pname,
            role: Role::Param,
            seed: spec.seed,
            stream: i as u64,
        });
    }
    let manifest = Manifest {
        problem: spec.kind.as_str().to_string(),
        dims: grid.dims().to_vec(),
        time_axis: grid.is_spacetime(),
        extents: grid
            .lower()
            .iter()
            .zip(grid.upper())
            .map(|(&l, &u)| (l, u))
            .collect(),
        bc_tag: spec.kind.bc(),
        seed: spec.seed,
        noise_sigma: sigma,
        n_samples: spec.n_samples,
        params: serde_json::to_value(spec).unwrap_or(serde_json::Value::Null),
        entries,
    };
    manifest.save(dir)?;
    Ok(manifest)
}
