//! Weak-form PDE residual rewards: randomized compactly supported test
//! functions, weak and strong residuals for the Darcy and acoustic
//! operators, boundary penalties, and exact gradients of the discretized
//! functionals with respect to state and parameter fields.
//!
//! All quadrature is trapezoidal on the node grid, restricted to the
//! bounding box of each test function's support, so every gradient here is
//! the exact adjoint of the evaluated expression.

use crate::error::{Error, Result};
use crate::grid::{
    boundary_nodes, diff_axis, normal_gradient_stencil, BcTag, Grid, GridField,
};
use crate::pde::{darcy_harmonic_apply, dirichlet_values, laplacian_mirror};
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Radially anisotropic Wendland test function with optional wavelet
/// factor; axes are ordered like the field layout ([y,x] or [t,y,x]).
#[derive(Debug, Clone)]
pub struct TestFunction {
    pub center: Vec<f64>,
    pub scales: Vec<f64>,
    pub wavelet: bool,
}

impl TestFunction {
    pub fn new(center: Vec<f64>, scales: Vec<f64>, wavelet: bool) -> Result<Self> {
        if center.len() != scales.len() || center.is_empty() {
            return Err(Error::config("test function center/scales length mismatch"));
        }
        if scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("test function scales must be positive"));
        }
        Ok(TestFunction { center, scales, wavelet })
    }
}

/// Batch sampling settings. Length scales are in pixel units: the physical
/// scale along axis j is `sigma * spacing[j]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestBatchConfig {
    pub n_test: usize,
    pub sigma_range: (f64, f64),
    pub wavelet_prob: f64,
    /// One test function per grid node with +-0.5 px jitter (2D default);
    /// otherwise centers are uniform over the domain.
    pub per_grid_point: bool,
}

impl TestBatchConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sigma_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config("sigma_range must satisfy 0 < lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.wavelet_prob) {
            return Err(Error::config("wavelet_prob must lie in [0,1]"));
        }
        if !self.per_grid_point && self.n_test == 0 {
            return Err(Error::config("n_test must be positive"));
        }
        Ok(())
    }

    /// Darcy denoising defaults: per-grid-point centers, sigma in [3,10] px.
    pub fn darcy_default() -> Self {
        TestBatchConfig {
            n_test: 0,
            sigma_range: (3.0, 10.0),
            wavelet_prob: 0.5,
            per_grid_point: true,
        }
    }

    /// Acoustic defaults: random centers, sigma in [1,20] px.
    pub fn acoustic_default(n_test: usize) -> Self {
        TestBatchConfig {
            n_test,
            sigma_range: (1.0, 20.0),
            wavelet_prob: 0.5,
            per_grid_point: false,
        }
    }
}

/// Draws a batch of test functions for a grid.
pub fn sample_test_batch(grid: &Grid, cfg: &TestBatchConfig, rng: &mut Rng) -> Result<Vec<TestFunction>> {
    cfg.validate()?;
    let d = grid.ndim();
    let mut tfs = Vec::new();
    let draw_scales = |rng: &mut Rng| -> Vec<f64> {
        (0..d)
            .map(|j| rng.gen_range(cfg.sigma_range.0..=cfg.sigma_range.1) * grid.spacing()[j])
            .collect()
    };
    if cfg.per_grid_point {
        if d != 2 {
            return Err(Error::config("per-grid-point centering is a 2D mode"));
        }
        let (ny, nx) = (grid.dims()[0], grid.dims()[1]);
        for iy in 0..ny {
            for ix in 0..nx {
                let mut center = vec![grid.coord(0, iy), grid.coord(1, ix)];
                for (j, c) in center.iter_mut().enumerate() {
                    let jitter = rng.gen_range(-0.5..=0.5) * grid.spacing()[j];
                    *c = (*c + jitter).clamp(grid.lower()[j], grid.upper()[j]);
                }
                let scales = draw_scales(rng);
                let wavelet = rng.gen_bool(cfg.wavelet_prob);
                tfs.push(TestFunction { center, scales, wavelet });
            }
        }
    } else {
        for _ in 0..cfg.n_test {
            let center: Vec<f64> = (0..d)
                .map(|j| rng.gen_range(grid.lower()[j]..=grid.upper()[j]))
                .collect();
            let scales = draw_scales(rng);
            let wavelet = rng.gen_bool(cfg.wavelet_prob);
            tfs.push(TestFunction { center, scales, wavelet });
        }
    }
    Ok(tfs)
}

/// Index-space bounding box of a test-function support.
#[derive(Debug, Clone)]
pub struct Patch {
    pub lo: Vec<usize>,
    pub dims: Vec<usize>,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Test function sampled on its support patch: values, per-axis gradient,
/// and the unsigned (plain Wendland) factor used by the normalizer.
pub struct TestFunctionEval {
    pub patch: Patch,
    pub psi: Vec<f64>,
    pub grad: Vec<Vec<f64>>,
    pub psi_plain: Vec<f64>,
}

/// Evaluates `psi = wendland(r) * wavelet(r) * prod_j m(xi_j)` and its
/// analytic gradient on the support bounding box. The bridge mollifier
/// `m(xi) = (xi - lo)(up - xi)/(up - lo)^2` forces `psi = 0` on the domain
/// boundary along every axis.
pub fn eval_test_function(tf: &TestFunction, grid: &Grid) -> Result<TestFunctionEval> {
    let d = grid.ndim();
    if tf.center.len() != d {
        return Err(Error::config("test function dimensionality mismatch"));
    }
    // index bounding box of {r < 1}
    let mut lo = vec![0usize; d];
    let mut hi = vec![0usize; d];
    for j in 0..d {
        let h = grid.spacing()[j];
        let lo_f = (tf.center[j] - tf.scales[j] - grid.lower()[j]) / h;
        let hi_f = (tf.center[j] + tf.scales[j] - grid.lower()[j]) / h;
        let n = grid.dims()[j];
        lo[j] = lo_f.ceil().max(0.0) as usize;
        hi[j] = (hi_f.floor() as isize).clamp(0, n as isize - 1) as usize;
        if lo[j] > hi[j] {
            return Err(Error::config("test function support misses the grid"));
        }
    }
    let dims: Vec<usize> = (0..d).map(|j| hi[j] - lo[j] + 1).collect();
    let patch = Patch { lo: lo.clone(), dims: dims.clone() };
    let n = patch.len();

    // per-axis tables: offset u_j = (xi_j - c_j)/sigma_j^2, squared scaled
    // distance, mollifier and its derivative
    let mut us: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut r2s: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut ms: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut dms: Vec<Vec<f64>> = Vec::with_capacity(d);
    for j in 0..d {
        let (l, u) = (grid.lower()[j], grid.upper()[j]);
        let range2 = (u - l) * (u - l);
        let mut uj = Vec::with_capacity(dims[j]);
        let mut r2j = Vec::with_capacity(dims[j]);
        let mut mj = Vec::with_capacity(dims[j]);
        let mut dmj = Vec::with_capacity(dims[j]);
        for k in 0..dims[j] {
            let x = grid.coord(j, lo[j] + k);
            let diff = x - tf.center[j];
            uj.push(diff / (tf.scales[j] * tf.scales[j]));
            r2j.push((diff / tf.scales[j]).powi(2));
            mj.push((x - l) * (u - x) / range2);
            dmj.push((l + u - 2.0 * x) / range2);
        }
        us.push(uj);
        r2s.push(r2j);
        ms.push(mj);
        dms.push(dmj);
    }

    let b = if tf.wavelet { 1.0 } else { 0.0 };
    let mut psi = vec![0.0; n];
    let mut psi_plain = vec![0.0; n];
    let mut grad: Vec<Vec<f64>> = (0..d).map(|_| vec![0.0; n]).collect();
    let mut idx = vec![0usize; d];
    for flat in 0..n {
        let mut rem = flat;
        for j in 0..d {
            let s: usize = dims[j + 1..].iter().product();
            idx[j] = rem / s;
            rem %= s;
        }
        let r2: f64 = (0..d).map(|j| r2s[j][idx[j]]).sum();
        if r2 >= 1.0 {
            continue;
        }
        let r = r2.sqrt();
        let om = 1.0 - r;
        let wend = om.powi(4) * (4.0 * r + 1.0);
        let wav = 1.0 - 64.0 * b * r2 * r2;
        let mprod: f64 = (0..d).map(|j| ms[j][idx[j]]).product();
        let core = wend * wav;
        psi[flat] = core * mprod;
        psi_plain[flat] = wend * mprod;
        // radial part: d(wend*wav)/dxi_j = g(r) * (xi_j - c_j)/sigma_j^2
        // with g(r) = -20 (1-r)^3 wav - 256 b r^2 wend (the 1/r from the
        // chain rule cancels analytically, so r = 0 is regular)
        let g = -20.0 * om.powi(3) * wav - 256.0 * b * r2 * wend;
        for j in 0..d {
            let m_others = if ms[j][idx[j]] != 0.0 {
                mprod / ms[j][idx[j]]
            } else {
                (0..d)
                    .filter(|&k| k != j)
                    .map(|k| ms[k][idx[k]])
                    .product()
            };
            grad[j][flat] =
                g * us[j][idx[j]] * mprod + core * dms[j][idx[j]] * m_others;
        }
    }
    Ok(TestFunctionEval { patch, psi, grad, psi_plain })
}

/// Which PDE operator the residual refers to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PdeKind {
    /// `-div(a grad u) - f = 0` with constant forcing.
    Darcy { forcing: f64 },
    /// `p_tt - c^2 lap p = 0`;
    Acoustic,
}

impl PdeKind {
    pub fn darcy() -> Self {
        PdeKind::Darcy { forcing: 1.0 }
    }
}

/// Normalizer for the per-test-function residual terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalizerKind {
    /// Integral of the parameter weighted by the unsigned Wendland factor.
    PsiWeighted,
    /// Plain integral of the parameter over the support box.
    SupportIntegral,
}

/// Residual summary for a (state, parameter) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualReport {
    pub weak: f64,
    pub strong: f64,
    pub boundary: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_test: Option<Vec<f64>>,
}

struct AxisWeights {
    w: Vec<Vec<f64>>,
}

impl AxisWeights {
    fn new(grid: &Grid) -> Self {
        let w = (0..grid.ndim())
            .map(|j| {
                let n = grid.dims()[j];
                (0..n)
                    .map(|i| {
                        let e = if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
                        e * grid.spacing()[j]
                    })
                    .collect()
            })
            .collect();
        AxisWeights { w }
    }

    #[inline]
    fn weight(&self, idx: &[usize]) -> f64 {
        idx.iter().enumerate().map(|(j, &i)| self.w[j][i]).product()
    }
}

/// Precomputed per-field quantities shared across test functions.
struct Workspace<'a> {
    grid: &'a Grid,
    state: &'a [f64],
    param: &'a [f64],
    /// first derivatives of the state along every axis
    dstate: Vec<Vec<f64>>,
    weights: AxisWeights,
    pde: PdeKind,
}

impl<'a> Workspace<'a> {
    fn new(state: &'a GridField, param: &'a GridField, pde: PdeKind) -> Result<Workspace<'a>> {
        let grid = &state.grid;
        match pde {
            PdeKind::Darcy { .. } => {
                if grid.ndim() != 2 || grid.is_spacetime() {
                    return Err(Error::config("Darcy residual expects a 2D spatial field"));
                }
                if param.grid != *grid {
                    return Err(Error::config("state and parameter grids differ"));
                }
            }
            PdeKind::Acoustic => {
                if grid.ndim() != 3 || !grid.is_spacetime() {
                    return Err(Error::config("acoustic residual expects a space-time field"));
                }
                if param.grid.dims() != grid.spatial_dims() {
                    return Err(Error::config("parameter grid must match the spatial slice"));
                }
            }
        }
        let dims = grid.dims().to_vec();
        let dstate = (0..dims.len())
            .map(|ax| diff_axis(state.values.data(), &dims, ax, grid.spacing()[ax]))
            .collect();
        Ok(Workspace {
            grid,
            state: state.values.data(),
            param: param.values.data(),
            dstate,
            weights: AxisWeights::new(grid),
            pde,
        })
    }

    fn dims(&self) -> &[usize] {
        self.grid.dims()
    }
}

#[inline]
fn patch_iter(patch: &Patch, mut body: impl FnMut(usize, &[usize])) {
    let d = patch.dims.len();
    let n: usize = patch.dims.iter().product();
    let mut gidx = vec![0usize; d];
    for flat in 0..n {
        let mut rem = flat;
        for j in 0..d {
            let s: usize = patch.dims[j + 1..].iter().product();
            gidx[j] = patch.lo[j] + rem / s;
            rem %= s;
        }
        body(flat, &gidx);
    }
}

#[inline]
fn global_flat(idx: &[usize], strides: &[usize]) -> usize {
    idx.iter().zip(strides).map(|(&i, &s)| i * s).sum()
}

/// Weak inner product and normalizer for one evaluated test function.
fn weak_term(ws: &Workspace, ev: &TestFunctionEval) -> (f64, f64) {
    let strides = crate::grid::strides(ws.dims());
    let mut s = 0.0;
    let mut q = 0.0;
    match ws.pde {
        PdeKind::Darcy { forcing } => {
            patch_iter(&ev.patch, |flat, gidx| {
                let g = global_flat(gidx, &strides);
                let w = ws.weights.weight(gidx);
                let a = ws.param[g];
                let dot = ws.dstate[0][g] * ev.grad[0][flat] + ws.dstate[1][g] * ev.grad[1][flat];
                s += w * (a * dot - forcing * ev.psi[flat]);
                q += w * a * ev.psi_plain[flat];
            });
        }
        PdeKind::Acoustic => {
            let nx = ws.dims()[2];
            patch_iter(&ev.patch, |flat, gidx| {
                let g = global_flat(gidx, &strides);
                let w = ws.weights.weight(gidx);
                let c = ws.param[gidx[1] * nx + gidx[2]];
                let dot_space =
                    ws.dstate[1][g] * ev.grad[1][flat] + ws.dstate[2][g] * ev.grad[2][flat];
                s += w * (-ws.dstate[0][g] * ev.grad[0][flat] + c * c * dot_space);
                q += w * c * ev.psi_plain[flat];
            });
        }
    }
    (s, q)
}

/// Normalizer in the plain support-integral variant.
fn support_integral(ws: &Workspace, ev: &TestFunctionEval) -> f64 {
    let mut q = 0.0;
    let nx = *ws.dims().last().unwrap();
    let spatial_offset = ws.dims().len() - 2;
    patch_iter(&ev.patch, |_, gidx| {
        let w = ws.weights.weight(gidx);
        let a = ws.param[gidx[spatial_offset] * nx + gidx[spatial_offset + 1]];
        q += w * a;
    });
    q
}

fn normalizer(ws: &Workspace, ev: &TestFunctionEval, kind: NormalizerKind) -> Result<f64> {
    let q = match kind {
        NormalizerKind::PsiWeighted => weak_term(ws, ev).1,
        NormalizerKind::SupportIntegral => support_integral(ws, ev),
    };
    if q.abs() < 1e-12 {
        return Err(Error::numerical(
            "degenerate parameter: residual normalizer vanished",
        ));
    }
    Ok(q)
}

/// `<L_a u, psi>` after integration by parts: `int a grad u . grad psi - f psi`.
pub fn weak_inner_darcy(
    u: &GridField,
    a: &GridField,
    f: &GridField,
    tf: &TestFunction,
) -> Result<f64> {
    if u.grid != a.grid || u.grid != f.grid {
        return Err(Error::config("weak_inner_darcy: grids differ"));
    }
    let ws = Workspace::new(u, a, PdeKind::Darcy { forcing: 0.0 })?;
    let ev = eval_test_function(tf, &u.grid)?;
    let (s, _) = weak_term(&ws, &ev);
    // subtract the forcing term with the full field
    let strides = crate::grid::strides(ws.dims());
    let mut fterm = 0.0;
    patch_iter(&ev.patch, |flat, gidx| {
        let g = global_flat(gidx, &strides);
        fterm += ws.weights.weight(gidx) * f.values.data()[g] * ev.psi[flat];
    });
    Ok(s - fterm)
}

/// `<L_c p, psi>` after integration by parts in time and space:
/// `int int (-p_t psi_t + c^2 grad p . grad psi)`.
pub fn weak_inner_acoustic(p: &GridField, c: &GridField, tf: &TestFunction) -> Result<f64> {
    let ws = Workspace::new(p, c, PdeKind::Acoustic)?;
    let ev = eval_test_function(tf, &p.grid)?;
    Ok(weak_term(&ws, &ev).0)
}

/// Mean squared normalized weak-form inner product over a test batch.
pub fn weak_residual(
    state: &GridField,
    param: &GridField,
    pde: PdeKind,
    tfs: &[TestFunction],
    norm: NormalizerKind,
) -> Result<f64> {
    Ok(weak_residual_terms(state, param, pde, tfs, norm)?
        .iter()
        .sum::<f64>()
        / tfs.len() as f64)
}

/// The per-test-function terms `|s_i / q_i|^2` (before the 1/N average).
pub fn weak_residual_terms(
    state: &GridField,
    param: &GridField,
    pde: PdeKind,
    tfs: &[TestFunction],
    norm: NormalizerKind,
) -> Result<Vec<f64>> {
    if tfs.is_empty() {
        return Err(Error::config("weak_residual needs a nonempty test batch"));
    }
    let ws = Workspace::new(state, param, pde)?;
    tfs.par_iter()
        .map(|tf| {
            let ev = eval_test_function(tf, ws.grid)?;
            let (s, _) = weak_term(&ws, &ev);
            let q = normalizer(&ws, &ev, norm)?;
            Ok((s / q) * (s / q))
        })
        .collect()
}

/// Gradients of [`weak_residual`] with respect to every node of the state
/// and of the parameter, assembled analytically as the adjoint of the
/// quadrature stencils (including the quotient rule of the normalizer).
/// Returns `(d/dstate, d/dparam, value)`.
pub fn grad_weak_residual(
    state: &GridField,
    param: &GridField,
    pde: PdeKind,
    tfs: &[TestFunction],
    norm: NormalizerKind,
) -> Result<(GridField, GridField, f64)> {
    if tfs.is_empty() {
        return Err(Error::config("grad_weak_residual needs a nonempty test batch"));
    }
    let ws = Workspace::new(state, param, pde)?;
    let dims = ws.dims().to_vec();
    let n_state = state.values.len();
    let n_param = param.values.len();
    let n_inv = 1.0 / tfs.len() as f64;

    let (g_state, g_param, value) = tfs
        .par_iter()
        .map(|tf| -> Result<(Vec<f64>, Vec<f64>, f64)> {
            let ev = eval_test_function(tf, ws.grid)?;
            let (s, _) = weak_term(&ws, &ev);
            let q = normalizer(&ws, &ev, norm)?;
            let mut gs = vec![0.0; n_state];
            let mut gp = vec![0.0; n_param];
            let cs = 2.0 * n_inv * s / (q * q);
            let cq = -2.0 * n_inv * s * s / (q * q * q);
            accumulate_term_grad(&ws, &ev, cs, cq, norm, &dims, &mut gs, &mut gp);
            Ok((gs, gp, n_inv * (s / q) * (s / q)))
        })
        .try_reduce(
            || (vec![0.0; n_state], vec![0.0; n_param], 0.0),
            |mut acc, item| {
                for (a, b) in acc.0.iter_mut().zip(&item.0) {
                    *a += b;
                }
                for (a, b) in acc.1.iter_mut().zip(&item.1) {
                    *a += b;
                }
                acc.2 += item.2;
                Ok(acc)
            },
        )?;

    Ok((
        GridField::new(state.grid.clone(), Tensor::new(dims, g_state)?, BcTag::None)?,
        GridField::new(
            param.grid.clone(),
            Tensor::new(param.grid.dims().to_vec(), g_param)?,
            BcTag::None,
        )?,
        value,
    ))
}

/// Adds `cs * d s_i/d(.) + cq * d q_i/d(.)` for one test function into the
/// full-grid gradient buffers.
fn accumulate_term_grad(
    ws: &Workspace,
    ev: &TestFunctionEval,
    cs: f64,
    cq: f64,
    norm: NormalizerKind,
    dims: &[usize],
    g_state: &mut [f64],
    g_param: &mut [f64],
) {
    let strides = crate::grid::strides(dims);
    let d = dims.len();
    // per-axis cotangent vectors for the D^T scatters
    let mut cot: Vec<Vec<f64>> = (0..d).map(|_| vec![0.0; ev.patch.len()]).collect();
    match ws.pde {
        PdeKind::Darcy { .. } => {
            patch_iter(&ev.patch, |flat, gidx| {
                let g = global_flat(gidx, &strides);
                let w = ws.weights.weight(gidx);
                let a = ws.param[g];
                cot[0][flat] = w * a * ev.grad[0][flat];
                cot[1][flat] = w * a * ev.grad[1][flat];
                let dot = ws.dstate[0][g] * ev.grad[0][flat] + ws.dstate[1][g] * ev.grad[1][flat];
                // ds/da and dq/da at this node
                let mut ga = cs * w * dot;
                if norm == NormalizerKind::PsiWeighted {
                    ga += cq * w * ev.psi_plain[flat];
                } else {
                    ga += cq * w;
                }
                g_param[g] += ga;
            });
        }
        PdeKind::Acoustic => {
            let nx = dims[2];
            patch_iter(&ev.patch, |flat, gidx| {
                let g = global_flat(gidx, &strides);
                let w = ws.weights.weight(gidx);
                let sp = gidx[1] * nx + gidx[2];
                let c = ws.param[sp];
                cot[0][flat] = -w * ev.grad[0][flat];
                cot[1][flat] = w * c * c * ev.grad[1][flat];
                cot[2][flat] = w * c * c * ev.grad[2][flat];
                let dot_space =
                    ws.dstate[1][g] * ev.grad[1][flat] + ws.dstate[2][g] * ev.grad[2][flat];
                let mut gc = cs * w * 2.0 * c * dot_space;
                if norm == NormalizerKind::PsiWeighted {
                    gc += cq * w * ev.psi_plain[flat];
                } else {
                    gc += cq * w;
                }
                g_param[sp] += gc;
            });
        }
    }
    for ax in 0..d {
        scatter_diff_transpose(
            &cot[ax],
            &ev.patch,
            ax,
            dims,
            ws.grid.spacing()[ax],
            cs,
            g_state,
        );
    }
}

/// Accumulates `scale * D_axis^T v` into the full-grid buffer, where `v`
/// lives on the patch. Mirrors the forward stencils of
/// [`crate::grid::diff_axis`] row by row.
fn scatter_diff_transpose(
    v: &[f64],
    patch: &Patch,
    axis: usize,
    dims: &[usize],
    h: f64,
    scale: f64,
    out: &mut [f64],
) {
    let strides = crate::grid::strides(dims);
    let n = dims[axis];
    let stride = strides[axis];
    let inv2h = scale / (2.0 * h);
    patch_iter(patch, |flat, gidx| {
        let w = v[flat];
        if w == 0.0 {
            return;
        }
        let g = global_flat(gidx, &strides);
        let i = gidx[axis];
        if n == 2 {
            let s = 2.0 * inv2h * w;
            if i == 0 {
                out[g] -= s;
                out[g + stride] += s;
            } else {
                out[g - stride] -= s;
                out[g] += s;
            }
        } else if i == 0 {
            out[g] += -3.0 * inv2h * w;
            out[g + stride] += 4.0 * inv2h * w;
            out[g + 2 * stride] += -inv2h * w;
        } else if i == n - 1 {
            out[g] += 3.0 * inv2h * w;
            out[g - stride] += -4.0 * inv2h * w;
            out[g - 2 * stride] += inv2h * w;
        } else {
            out[g + stride] += inv2h * w;
            out[g - stride] -= inv2h * w;
        }
    });
}

/// Stencil used by the strong residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrongStencil {
    /// Generic central-difference assembly of the operator (reporting
    /// default; this is what makes noisy data score poorly).
    CentralAssembly,
    /// The Darcy solver's own harmonic five-point stencil on interior
    /// nodes; solver output scores at linear-solver tolerance.
    SolverMatched,
}

/// `||L_alpha x||^2_{L2}` by finite-difference assembly and trapezoidal
/// quadrature.
pub fn strong_residual(
    state: &GridField,
    param: &GridField,
    pde: PdeKind,
    stencil: StrongStencil,
) -> Result<f64> {
    let ws = Workspace::new(state, param, pde)?;
    let weights = &ws.weights;
    let dims = ws.dims();
    match ws.pde {
        PdeKind::Darcy { forcing } => {
            let (ny, nx) = (dims[0], dims[1]);
            match stencil {
                StrongStencil::SolverMatched => {
                    let lu = darcy_harmonic_apply(
                        ws.param,
                        ws.state,
                        ny,
                        nx,
                        ws.grid.spacing()[0],
                        ws.grid.spacing()[1],
                    );
                    let mut r = 0.0;
                    for iy in 1..ny - 1 {
                        for ix in 1..nx - 1 {
                            let e = lu[iy * nx + ix] - forcing;
                            r += weights.weight(&[iy, ix]) * e * e;
                        }
                    }
                    Ok(r)
                }
                StrongStencil::CentralAssembly => {
                    // flux = a grad u, L = -div flux - f
                    let fx: Vec<f64> = ws.dstate[1]
                        .iter()
                        .zip(ws.param)
                        .map(|(d, a)| a * d)
                        .collect();
                    let fy: Vec<f64> = ws.dstate[0]
                        .iter()
                        .zip(ws.param)
                        .map(|(d, a)| a * d)
                        .collect();
                    let dfx = diff_axis(&fx, dims, 1, ws.grid.spacing()[1]);
                    let dfy = diff_axis(&fy, dims, 0, ws.grid.spacing()[0]);
                    let mut r = 0.0;
                    for iy in 0..ny {
                        for ix in 0..nx {
                            let g = iy * nx + ix;
                            let e = -(dfx[g] + dfy[g]) - forcing;
                            r += weights.weight(&[iy, ix]) * e * e;
                        }
                    }
                    Ok(r)
                }
            }
        }
        PdeKind::Acoustic => {
            let (nt, ny, nx) = (dims[0], dims[1], dims[2]);
            let dt = ws.grid.spacing()[0];
            let (hy, hx) = (ws.grid.spacing()[1], ws.grid.spacing()[2]);
            let nn = ny * nx;
            let mut r = 0.0;
            for it in 1..nt - 1 {
                let frame = &ws.state[it * nn..(it + 1) * nn];
                let lap = laplacian_mirror(frame, ny, nx, hy, hx);
                for iy in 0..ny {
                    for ix in 0..nx {
                        let g = it * nn + iy * nx + ix;
                        let ptt =
                            (ws.state[g + nn] - 2.0 * ws.state[g] + ws.state[g - nn]) / (dt * dt);
                        let c = ws.param[iy * nx + ix];
                        let e = ptt - c * c * lap[iy * nx + ix];
                        r += weights.weight(&[it, iy, ix]) * e * e;
                    }
                }
            }
            Ok(r)
        }
    }
}

/// Boundary penalty: mean squared outward normal gradient for reflective
/// boundaries, mean squared deviation from the Dirichlet data otherwise.
pub fn boundary_residual(state: &GridField, bc: BcTag) -> Result<f64> {
    Ok(grad_boundary_residual(state, bc)?.1)
}

/// Boundary penalty and its gradient with respect to the state nodes.
pub fn grad_boundary_residual(state: &GridField, bc: BcTag) -> Result<(GridField, f64)> {
    let dims = state.grid.dims();
    let (nt, ny, nx) = match (state.grid.is_spacetime(), dims.len()) {
        (false, 2) => (1usize, dims[0], dims[1]),
        (true, 3) => (dims[0], dims[1], dims[2]),
        _ => return Err(Error::config("boundary_residual expects a 2D spatial slice")),
    };
    if ny < 3 || nx < 3 {
        return Err(Error::config("boundary residual needs 3 points per axis"));
    }
    let mut grad = vec![0.0; state.values.len()];
    let vals = state.values.data();
    let nn = ny * nx;
    let mut value = 0.0;
    match bc {
        BcTag::NeumannReflective => {
            let sp = state.grid.spacing();
            let (hy, hx) = if state.grid.is_spacetime() {
                (sp[1], sp[2])
            } else {
                (sp[0], sp[1])
            };
            let nodes = boundary_nodes(ny, nx);
            let count = (nt * nodes.len()) as f64;
            for f in 0..nt {
                for node in &nodes {
                    let st = normal_gradient_stencil(node, ny, nx, hx, hy);
                    let mut g = 0.0;
                    for &(iy, ix, c) in &st {
                        g += c * vals[f * nn + iy * nx + ix];
                    }
                    value += g * g / count;
                    for &(iy, ix, c) in &st {
                        grad[f * nn + iy * nx + ix] += 2.0 * g * c / count;
                    }
                }
            }
        }
        BcTag::DirichletZero | BcTag::DirichletTopSin => {
            let h = dirichlet_values(&state.grid, bc)?;
            let hv = h.values.data();
            let mut count = 0.0;
            for iy in 0..ny {
                for ix in 0..nx {
                    if iy != 0 && iy != ny - 1 && ix != 0 && ix != nx - 1 {
                        continue;
                    }
                    count += nt as f64;
                }
            }
            for f in 0..nt {
                for iy in 0..ny {
                    for ix in 0..nx {
                        if iy != 0 && iy != ny - 1 && ix != 0 && ix != nx - 1 {
                            continue;
                        }
                        let g = f * nn + iy * nx + ix;
                        let e = vals[g] - hv[iy * nx + ix];
                        value += e * e / count;
                        grad[g] += 2.0 * e / count;
                    }
                }
            }
        }
        BcTag::None => return Err(Error::config("boundary_residual: unsupported tag None")),
    }
    Ok((
        GridField::new(
            state.grid.clone(),
            Tensor::new(dims.to_vec(), grad)?,
            BcTag::None,
        )?,
        value,
    ))
}

/// Per-node normalized squared inner product with a test function of fixed
/// pixel scale centered at that node (2D only).
pub fn residual_heatmap(
    state: &GridField,
    param: &GridField,
    pde: PdeKind,
    fixed_scale_px: f64,
    wavelet: bool,
) -> Result<GridField> {
    let grid = &state.grid;
    if grid.ndim() != 2 {
        return Err(Error::config("residual_heatmap is a 2D diagnostic"));
    }
    if fixed_scale_px <= 0.0 || fixed_scale_px >= grid.dims()[0] as f64 {
        return Err(Error::config("heatmap scale must lie within the grid"));
    }
    let ws = Workspace::new(state, param, pde)?;
    let (ny, nx) = (grid.dims()[0], grid.dims()[1]);
    let scales = vec![
        fixed_scale_px * grid.spacing()[0],
        fixed_scale_px * grid.spacing()[1],
    ];
    let values: Vec<f64> = (0..ny * nx)
        .into_par_iter()
        .map(|k| {
            let (iy, ix) = (k / nx, k % nx);
            let tf = TestFunction {
                center: vec![grid.coord(0, iy), grid.coord(1, ix)],
                scales: scales.clone(),
                wavelet,
            };
            let ev = eval_test_function(&tf, grid)?;
            let (s, _) = weak_term(&ws, &ev);
            let q = normalizer(&ws, &ev, NormalizerKind::PsiWeighted)?;
            Ok((s / q) * (s / q))
        })
        .collect::<Result<Vec<f64>>>()?;
    GridField::new(grid.clone(), Tensor::new(vec![ny, nx], values)?, BcTag::None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{sample_grf, threshold_binary, GrfConfig};
    use crate::pde::{solve_darcy, DarcyProblem};
    use crate::rng::stream_rng;
    use std::f64::consts::PI;

    fn interior_tf(grid: &Grid, cy: f64, cx: f64, s_px: f64, wavelet: bool) -> TestFunction {
        TestFunction {
            center: vec![cy, cx],
            scales: vec![s_px * grid.spacing()[0], s_px * grid.spacing()[1]],
            wavelet,
        }
    }

    #[test]
    fn test_function_center_and_support() {
        let grid = Grid::unit_square(33).unwrap();
        let tf = interior_tf(&grid, 0.5, 0.5, 6.0, true);
        let ev = eval_test_function(&tf, &grid).unwrap();
        // node exactly at the center: wendland and wavelet factors are 1,
        // psi reduces to the mollifier product
        let center_flat = {
            let mut found = None;
            patch_iter(&ev.patch, |flat, gidx| {
                if gidx == [16, 16] {
                    found = Some(flat);
                }
            });
            found.unwrap()
        };
        let m = 0.25 * 0.25;
        assert!((ev.psi[center_flat] - m).abs() < 1e-14);
        assert!((ev.psi_plain[center_flat] - m).abs() < 1e-14);
        // outside r >= 1: psi and gradient vanish
        let tf2 = interior_tf(&grid, 0.5, 0.5, 3.0, false);
        let ev2 = eval_test_function(&tf2, &grid).unwrap();
        patch_iter(&ev2.patch, |flat, gidx| {
            let r2 = ((gidx[0] as f64 - 16.0) / 3.0).powi(2)
                + ((gidx[1] as f64 - 16.0) / 3.0).powi(2);
            if r2 >= 1.0 {
                assert_eq!(ev2.psi[flat], 0.0);
                assert_eq!(ev2.grad[0][flat], 0.0);
                assert_eq!(ev2.grad[1][flat], 0.0);
            }
        });
    }

    #[test]
    fn test_function_vanishes_on_domain_boundary() {
        let grid = Grid::unit_square(17).unwrap();
        // support overlapping the left and bottom edges
        let tf = interior_tf(&grid, 0.1, 0.1, 4.0, false);
        let ev = eval_test_function(&tf, &grid).unwrap();
        patch_iter(&ev.patch, |flat, gidx| {
            if gidx[0] == 0 || gidx[1] == 0 {
                assert_eq!(ev.psi[flat], 0.0, "psi must vanish on the boundary");
            }
        });
    }

    #[test]
    fn weak_inner_darcy_trivial_zero() {
        let grid = Grid::unit_square(17).unwrap();
        let u = GridField::zeros(&grid);
        let a = GridField::constant(&grid, 1.0);
        let f = GridField::zeros(&grid);
        let tf = interior_tf(&grid, 0.5, 0.5, 4.0, false);
        let v = weak_inner_darcy(&u, &a, &f, &tf).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn weak_inner_darcy_integration_by_parts_decays() {
        // exact solution: |<L u, psi>| is pure quadrature error, ~4x per refinement
        let inner = |n: usize| -> f64 {
            let grid = Grid::unit_square(n).unwrap();
            let u = GridField::from_fn(&grid, |x| (PI * x[1]).sin() * (PI * x[0]).sin());
            let a = GridField::constant(&grid, 1.0);
            let f = GridField::new(
                grid.clone(),
                u.values.scale(2.0 * PI * PI),
                BcTag::None,
            )
            .unwrap();
            let tf = interior_tf(&grid, 0.4375, 0.5625, 0.25 * (n - 1) as f64, false);
            weak_inner_darcy(&u, &a, &f, &tf).unwrap().abs()
        };
        let (e33, e65) = (inner(33), inner(65));
        let ratio = e33 / e65;
        assert!(ratio > 2.5 && ratio < 6.5, "decay ratio {ratio}");
        assert!(e65 < 1e-3);
    }

    /// Strong-form quadrature oracle: `int (-div(a grad u) - f) psi` with
    /// all derivatives analytic. Independent of the weak-form route.
    fn strong_inner_analytic(
        grid: &Grid,
        tf: &TestFunction,
        u: impl Fn(f64, f64) -> f64,
        lu: impl Fn(f64, f64) -> f64,
    ) -> f64 {
        let _ = u;
        let ev = eval_test_function(tf, grid).unwrap();
        let weights = AxisWeights::new(grid);
        let mut acc = 0.0;
        patch_iter(&ev.patch, |flat, gidx| {
            let y = grid.coord(0, gidx[0]);
            let x = grid.coord(1, gidx[1]);
            acc += weights.weight(gidx) * lu(y, x) * ev.psi[flat];
        });
        acc
    }

    #[test]
    fn weak_matches_strong_quadrature_for_smooth_fields() {
        // u = sin(pi x) sin(pi y), a = 1 + 0.5 sin(pi x) sin(pi y), f = 0
        let u_fn = |y: f64, x: f64| (PI * x).sin() * (PI * y).sin();
        let a_fn = |y: f64, x: f64| 1.0 + 0.5 * (PI * x).sin() * (PI * y).sin();
        // L u = -div(a grad u) for the fields above (worked out by hand)
        let lu_fn = |y: f64, x: f64| {
            let (sx, cx) = ((PI * x).sin(), (PI * x).cos());
            let (sy, cy) = ((PI * y).sin(), (PI * y).cos());
            let lap_u = -2.0 * PI * PI * sx * sy;
            let grad_a_dot_grad_u =
                0.5 * PI * PI * (cx * sy * cx * sy + sx * cy * sx * cy);
            -(a_fn(y, x) * lap_u + grad_a_dot_grad_u)
        };
        let gap = |n: usize| -> (f64, f64) {
            let grid = Grid::unit_square(n).unwrap();
            let u = GridField::from_fn(&grid, |p| u_fn(p[0], p[1]));
            let a = GridField::from_fn(&grid, |p| a_fn(p[0], p[1]));
            let f = GridField::zeros(&grid);
            let mut rng = stream_rng(31, n as u64);
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..24 {
                let cy = 0.25 + 0.5 * ((k * 7) % 24) as f64 / 24.0;
                let cx = 0.25 + 0.5 * ((k * 11) % 24) as f64 / 24.0;
                let s_px = 6.0 + 4.0 * rand::Rng::gen::<f64>(&mut rng);
                let tf = interior_tf(&grid, cy, cx, s_px, false);
                let w = weak_inner_darcy(&u, &a, &f, &tf).unwrap();
                let s = strong_inner_analytic(&grid, &tf, |_, _| 0.0, lu_fn);
                num += (w - s) * (w - s);
                den += s * s;
            }
            ((num / den).sqrt(), den)
        };
        let (rel65, _) = gap(65);
        let (rel33, _) = gap(33);
        assert!(rel65 <= 0.01, "weak/strong gap {rel65}");
        let order = (rel33 / rel65).log2();
        assert!(order > 1.0, "observed order {order}");
    }

    #[test]
    fn weak_residual_contrast_between_matched_and_mismatched_pairs() {
        let grid = Grid::unit_square(33).unwrap();
        let cfg = GrfConfig::darcy();
        let a1 = threshold_binary(
            &sample_grf(&grid, &cfg, &mut stream_rng(8, 0)).unwrap(),
            3.0,
            12.0,
        )
        .unwrap();
        let a2 = threshold_binary(
            &sample_grf(&grid, &cfg, &mut stream_rng(8, 1)).unwrap(),
            3.0,
            12.0,
        )
        .unwrap();
        let u1 = solve_darcy(&DarcyProblem::with_unit_forcing(a1.clone()).unwrap()).unwrap();
        let tfs = sample_test_batch(
            &grid,
            &TestBatchConfig::darcy_default(),
            &mut stream_rng(8, 2),
        )
        .unwrap();
        let matched =
            weak_residual(&u1, &a1, PdeKind::darcy(), &tfs, NormalizerKind::PsiWeighted).unwrap();
        let mismatched =
            weak_residual(&u1, &a2, PdeKind::darcy(), &tfs, NormalizerKind::PsiWeighted).unwrap();
        assert!(
            mismatched >= 10.0 * matched,
            "matched {matched} vs mismatched {mismatched}"
        );
    }

    #[test]
    fn weak_residual_scale_invariance_without_forcing() {
        let grid = Grid::unit_square(33).unwrap();
        let a = threshold_binary(
            &sample_grf(&grid, &GrfConfig::darcy(), &mut stream_rng(9, 0)).unwrap(),
            3.0,
            12.0,
        )
        .unwrap();
        let u = solve_darcy(&DarcyProblem::with_unit_forcing(a.clone()).unwrap()).unwrap();
        let a2 = GridField::new(grid.clone(), a.values.scale(2.0), BcTag::None).unwrap();
        let tfs = sample_test_batch(
            &grid,
            &TestBatchConfig::darcy_default(),
            &mut stream_rng(9, 1),
        )
        .unwrap();
        let kind = PdeKind::Darcy { forcing: 0.0 };
        let r1 = weak_residual(&u, &a, kind, &tfs, NormalizerKind::PsiWeighted).unwrap();
        let r2 = weak_residual(&u, &a2, kind, &tfs, NormalizerKind::PsiWeighted).unwrap();
        assert!((r1 - r2).abs() <= 1e-12 * r1.max(1.0), "r1 {r1} r2 {r2}");
    }

    #[test]
    fn grad_weak_residual_matches_finite_differences_darcy() {
        let grid = Grid::unit_square(17).unwrap();
        let mut rng = stream_rng(12, 0);
        let a = threshold_binary(
            &sample_grf(&grid, &GrfConfig::darcy(), &mut rng).unwrap(),
            3.0,
            12.0,
        )
        .unwrap();
        let u = solve_darcy(&DarcyProblem::with_unit_forcing(a.clone()).unwrap()).unwrap();
        let tfs = sample_test_batch(
            &grid,
            &TestBatchConfig {
                n_test: 40,
                sigma_range: (2.0, 5.0),
                wavelet_prob: 0.5,
                per_grid_point: false,
            },
            &mut rng,
        )
        .unwrap();
        for norm in [NormalizerKind::PsiWeighted, NormalizerKind::SupportIntegral] {
            let (gu, ga, _) =
                grad_weak_residual(&u, &a, PdeKind::darcy(), &tfs, norm).unwrap();
            check_fd(&u, &a, PdeKind::darcy(), &tfs, norm, &gu, &ga, 60, &mut rng);
        }
    }

    #[test]
    fn grad_weak_residual_matches_finite_differences_acoustic() {
        let sgrid = Grid::unit_square(13).unwrap();
        let mut rng = stream_rng(13, 0);
        let c = threshold_binary(
            &sample_grf(&sgrid, &GrfConfig::acoustic(), &mut rng).unwrap(),
            2.0,
            3.0,
        )
        .unwrap();
        let init = crate::pde::gaussian_bumps(&sgrid, &crate::pde::default_bump_centers(), 1e-2)
            .unwrap();
        let problem = crate::pde::AcousticProblem::new(c.clone(), init, 1e-3, 9, 0.1).unwrap();
        let p = crate::pde::simulate_acoustic(&problem).unwrap();
        let tfs = sample_test_batch(
            &p.grid,
            &TestBatchConfig {
                n_test: 24,
                sigma_range: (2.0, 4.0),
                wavelet_prob: 0.5,
                per_grid_point: false,
            },
            &mut rng,
        )
        .unwrap();
        let (gp, gc, _) = grad_weak_residual(
            &p,
            &c,
            PdeKind::Acoustic,
            &tfs,
            NormalizerKind::PsiWeighted,
        )
        .unwrap();
        check_fd(
            &p,
            &c,
            PdeKind::Acoustic,
            &tfs,
            NormalizerKind::PsiWeighted,
            &gp,
            &gc,
            60,
            &mut rng,
        );
    }

    #[allow(clippy::too_many_arguments)]
    fn check_fd(
        state: &GridField,
        param: &GridField,
        pde: PdeKind,
        tfs: &[TestFunction],
        norm: NormalizerKind,
        g_state: &GridField,
        g_param: &GridField,
        probes: usize,
        rng: &mut Rng,
    ) {
        let scale = g_state
            .values
            .data()
            .iter()
            .chain(g_param.values.data())
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        let eps = 1e-5;
        for _ in 0..probes {
            let on_state = rand::Rng::gen_bool(rng, 0.5);
            let (field, grad) = if on_state {
                (state, g_state)
            } else {
                (param, g_param)
            };
            let idx = rand::Rng::gen_range(rng, 0..field.values.len());
            let mut plus = field.clone();
            plus.values.data_mut()[idx] += eps;
            let mut minus = field.clone();
            minus.values.data_mut()[idx] -= eps;
            let eval = |f: &GridField| -> f64 {
                if on_state {
                    weak_residual(f, param, pde, tfs, norm).unwrap()
                } else {
                    weak_residual(state, f, pde, tfs, norm).unwrap()
                }
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let an = grad.values.data()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-6 * scale.max(1e-12));
            assert!(
                (fd - an).abs() / denom <= 1e-4,
                "fd {fd} analytic {an} at node {idx} (state={on_state})"
            );
        }
    }

    #[test]
    fn grad_outside_supports_is_zero() {
        let grid = Grid::unit_square(33).unwrap();
        let a = GridField::constant(&grid, 5.0);
        let u = GridField::from_fn(&grid, |x| (PI * x[1]).sin() * (PI * x[0]).sin());
        let tf = interior_tf(&grid, 0.25, 0.25, 3.0, false);
        let (gu, _, _) = grad_weak_residual(
            &u,
            &a,
            PdeKind::darcy(),
            &[tf],
            NormalizerKind::PsiWeighted,
        )
        .unwrap();
        // far corner nodes are untouched by the support box and its stencil halo
        let g = gu.values.data();
        assert_eq!(g[32 * 33 + 32], 0.0);
        assert_eq!(g[32], 0.0);
    }

    #[test]
    fn grad_uniform_alpha_scaling_direction_is_null_without_forcing() {
        let grid = Grid::unit_square(17).unwrap();
        let mut rng = stream_rng(14, 0);
        let a = threshold_binary(
            &sample_grf(&grid, &GrfConfig::darcy(), &mut rng).unwrap(),
            3.0,
            12.0,
        )
        .unwrap();
        let u = solve_darcy(&DarcyProblem::with_unit_forcing(a.clone()).unwrap()).unwrap();
        let tfs = sample_test_batch(
            &grid,
            &TestBatchConfig {
                n_test: 32,
                sigma_range: (2.0, 5.0),
                wavelet_prob: 0.5,
                per_grid_point: false,
            },
            &mut rng,
        )
        .unwrap();
        let kind = PdeKind::Darcy { forcing: 0.0 };
        let (_, ga, r) =
            grad_weak_residual(&u, &a, kind, &tfs, NormalizerKind::PsiWeighted).unwrap();
        // directional derivative along alpha itself vanishes by homogeneity
        let dir: f64 = ga.values.dot(&a.values);
        assert!(dir.abs() <= 1e-10 * r.max(1e-12), "directional derivative {dir}");
    }

    #[test]
    fn boundary_residual_cases() {
        let grid = Grid::unit_square(65).unwrap();
        // reflective eigenmode: analytic normal gradient is zero
        let f = GridField::from_fn(&grid, |x| (PI * x[1]).cos() * (PI * x[0]).cos());
        let r = boundary_residual(&f, BcTag::NeumannReflective).unwrap();
        assert!(r <= 1e-3, "reflective residual {r}");
        // zero Dirichlet satisfied exactly
        let z = GridField::from_fn(&grid, |x| (PI * x[1]).sin() * (PI * x[0]).sin());
        let r = boundary_residual(&z, BcTag::DirichletZero).unwrap();
        assert!(r <= 1e-28);
        // gradient finite-difference check
        let mut rng = stream_rng(15, 0);
        let g = Grid::unit_square(9).unwrap();
        let noisy = GridField::new(
            g.clone(),
            Tensor::new(vec![9, 9], crate::rng::standard_normal(&mut rng, 81)).unwrap(),
            BcTag::None,
        )
        .unwrap();
        for bc in [BcTag::NeumannReflective, BcTag::DirichletZero, BcTag::DirichletTopSin] {
            let (grad, _) = grad_boundary_residual(&noisy, bc).unwrap();
            for _ in 0..20 {
                let idx = rand::Rng::gen_range(&mut rng, 0..81);
                let eps = 1e-6;
                let mut plus = noisy.clone();
                plus.values.data_mut()[idx] += eps;
                let mut minus = noisy.clone();
                minus.values.data_mut()[idx] -= eps;
                let fd = (boundary_residual(&plus, bc).unwrap()
                    - boundary_residual(&minus, bc).unwrap())
                    / (2.0 * eps);
                let an = grad.values.data()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-4 * an.abs().max(fd.abs()),
                    "bc {bc:?}: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn strong_residual_solver_consistency_and_trivial_zero() {
        let grid = Grid::unit_square(33).unwrap();
        let a = GridField::from_fn(&grid, |x| 1.0 + 0.5 * (PI * x[0]).sin() * (PI * x[1]).sin());
        let problem =
            DarcyProblem::new(a.clone(), GridField::constant(&grid, 1.0), BcTag::DirichletZero)
                .unwrap();
        let u = solve_darcy(&problem).unwrap();
        let r = strong_residual(&u, &a, PdeKind::darcy(), StrongStencil::SolverMatched).unwrap();
        assert!(r <= 1e-9, "matched-stencil residual {r}");
        // u = 0, f = 0
        let z = GridField::zeros(&grid);
        let r = strong_residual(
            &z,
            &a,
            PdeKind::Darcy { forcing: 0.0 },
            StrongStencil::CentralAssembly,
        )
        .unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn strong_residual_noisy_gap() {
        let grid = Grid::unit_square(33).unwrap();
        let mut rng = stream_rng(16, 0);
        let a = threshold_binary(
            &sample_grf(&grid, &GrfConfig::darcy(), &mut rng).unwrap(),
            3.0,
            12.0,
        )
        .unwrap();
        let u = solve_darcy(&DarcyProblem::with_unit_forcing(a.clone()).unwrap()).unwrap();
        let sigma = 0.1 * (u.values.norm_sq() / u.values.len() as f64).sqrt();
        let noisy = crate::pde::add_observation_noise(&u, sigma, &mut rng).unwrap();
        let clean =
            strong_residual(&u, &a, PdeKind::darcy(), StrongStencil::CentralAssembly).unwrap();
        let dirty =
            strong_residual(&noisy, &a, PdeKind::darcy(), StrongStencil::CentralAssembly).unwrap();
        assert!(dirty >= 10.0 * clean, "clean {clean} noisy {dirty}");
    }

    #[test]
    fn weak_residual_noisy_gap() {
        let grid = Grid::unit_square(33).unwrap();
        let mut rng = stream_rng(17, 0);
        let a = threshold_binary(
            &sample_grf(&grid, &GrfConfig::darcy(), &mut rng).unwrap(),
            3.0,
            12.0,
        )
        .unwrap();
        let u = solve_darcy(&DarcyProblem::with_unit_forcing(a.clone()).unwrap()).unwrap();
        let sigma = 0.1 * (u.values.norm_sq() / u.values.len() as f64).sqrt();
        let noisy = crate::pde::add_observation_noise(&u, sigma, &mut rng).unwrap();
        let tfs =
            sample_test_batch(&grid, &TestBatchConfig::darcy_default(), &mut rng).unwrap();
        let r_clean =
            weak_residual(&u, &a, PdeKind::darcy(), &tfs, NormalizerKind::PsiWeighted).unwrap();
        let r_noisy =
            weak_residual(&noisy, &a, PdeKind::darcy(), &tfs, NormalizerKind::PsiWeighted)
                .unwrap();
        assert!(r_noisy > 3.0 * r_clean, "clean {r_clean} noisy {r_noisy}");
    }

    #[test]
    fn weak_inner_acoustic_cases() {
        let sgrid = Grid::unit_square(33).unwrap();
        let c = GridField::constant(&sgrid, 2.0);
        // constant field: all derivatives vanish
        let stg = Grid::spacetime(9, 33, 33, 0.1).unwrap();
        let p = GridField::constant(&stg, 3.0);
        let tf = TestFunction {
            center: vec![0.05, 0.5, 0.5],
            scales: vec![0.04, 0.2, 0.2],
            wavelet: false,
        };
        let v = weak_inner_acoustic(&p, &c, &tf).unwrap();
        assert_eq!(v, 0.0);
        // eigenmode: inner product is bounded by quadrature error, order-2 decay
        let inner = |n: usize| -> f64 {
            let speed = 2.0;
            let omega = (2.0f64).sqrt() * PI * speed;
            let horizon = 0.3;
            let stg = Grid::spacetime(n, n, n, horizon).unwrap();
            let p = GridField::from_fn(&stg, |x| {
                (omega * x[0]).cos() * (PI * x[1]).cos() * (PI * x[2]).cos()
            });
            let cf = GridField::constant(&Grid::unit_square(n).unwrap(), speed);
            let tf = TestFunction {
                center: vec![0.5 * horizon, 0.47, 0.53],
                scales: vec![0.3 * horizon, 0.3, 0.3],
                wavelet: false,
            };
            weak_inner_acoustic(&p, &cf, &tf).unwrap().abs()
        };
        let (e17, e33) = (inner(17), inner(33));
        assert!(e17 / e33 > 2.2, "decay ratio {}", e17 / e33);
    }

    #[test]
    fn heatmap_contrasts_noise_and_depends_on_scale() {
        let grid = Grid::unit_square(33).unwrap();
        let mut rng = stream_rng(18, 0);
        let a = threshold_binary(
            &sample_grf(&grid, &GrfConfig::darcy(), &mut rng).unwrap(),
            3.0,
            12.0,
        )
        .unwrap();
        let u = solve_darcy(&DarcyProblem::with_unit_forcing(a.clone()).unwrap()).unwrap();
        let sigma = 0.1 * (u.values.norm_sq() / u.values.len() as f64).sqrt();
        let noisy = crate::pde::add_observation_noise(&u, sigma, &mut rng).unwrap();
        let clean_map = residual_heatmap(&u, &a, PdeKind::darcy(), 3.0, false).unwrap();
        let noisy_map = residual_heatmap(&noisy, &a, PdeKind::darcy(), 3.0, false).unwrap();
        let ratio = noisy_map.values.mean() / clean_map.values.mean();
        assert!(ratio >= 5.0, "heatmap contrast {ratio}");
        let other_scale = residual_heatmap(&noisy, &a, PdeKind::darcy(), 6.0, false).unwrap();
        let diff = noisy_map.values.sub(&other_scale.values).norm_sq();
        assert!(diff > 0.0);
    }
}
