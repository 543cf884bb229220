//! Parametric function approximators: the base vector field, the inverse
//! parameter predictor, and the fine-tune model with its alpha-conditioned
//! correction heads, plus the gradient facilities the training loops need.
//!
//! Fields travel through the networks as `[channels, h, w]` tensors: a 2D
//! state is one channel, a space-time state folds its frames into channels.

pub mod nets;
pub mod tape;

use crate::error::{Error, Result};
use crate::grid::{BcTag, Grid, GridField};
use crate::rng::stream_rng;
use crate::store::Checkpoint;
use crate::tensor::Tensor;
use crate::weakform::{
    grad_weak_residual, sample_test_batch, NormalizerKind, PdeKind, TestBatchConfig,
};
use nets::{Adam, HeadConfig, HeadNet, Trunk, TrunkConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tape::Tape;

/// Velocity fields consumable by the samplers and the fine-tuning engine.
pub trait VelocityField: Sync {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor>;
    /// Exact vector-Jacobian product of the output with respect to `x`.
    fn vjp(&self, x: &Tensor, t: f64, cot: &Tensor) -> Result<Tensor>;
}

/// State-to-parameter maps (the inverse predictor and test stand-ins).
pub trait InverseMap: Sync {
    fn eval(&self, x: &Tensor) -> Result<Tensor>;
    fn vjp(&self, x: &Tensor, cot: &Tensor) -> Result<Tensor>;
}

/// Reinterpret a grid field as a `[c, h, w]` network tensor.
pub fn field_to_tensor(f: &GridField) -> Tensor {
    let dims = f.grid.dims();
    let shape = match dims.len() {
        2 => vec![1, dims[0], dims[1]],
        3 => dims.to_vec(),
        _ => unreachable!("fields are 2D or 3D"),
    };
    f.values.clone().reshape(shape).expect("same element count")
}

/// Reinterpret a network tensor as a field on `grid`.
pub fn tensor_to_field(t: &Tensor, grid: &Grid, bc: BcTag) -> Result<GridField> {
    GridField::new(grid.clone(), t.clone().reshape(grid.dims().to_vec())?, bc)
}

fn check_finite(x: &Tensor, what: &str) -> Result<()> {
    if !x.all_finite() {
        return Err(Error::numerical(format!("{what}: non-finite values")));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0 + 1e-12).contains(&t) {
        return Err(Error::config(format!("flow time {t} outside [0,1]")));
    }
    Ok(())
}

/// Base flow-matching vector field `v(x, t)`.
#[derive(Debug, Clone)]
pub struct VectorFieldModel {
    pub trunk: Trunk,
    /// (mean, std) of the training data; rollouts live in standardized
    /// units and are mapped back for residual evaluation.
    pub standardization: (f64, f64),
    pub seed: u64,
}

impl VectorFieldModel {
    pub fn init(state_channels: usize, hidden: usize, seed: u64) -> VectorFieldModel {
        let cfg = TrunkConfig {
            in_channels: state_channels,
            out_channels: state_channels,
            hidden,
            pos_freqs: 2,
            time_channels: 8,
            zero_init_head: false,
        };
        VectorFieldModel {
            trunk: Trunk::init(cfg, &mut stream_rng(seed, 0)),
            standardization: (0.0, 1.0),
            seed,
        }
    }

    pub fn state_channels(&self) -> usize {
        self.trunk.cfg.in_channels
    }

    pub fn forward_base(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        check_finite(x, "forward_base input")?;
        check_time(t)?;
        let mut tape = Tape::new();
        let xid = tape.input(0, x.clone());
        let out = self.trunk.forward_on_tape(&mut tape, xid, Some(t), None)?;
        Ok(tape.value(out).clone())
    }

    /// d<cot, v>/dtheta for all trunk parameters.
    pub fn param_gradient(&self, x: &Tensor, t: f64, cot: &Tensor) -> Result<Vec<Tensor>> {
        check_finite(x, "param_gradient input")?;
        let mut tape = Tape::new();
        let xid = tape.input(0, x.clone());
        let out = self.trunk.forward_on_tape(&mut tape, xid, Some(t), Some(0))?;
        let grads = tape.backward(&[(out, cot.clone())], self.trunk.n_params(), 1);
        Ok(materialize(grads.params, &self.trunk.params))
    }
}

impl VelocityField for VectorFieldModel {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.forward_base(x, t)
    }

    fn vjp(&self, x: &Tensor, t: f64, cot: &Tensor) -> Result<Tensor> {
        check_finite(x, "vjp input")?;
        check_time(t)?;
        if cot.shape() != x.shape() {
            return Err(Error::config("vjp cotangent shape mismatch"));
        }
        let mut tape = Tape::new();
        let xid = tape.input(0, x.clone());
        let out = self.trunk.forward_on_tape(&mut tape, xid, Some(t), None)?;
        let grads = tape.backward(&[(out, cot.clone())], 0, 1);
        Ok(grads.inputs.into_iter().next().flatten().unwrap_or_else(|| Tensor::zeros(x.shape())))
    }
}

/// Inverse parameter predictor with an affine-sigmoid output squashing
/// keeping predictions strictly inside `[lo, hi]`.
#[derive(Debug, Clone)]
pub struct InversePredictor {
    pub trunk: Trunk,
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
}

impl InversePredictor {
    /// `data_range` is the (lo, hi) of the physical parameter levels; the
    /// squashing range widens it to [0.5 lo, 1.5 hi].
    pub fn init(
        state_channels: usize,
        hidden: usize,
        data_range: (f64, f64),
        seed: u64,
    ) -> InversePredictor {
        let cfg = TrunkConfig {
            in_channels: state_channels,
            out_channels: 1,
            hidden,
            pos_freqs: 2,
            time_channels: 0,
            zero_init_head: false,
        };
        InversePredictor {
            trunk: Trunk::init(cfg, &mut stream_rng(seed, 1)),
            lo: 0.5 * data_range.0,
            hi: 1.5 * data_range.1,
            seed,
        }
    }

    pub fn predict_inverse(&self, x: &Tensor) -> Result<Tensor> {
        check_finite(x, "predict_inverse input")?;
        let mut tape = Tape::new();
        let xid = tape.input(0, x.clone());
        let raw = self.trunk.forward_on_tape(&mut tape, xid, None, None)?;
        let out = tape.sigmoid_range(raw, self.lo, self.hi);
        Ok(tape.value(out).clone())
    }

    pub fn param_gradient(&self, x: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let xid = tape.input(0, x.clone());
        let raw = self.trunk.forward_on_tape(&mut tape, xid, None, Some(0))?;
        let out = tape.sigmoid_range(raw, self.lo, self.hi);
        let grads = tape.backward(&[(out, cot.clone())], self.trunk.n_params(), 1);
        Ok(materialize(grads.params, &self.trunk.params))
    }
}

impl InverseMap for InversePredictor {
    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        self.predict_inverse(x)
    }

    fn vjp(&self, x: &Tensor, cot: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xid = tape.input(0, x.clone());
        let raw = self.trunk.forward_on_tape(&mut tape, xid, None, None)?;
        let out = tape.sigmoid_range(raw, self.lo, self.hi);
        let grads = tape.backward(&[(out, cot.clone())], 0, 1);
        Ok(grads.inputs.into_iter().next().flatten().unwrap_or_else(|| Tensor::zeros(x.shape())))
    }
}

fn materialize(grads: Vec<Option<Tensor>>, params: &[Tensor]) -> Vec<Tensor> {
    grads
        .into_iter()
        .zip(params)
        .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

/// Joint outputs of the fine-tuned model at one state.
pub struct JointEval {
    pub v_x: Tensor,
    pub v_alpha: Tensor,
    /// Base velocity at the same state (the preliminary field the x-head
    /// corrects); exposed so rollouts evaluate the base net only once.
    pub v_base: Tensor,
}

/// Gradients from one joint backward pass.
pub struct JointBackward {
    /// x-head parameters first, then alpha-head parameters.
    pub head_grads: Vec<Tensor>,
    pub gx: Tensor,
    pub galpha: Tensor,
    pub gvab: Tensor,
}

/// Fine-tune model: frozen base trunk plus two zero-initialized residual
/// correction heads, conditioned on the current parameter estimate.
#[derive(Debug, Clone)]
pub struct FinetuneModel {
    pub base: VectorFieldModel,
    pub x_head: HeadNet,
    pub a_head: HeadNet,
    /// Affine normalization applied to alpha before conditioning.
    pub alpha_center: f64,
    pub alpha_scale: f64,
    pub seed: u64,
}

impl FinetuneModel {
    pub fn init(base: VectorFieldModel, hidden: usize, alpha_range: (f64, f64), seed: u64) -> Self {
        let cs = base.state_channels();
        let mut rng = stream_rng(seed, 2);
        let x_head = HeadNet::init(
            HeadConfig {
                in_channels: 2 * cs + 1,
                out_channels: cs,
                hidden,
                pos_freqs: 2,
                time_channels: 8,
            },
            &mut rng,
        );
        let a_head = HeadNet::init(
            HeadConfig {
                in_channels: cs + 2,
                out_channels: 1,
                hidden,
                pos_freqs: 2,
                time_channels: 8,
            },
            &mut rng,
        );
        FinetuneModel {
            base,
            x_head,
            a_head,
            alpha_center: 0.5 * (alpha_range.0 + alpha_range.1),
            alpha_scale: 0.25 * (alpha_range.1 - alpha_range.0).max(1e-6),
            seed,
        }
    }

    pub fn n_head_params(&self) -> usize {
        self.x_head.n_params() + self.a_head.n_params()
    }

    pub fn head_params(&self) -> Vec<Tensor> {
        let mut p = self.x_head.params.clone();
        p.extend(self.a_head.params.iter().cloned());
        p
    }

    pub fn set_head_params(&mut self, params: &[Tensor]) {
        let nx = self.x_head.n_params();
        self.x_head.params.clone_from_slice(&params[..nx]);
        self.a_head.params.clone_from_slice(&params[nx..]);
    }

    fn build(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        alpha: &Tensor,
        v_alpha_base: &Tensor,
        t: f64,
        trainable: bool,
    ) -> Result<(tape::Id, tape::Id, tape::Id)> {
        if alpha.shape() != [1, x.shape()[1], x.shape()[2]]
            || v_alpha_base.shape() != alpha.shape()
        {
            return Err(Error::config("joint forward: field shape mismatch"));
        }
        let xid = tape.input(0, x.clone());
        let aid = tape.input(1, alpha.clone());
        let vab = tape.input(2, v_alpha_base.clone());
        let a_norm = tape.shift(aid, -self.alpha_center);
        let a_norm = tape.scale(a_norm, 1.0 / self.alpha_scale);
        let v_prelim = self.base.trunk.forward_on_tape(tape, xid, Some(t), None)?;
        let nx = self.x_head.n_params();
        let xin = tape.concat_c(&[v_prelim, xid, a_norm]);
        let corr = self
            .x_head
            .forward_on_tape(tape, xin, Some(t), trainable.then_some(0))?;
        let v_x = tape.add(v_prelim, corr);
        let vab_norm = tape.scale(vab, 1.0 / self.alpha_scale);
        let ain = tape.concat_c(&[vab_norm, xid, a_norm]);
        let acorr = self
            .a_head
            .forward_on_tape(tape, ain, Some(t), trainable.then_some(nx))?;
        let v_alpha = tape.add(vab, acorr);
        Ok((v_x, v_alpha, v_prelim))
    }

    /// `(v_x, v_alpha)` at the joint state. At initialization this returns
    /// the base velocity and `v_alpha_base` exactly.
    pub fn forward_finetuned(
        &self,
        x: &Tensor,
        alpha: &Tensor,
        v_alpha_base: &Tensor,
        t: f64,
    ) -> Result<JointEval> {
        check_finite(x, "forward_finetuned x")?;
        check_finite(alpha, "forward_finetuned alpha")?;
        check_finite(v_alpha_base, "forward_finetuned v_alpha_base")?;
        check_time(t)?;
        let mut tape = Tape::new();
        let (v_x, v_alpha, v_prelim) = self.build(&mut tape, x, alpha, v_alpha_base, t, false)?;
        Ok(JointEval {
            v_x: tape.value(v_x).clone(),
            v_alpha: tape.value(v_alpha).clone(),
            v_base: tape.value(v_prelim).clone(),
        })
    }

    /// Head-only graph with the preliminary (base) velocity supplied as a
    /// constant; used by rollouts where the base output is already known.
    fn build_with_prelim(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        alpha: &Tensor,
        v_alpha_base: &Tensor,
        v_prelim: &Tensor,
        t: f64,
        trainable: bool,
    ) -> Result<(tape::Id, tape::Id)> {
        if v_prelim.shape() != x.shape() {
            return Err(Error::config("v_prelim shape must match the state"));
        }
        let xid = tape.input(0, x.clone());
        let aid = tape.input(1, alpha.clone());
        let vab = tape.input(2, v_alpha_base.clone());
        let prelim = tape.constant(v_prelim.clone());
        let a_norm = tape.shift(aid, -self.alpha_center);
        let a_norm = tape.scale(a_norm, 1.0 / self.alpha_scale);
        let nx = self.x_head.n_params();
        let xin = tape.concat_c(&[prelim, xid, a_norm]);
        let corr = self
            .x_head
            .forward_on_tape(tape, xin, Some(t), trainable.then_some(0))?;
        let v_x = tape.add(prelim, corr);
        let vab_norm = tape.scale(vab, 1.0 / self.alpha_scale);
        let ain = tape.concat_c(&[vab_norm, xid, a_norm]);
        let acorr = self
            .a_head
            .forward_on_tape(tape, ain, Some(t), trainable.then_some(nx))?;
        let v_alpha = tape.add(vab, acorr);
        Ok((v_x, v_alpha))
    }

    /// `(v_x, v_alpha)` with the base velocity precomputed.
    pub fn forward_with_prelim(
        &self,
        x: &Tensor,
        alpha: &Tensor,
        v_alpha_base: &Tensor,
        v_prelim: &Tensor,
        t: f64,
    ) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let (v_x, v_alpha) =
            self.build_with_prelim(&mut tape, x, alpha, v_alpha_base, v_prelim, t, false)?;
        Ok((tape.value(v_x).clone(), tape.value(v_alpha).clone()))
    }

    /// Backward through the heads only; `v_prelim` is a constant, so the
    /// returned `gx` covers the heads' direct dependence on the state
    /// (which is all the training loop differentiates).
    #[allow(clippy::too_many_arguments)]
    pub fn backward_with_prelim(
        &self,
        x: &Tensor,
        alpha: &Tensor,
        v_alpha_base: &Tensor,
        v_prelim: &Tensor,
        t: f64,
        cot_vx: Option<&Tensor>,
        cot_va: Option<&Tensor>,
    ) -> Result<JointBackward> {
        let mut tape = Tape::new();
        let (v_x, v_alpha) =
            self.build_with_prelim(&mut tape, x, alpha, v_alpha_base, v_prelim, t, true)?;
        let mut seeds = Vec::new();
        if let Some(c) = cot_vx {
            seeds.push((v_x, c.clone()));
        }
        if let Some(c) = cot_va {
            seeds.push((v_alpha, c.clone()));
        }
        let grads = tape.backward(&seeds, self.n_head_params(), 3);
        let all_params = self.head_params();
        let head_grads = materialize(grads.params, &all_params);
        let mut inputs = grads.inputs.into_iter();
        let gx = inputs.next().flatten().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let galpha = inputs.next().flatten().unwrap_or_else(|| Tensor::zeros(alpha.shape()));
        let gvab = inputs
            .next()
            .flatten()
            .unwrap_or_else(|| Tensor::zeros(v_alpha_base.shape()));
        Ok(JointBackward { head_grads, gx, galpha, gvab })
    }

    /// One tape backward through the joint forward. Returns head-parameter
    /// gradients plus gradients with respect to the three field inputs
    /// (the base trunk stays frozen, so no gradient reaches it).
    pub fn backward_joint(
        &self,
        x: &Tensor,
        alpha: &Tensor,
        v_alpha_base: &Tensor,
        t: f64,
        cot_vx: Option<&Tensor>,
        cot_va: Option<&Tensor>,
    ) -> Result<JointBackward> {
        let mut tape = Tape::new();
        let (v_x, v_alpha, _) = self.build(&mut tape, x, alpha, v_alpha_base, t, true)?;
        let mut seeds = Vec::new();
        if let Some(c) = cot_vx {
            seeds.push((v_x, c.clone()));
        }
        if let Some(c) = cot_va {
            seeds.push((v_alpha, c.clone()));
        }
        let grads = tape.backward(&seeds, self.n_head_params(), 3);
        let all_params = self.head_params();
        let head_grads = materialize(grads.params, &all_params);
        let mut inputs = grads.inputs.into_iter();
        let gx = inputs.next().flatten().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let galpha = inputs.next().flatten().unwrap_or_else(|| Tensor::zeros(alpha.shape()));
        let gvab = inputs
            .next()
            .flatten()
            .unwrap_or_else(|| Tensor::zeros(v_alpha_base.shape()));
        Ok(JointBackward { head_grads, gx, galpha, gvab })
    }
}

/// Settings for inverse-predictor training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverseTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub tf: TestBatchConfig,
    pub norm: NormalizerKind,
}

impl InverseTrainConfig {
    pub fn new(epochs: usize, seed: u64, tf: TestBatchConfig) -> Self {
        InverseTrainConfig {
            epochs,
            lr: 1e-4,
            batch_size: 8,
            seed,
            tf,
            norm: NormalizerKind::PsiWeighted,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
}

/// Trains the inverse predictor to minimize the weak residual
/// `R_weak(x1, phi(x1))` on states generated by the base model.
/// `samples` are standardized `[c,h,w]` states; `grid` is their physical
/// grid and `standardization` the constants that map back to data units.
pub fn train_inverse(
    phi: &mut InversePredictor,
    samples: &[Tensor],
    grid: &Grid,
    pde: PdeKind,
    standardization: (f64, f64),
    cfg: &InverseTrainConfig,
) -> Result<Vec<EpochRecord>> {
    if samples.is_empty() {
        return Err(Error::config("train_inverse needs samples"));
    }
    let spatial = grid.spatial_grid()?;
    let (mean, std) = standardization;
    let mut opt = Adam::new(cfg.lr, &phi.trunk.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut stream_rng(cfg.seed, 1000 + epoch as u64));
        }
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(Vec<Tensor>, f64)>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &si)| {
                    let x_std = &samples[si];
                    let mut rng =
                        stream_rng(cfg.seed, ((epoch * 7919 + bi * 131 + k) as u64) << 1);
                    let tfs = sample_test_batch(grid, &cfg.tf, &mut rng)?;
                    let x_phys = tensor_to_field(
                        &x_std.map(|v| mean + std * v),
                        grid,
                        BcTag::None,
                    )?;
                    let alpha = phi.predict_inverse(x_std)?;
                    let alpha_field = tensor_to_field(&alpha, &spatial, BcTag::None)?;
                    let (_, galpha, r) =
                        grad_weak_residual(&x_phys, &alpha_field, pde, &tfs, cfg.norm)?;
                    let cot = field_to_tensor(&galpha);
                    let grads = phi.param_gradient(x_std, &cot)?;
                    Ok((grads, r))
                })
                .collect();
            let mut acc: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (g, loss) = r?;
                batch_loss += loss;
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
            opt.step(&mut phi.trunk.params, &grads);
            epoch_loss += batch_loss;
        }
        epoch_loss /= samples.len() as f64;
        let init = *initial_loss.get_or_insert(epoch_loss);
        if !epoch_loss.is_finite() || epoch_loss > 10.0 * init {
            return Err(Error::numerical(format!(
                "inverse training diverged at epoch {epoch}: loss {epoch_loss:.3e} vs initial {init:.3e}"
            )));
        }
        history.push(EpochRecord { epoch, loss: epoch_loss });
    }
    Ok(history)
}

// checkpoint conversion

#[derive(Serialize, Deserialize)]
struct BaseDescriptor {
    kind: String,
    arch: TrunkConfig,
    standardization: (f64, f64),
    seed: u64,
}

pub fn base_to_checkpoint(m: &VectorFieldModel) -> Checkpoint {
    let desc = BaseDescriptor {
        kind: "base".into(),
        arch: m.trunk.cfg.clone(),
        standardization: m.standardization,
        seed: m.seed,
    };
    Checkpoint {
        descriptor: serde_json::to_value(&desc).expect("descriptor encodes"),
        tensors: named(&m.trunk.params, "trunk"),
    }
}

pub fn base_from_checkpoint(c: &Checkpoint) -> Result<VectorFieldModel> {
    let desc: BaseDescriptor = serde_json::from_value(c.descriptor.clone())
        .map_err(|e| Error::corrupt(format!("base descriptor: {e}")))?;
    if desc.kind != "base" {
        return Err(Error::corrupt(format!("expected base checkpoint, got {}", desc.kind)));
    }
    Ok(VectorFieldModel {
        trunk: Trunk { params: unnamed(c, "trunk", desc.arch.layers().len() * 2)?, cfg: desc.arch },
        standardization: desc.standardization,
        seed: desc.seed,
    })
}

#[derive(Serialize, Deserialize)]
struct InverseDescriptor {
    kind: String,
    arch: TrunkConfig,
    lo: f64,
    hi: f64,
    seed: u64,
}

pub fn inverse_to_checkpoint(m: &InversePredictor) -> Checkpoint {
    let desc = InverseDescriptor {
        kind: "inverse".into(),
        arch: m.trunk.cfg.clone(),
        lo: m.lo,
        hi: m.hi,
        seed: m.seed,
    };
    Checkpoint {
        descriptor: serde_json::to_value(&desc).expect("descriptor encodes"),
        tensors: named(&m.trunk.params, "trunk"),
    }
}

pub fn inverse_from_checkpoint(c: &Checkpoint) -> Result<InversePredictor> {
    let desc: InverseDescriptor = serde_json::from_value(c.descriptor.clone())
        .map_err(|e| Error::corrupt(format!("inverse descriptor: {e}")))?;
    if desc.kind != "inverse" {
        return Err(Error::corrupt("expected inverse checkpoint"));
    }
    Ok(InversePredictor {
        trunk: Trunk { params: unnamed(c, "trunk", desc.arch.layers().len() * 2)?, cfg: desc.arch },
        lo: desc.lo,
        hi: desc.hi,
        seed: desc.seed,
    })
}

#[derive(Serialize, Deserialize)]
struct FinetuneDescriptor {
    kind: String,
    base_arch: TrunkConfig,
    x_head: HeadConfig,
    a_head: HeadConfig,
    standardization: (f64, f64),
    alpha_center: f64,
    alpha_scale: f64,
    seed: u64,
}

pub fn finetune_to_checkpoint(m: &FinetuneModel) -> Checkpoint {
    let desc = FinetuneDescriptor {
        kind: "finetune".into(),
        base_arch: m.base.trunk.cfg.clone(),
        x_head: m.x_head.cfg.clone(),
        a_head: m.a_head.cfg.clone(),
        standardization: m.base.standardization,
        alpha_center: m.alpha_center,
        alpha_scale: m.alpha_scale,
        seed: m.seed,
    };
    let mut tensors = named(&m.base.trunk.params, "base");
    tensors.extend(named(&m.x_head.params, "x_head"));
    tensors.extend(named(&m.a_head.params, "a_head"));
    Checkpoint { descriptor: serde_json::to_value(&desc).expect("descriptor encodes"), tensors }
}

pub fn finetune_from_checkpoint(c: &Checkpoint) -> Result<FinetuneModel> {
    let desc: FinetuneDescriptor = serde_json::from_value(c.descriptor.clone())
        .map_err(|e| Error::corrupt(format!("finetune descriptor: {e}")))?;
    if desc.kind != "finetune" {
        return Err(Error::corrupt("expected finetune checkpoint"));
    }
    let base = VectorFieldModel {
        trunk: Trunk {
            params: unnamed(c, "base", desc.base_arch.layers().len() * 2)?,
            cfg: desc.base_arch,
        },
        standardization: desc.standardization,
        seed: desc.seed,
    };
    Ok(FinetuneModel {
        x_head: HeadNet {
            params: unnamed(c, "x_head", desc.x_head.layers().len() * 2)?,
            cfg: desc.x_head,
        },
        a_head: HeadNet {
            params: unnamed(c, "a_head", desc.a_head.layers().len() * 2)?,
            cfg: desc.a_head,
        },
        base,
        alpha_center: desc.alpha_center,
        alpha_scale: desc.alpha_scale,
        seed: desc.seed,
    })
}

fn named(params: &[Tensor], prefix: &str) -> Vec<(String, Tensor)> {
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let kind = if i % 2 == 0 { "w" } else { "b" };
            (format!("{prefix}.{}.{}", i / 2, kind), p.clone())
        })
        .collect()
}

fn unnamed(c: &Checkpoint, prefix: &str, count: usize) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|i| {
            let kind = if i % 2 == 0 { "w" } else { "b" };
            c.tensor(&format!("{prefix}.{}.{}", i / 2, kind)).cloned()
        })
        .collect()
}
