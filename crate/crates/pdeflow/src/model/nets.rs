//! Network building blocks: fixed sinusoidal embeddings, a compact
//! convolutional encoder-decoder trunk, and the light correction heads used
//! by the fine-tuned model.

use super::tape::{conv_out_dim, Id, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Fixed sinusoidal encodings of the absolute grid coordinates:
/// `sin(pi k xi), cos(pi k xi)` per axis for `k = 1..=n_freq`.
pub fn positional_channels(h: usize, w: usize, n_freq: usize) -> Tensor {
    let mut data = Vec::with_capacity(4 * n_freq * h * w);
    let coord = |i: usize, n: usize| i as f64 / (n - 1).max(1) as f64;
    for k in 1..=n_freq {
        let omega = std::f64::consts::PI * k as f64;
        for trig in 0..2 {
            for iy in 0..h {
                let y = coord(iy, h);
                for _ in 0..w {
                    data.push(if trig == 0 { (omega * y).sin() } else { (omega * y).cos() });
                }
            }
        }
    }
    for k in 1..=n_freq {
        let omega = std::f64::consts::PI * k as f64;
        for trig in 0..2 {
            for _ in 0..h {
                for ix in 0..w {
                    let x = coord(ix, w);
                    data.push(if trig == 0 { (omega * x).sin() } else { (omega * x).cos() });
                }
            }
        }
    }
    Tensor::new(vec![4 * n_freq, h, w], data).expect("positional encoding shape")
}

/// Scalar-time embedding broadcast over the grid: `sin/cos(pi 2^j t)`.
pub fn time_channels(t: f64, n_channels: usize, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(n_channels * h * w);
    for j in 0..n_channels / 2 {
        let omega = std::f64::consts::PI * (1 << j) as f64;
        data.extend(std::iter::repeat((omega * t).sin()).take(h * w));
        data.extend(std::iter::repeat((omega * t).cos()).take(h * w));
    }
    Tensor::new(vec![n_channels, h, w], data).expect("time embedding shape")
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub zero_init: bool,
}

impl LayerSpec {
    fn init(&self, rng: &mut Rng) -> (Tensor, Tensor) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let w = if self.zero_init {
            Tensor::zeros(&[self.cout, self.cin, self.k, self.k])
        } else {
            let std = (2.0 / fan_in).sqrt();
            let dist = Normal::new(0.0, std).expect("normal");
            let n = self.cout * self.cin * self.k * self.k;
            Tensor::new(
                vec![self.cout, self.cin, self.k, self.k],
                (0..n).map(|_| dist.sample(rng)).collect(),
            )
            .expect("weight shape")
        };
        (w, Tensor::zeros(&[self.cout]))
    }
}

/// Mounts a layer's parameters on the tape either as trainable params
/// (slot-indexed) or frozen constants.
fn mount_layer(
    tape: &mut Tape,
    params: &[Tensor],
    layer: usize,
    slot_base: Option<usize>,
) -> (Id, Id) {
    let w = params[2 * layer].clone();
    let b = params[2 * layer + 1].clone();
    match slot_base {
        Some(base) => (
            tape.param(base + 2 * layer, w),
            tape.param(base + 2 * layer + 1, b),
        ),
        None => (tape.constant(w), tape.constant(b)),
    }
}

/// Compact convolutional encoder-decoder with one downsampling level and a
/// skip connection. Layers: lift, enc, down(x2), mid, up, fuse, head(1x1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden: usize,
    pub pos_freqs: usize,
    pub time_channels: usize,
    pub zero_init_head: bool,
}

impl TrunkConfig {
    pub fn pos_channels(&self) -> usize {
        4 * self.pos_freqs
    }

    pub fn total_in(&self) -> usize {
        self.in_channels + self.pos_channels() + self.time_channels
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let c = self.hidden;
        let conv3 = |cin, cout| LayerSpec { cin, cout, k: 3, stride: 1, pad: 1, zero_init: false };
        vec![
            conv3(self.total_in(), c),
            conv3(c, c),
            LayerSpec { cin: c, cout: 2 * c, k: 3, stride: 2, pad: 1, zero_init: false },
            conv3(2 * c, 2 * c),
            conv3(2 * c, c),
            conv3(2 * c, c),
            LayerSpec {
                cin: c,
                cout: self.out_channels,
                k: 1,
                stride: 1,
                pad: 0,
                zero_init: self.zero_init_head,
            },
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Trunk {
    pub cfg: TrunkConfig,
    pub params: Vec<Tensor>,
}

impl Trunk {
    pub fn init(cfg: TrunkConfig, rng: &mut Rng) -> Trunk {
        let params = cfg
            .layers()
            .iter()
            .flat_map(|l| {
                let (w, b) = l.init(rng);
                [w, b]
            })
            .collect();
        Trunk { cfg, params }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Builds the forward graph. `phys_in` must be `[in_channels, h, w]`;
    /// `t` is required iff the trunk has time channels. `slot_base = None`
    /// mounts the weights frozen.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        phys_in: Id,
        t: Option<f64>,
        slot_base: Option<usize>,
    ) -> Result<Id> {
        let shape = tape.value(phys_in).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::config(format!(
                "trunk expects [{}, h, w] input, got {:?}",
                self.cfg.in_channels, shape
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let mut feats = vec![phys_in];
        if self.cfg.pos_freqs > 0 {
            let pos = positional_channels(h, w, self.cfg.pos_freqs);
            feats.push(tape.constant(pos));
        }
        if self.cfg.time_channels > 0 {
            let t = t.ok_or_else(|| Error::config("trunk requires a time input"))?;
            feats.push(tape.constant(time_channels(t, self.cfg.time_channels, h, w)));
        }
        let input = if feats.len() > 1 { tape.concat_c(&feats) } else { feats[0] };

        let lp = |tape: &mut Tape, layer: usize| mount_layer(tape, &self.params, layer, slot_base);

        let (w0, b0) = lp(tape, 0);
        let h0 = tape.conv2d(input, w0, b0, 1, 1);
        let h0 = tape.silu(h0);
        let (w1, b1) = lp(tape, 1);
        let skip = tape.conv2d(h0, w1, b1, 1, 1);
        let skip = tape.silu(skip);
        let (w2, b2) = lp(tape, 2);
        let down = tape.conv2d(skip, w2, b2, 2, 1);
        let down = tape.silu(down);
        let (w3, b3) = lp(tape, 3);
        let mid = tape.conv2d(down, w3, b3, 1, 1);
        let mid = tape.silu(mid);
        let dh = conv_out_dim(h, 3, 2, 1);
        debug_assert_eq!(tape.value(mid).shape()[1], dh);
        let up = tape.upsample2x(mid, h, w);
        let (w4, b4) = lp(tape, 4);
        let up = tape.conv2d(up, w4, b4, 1, 1);
        let up = tape.silu(up);
        let cat = tape.concat_c(&[up, skip]);
        let (w5, b5) = lp(tape, 5);
        let fused = tape.conv2d(cat, w5, b5, 1, 1);
        let fused = tape.silu(fused);
        let (w6, b6) = lp(tape, 6);
        Ok(tape.conv2d(fused, w6, b6, 1, 0))
    }
}

/// Three-layer correction head ending in a zero-initialized 1x1 mixing
/// convolution, so a fresh head is the exact identity on its residual
/// stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden: usize,
    pub pos_freqs: usize,
    pub time_channels: usize,
}

impl HeadConfig {
    pub fn total_in(&self) -> usize {
        self.in_channels + 4 * self.pos_freqs + self.time_channels
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let c = self.hidden;
        vec![
            LayerSpec { cin: self.total_in(), cout: c, k: 3, stride: 1, pad: 1, zero_init: false },
            LayerSpec { cin: c, cout: c, k: 3, stride: 1, pad: 1, zero_init: false },
            LayerSpec { cin: c, cout: self.out_channels, k: 1, stride: 1, pad: 0, zero_init: true },
        ]
    }
}

#[derive(Debug, Clone)]
pub struct HeadNet {
    pub cfg: HeadConfig,
    pub params: Vec<Tensor>,
}

impl HeadNet {
    pub fn init(cfg: HeadConfig, rng: &mut Rng) -> HeadNet {
        let params = cfg
            .layers()
            .iter()
            .flat_map(|l| {
                let (w, b) = l.init(rng);
                [w, b]
            })
            .collect();
        HeadNet { cfg, params }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        phys_in: Id,
        t: Option<f64>,
        slot_base: Option<usize>,
    ) -> Result<Id> {
        let shape = tape.value(phys_in).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::config(format!(
                "head expects [{}, h, w] input, got {:?}",
                self.cfg.in_channels, shape
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let mut feats = vec![phys_in];
        if self.cfg.pos_freqs > 0 {
            feats.push(tape.constant(positional_channels(h, w, self.cfg.pos_freqs)));
        }
        if self.cfg.time_channels > 0 {
            let t = t.ok_or_else(|| Error::config("head requires a time input"))?;
            feats.push(tape.constant(time_channels(t, self.cfg.time_channels, h, w)));
        }
        let input = if feats.len() > 1 { tape.concat_c(&feats) } else { feats[0] };
        let (w0, b0) = mount_layer(tape, &self.params, 0, slot_base);
        let h0 = tape.conv2d(input, w0, b0, 1, 1);
        let h0 = tape.silu(h0);
        let (w1, b1) = mount_layer(tape, &self.params, 1, slot_base);
        let h1 = tape.conv2d(h0, w1, b1, 1, 1);
        let h1 = tape.silu(h1);
        let (w2, b2) = mount_layer(tape, &self.params, 2, slot_base);
        Ok(tape.conv2d(h1, w2, b2, 1, 0))
    }
}

/// Adam optimizer over a flat list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / b1t;
                let vhat = vd[i] / b2t;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn trunk_shapes_and_zero_init() {
        let cfg = TrunkConfig {
            in_channels: 2,
            out_channels: 2,
            hidden: 6,
            pos_freqs: 2,
            time_channels: 4,
            zero_init_head: true,
        };
        let trunk = Trunk::init(cfg, &mut stream_rng(1, 0));
        let mut tape = Tape::new();
        let x = Tensor::new(vec![2, 17, 17], crate::rng::standard_normal(&mut stream_rng(1, 1), 2 * 17 * 17)).unwrap();
        let xid = tape.input(0, x);
        let out = trunk.forward_on_tape(&mut tape, xid, Some(0.3), Some(0)).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 17, 17]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut params = vec![Tensor::from_vec(vec![5.0, -3.0])];
        let mut opt = Adam::new(0.1, &params);
        for _ in 0..500 {
            let grads = vec![params[0].scale(2.0)];
            opt.step(&mut params, &grads);
        }
        assert!(params[0].data().iter().all(|v| v.abs() < 1e-3));
    }
}
