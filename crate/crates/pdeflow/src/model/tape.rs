//! Reverse-mode differentiation over the small operator set every network
//! in this crate is composed from: 2D convolution (with stride), pointwise
//! nonlinearities, channel concatenation, nearest-neighbor upsampling and
//! elementwise combination. Activations live on a flat tape; backward walks
//! it once and accumulates cotangents for parameters and inputs.
//!
//! Losses are not tape ops: callers compute the scalar and its cotangent
//! with respect to the output tensors, then seed `backward` with it.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(usize);

#[derive(Debug, Clone, Copy)]
pub enum Leaf {
    /// Differentiable input slot.
    Input(usize),
    /// Trainable parameter slot.
    Param(usize),
    /// Constant (embeddings, frozen tensors).
    Const,
}

enum Op {
    Leaf(Leaf),
    Conv2d { x: Id, w: Id, b: Id, stride: usize, pad: usize },
    Silu(Id),
    Tanh(Id),
    SigmoidRange { x: Id, lo: f64, hi: f64 },
    Add(Id, Id),
    Scale(Id, f64),
    Shift(Id, f64),
    ConcatC(Vec<Id>),
    /// Nearest-neighbor 2x upsampling cropped to `(out_h, out_w)`.
    Upsample2x { x: Id, out_h: usize, out_w: usize },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients returned by [`Tape::backward`], keyed by leaf slots.
pub struct Grads {
    pub params: Vec<Option<Tensor>>,
    pub inputs: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Id {
        self.nodes.push(Node { op, value });
        Id(self.nodes.len() - 1)
    }

    pub fn value(&self, id: Id) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, slot: usize, value: Tensor) -> Id {
        self.push(Op::Leaf(Leaf::Input(slot)), value)
    }

    pub fn param(&mut self, slot: usize, value: Tensor) -> Id {
        self.push(Op::Leaf(Leaf::Param(slot)), value)
    }

    pub fn constant(&mut self, value: Tensor) -> Id {
        self.push(Op::Leaf(Leaf::Const), value)
    }

    pub fn conv2d(&mut self, x: Id, w: Id, b: Id, stride: usize, pad: usize) -> Id {
        let v = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push(Op::Conv2d { x, w, b, stride, pad }, v)
    }

    pub fn silu(&mut self, x: Id) -> Id {
        let v = self.value(x).map(|t| t * sigmoid(t));
        self.push(Op::Silu(x), v)
    }

    pub fn tanh(&mut self, x: Id) -> Id {
        let v = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), v)
    }

    pub fn sigmoid_range(&mut self, x: Id, lo: f64, hi: f64) -> Id {
        let v = self.value(x).map(|t| lo + (hi - lo) * sigmoid(t));
        self.push(Op::SigmoidRange { x, lo, hi }, v)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn scale(&mut self, x: Id, s: f64) -> Id {
        let v = self.value(x).scale(s);
        self.push(Op::Scale(x, s), v)
    }

    pub fn shift(&mut self, x: Id, c: f64) -> Id {
        let v = self.value(x).map(|t| t + c);
        self.push(Op::Shift(x, c), v)
    }

    pub fn concat_c(&mut self, xs: &[Id]) -> Id {
        let parts: Vec<&Tensor> = xs.iter().map(|&id| self.value(id)).collect();
        let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
        let c_total: usize = parts.iter().map(|t| t.shape()[0]).sum();
        let mut data = Vec::with_capacity(c_total * h * w);
        for t in &parts {
            debug_assert_eq!(&t.shape()[1..], &[h, w]);
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![c_total, h, w], data).expect("concat shape");
        self.push(Op::ConcatC(xs.to_vec()), v)
    }

    pub fn upsample2x(&mut self, x: Id, out_h: usize, out_w: usize) -> Id {
        let xin = self.value(x);
        let (c, h, w) = (xin.shape()[0], xin.shape()[1], xin.shape()[2]);
        debug_assert!(out_h <= 2 * h && out_w <= 2 * w);
        let mut data = vec![0.0; c * out_h * out_w];
        for ci in 0..c {
            for oy in 0..out_h {
                let iy = oy / 2;
                let src = &xin.data()[(ci * h + iy) * w..(ci * h + iy + 1) * w];
                let dst = &mut data[(ci * out_h + oy) * out_w..(ci * out_h + oy + 1) * out_w];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = src[ox / 2];
                }
            }
        }
        let v = Tensor::new(vec![c, out_h, out_w], data).expect("upsample shape");
        self.push(Op::Upsample2x { x, out_h, out_w }, v)
    }

    /// Backpropagates seed cotangents through the tape. `seeds` pairs node
    /// ids with cotangents of the final scalar with respect to that node's
    /// value.
    pub fn backward(&self, seeds: &[(Id, Tensor)], n_params: usize, n_inputs: usize) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, cot) in seeds {
            accumulate(&mut grads[id.0], cot);
        }
        let mut out = Grads {
            params: (0..n_params).map(|_| None).collect(),
            inputs: (0..n_inputs).map(|_| None).collect(),
        };
        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf(Leaf::Param(slot)) => accumulate(&mut out.params[*slot], &g),
                Op::Leaf(Leaf::Input(slot)) => accumulate(&mut out.inputs[*slot], &g),
                Op::Leaf(Leaf::Const) => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *pad,
                    );
                    accumulate(&mut grads[x.0], &gx);
                    accumulate(&mut grads[w.0], &gw);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Silu(x) => {
                    let xin = self.value(*x);
                    let gx: Vec<f64> = xin
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&t, &go)| {
                            let s = sigmoid(t);
                            go * (s + t * s * (1.0 - s))
                        })
                        .collect();
                    let gx = Tensor::new(xin.shape().to_vec(), gx).expect("silu grad shape");
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    let gx: Vec<f64> = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yv, &go)| go * (1.0 - yv * yv))
                        .collect();
                    let gx = Tensor::new(y.shape().to_vec(), gx).expect("tanh grad shape");
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::SigmoidRange { x, lo, hi } => {
                    let xin = self.value(*x);
                    let gx: Vec<f64> = xin
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&t, &go)| {
                            let s = sigmoid(t);
                            go * (hi - lo) * s * (1.0 - s)
                        })
                        .collect();
                    let gx = Tensor::new(xin.shape().to_vec(), gx).expect("sig grad shape");
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads[x.0], &g.scale(*s));
                }
                Op::Shift(x, _) => {
                    accumulate(&mut grads[x.0], &g);
                }
                Op::ConcatC(xs) => {
                    let mut offset = 0;
                    for &xid in xs {
                        let part_shape = self.value(xid).shape().to_vec();
                        let n: usize = part_shape.iter().product();
                        let slice = g.data()[offset..offset + n].to_vec();
                        let gp = Tensor::new(part_shape, slice).expect("concat grad shape");
                        accumulate(&mut grads[xid.0], &gp);
                        offset += n;
                    }
                }
                Op::Upsample2x { x, out_h, out_w } => {
                    let xin = self.value(*x);
                    let (c, h, w) = (xin.shape()[0], xin.shape()[1], xin.shape()[2]);
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    let gd = gx.data_mut();
                    for ci in 0..c {
                        for oy in 0..*out_h {
                            let iy = oy / 2;
                            let src =
                                &g.data()[(ci * out_h + oy) * out_w..(ci * out_h + oy + 1) * out_w];
                            for (ox, &gv) in src.iter().enumerate() {
                                gd[(ci * h + iy) * w + ox / 2] += gv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(acc) => acc.axpy(1.0, g),
        None => *slot = Some(g.clone()),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cin_w, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, cin_w, "conv channel mismatch");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(win, kw, stride, pad);
    let mut out = vec![0.0; cout * oh * ow];
    let xd = x.data();
    let wd = w.data();
    for co in 0..cout {
        let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        let bias = b.data()[co];
        for v in oplane.iter_mut() {
            *v = bias;
        }
        for ci in 0..cin {
            let xplane = &xd[ci * h * win..(ci + 1) * h * win];
            let wbase = ((co * cin_w) + ci) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[wbase + ky * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * win..(iy as usize + 1) * win];
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            // valid ox range: 0 <= ox + kx - pad < win
                            let lo = pad.saturating_sub(kx);
                            let hi = (win + pad - kx).min(ow);
                            if lo >= hi {
                                continue;
                            }
                            let shift = kx as isize - pad as isize;
                            let src = &xrow[(lo as isize + shift) as usize
                                ..(hi as isize + shift) as usize];
                            for (o, &s) in orow[lo..hi].iter_mut().zip(src) {
                                *o += wv * s;
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && (ix as usize) < win {
                                    *o += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out).expect("conv shape")
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (gout.shape()[1], gout.shape()[2]);
    let mut gx = Tensor::zeros(&[cin, h, win]);
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();
    {
        let gbd = gb.data_mut();
        for co in 0..cout {
            gbd[co] = gd[co * oh * ow..(co + 1) * oh * ow].iter().sum();
        }
    }
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();
    for co in 0..cout {
        let gplane = &gd[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xplane = &xd[ci * h * win..(ci + 1) * h * win];
            let gxplane = &mut gxd[ci * h * win..(ci + 1) * h * win];
            let wbase = ((co * cin) + ci) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[wbase + ky * kw + kx];
                    let mut wacc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let xrow = &xplane[iy as usize * win..(iy as usize + 1) * win];
                        let gxrow =
                            &mut gxplane[iy as usize * win..(iy as usize + 1) * win];
                        if stride == 1 {
                            let lo = pad.saturating_sub(kx);
                            let hi = (win + pad - kx).min(ow);
                            if lo >= hi {
                                continue;
                            }
                            let shift = kx as isize - pad as isize;
                            let (slo, shi) =
                                ((lo as isize + shift) as usize, (hi as isize + shift) as usize);
                            for (&gv, &xv) in grow[lo..hi].iter().zip(&xrow[slo..shi]) {
                                wacc += gv * xv;
                            }
                            for (gx, &gv) in gxrow[slo..shi].iter_mut().zip(&grow[lo..hi]) {
                                *gx += wv * gv;
                            }
                        } else {
                            for (ox, &gv) in grow.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && (ix as usize) < win {
                                    wacc += gv * xrow[ix as usize];
                                    gxrow[ix as usize] += wv * gv;
                                }
                            }
                        }
                    }
                    gwd[wbase + ky * kw + kx] += wacc;
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream_rng};

    fn rand_tensor(shape: &[usize], rng: &mut crate::rng::Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), standard_normal(rng, n)).unwrap()
    }

    /// Builds a slightly contrived graph exercising every op, returns the
    /// scalar sum of the output and grads.
    fn graph_loss(x_val: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> (f64, Grads) {
        let mut tape = Tape::new();
        let x = tape.input(0, x_val.clone());
        let w1 = tape.param(0, w1.clone());
        let b1 = tape.param(1, b1.clone());
        let w2 = tape.param(2, w2.clone());
        let b2 = tape.param(3, b2.clone());
        let h = tape.conv2d(x, w1, b1, 2, 1);
        let h = tape.silu(h);
        let up = tape.upsample2x(h, 7, 7);
        let cat = tape.concat_c(&[up, x]);
        let y = tape.conv2d(cat, w2, b2, 1, 1);
        let y = tape.tanh(y);
        let y = tape.sigmoid_range(y, -1.0, 3.0);
        let y = tape.scale(y, 0.5);
        let y = tape.shift(y, 0.1);
        let value = tape.value(y).data().iter().sum::<f64>();
        let seed = Tensor::full(tape.value(y).shape(), 1.0);
        let grads = tape.backward(&[(y, seed)], 4, 1);
        (value, grads)
    }

    #[test]
    fn tape_gradients_match_finite_differences() {
        let mut rng = stream_rng(100, 0);
        let x = rand_tensor(&[2, 7, 7], &mut rng);
        let w1 = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b1 = rand_tensor(&[3], &mut rng);
        let w2 = rand_tensor(&[2, 5, 3, 3], &mut rng);
        let b2 = rand_tensor(&[2], &mut rng);
        let (_, grads) = graph_loss(&x, &w1, &b1, &w2, &b2);
        let eps = 1e-6;
        let tensors: Vec<&Tensor> = vec![&x, &w1, &b1, &w2, &b2];
        for (ti, t) in tensors.iter().enumerate() {
            let analytic = if ti == 0 {
                grads.inputs[0].as_ref().unwrap()
            } else {
                grads.params[ti - 1].as_ref().unwrap()
            };
            for probe in 0..12.min(t.len()) {
                let idx = (probe * 7919) % t.len();
                let mut plus = (*t).clone();
                plus.data_mut()[idx] += eps;
                let mut minus = (*t).clone();
                minus.data_mut()[idx] -= eps;
                let eval = |v: &Tensor| -> f64 {
                    let args: Vec<&Tensor> = (0..5)
                        .map(|k| if k == ti { v } else { tensors[k] })
                        .collect();
                    graph_loss(args[0], args[1], args[2], args[3], args[4]).0
                };
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let an = analytic.data()[idx];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                    "tensor {ti} idx {idx}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv_stride_and_padding_dims() {
        let mut rng = stream_rng(101, 0);
        let x = rand_tensor(&[1, 9, 9], &mut rng);
        let w = rand_tensor(&[4, 1, 3, 3], &mut rng);
        let b = Tensor::zeros(&[4]);
        let y = conv2d_forward(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[4, 5, 5]);
        let y = conv2d_forward(&x, &w, &b, 1, 1);
        assert_eq!(y.shape(), &[4, 9, 9]);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut rng = stream_rng(102, 0);
        let x = rand_tensor(&[1, 5, 5], &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // center tap
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 1);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
