use super::ops::matmul_raw;
use super::{Bcast, Gradients, Op, Tape, UnaryKind, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

/// Reduces an upstream gradient onto a broadcast rhs operand.
fn reduce_bcast(g: &[f64], bcast: Bcast, rhs_len: usize) -> Vec<f64> {
    match bcast {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => vec![g.iter().sum()],
        Bcast::Row => {
            let mut out = vec![0.0; rhs_len];
            for (i, v) in g.iter().enumerate() {
                out[i % rhs_len] += v;
            }
            out
        }
    }
}

fn expand(b: &Tensor, bcast: Bcast, i: usize) -> f64 {
    match bcast {
        Bcast::Same => b.data()[i],
        Bcast::Scalar => b.data()[0],
        Bcast::Row => b.data()[i % b.numel()],
    }
}

impl Tape {
    /// Back-propagates from a scalar `loss`.
    ///
    /// Every tracked node reachable from `loss` receives a gradient; uses of one
    /// node from several places accumulate.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            let val = |n: usize| &nodes[n].value;
            let wants = |n: usize| nodes[n].requires_grad;
            let mut push = |n: usize, contrib: Vec<f64>| {
                if nodes[n].requires_grad {
                    accumulate(&mut grads[n], contrib);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if wants(*a) {
                        push(*a, matmul_raw(&g, bv.transpose().data(), m, n, k));
                    }
                    if wants(*b) {
                        push(*b, matmul_raw(av.transpose().data(), &g, k, m, n));
                    }
                }
                Op::Transpose { a } => {
                    let out = &node.value;
                    let gt = Tensor::from_parts(out.shape().to_vec(), g.clone()).transpose();
                    push(*a, gt.into_data());
                }
                Op::Add { a, b, bcast } => {
                    let n = val(*b).numel();
                    if wants(*b) {
                        push(*b, reduce_bcast(&g, *bcast, n));
                    }
                    push(*a, g);
                }
                Op::Sub { a, b, bcast } => {
                    let n = val(*b).numel();
                    if wants(*b) {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        push(*b, reduce_bcast(&neg, *bcast, n));
                    }
                    push(*a, g);
                }
                Op::Mul { a, b, bcast } => {
                    let (av, bv) = (val(*a), val(*b));
                    if wants(*b) {
                        let prod: Vec<f64> = g.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                        push(*b, reduce_bcast(&prod, *bcast, bv.numel()));
                    }
                    if wants(*a) {
                        let ga = g
                            .iter()
                            .enumerate()
                            .map(|(i, g)| g * expand(bv, *bcast, i))
                            .collect();
                        push(*a, ga);
                    }
                }
                Op::Scale { a, c } => push(*a, g.iter().map(|v| v * c).collect()),
                Op::Shift { a } | Op::Reshape { a } => push(*a, g),
                Op::Unary { a, kind } => {
                    let x = val(*a).data();
                    let y = node.value.data();
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, g)| {
                            let d = match kind {
                                UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                                UnaryKind::Tanh => 1.0 - y[i] * y[i],
                                UnaryKind::Relu => f64::from(u8::from(x[i] > 0.0)),
                                UnaryKind::Exp => y[i],
                                UnaryKind::Log => 1.0 / x[i],
                                UnaryKind::Abs => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else if x[i] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Recip => -y[i] * y[i],
                            };
                            g * d
                        })
                        .collect();
                    push(*a, ga);
                }
                Op::SoftmaxRows { a } => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut ga = Vec::with_capacity(g.len());
                    for (yr, gr) in y.data().chunks(c).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        ga.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                    }
                    push(*a, ga);
                }
                Op::LogSoftmaxRows { a } => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut ga = Vec::with_capacity(g.len());
                    for (yr, gr) in y.data().chunks(c).zip(g.chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        ga.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * s));
                    }
                    push(*a, ga);
                }
                Op::CrossEntropy { logits, grad } => {
                    push(*logits, grad.iter().map(|v| v * g[0]).collect());
                }
                Op::ScalarWithGrad { a, grad } => {
                    push(*a, grad.data().iter().map(|v| v * g[0]).collect());
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = val(*gain).data();
                    let d = gv.len();
                    if wants(*gain) {
                        let mut gg = vec![0.0; d];
                        for (i, (gi, h)) in g.iter().zip(xhat).enumerate() {
                            gg[i % d] += gi * h;
                        }
                        push(*gain, gg);
                    }
                    if wants(*bias) {
                        let mut gb = vec![0.0; d];
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % d] += gi;
                        }
                        push(*bias, gb);
                    }
                    if wants(*x) {
                        let mut gx = Vec::with_capacity(g.len());
                        for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            let dh: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                            let s1: f64 = dh.iter().sum();
                            let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                            let k = inv_std[r] / d as f64;
                            gx.extend(
                                dh.iter()
                                    .zip(hr)
                                    .map(|(dh, h)| k * (d as f64 * dh - s1 - h * s2)),
                            );
                        }
                        push(*x, gx);
                    }
                }
                Op::Sum { a } => {
                    let n = val(*a).numel();
                    push(*a, vec![g[0]; n]);
                }
                Op::Mean { a } => {
                    let n = val(*a).numel();
                    push(*a, vec![g[0] / n as f64; n]);
                }
                Op::NarrowCols { a, start } => {
                    let av = val(*a);
                    let (c, len) = (av.cols(), node.value.cols());
                    let mut ga = vec![0.0; av.numel()];
                    for (r, gr) in g.chunks(len).enumerate() {
                        ga[r * c + start..r * c + start + len].copy_from_slice(gr);
                    }
                    push(*a, ga);
                }
                Op::ConcatCols { parts } => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        if wants(p) {
                            let gp: Vec<f64> = g
                                .chunks(total)
                                .flat_map(|row| row[offset..offset + c].iter().copied())
                                .collect();
                            push(p, gp);
                        }
                        offset += c;
                    }
                }
                Op::Gather { table, ids } => {
                    let tv = val(*table);
                    let d = tv.cols();
                    let mut gt = vec![0.0; tv.numel()];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                    push(*table, gt);
                }
                Op::WhereRows { mask, a, b } => {
                    let c = node.value.cols();
                    let mut ga = vec![0.0; g.len()];
                    let mut gb = vec![0.0; g.len()];
                    for (u, &m) in mask.iter().enumerate() {
                        let dst = if m { &mut ga } else { &mut gb };
                        dst[u * c..(u + 1) * c].copy_from_slice(&g[u * c..(u + 1) * c]);
                    }
                    push(*a, ga);
                    push(*b, gb);
                }
                Op::Unfold {
                    x,
                    kernel,
                    stride,
                    pad_left,
                } => {
                    let xv = val(*x);
                    let (t_in, f) = (xv.rows(), xv.cols());
                    let t_out = node.value.rows();
                    let mut gx = vec![0.0; xv.numel()];
                    for t in 0..t_out {
                        for j in 0..*kernel {
                            let src = (t * stride + j) as isize - *pad_left as isize;
                            if src < 0 || src as usize >= t_in {
                                continue;
                            }
                            let s = src as usize * f;
                            let o = t * kernel * f + j * f;
                            for k in 0..f {
                                gx[s + k] += g[o + k];
                            }
                        }
                    }
                    push(*x, gx);
                }
                Op::CifAssign { weights, cum } => {
                    let t_len = cum.len();
                    let cells = if node.value.numel() == 0 {
                        0
                    } else {
                        node.value.rows()
                    };
                    let mut gc = vec![0.0; t_len];
                    let mut prev = 0.0_f64;
                    for t in 0..t_len {
                        let c = cum[t];
                        let mut u = prev.floor() as usize;
                        while u < cells && (u as f64) < c {
                            let uf = u as f64;
                            let hi = c.min(uf + 1.0);
                            let lo = prev.max(uf);
                            if hi > lo {
                                let gu = g[u * t_len + t];
                                if c < uf + 1.0 {
                                    gc[t] += gu;
                                }
                                if t > 0 && prev > uf {
                                    gc[t - 1] -= gu;
                                }
                            }
                            u += 1;
                        }
                        prev = c;
                    }
                    // cum[t] depends on every weight at or before t.
                    let mut gw = vec![0.0; t_len];
                    let mut acc = 0.0;
                    for t in (0..t_len).rev() {
                        acc += gc[t];
                        gw[t] = acc;
                    }
                    push(*weights, gw);
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let bound = self.bound.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        Ok(Gradients {
            grads,
            shapes,
            bound,
        })
    }
}
