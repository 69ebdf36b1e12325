use super::{Bcast, Op, UnaryKind, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.numel() == 1 {
        Ok(Bcast::Scalar)
    } else if b.shape().len() == 1 && a.shape().len() >= 2 && b.numel() == a.cols() {
        Ok(Bcast::Row)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn zip_bcast(a: &Tensor, b: &Tensor, bcast: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let bd = b.data();
    let n = b.numel();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = match bcast {
                Bcast::Same => bd[i],
                Bcast::Scalar => bd[0],
                Bcast::Row => bd[i % n],
            };
            f(x, y)
        })
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Bcast)> {
        let (a, b) = (self.value(), other.value());
        let bcast = bcast_kind(name, &a, &b)?;
        Ok((zip_bcast(&a, &b, bcast, f), bcast))
    }

    /// Orders operands of a commutative op so that any broadcast side is on the right.
    fn commuted(self, other: Var<'t>) -> (Var<'t>, Var<'t>) {
        let (sa, so) = (self.shape(), other.shape());
        let wider = so.len() > sa.len()
            || (so.len() == sa.len() && sa.iter().product::<usize>() < so.iter().product());
        if sa != so && wider {
            (other, self)
        } else {
            (self, other)
        }
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.commuted(other);
        let (v, bcast) = a.binary(b, "add", |x, y| x + y)?;
        Ok(self.tape.push(
            v,
            Op::Add {
                a: a.id,
                b: b.id,
                bcast,
            },
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, bcast) = self.binary(other, "sub", |x, y| x - y)?;
        Ok(self.tape.push(
            v,
            Op::Sub {
                a: self.id,
                b: other.id,
                bcast,
            },
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.commuted(other);
        let (v, bcast) = a.binary(b, "mul", |x, y| x * y)?;
        Ok(self.tape.push(
            v,
            Op::Mul {
                a: a.id,
                b: b.id,
                bcast,
            },
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|x| x * c).collect();
        self.tape.push(
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::Scale { a: self.id, c },
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Adds a constant to every element.
    pub fn shift(self, c: f64) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|x| x + c).collect();
        self.tape.push(
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::Shift { a: self.id },
        )
    }

    fn unary(self, kind: UnaryKind) -> Result<Var<'t>> {
        let v = self.value();
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Relu => |x| x.max(0.0),
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Abs => f64::abs,
            UnaryKind::Recip => f64::recip,
        };
        let mut data = Vec::with_capacity(v.numel());
        for &x in v.data() {
            let bad = match kind {
                UnaryKind::Log => (x <= 0.0 || !x.is_finite()).then(|| format!("log({x})")),
                UnaryKind::Recip => (x == 0.0 || !x.is_finite()).then(|| format!("1/{x}")),
                _ => None,
            };
            if let Some(detail) = bad {
                return Err(Error::Domain {
                    op: "log/recip",
                    detail,
                });
            }
            let y = f(x);
            if !y.is_finite() {
                return Err(Error::Domain {
                    op: "unary",
                    detail: format!("{kind:?}({x}) is not finite"),
                });
            }
            data.push(y);
        }
        Ok(self.tape.push(
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::Unary { a: self.id, kind },
        ))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid).expect("sigmoid is total")
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryKind::Tanh).expect("tanh is total")
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryKind::Relu).expect("relu is total")
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryKind::Abs).expect("abs is total")
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Log)
    }

    pub fn recip(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Recip)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = require_2d("matmul", &a)?;
        let (k2, n) = require_2d("matmul", &b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = matmul_raw(a.data(), b.data(), m, k, n);
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn t(self) -> Result<Var<'t>> {
        let a = self.value();
        require_2d("transpose", &a)?;
        Ok(self.tape.push(a.transpose(), Op::Transpose { a: self.id }))
    }

    fn row_wise(self, log: bool) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let mut out = Vec::with_capacity(a.numel());
        for row in a.data().chunks(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            if log {
                let lz = m + z.ln();
                out.extend(row.iter().map(|x| x - lz));
            } else {
                out.extend(row.iter().map(|x| (x - m).exp() / z));
            }
        }
        let v = Tensor::from_parts(a.shape().to_vec(), out);
        let op = if log {
            Op::LogSoftmaxRows { a: self.id }
        } else {
            Op::SoftmaxRows { a: self.id }
        };
        self.tape.push(v, op)
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(self) -> Var<'t> {
        self.row_wise(false)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax_rows(self) -> Var<'t> {
        self.row_wise(true)
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum { a: self.id })
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let s = v.sum() / v.numel() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean { a: self.id })
    }

    /// Columns `start..start + len` of a matrix.
    pub fn narrow_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = require_2d("narrow_cols", &a)?;
        if start + len > c || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "narrow_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in a.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![r, len], out),
            Op::NarrowCols { a: self.id, start },
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape { a: self.id }))
    }

    /// Normalizes each row over the last axis (variance epsilon 1e-5), then
    /// applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        const EPS: f64 = 1e-5;
        let x = self.value();
        let d = x.cols();
        let (g, b) = (gain.value(), bias.value());
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let rows = x.numel() / d;
        let mut xhat = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g.data()[j] + b.data()[j]);
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Differentiable CIF assignment matrix: entry `[u, t]` is the share of
    /// `weights[t]` accumulated into cell `u` when cells are filled left to right
    /// with unit capacity. Exactly `cells` rows are produced.
    pub fn cif_assign(self, cells: usize) -> Result<Var<'t>> {
        let w = self.value();
        if w.shape().len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "cif weights must be a vector, got {:?}",
                w.shape()
            )));
        }
        if let Some(bad) = w.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain {
                op: "cif_assign",
                detail: format!("weight {bad} is negative or non-finite"),
            });
        }
        let t_len = w.numel();
        let mut cum = Vec::with_capacity(t_len);
        let mut acc = 0.0;
        for &v in w.data() {
            acc += v;
            cum.push(acc);
        }
        let mut out = vec![0.0; cells * t_len];
        let mut prev = 0.0_f64;
        for (t, &c) in cum.iter().enumerate() {
            let first = prev.floor() as usize;
            let mut u = first;
            while u < cells && (u as f64) < c {
                let hi = c.min(u as f64 + 1.0);
                let lo = prev.max(u as f64);
                if hi > lo {
                    out[u * t_len + t] = hi - lo;
                }
                u += 1;
            }
            prev = c;
        }
        let shape = if cells == 0 {
            vec![0, t_len]
        } else {
            vec![cells, t_len]
        };
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::CifAssign {
                weights: self.id,
                cum,
            },
        ))
    }
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
    let tape = first.tape;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let rows = require_2d("concat_cols", &values[0])?.0;
    for v in &values {
        let (r, _) = require_2d("concat_cols", v)?;
        if r != rows {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: values[0].shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
    }
    let total: usize = values.iter().map(|v| v.cols()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for v in &values {
            out.extend_from_slice(v.row(r));
        }
    }
    Ok(tape.push(
        Tensor::from_parts(vec![rows, total], out),
        Op::ConcatCols {
            parts: parts.iter().map(|p| p.id).collect(),
        },
    ))
}

/// Rows of `table` selected by `ids` (embedding lookup).
pub fn gather_rows<'t>(table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
    let t = table.value();
    let (n, d) = require_2d("gather_rows", &t)?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        if i >= n {
            return Err(Error::InvalidArgument(format!("row {i} out of {n}")));
        }
        out.extend_from_slice(t.row(i));
    }
    if ids.is_empty() {
        return Err(Error::InvalidArgument("gather_rows with no ids".into()));
    }
    Ok(table.tape.push(
        Tensor::from_parts(vec![ids.len(), d], out),
        Op::Gather {
            table: table.id,
            ids: ids.to_vec(),
        },
    ))
}

/// Row `u` of the result is `a[u]` where `mask[u]` holds, `b[u]` otherwise.
pub fn where_rows<'t>(mask: &[bool], a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    let (r, c) = require_2d("where_rows", &av)?;
    if av.shape() != bv.shape() || mask.len() != r {
        return Err(Error::ShapeMismatch {
            op: "where_rows",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(r * c);
    for (u, &m) in mask.iter().enumerate() {
        out.extend_from_slice(if m { av.row(u) } else { bv.row(u) });
    }
    Ok(a.tape.push(
        Tensor::from_parts(vec![r, c], out),
        Op::WhereRows {
            mask: mask.to_vec(),
            a: a.id,
            b: b.id,
        },
    ))
}

/// Sliding windows over the rows of `x[T×F]`: output row `t` concatenates input
/// rows `t·stride − pad_left .. + kernel`, zero outside the input. The output has
/// `ceil(T / stride)` rows of width `kernel·F`.
pub fn unfold(x: Var<'_>, kernel: usize, stride: usize, pad_left: usize) -> Result<Var<'_>> {
    let v = x.value();
    let (t_in, f) = require_2d("unfold", &v)?;
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "unfold needs kernel, stride >= 1".into(),
        ));
    }
    let t_out = t_in.div_ceil(stride);
    let mut out = vec![0.0; t_out * kernel * f];
    for t in 0..t_out {
        for j in 0..kernel {
            let src = (t * stride + j) as isize - pad_left as isize;
            if src < 0 || src as usize >= t_in {
                continue;
            }
            let dst = t * kernel * f + j * f;
            out[dst..dst + f].copy_from_slice(v.row(src as usize));
        }
    }
    Ok(x.tape.push(
        Tensor::from_parts(vec![t_out, kernel * f], out),
        Op::Unfold {
            x: x.id,
            kernel,
            stride,
            pad_left,
        },
    ))
}

/// Mean negative log-softmax probability of `targets` over the rows whose target
/// differs from `ignore_index`.
pub fn softmax_cross_entropy<'t>(
    logits: Var<'t>,
    targets: &[usize],
    ignore_index: usize,
) -> Result<Var<'t>> {
    let l = logits.value();
    let (u, v) = require_2d("softmax_cross_entropy", &l)?;
    if targets.len() != u {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: l.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let count = targets.iter().filter(|&&t| t != ignore_index).count();
    if count == 0 {
        return Err(Error::EmptyTarget);
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; u * v];
    let inv = 1.0 / count as f64;
    for (r, &tgt) in targets.iter().enumerate() {
        if tgt == ignore_index {
            continue;
        }
        if tgt >= v {
            return Err(Error::InvalidArgument(format!(
                "target {tgt} outside vocabulary of {v}"
            )));
        }
        let row = l.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - row[tgt];
        for (j, x) in row.iter().enumerate() {
            grad[r * v + j] = (x - lse).exp() * inv;
        }
        grad[r * v + tgt] -= inv;
    }
    Ok(logits.tape.push(
        Tensor::scalar(loss * inv),
        Op::CrossEntropy {
            logits: logits.id,
            grad,
        },
    ))
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn broadcast_result_keeps_the_wider_shape() {
        let tape = Tape::new();
        let m = tape.constant(Tensor::from_rows(&[vec![2.0]]).unwrap());
        let b = tape.constant(Tensor::vector(vec![3.0]));
        assert_eq!(m.add(b).unwrap().shape(), vec![1, 1]);
        assert_eq!(b.add(m).unwrap().shape(), vec![1, 1]);
        assert_eq!(b.mul(m).unwrap().item(), 6.0);

        let wide = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let s = tape.constant(Tensor::from_rows(&[vec![10.0]]).unwrap());
        assert_eq!(
            s.add(wide).unwrap().value().data(),
            &[11.0, 12.0, 13.0, 14.0]
        );
        let row = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        assert_eq!(
            row.mul(wide).unwrap().value().data(),
            &[1.0, -2.0, 3.0, -4.0]
        );
    }
}
