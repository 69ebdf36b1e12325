//! Connectionist temporal classification: log-space forward/backward loss and
//! greedy decoding.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label sequence for CTC, excluding the blank symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtcTarget {
    tokens: Vec<usize>,
    blank: usize,
}

impl CtcTarget {
    pub fn new(tokens: Vec<usize>, blank: usize) -> Result<Self> {
        if tokens.contains(&blank) {
            return Err(Error::InvalidArgument(format!(
                "target contains blank id {blank}"
            )));
        }
        Ok(Self { tokens, blank })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    /// Target interleaved with blanks: `−, y1, −, y2, …, −` (length `2n+1`).
    pub fn extended(&self) -> Vec<usize> {
        let mut ext = Vec::with_capacity(2 * self.tokens.len() + 1);
        ext.push(self.blank);
        for &t in &self.tokens {
            ext.push(t);
            ext.push(self.blank);
        }
        ext
    }

    /// Fewest frames any valid alignment needs: one per token plus a blank
    /// between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        let repeats = self.tokens.windows(2).filter(|w| w[0] == w[1]).count();
        self.tokens.len() + repeats
    }
}

#[derive(Debug)]
pub struct CtcLoss<'t> {
    /// Negative log-likelihood; `+∞` when no alignment exists.
    pub loss: Var<'t>,
    /// `false` when the input is too short for the target. The gradient is zero then.
    pub feasible: bool,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `log_probs[T×V]`, with its gradient w.r.t. `log_probs`.
///
/// Returns `None` when the target cannot be aligned to `T` frames.
pub fn ctc_nll_and_grad(log_probs: &Tensor, target: &CtcTarget) -> Result<Option<(f64, Tensor)>> {
    let shape = log_probs.shape();
    let [t_len, vocab] = shape[..] else {
        return Err(Error::InvalidArgument(format!(
            "log_probs must be 2-D, got {shape:?}"
        )));
    };
    if target.blank >= vocab || target.tokens.iter().any(|&t| t >= vocab) {
        return Err(Error::InvalidArgument(format!(
            "target id outside vocabulary of {vocab}"
        )));
    }
    if t_len == 0 || target.min_frames() > t_len {
        return Ok(None);
    }
    let ext = target.extended();
    let s_len = ext.len();
    let lp = |t: usize, s: usize| log_probs.data()[t * vocab + ext[s]];
    // Transition s-2 -> s is allowed for labels that differ from the one two back.
    let skip = |s: usize| s >= 2 && ext[s] != target.blank && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return Ok(None);
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }

    // d(−log p)/d lp[t,k] = −Σ_{s: ext[s]=k} α_t(s) β_t(s) / (y_t(k) p)
    let mut grad = vec![0.0; t_len * vocab];
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == ninf {
                continue;
            }
            grad[t * vocab + ext[s]] -= (ab - lp(t, s) - log_p).exp();
        }
    }
    Ok(Some((-log_p, Tensor::from_parts(vec![t_len, vocab], grad))))
}

/// CTC loss on a tape. `log_probs` rows must be log-softmax normalized.
pub fn ctc_loss<'t>(log_probs: Var<'t>, target: &CtcTarget) -> Result<CtcLoss<'t>> {
    let lp = log_probs.value();
    let tape = log_probs.tape();
    Ok(match ctc_nll_and_grad(&lp, target)? {
        Some((nll, grad)) => CtcLoss {
            loss: tape.scalar_with_grad(log_probs, nll, grad),
            feasible: true,
        },
        None => CtcLoss {
            loss: tape.scalar_with_grad(log_probs, f64::INFINITY, Tensor::zeros(lp.shape())),
            feasible: false,
        },
    })
}

/// Per-frame argmax, consecutive repeats collapsed, blanks removed.
pub fn ctc_greedy_decode(log_probs: &Tensor, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for k in log_probs.argmax_rows() {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}
