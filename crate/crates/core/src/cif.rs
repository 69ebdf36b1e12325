//! Parameter-free continuous integrate-and-fire.
//!
//! The last channel of the acoustic representation is read as a raw firing
//! weight; the remaining channels are the content that gets integrated into
//! token-level vectors. In training the weights are rescaled to sum to the
//! reference length, at inference the rounded weight sum sets the number of
//! emitted vectors.
//!
//! Integration fills unit-capacity cells left to right. A frame whose weight
//! crosses a cell boundary is split: the part that completes the current cell
//! stays there and the remainder opens the next one. Reaching exactly 1.0
//! fires. In inference mode exactly `round(n̂)` cells are emitted, so mass past
//! the last cell is dropped and the last cell may hold less than 1.0.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the number of emitted vectors is determined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifMode {
    /// Rescale weights so they sum to the reference length.
    Train { n_star: usize },
    /// Round the predicted length.
    Infer,
}

#[derive(Debug)]
pub struct CifResult<'t> {
    /// Per-frame weights in (0, 1).
    pub alpha: Var<'t>,
    /// Weights rescaled to sum to `n*` (training only).
    pub alpha_resized: Option<Var<'t>>,
    /// Integrated token-level vectors, `[fired_count × d]`.
    pub integrated: Var<'t>,
    /// `Σ alpha`.
    pub predicted_length: f64,
    pub fired_count: usize,
}

/// `sigmoid` of the last channel of `h_ac[T×(d+1)]`, as a length-`T` vector.
pub fn attention_weights<'t>(h_ac: Var<'t>) -> Result<Var<'t>> {
    let shape = h_ac.shape();
    let [t, w] = shape[..] else {
        return Err(Error::InvalidArgument(format!(
            "h_ac must be 2-D, got {shape:?}"
        )));
    };
    if t == 0 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "h_ac shape {shape:?} too small for CIF"
        )));
    }
    Ok(h_ac.narrow_cols(w - 1, 1)?.reshape(&[t])?.sigmoid())
}

/// Rescales `alpha` so it sums to `n_star`; gradients flow through the sum.
pub fn resize_weights<'t>(alpha: Var<'t>, n_star: usize) -> Result<Var<'t>> {
    let total = alpha.sum();
    if total.item() <= 0.0 {
        return Err(Error::Domain {
            op: "resize_weights",
            detail: "weights sum to zero".into(),
        });
    }
    alpha.mul(total.recip()?.scale(n_star as f64))
}

/// Integrates `content[T×d]` under `weights[T]` into exactly `firing_target` vectors.
pub fn integrate_and_fire<'t>(
    weights: Var<'t>,
    content: Var<'t>,
    firing_target: usize,
) -> Result<Var<'t>> {
    let ws = weights.shape();
    let cs = content.shape();
    if cs.len() != 2 || ws != [cs[0]] {
        return Err(Error::ShapeMismatch {
            op: "integrate_and_fire",
            lhs: ws,
            rhs: cs,
        });
    }
    if firing_target == 0 {
        return Ok(weights
            .tape()
            .constant(Tensor::from_parts(vec![0, cs[1]], vec![])));
    }
    weights.cif_assign(firing_target)?.matmul(content)
}

/// `|n* − Σ alpha|`, with subgradient 0 at the kink.
pub fn quantity_loss<'t>(alpha: Var<'t>, n_star: usize) -> Var<'t> {
    alpha.sum().shift(-(n_star as f64)).abs()
}

/// Round-half-up, with anything below 0.5 firing nothing.
pub fn round_length(n_hat: f64) -> usize {
    if n_hat < 0.5 {
        0
    } else {
        (n_hat + 0.5).floor() as usize
    }
}

/// `(Σ alpha, round(Σ alpha))`.
pub fn predict_length(alpha: &Tensor) -> (f64, usize) {
    let n_hat = alpha.sum();
    (n_hat, round_length(n_hat))
}

/// Full CIF pass over `h_ac[T×(d+1)]`.
pub fn cif<'t>(h_ac: Var<'t>, mode: CifMode) -> Result<CifResult<'t>> {
    let alpha = attention_weights(h_ac)?;
    let width = h_ac.shape()[1];
    let content = h_ac.narrow_cols(0, width - 1)?;
    let (predicted_length, rounded) = predict_length(&alpha.value());
    let (weights, resized, fired) = match mode {
        CifMode::Train { n_star } => {
            let r = resize_weights(alpha, n_star)?;
            (r, Some(r), n_star)
        }
        CifMode::Infer => (alpha, None, rounded),
    };
    let integrated = integrate_and_fire(weights, content, fired)?;
    Ok(CifResult {
        alpha,
        alpha_resized: resized,
        integrated,
        predicted_length,
        fired_count: fired,
    })
}
