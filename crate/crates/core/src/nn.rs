//! Layers shared by both encoders: projections, pre-norm transformer blocks
//! and sinusoidal positions.

use crate::autodiff::{concat_cols, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

/// Projection weights are drawn from `U(-INIT_BOUND, INIT_BOUND)`.
pub const INIT_BOUND: f64 = 0.08;
/// Embedding tables are drawn from `N(0, EMBED_STD²)`.
pub const EMBED_STD: f64 = 0.02;

/// A tape paired with the parameter values it binds.
#[derive(Clone, Copy)]
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub store: &'t ParamStore,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            Tensor::uniform(&[in_dim, out_dim], INIT_BOUND, rng),
        );
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x · W + b` for `x` of shape `[rows × in_dim]`.
    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(ctx.p(self.weight))?.add(ctx.p(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(ctx.p(self.gain), ctx.p(self.bias))
    }
}

/// Unmasked multi-head self-attention.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide width {width}"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, rng),
            heads,
        })
    }

    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let q = self.query.forward(ctx, x)?;
        let k = self.key.forward(ctx, x)?;
        let v = self.value.forward(ctx, x)?;
        let head_dim = self.query.out_dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let s = h * head_dim;
                (
                    q.narrow_cols(s, head_dim)?,
                    k.narrow_cols(s, head_dim)?,
                    v.narrow_cols(s, head_dim)?,
                )
            };
            let scores = qh.matmul(kh.t()?)?.scale(scale);
            outs.push(scores.softmax_rows().matmul(vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            concat_cols(&outs)?
        };
        self.out.forward(ctx, merged)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln_attn: LayerNorm,
    attn: SelfAttention,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width),
            attn: SelfAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), width),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), width, ff_dim, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_dim, width, rng),
        })
    }

    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let a = self.attn.forward(ctx, self.ln_attn.forward(ctx, x)?)?;
        let x = x.add(a)?;
        let h = self.ff_in.forward(ctx, self.ln_ff.forward(ctx, x)?)?.relu();
        x.add(self.ff_out.forward(ctx, h)?)
    }
}

/// Sinusoidal position table of shape `[len × dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_parts(vec![len, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_start_with_sin_cos_of_zero() {
        let p = sinusoidal_positions(3, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.at(1, 0) - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = rand::rng();
        assert!(SelfAttention::new(&mut store, "a", 33, 4, &mut rng).is_err());
    }
}
