//! Desk-scale acoustic and linguistic encoders.
//!
//! The acoustic encoder is a strided convolutional front-end followed by
//! self-attention blocks; its output has `d + 1` channels, the last of which
//! is read by CIF as a firing weight logit. The linguistic encoder is a small
//! bidirectional transformer with its own embedding table and output
//! projection (`to_vocab_0`), pre-trainable with a mask-predict objective.

use crate::autodiff::{gather_rows, softmax_cross_entropy, unfold, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{render, KvConfig};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Ctx, LayerNorm, Linear, TransformerBlock, EMBED_STD};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::training::{Adam, GradBuffer, LrSchedule};
use crate::IGNORE_INDEX;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticConfig {
    pub feat_dim: usize,
    /// Stride of each front-end convolution; their product is the downsampling factor.
    pub strides: Vec<usize>,
    /// Content width `d`; the encoder emits `d + 1` channels.
    pub content_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub positional: bool,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            feat_dim: 8,
            strides: vec![2, 2],
            content_dim: 32,
            blocks: 2,
            heads: 3,
            ff_dim: 64,
            positional: true,
        }
    }
}

impl AcousticConfig {
    pub fn width(&self) -> usize {
        self.content_dim + 1
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn output_len(&self, t_in: usize) -> usize {
        self.strides.iter().fold(t_in, |t, s| t.div_ceil(*s))
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    proj: Linear,
    stride: usize,
}

impl ConvLayer {
    fn kernel(&self) -> usize {
        self.stride + 2
    }
}

#[derive(Clone, Debug)]
pub struct AcousticEncoder {
    pub cfg: AcousticConfig,
    front: Vec<ConvLayer>,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNorm,
    out: Linear,
}

impl AcousticEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: AcousticConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.strides.is_empty() || cfg.strides.contains(&0) {
            return Err(Error::Config(
                "acoustic strides must be non-empty and positive".into(),
            ));
        }
        let width = cfg.width();
        let mut front = Vec::with_capacity(cfg.strides.len());
        let mut in_dim = cfg.feat_dim;
        for (i, &stride) in cfg.strides.iter().enumerate() {
            let kernel = stride + 2;
            let proj = Linear::new(store, &format!("ac.conv{i}"), kernel * in_dim, width, rng);
            front.push(ConvLayer { proj, stride });
            in_dim = width;
        }
        let blocks = (0..cfg.blocks)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("ac.block{i}"),
                    width,
                    cfg.heads,
                    cfg.ff_dim,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let final_ln = LayerNorm::new(store, "ac.final_ln", width);
        let out = Linear::new(store, "ac.out", width, width, rng);
        // The firing-weight logit starts at zero so every frame begins with alpha = 0.5.
        let w = store.get_mut(out.weight);
        for r in 0..width {
            w.data_mut()[r * width + width - 1] = 0.0;
        }
        Ok(Self {
            cfg,
            front,
            blocks,
            final_ln,
            out,
        })
    }

    /// `frames[T×F] → h_ac[ceil(T/s) × (d+1)]`.
    pub fn encode<'t>(&self, ctx: Ctx<'t>, frames: Var<'t>) -> Result<Var<'t>> {
        let shape = frames.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty or non-matrix acoustic input {shape:?}"
            )));
        }
        if shape[1] != self.cfg.feat_dim {
            return Err(Error::ShapeMismatch {
                op: "encode_acoustic",
                lhs: shape,
                rhs: vec![self.cfg.feat_dim],
            });
        }
        let mut x = frames;
        for layer in &self.front {
            let windows = unfold(x, layer.kernel(), layer.stride, 1)?;
            x = layer.proj.forward(ctx, windows)?.relu();
        }
        if self.cfg.positional {
            let pe = sinusoidal_positions(x.shape()[0], self.cfg.width());
            x = x.add(ctx.constant(pe))?;
        }
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        let x = self.final_ln.forward(ctx, x)?;
        self.out.forward(ctx, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinguisticConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub positional: bool,
}

impl Default for LinguisticConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            dim: 32,
            blocks: 2,
            heads: 4,
            ff_dim: 64,
            positional: true,
        }
    }
}

impl LinguisticConfig {
    pub fn take_kv(&mut self, kv: &mut KvConfig) -> Result<()> {
        kv.take("vocab_size", &mut self.vocab_size)?;
        kv.take("lm_dim", &mut self.dim)?;
        kv.take("lm_blocks", &mut self.blocks)?;
        kv.take("lm_heads", &mut self.heads)?;
        kv.take("lm_ff_dim", &mut self.ff_dim)?;
        Ok(())
    }

    pub fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("lm_dim", self.dim.to_string()),
            ("lm_blocks", self.blocks.to_string()),
            ("lm_heads", self.heads.to_string()),
            ("lm_ff_dim", self.ff_dim.to_string()),
        ]
    }

    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.take_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        render(&self.kv_pairs())
    }
}

/// Bidirectional transformer over token-level vectors.
///
/// The embedding table has one extra row, `vocab_size`, used as the mask token.
/// `embedding` and `to_vocab_0` are separate parameters.
#[derive(Clone, Debug)]
pub struct LinguisticEncoder {
    pub cfg: LinguisticConfig,
    pub embedding: ParamId,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNorm,
    pub to_vocab_0: Linear,
}

impl LinguisticEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: LinguisticConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.vocab_size < 2 {
            return Err(Error::Config("linguistic vocab_size must be >= 2".into()));
        }
        let embedding = store.register(
            "lm.embedding",
            Tensor::normal(&[cfg.vocab_size + 1, cfg.dim], EMBED_STD, rng),
        );
        let blocks = (0..cfg.blocks)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("lm.block{i}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.ff_dim,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let final_ln = LayerNorm::new(store, "lm.final_ln", cfg.dim);
        let to_vocab_0 = Linear::new(store, "lm.to_vocab_0", cfg.dim, cfg.vocab_size, rng);
        Ok(Self {
            cfg,
            embedding,
            blocks,
            final_ln,
            to_vocab_0,
        })
    }

    pub fn mask_token(&self) -> usize {
        self.cfg.vocab_size
    }

    pub fn embed<'t>(&self, ctx: Ctx<'t>, ids: &[usize]) -> Result<Var<'t>> {
        gather_rows(ctx.p(self.embedding), ids)
    }

    /// `inputs[U×d_l] → hidden[U×d_l]` with full bidirectional attention.
    pub fn encode<'t>(&self, ctx: Ctx<'t>, inputs: Var<'t>) -> Result<Var<'t>> {
        let shape = inputs.shape();
        if shape.len() != 2 || shape[1] != self.cfg.dim || shape[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "encode_linguistic",
                lhs: shape,
                rhs: vec![self.cfg.dim],
            });
        }
        let mut x = inputs;
        if self.cfg.positional {
            x = x.add(ctx.constant(sinusoidal_positions(shape[0], self.cfg.dim)))?;
        }
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        self.final_ln.forward(ctx, x)
    }

    /// `to_vocab_0` applied to encoder output.
    pub fn logits<'t>(&self, ctx: Ctx<'t>, hidden: Var<'t>) -> Result<Var<'t>> {
        self.to_vocab_0.forward(ctx, hidden)
    }

    fn check_vocab(&self, seq: &[usize]) -> Result<()> {
        match seq.iter().find(|&&t| t >= self.cfg.vocab_size) {
            Some(t) => Err(Error::VocabMismatch(format!(
                "token {t} outside linguistic vocabulary of {}",
                self.cfg.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Mask-predict loss for one sequence: masked positions are fed the mask
    /// embedding and scored by cross-entropy; the rest are ignored.
    pub fn masked_lm_loss<'t>(
        &self,
        ctx: Ctx<'t>,
        seq: &[usize],
        mask: &[bool],
    ) -> Result<(Var<'t>, Var<'t>)> {
        self.check_vocab(seq)?;
        let inputs: Vec<usize> = seq
            .iter()
            .zip(mask)
            .map(|(&t, &m)| if m { self.mask_token() } else { t })
            .collect();
        let targets: Vec<usize> = seq
            .iter()
            .zip(mask)
            .map(|(&t, &m)| if m { t } else { IGNORE_INDEX })
            .collect();
        let hidden = self.encode(ctx, self.embed(ctx, &inputs)?)?;
        let logits = self.logits(ctx, hidden)?;
        Ok((
            softmax_cross_entropy(logits, &targets, IGNORE_INDEX)?,
            logits,
        ))
    }
}

impl LinguisticEncoder {
    pub fn checkpoint(&self, store: &ParamStore) -> Checkpoint {
        let mut ckpt = Checkpoint::new("lm", store.clone());
        ckpt.config = self
            .cfg
            .kv_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        ckpt
    }

    /// Rebuilds an encoder and its parameters from a `lm` checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ParamStore)> {
        ckpt.require_kind("lm")?;
        let cfg = LinguisticConfig::from_kv(ckpt.config_kv()?)?;
        let mut store = ParamStore::new();
        let enc = Self::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.restore_into(&mut store)?;
        Ok((enc, store))
    }
}

/// Masks each position with probability `rate`. A positive rate always masks at
/// least one position.
pub fn sample_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(rate)).collect();
    if rate > 0.0 && len > 0 && !mask.contains(&true) {
        mask[rng.random_range(0..len)] = true;
    }
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            mask_rate: 0.15,
            schedule: LrSchedule {
                warmup_steps: 100,
                peak_lr: 3e-3,
                hold_steps: 1000,
                decay_rate: 0.999,
            },
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLmReport {
    pub loss: f64,
    pub accuracy: f64,
    pub masked: usize,
}

/// Trains `encoder`'s parameters in `store` by mask-predict on `corpus`.
/// Returns the mean batch loss of every step.
pub fn pretrain_mask_predict(
    encoder: &LinguisticEncoder,
    store: &mut ParamStore,
    corpus: &[Vec<usize>],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() || corpus.iter().all(Vec::is_empty) {
        return Err(Error::InvalidArgument("pretraining corpus is empty".into()));
    }
    for seq in corpus {
        encoder.check_vocab(seq)?;
    }
    let mut adam = Adam::new(store);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step);
        let mut grads = GradBuffer::new(store);
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let seq = &corpus[rng.random_range(0..corpus.len())];
            if seq.is_empty() {
                continue;
            }
            let mask = sample_mask(seq.len(), cfg.mask_rate, &mut rng);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, store);
            let (loss, _) = encoder.masked_lm_loss(ctx, seq, &mask)?;
            total += loss.item();
            grads.accumulate(&tape.backward(loss)?);
        }
        grads.scale(1.0 / cfg.batch_size as f64);
        grads.clip_global_norm(cfg.clip_norm);
        adam.update(store, &grads, cfg.schedule.lr_at(step + 1))?;
        losses.push(total / cfg.batch_size as f64);
    }
    Ok(losses)
}

/// Masked-token loss and top-1 accuracy over `corpus` with a seeded mask.
pub fn evaluate_masked(
    encoder: &LinguisticEncoder,
    store: &ParamStore,
    corpus: &[Vec<usize>],
    mask_rate: f64,
    seed: u64,
) -> Result<MaskedLmReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut loss_sum, mut correct, mut masked) = (0.0, 0usize, 0usize);
    for seq in corpus.iter().filter(|s| !s.is_empty()) {
        let mask = sample_mask(seq.len(), mask_rate, &mut rng);
        let tape = Tape::new();
        let (loss, logits) = encoder.masked_lm_loss(Ctx::new(&tape, store), seq, &mask)?;
        let n = mask.iter().filter(|&&m| m).count();
        loss_sum += loss.item() * n as f64;
        let pred = logits.value().argmax_rows();
        for (u, &m) in mask.iter().enumerate() {
            if m {
                correct += usize::from(pred[u] == seq[u]);
            }
        }
        masked += n;
    }
    if masked == 0 {
        return Err(Error::EmptyTarget);
    }
    Ok(MaskedLmReport {
        loss: loss_sum / masked as f64,
        accuracy: correct as f64 / masked as f64,
        masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn small_acoustic(strides: Vec<usize>) -> (ParamStore, AcousticEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AcousticConfig {
            feat_dim: 4,
            strides,
            content_dim: 5,
            blocks: 1,
            heads: 2,
            ff_dim: 8,
            positional: true,
        };
        let enc = AcousticEncoder::new(&mut store, cfg, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn acoustic_shape_contract() {
        let (store, enc) = small_acoustic(vec![4]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let frames = tape.constant(Tensor::uniform(&[8, 4], 1.0, &mut rand::rng()));
        assert_eq!(enc.encode(ctx, frames).unwrap().shape(), vec![2, 6]);
        let frames = tape.constant(Tensor::uniform(&[9, 4], 1.0, &mut rand::rng()));
        assert_eq!(enc.encode(ctx, frames).unwrap().shape(), vec![3, 6]);
    }

    #[test]
    fn zero_input_fires_at_half_weight() {
        let (store, enc) = small_acoustic(vec![2, 2]);
        let tape = Tape::new();
        let h = enc
            .encode(
                Ctx::new(&tape, &store),
                tape.constant(Tensor::zeros(&[8, 4])),
            )
            .unwrap();
        let alpha = crate::cif::attention_weights(h).unwrap().value();
        assert!(alpha.data().iter().all(|&a| a == 0.5), "{alpha:?}");
    }

    #[test]
    fn empty_acoustic_input_is_rejected() {
        let (store, enc) = small_acoustic(vec![2]);
        let tape = Tape::new();
        let frames = tape.constant(Tensor::from_parts(vec![0, 4], vec![]));
        assert!(enc.encode(Ctx::new(&tape, &store), frames).is_err());
    }

    #[test]
    fn single_position_linguistic_shape() {
        let mut store = ParamStore::new();
        let enc = LinguisticEncoder::new(&mut store, LinguisticConfig::default(), &mut rand::rng())
            .unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let out = enc.encode(ctx, enc.embed(ctx, &[3]).unwrap()).unwrap();
        assert_eq!(out.shape(), vec![1, 32]);
    }

    #[test]
    fn embedding_and_output_projection_are_untied() {
        let mut store = ParamStore::new();
        let enc = LinguisticEncoder::new(&mut store, LinguisticConfig::default(), &mut rand::rng())
            .unwrap();
        assert_ne!(enc.embedding, enc.to_vocab_0.weight);
        assert_eq!(store.get(enc.embedding).shape(), &[17, 32]);
        assert_eq!(store.get(enc.to_vocab_0.weight).shape(), &[32, 16]);
    }

    #[test]
    fn zero_mask_rate_has_no_targets() {
        let mut store = ParamStore::new();
        let enc = LinguisticEncoder::new(&mut store, LinguisticConfig::default(), &mut rand::rng())
            .unwrap();
        let cfg = PretrainConfig {
            steps: 1,
            mask_rate: 0.0,
            ..PretrainConfig::default()
        };
        let err = pretrain_mask_predict(&enc, &mut store, &[vec![1, 2, 3]], &cfg).unwrap_err();
        assert!(matches!(err, Error::EmptyTarget), "{err}");
    }

    #[test]
    fn zero_steps_changes_nothing() {
        let mut store = ParamStore::new();
        let enc = LinguisticEncoder::new(&mut store, LinguisticConfig::default(), &mut rand::rng())
            .unwrap();
        let before = store.clone();
        let cfg = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        pretrain_mask_predict(&enc, &mut store, &[vec![1, 2, 3]], &cfg).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn out_of_vocabulary_corpus_is_rejected() {
        let mut store = ParamStore::new();
        let enc = LinguisticEncoder::new(&mut store, LinguisticConfig::default(), &mut rand::rng())
            .unwrap();
        let err =
            pretrain_mask_predict(&enc, &mut store, &[vec![1, 16]], &PretrainConfig::default())
                .unwrap_err();
        assert!(matches!(err, Error::VocabMismatch(_)));
    }

    #[test]
    fn positive_rate_masks_something() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert!(sample_mask(3, 0.01, &mut rng).contains(&true));
        }
        assert!(!sample_mask(5, 0.0, &mut rng).contains(&true));
    }
}
