//! The assembled model: acoustic encoder, CIF, modality projection, gold-rate
//! mixing, linguistic encoder and fused logits.

use crate::autodiff::{softmax_cross_entropy, where_rows, Tape, Var};
use crate::cif::{cif, quantity_loss, CifMode};
use crate::config::KvConfig;
use crate::ctc::{ctc_loss, CtcTarget};
use crate::data::Utterance;
use crate::encoders::{AcousticConfig, AcousticEncoder, LinguisticConfig, LinguisticEncoder};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub lambda_ac: f64,
    pub lambda_lm: f64,
    /// Weight of the quantity loss.
    pub mu1: f64,
    /// Weight of the CTC loss.
    pub mu2: f64,
    /// Anchor confidence threshold used at inference.
    pub th: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda_ac: 1.0,
            lambda_lm: 0.2,
            mu1: 0.2,
            mu2: 1.0,
            th: 0.8,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ac", self.lambda_ac),
            ("lambda_lm", self.lambda_lm),
            ("mu1", self.mu1),
            ("mu2", self.mu2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.th.is_nan() {
            return Err(Error::Config("th is NaN".into()));
        }
        Ok(())
    }
}

/// Architecture and loss weights; everything needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelConfig {
    pub acoustic: AcousticConfig,
    pub linguistic: LinguisticConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn take_kv(&mut self, kv: &mut KvConfig) -> Result<()> {
        let ac = &mut self.acoustic;
        kv.take("feat_dim", &mut ac.feat_dim)?;
        let mut strides = join_list(&ac.strides);
        kv.take("strides", &mut strides)?;
        ac.strides = parse_list(&strides)?;
        kv.take("ac_dim", &mut ac.content_dim)?;
        kv.take("ac_blocks", &mut ac.blocks)?;
        kv.take("ac_heads", &mut ac.heads)?;
        kv.take("ac_ff_dim", &mut ac.ff_dim)?;
        self.linguistic.take_kv(kv)?;
        let f = &mut self.fusion;
        kv.take("lambda_ac", &mut f.lambda_ac)?;
        kv.take("lambda_lm", &mut f.lambda_lm)?;
        kv.take("mu1", &mut f.mu1)?;
        kv.take("mu2", &mut f.mu2)?;
        kv.take("th", &mut f.th)?;
        self.fusion.validate()
    }

    pub fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        let ac = &self.acoustic;
        let mut out = vec![
            ("feat_dim", ac.feat_dim.to_string()),
            ("strides", join_list(&ac.strides)),
            ("ac_dim", ac.content_dim.to_string()),
            ("ac_blocks", ac.blocks.to_string()),
            ("ac_heads", ac.heads.to_string()),
            ("ac_ff_dim", ac.ff_dim.to_string()),
        ];
        out.extend(self.linguistic.kv_pairs());
        let f = &self.fusion;
        out.extend([
            ("lambda_ac", f.lambda_ac.to_string()),
            ("lambda_lm", f.lambda_lm.to_string()),
            ("mu1", f.mu1.to_string()),
            ("mu2", f.mu2.to_string()),
            ("th", f.th.to_string()),
        ]);
        out
    }
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad stride list `{s}`: {e}")))
        })
        .collect()
}

/// Probability of feeding the gold token embedding instead of the acoustic
/// vector, decayed linearly from `start` to `end` over `decay_steps`.
/// `decay_steps = None` holds `start` forever.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoldRateSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: Option<u64>,
}

impl GoldRateSchedule {
    pub fn new(start: f64, end: f64, decay_steps: Option<u64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) {
            return Err(Error::Config(format!(
                "gold rates must lie in [0, 1], got {start} -> {end}"
            )));
        }
        if decay_steps == Some(0) {
            return Err(Error::Config("gold_steps must be positive or none".into()));
        }
        Ok(Self {
            start,
            end,
            decay_steps,
        })
    }

    pub fn constant(p: f64) -> Result<Self> {
        Self::new(p, p, None)
    }

    pub fn at(&self, step: u64) -> f64 {
        match self.decay_steps {
            None => self.start,
            Some(n) if step >= n => self.end,
            Some(n) => self.start + (self.end - self.start) * (step as f64 / n as f64),
        }
    }
}

impl Default for GoldRateSchedule {
    fn default() -> Self {
        Self {
            start: 0.9,
            end: 0.2,
            decay_steps: Some(4000),
        }
    }
}

/// `λ_AC·l_ac + λ_LM·l_lm`.
pub fn fuse_logits(l_ac: &Tensor, l_lm: &Tensor, lambda_ac: f64, lambda_lm: f64) -> Result<Tensor> {
    if l_ac.shape() != l_lm.shape() {
        return Err(Error::ShapeMismatch {
            op: "fuse_logits",
            lhs: l_ac.shape().to_vec(),
            rhs: l_lm.shape().to_vec(),
        });
    }
    let data = l_ac
        .data()
        .iter()
        .zip(l_lm.data())
        .map(|(a, b)| lambda_ac * a + lambda_lm * b)
        .collect();
    Tensor::new(l_ac.shape().to_vec(), data)
}

/// Independent Bernoulli(p) draw per position.
pub fn sample_replacement<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..len).map(|_| rng.random_bool(p)).collect()
}

/// Positions whose top softmax probability is strictly above `th`.
pub fn anchor_set(logits: &Tensor, th: f64) -> Vec<bool> {
    (0..logits.rows())
        .map(|u| {
            let row = logits.row(u);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            1.0 / z > th
        })
        .collect()
}

pub struct FusionOutput<'t> {
    pub loss: Var<'t>,
    pub ce: Var<'t>,
    pub qua: Var<'t>,
    /// `None` when the target cannot be aligned to the encoder output.
    pub ctc: Option<Var<'t>>,
    pub logits_ac: Var<'t>,
    pub logits_lm: Var<'t>,
    pub fused: Var<'t>,
    pub replaced: Vec<bool>,
    pub predicted_length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub anchors: Vec<bool>,
    pub predicted_length: f64,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub acoustic: AcousticEncoder,
    pub linguistic: LinguisticEncoder,
    pub modality_fc: Linear,
    pub to_vocab_1: Linear,
    pub to_vocab_2: Linear,
}

impl FusionModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.fusion.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let acoustic = AcousticEncoder::new(&mut store, cfg.acoustic.clone(), &mut rng)?;
        let linguistic = LinguisticEncoder::new(&mut store, cfg.linguistic.clone(), &mut rng)?;
        let d = cfg.acoustic.content_dim;
        let d_l = cfg.linguistic.dim;
        let v = cfg.linguistic.vocab_size;
        let modality_fc = Linear::new(&mut store, "fusion.modality_fc", d, d_l, &mut rng);
        let to_vocab_1 = Linear::new(&mut store, "fusion.to_vocab_1", d_l, v, &mut rng);
        let to_vocab_2 = Linear::new(&mut store, "fusion.to_vocab_2", d + 1, v + 1, &mut rng);
        let mut model = Self {
            cfg,
            store,
            acoustic,
            linguistic,
            modality_fc,
            to_vocab_1,
            to_vocab_2,
        };
        model.copy_output_heads();
        Ok(model)
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.linguistic.vocab_size
    }

    /// CTC blank id, one past the vocabulary.
    pub fn blank(&self) -> usize {
        self.vocab_size()
    }

    /// Value-copies `to_vocab_0` into `to_vocab_1` and into the token columns of
    /// `to_vocab_2`. Rows of `to_vocab_2` beyond the linguistic width are zeroed.
    fn copy_output_heads(&mut self) {
        let w0 = self.store.get(self.linguistic.to_vocab_0.weight).clone();
        let b0 = self.store.get(self.linguistic.to_vocab_0.bias).clone();
        *self.store.get_mut(self.to_vocab_1.weight) = w0.clone();
        *self.store.get_mut(self.to_vocab_1.bias) = b0.clone();
        let v = self.vocab_size();
        let (rows_in, d_l) = (self.to_vocab_2.in_dim, w0.rows());
        let w2 = self.store.get_mut(self.to_vocab_2.weight);
        for r in 0..rows_in {
            for c in 0..v {
                w2.data_mut()[r * (v + 1) + c] = if r < d_l { w0.data()[r * v + c] } else { 0.0 };
            }
        }
        let b2 = self.store.get_mut(self.to_vocab_2.bias);
        b2.data_mut()[..v].copy_from_slice(b0.data());
    }

    /// Loads every `lm.*` parameter from a pretrained store, then re-copies the
    /// output heads from the loaded `to_vocab_0`.
    pub fn load_linguistic(&mut self, pretrained: &ParamStore) -> Result<()> {
        let mut loaded = 0;
        for (_, name, value) in pretrained.iter() {
            if !name.starts_with("lm.") {
                continue;
            }
            let id = self.store.id(name).ok_or_else(|| {
                Error::VocabMismatch(format!("pretrained parameter `{name}` has no counterpart"))
            })?;
            if self.store.get(id).shape() != value.shape() {
                return Err(Error::VocabMismatch(format!(
                    "pretrained `{name}` has shape {:?}, model expects {:?}",
                    value.shape(),
                    self.store.get(id).shape()
                )));
            }
            self.store.set(id, value.clone())?;
            loaded += 1;
        }
        let expected = self
            .store
            .iter()
            .filter(|(_, n, _)| n.starts_with("lm."))
            .count();
        if loaded != expected {
            return Err(Error::VocabMismatch(format!(
                "pretrained store provides {loaded} of {expected} linguistic parameters"
            )));
        }
        self.copy_output_heads();
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyTarget);
        }
        match tokens.iter().find(|&&t| t >= self.vocab_size()) {
            Some(t) => Err(Error::VocabMismatch(format!(
                "token {t} outside model vocabulary of {}",
                self.vocab_size()
            ))),
            None => Ok(()),
        }
    }

    /// Training forward pass with gold rate `p`, built on `tape`.
    pub fn forward_train<'t, R: Rng + ?Sized>(
        &'t self,
        tape: &'t Tape,
        utt: &Utterance,
        p: f64,
        rng: &mut R,
    ) -> Result<FusionOutput<'t>> {
        self.forward_train_with(tape, utt, |n| sample_replacement(n, p, rng))
    }

    /// As [`forward_train`](Self::forward_train) with an explicit replacement mask.
    pub fn forward_train_with<'t>(
        &'t self,
        tape: &'t Tape,
        utt: &Utterance,
        replacement: impl FnOnce(usize) -> Vec<bool>,
    ) -> Result<FusionOutput<'t>> {
        self.check_tokens(&utt.tokens)?;
        let f = &self.cfg.fusion;
        let ctx = Ctx::new(tape, &self.store);
        let n_star = utt.tokens.len();
        let h_ac = self
            .acoustic
            .encode(ctx, ctx.constant(utt.frames.clone()))?;

        let c = cif(h_ac, CifMode::Train { n_star })?;
        let qua = quantity_loss(c.alpha, n_star);

        let log_probs = self.to_vocab_2.forward(ctx, h_ac)?.log_softmax_rows();
        let ctc = ctc_loss(
            log_probs,
            &CtcTarget::new(utt.tokens.clone(), self.blank())?,
        )?;
        let ctc = ctc.feasible.then_some(ctc.loss);

        let h_lm = self.modality_fc.forward(ctx, c.integrated)?;
        let logits_ac = self.to_vocab_1.forward(ctx, h_lm)?;

        let replaced = replacement(n_star);
        let gold = self.linguistic.embed(ctx, &utt.tokens)?;
        let mixed = where_rows(&replaced, gold, h_lm)?;
        let logits_lm = self
            .linguistic
            .logits(ctx, self.linguistic.encode(ctx, mixed)?)?;

        let fused = logits_ac
            .scale(f.lambda_ac)
            .add(logits_lm.scale(f.lambda_lm))?;
        let ce = softmax_cross_entropy(fused, &utt.tokens, crate::IGNORE_INDEX)?;
        let mut loss = ce.add(qua.scale(f.mu1))?;
        if let Some(ctc) = ctc {
            loss = loss.add(ctc.scale(f.mu2))?;
        }
        Ok(FusionOutput {
            loss,
            ce,
            qua,
            ctc,
            logits_ac,
            logits_lm,
            fused,
            replaced,
            predicted_length: c.predicted_length,
        })
    }

    /// Greedy non-autoregressive decoding with anchor tokens above `th`.
    pub fn forward_infer(&self, frames: &Tensor, th: f64) -> Result<Decoded> {
        let f = &self.cfg.fusion;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let h_ac = self.acoustic.encode(ctx, ctx.constant(frames.clone()))?;
        let c = cif(h_ac, CifMode::Infer)?;
        if c.fired_count == 0 {
            return Ok(Decoded {
                tokens: vec![],
                anchors: vec![],
                predicted_length: c.predicted_length,
            });
        }
        let h_lm = self.modality_fc.forward(ctx, c.integrated)?;
        let logits_ac = self.to_vocab_1.forward(ctx, h_lm)?.value();
        let anchors = anchor_set(&logits_ac, th);
        let guesses = logits_ac.argmax_rows();
        let mixed = where_rows(&anchors, self.linguistic.embed(ctx, &guesses)?, h_lm)?;
        let logits_lm = self
            .linguistic
            .logits(ctx, self.linguistic.encode(ctx, mixed)?)?
            .value();
        let fused = fuse_logits(&logits_ac, &logits_lm, f.lambda_ac, f.lambda_lm)?;
        Ok(Decoded {
            tokens: fused.argmax_rows(),
            anchors,
            predicted_length: c.predicted_length,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            acoustic: AcousticConfig {
                feat_dim: 4,
                strides: vec![2],
                content_dim: 6,
                blocks: 1,
                heads: 1,
                ff_dim: 8,
                positional: true,
            },
            linguistic: LinguisticConfig {
                vocab_size: 5,
                dim: 8,
                blocks: 1,
                heads: 2,
                ff_dim: 8,
                positional: true,
            },
            fusion: FusionConfig::default(),
        }
    }

    fn utterance(seed: u64) -> Utterance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Utterance {
            id: "u".into(),
            frames: Tensor::normal(&[12, 4], 1.0, &mut rng),
            tokens: vec![1, 3, 0],
        }
    }

    #[test]
    fn gold_rate_schedule_endpoints() {
        let s = GoldRateSchedule::default();
        assert_eq!(s.at(0), 0.9);
        assert_eq!(s.at(4000), 0.2);
        assert_eq!(s.at(10_000), 0.2);
        assert!((s.at(2000) - 0.55).abs() < 1e-12);
        let flat = GoldRateSchedule::constant(0.2).unwrap();
        assert!([0, 1, 4000, u64::MAX].iter().all(|&t| flat.at(t) == 0.2));
        assert!(GoldRateSchedule::new(1.2, 0.2, Some(10)).is_err());
        assert!(GoldRateSchedule::new(0.9, 0.2, Some(0)).is_err());
    }

    #[test]
    fn fuse_logits_identities() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.3, 0.1, -0.4, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(fuse_logits(&a, &b, 1.0, 0.0).unwrap(), a);
        let neg = Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| -x).collect()).unwrap();
        assert!(fuse_logits(&a, &neg, 1.0, 1.0)
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));
        let shift = |t: &Tensor, k: [f64; 2]| {
            let mut t = t.clone();
            let c = t.cols();
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x += k[i / c];
            }
            t
        };
        let base = fuse_logits(&a, &b, 1.0, 0.2).unwrap().argmax_rows();
        let moved =
            fuse_logits(&shift(&a, [5.0, -3.0]), &shift(&b, [5.0, -3.0]), 1.0, 0.2).unwrap();
        assert_eq!(moved.argmax_rows(), base);
        assert!(fuse_logits(&a, &Tensor::zeros(&[3, 2]), 1.0, 1.0).is_err());
    }

    #[test]
    fn replacement_frequency_matches_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = sample_replacement(10_000, 0.3, &mut rng);
        let freq = draws.iter().filter(|&&b| b).count() as f64 / 10_000.0;
        assert!((0.27..=0.33).contains(&freq), "{freq}");
    }

    #[test]
    fn output_heads_start_as_copies() {
        let m = FusionModel::new(tiny_config(), 0).unwrap();
        let w0 = m.store.get(m.linguistic.to_vocab_0.weight);
        assert_eq!(m.store.get(m.to_vocab_1.weight), w0);
        let w2 = m.store.get(m.to_vocab_2.weight);
        for r in 0..w2.rows() {
            for c in 0..5 {
                let expect = if r < 8 { w0.at(r, c) } else { 0.0 };
                assert_eq!(w2.at(r, c), expect);
            }
        }
        assert_ne!(m.to_vocab_1.weight, m.linguistic.to_vocab_0.weight);
    }

    #[test]
    fn full_gold_rate_isolates_modality_projection_from_linguistic_path() {
        let mut cfg = tiny_config();
        cfg.fusion.lambda_ac = 0.0;
        cfg.fusion.mu1 = 0.0;
        cfg.fusion.mu2 = 0.0;
        let m = FusionModel::new(cfg, 1).unwrap();
        let tape = Tape::new();
        let out = m
            .forward_train_with(&tape, &utterance(1), |n| vec![true; n])
            .unwrap();
        let g = tape.backward(out.loss).unwrap();
        for id in [m.modality_fc.weight, m.modality_fc.bias] {
            let gt = g
                .param(id)
                .unwrap_or_else(|| Tensor::zeros(m.store.get(id).shape()));
            assert!(gt.data().iter().all(|&x| x == 0.0));
        }
        // With the highway active, modality_fc gets gradient only through it.
        let mut cfg = tiny_config();
        cfg.fusion.mu1 = 0.0;
        cfg.fusion.mu2 = 0.0;
        let m = FusionModel::new(cfg, 1).unwrap();
        let tape = Tape::new();
        let out = m
            .forward_train_with(&tape, &utterance(1), |n| vec![true; n])
            .unwrap();
        let g = tape.backward(out.loss).unwrap();
        assert!(g.param(m.modality_fc.weight).unwrap().norm() > 0.0);
    }

    #[test]
    fn zero_lm_weight_starves_linguistic_parameters() {
        let mut cfg = tiny_config();
        cfg.fusion.lambda_lm = 0.0;
        cfg.fusion.mu1 = 0.0;
        cfg.fusion.mu2 = 0.0;
        let m = FusionModel::new(cfg, 2).unwrap();
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m
            .forward_train(&tape, &utterance(2), 0.5, &mut rng)
            .unwrap();
        let g = tape.backward(out.loss).unwrap();
        for (id, name, _) in m.store.iter() {
            if name.starts_with("lm.") {
                let gt = g
                    .param(id)
                    .unwrap_or_else(|| Tensor::zeros(m.store.get(id).shape()));
                assert!(gt.data().iter().all(|&x| x == 0.0), "{name}");
            }
        }
        assert!(g.param(m.to_vocab_1.weight).unwrap().norm() > 0.0);
    }

    #[test]
    fn anchors_grow_as_threshold_drops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let logits = Tensor::normal(&[6, 5], 3.0, &mut rng);
            let mut prev = anchor_set(&logits, 1.0);
            assert!(!prev.contains(&true));
            for th in [0.95, 0.8, 0.5, 0.2, 0.0] {
                let cur = anchor_set(&logits, th);
                assert!(prev.iter().zip(&cur).all(|(p, c)| !p || *c));
                prev = cur;
            }
        }
    }

    #[test]
    fn zero_lm_weight_decodes_the_highway_argmax() {
        let mut cfg = tiny_config();
        cfg.fusion.lambda_lm = 0.0;
        let m = FusionModel::new(cfg, 5).unwrap();
        let frames = utterance(5).frames;
        let a = m.forward_infer(&frames, 0.0).unwrap();
        let b = m.forward_infer(&frames, 1.0).unwrap();
        assert_eq!(a.tokens, b.tokens);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &m.store);
        let h = m.acoustic.encode(ctx, ctx.constant(frames)).unwrap();
        let c = cif(h, CifMode::Infer).unwrap();
        let l = m
            .to_vocab_1
            .forward(ctx, m.modality_fc.forward(ctx, c.integrated).unwrap())
            .unwrap();
        assert_eq!(a.tokens, l.value().argmax_rows());
        assert_eq!(a, m.forward_infer(&utterance(5).frames, 0.0).unwrap());
    }

    #[test]
    fn empty_target_is_rejected() {
        let m = FusionModel::new(tiny_config(), 0).unwrap();
        let mut u = utterance(0);
        u.tokens.clear();
        let tape = Tape::new();
        assert!(matches!(
            m.forward_train(&tape, &u, 0.0, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::EmptyTarget)
        ));
    }
}
