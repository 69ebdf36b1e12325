//! Optimization and the fine-tuning loop.

mod optim;

pub use optim::{Adam, GradBuffer, LrSchedule, Phase};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::{render, KvConfig};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, GoldRateSchedule, ModelConfig};
use crate::metrics::corpus_error_rate;
use crate::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

const BATCH_SEED_SALT: u64 = 0xD1B5_4A32_D192_ED03;

pub const LOG_COLUMNS: [&str; 8] = ["step", "L", "L_ce", "L_qua", "L_ctc", "gold", "lr", "CER"];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub gold: GoldRateSchedule,
    pub schedule: LrSchedule,
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Toy-scale defaults. The acoustic encoder downsamples by 2 here, since at 4
    /// many synthetic utterances end up with fewer frames than tokens.
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.acoustic.strides = vec![2];
        Self {
            model,
            gold: GoldRateSchedule::default(),
            schedule: LrSchedule::toy(),
            steps: 10_000,
            batch_size: 16,
            eval_every: 500,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let mut c = Self::default();
        c.model.take_kv(&mut kv)?;
        let mut gold_steps = match c.gold.decay_steps {
            Some(n) => n.to_string(),
            None => "none".into(),
        };
        kv.take("gold_start", &mut c.gold.start)?;
        kv.take("gold_end", &mut c.gold.end)?;
        kv.take("gold_steps", &mut gold_steps)?;
        let decay_steps = match gold_steps.as_str() {
            "none" | "inf" | "∞" => None,
            s => Some(
                s.parse()
                    .map_err(|e| Error::Config(format!("gold_steps `{s}`: {e}")))?,
            ),
        };
        c.gold = GoldRateSchedule::new(c.gold.start, c.gold.end, decay_steps)?;
        let s = &mut c.schedule;
        kv.take("warmup_steps", &mut s.warmup_steps)?;
        kv.take("peak_lr", &mut s.peak_lr)?;
        kv.take("hold_steps", &mut s.hold_steps)?;
        kv.take("decay_rate", &mut s.decay_rate)?;
        kv.take("steps", &mut c.steps)?;
        kv.take("batch_size", &mut c.batch_size)?;
        kv.take("eval_every", &mut c.eval_every)?;
        kv.take("clip_norm", &mut c.clip_norm)?;
        kv.take("seed", &mut c.seed)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.fusion.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_size and eval_every must be positive".into(),
            ));
        }
        if !(self.clip_norm > 0.0)
            || !(self.schedule.peak_lr > 0.0)
            || self.schedule.warmup_steps == 0
        {
            return Err(Error::Config(
                "clip_norm, peak_lr and warmup_steps must be positive".into(),
            ));
        }
        if !(self.schedule.decay_rate > 0.0 && self.schedule.decay_rate <= 1.0) {
            return Err(Error::Config("decay_rate must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = self.model.kv_pairs();
        out.extend([
            ("gold_start", self.gold.start.to_string()),
            ("gold_end", self.gold.end.to_string()),
            (
                "gold_steps",
                self.gold
                    .decay_steps
                    .map_or("none".into(), |n| n.to_string()),
            ),
            ("warmup_steps", self.schedule.warmup_steps.to_string()),
            ("peak_lr", self.schedule.peak_lr.to_string()),
            ("hold_steps", self.schedule.hold_steps.to_string()),
            ("decay_rate", self.schedule.decay_rate.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("seed", self.seed.to_string()),
        ]);
        out
    }

    pub fn to_kv(&self) -> String {
        render(&self.kv_pairs())
    }
}

/// Batch means of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub ce: f64,
    pub qua: f64,
    /// Mean over utterances whose target fits the encoder output; `inf` if none did.
    pub ctc: f64,
    pub gold: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub cer: f64,
    /// Mean `|Σα − n*|`.
    pub length_error: f64,
    pub hypotheses: Vec<Vec<usize>>,
}

/// Decodes `data` with threshold `th` and scores it against the references.
pub fn evaluate(model: &FusionModel, data: &[Utterance], th: f64) -> Result<EvalStats> {
    let mut pairs = Vec::with_capacity(data.len());
    let mut len_err = 0.0;
    for utt in data {
        let d = model.forward_infer(&utt.frames, th)?;
        len_err += (d.predicted_length - utt.tokens.len() as f64).abs();
        pairs.push((d.tokens, utt.tokens.clone()));
    }
    let cer = corpus_error_rate(&pairs)?;
    Ok(EvalStats {
        cer,
        length_error: len_err / data.len() as f64,
        hypotheses: pairs.into_iter().map(|(h, _)| h).collect(),
    })
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: FusionModel,
    pub adam: Adam,
    pub step: u64,
    pub last: Option<StepStats>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = FusionModel::new(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(&model.store);
        Ok(Self {
            cfg,
            model,
            adam,
            step: 0,
            last: None,
        })
    }

    /// Initializes the linguistic side from a pretrained store before training starts.
    pub fn load_linguistic(&mut self, pretrained: &ParamStore) -> Result<()> {
        if self.step != 0 {
            return Err(Error::InvalidArgument(
                "linguistic init after training started".into(),
            ));
        }
        self.model.load_linguistic(pretrained)
    }

    /// Rejects data whose tokens or frame width do not fit the model.
    pub fn check_data(&self, data: &[Utterance]) -> Result<()> {
        let v = self.model.vocab_size();
        let f = self.cfg.model.acoustic.feat_dim;
        for utt in data {
            if let Some(t) = utt.tokens.iter().find(|&&t| t >= v) {
                return Err(Error::VocabMismatch(format!(
                    "utterance `{}` has token {t}, model vocabulary is {v}",
                    utt.id
                )));
            }
            if utt.frames.cols() != f {
                return Err(Error::VocabMismatch(format!(
                    "utterance `{}` has {}-dim frames, model expects {f}",
                    utt.id,
                    utt.frames.cols()
                )));
            }
        }
        Ok(())
    }

    pub fn train_step(&mut self, data: &[Utterance]) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ BATCH_SEED_SALT);
        rng.set_stream(self.step);
        let gold = self.cfg.gold.at(self.step);
        let lr = self.cfg.schedule.lr_at(self.step + 1);
        let n = self.cfg.batch_size as f64;
        let mut grads = GradBuffer::new(&self.model.store);
        let (mut loss, mut ce, mut qua) = (0.0, 0.0, 0.0);
        let (mut ctc, mut feasible) = (0.0, 0usize);
        for _ in 0..self.cfg.batch_size {
            let utt = &data[rng.random_range(0..data.len())];
            let tape = Tape::new();
            let out = self.model.forward_train(&tape, utt, gold, &mut rng)?;
            loss += out.loss.item();
            ce += out.ce.item();
            qua += out.qua.item();
            if let Some(c) = out.ctc {
                ctc += c.item();
                feasible += 1;
            }
            grads.accumulate(&tape.backward(out.loss)?);
        }
        grads.scale(1.0 / n);
        grads.clip_global_norm(self.cfg.clip_norm);
        self.adam.update(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        let stats = StepStats {
            step: self.step,
            loss: loss / n,
            ce: ce / n,
            qua: qua / n,
            ctc: if feasible == 0 {
                f64::INFINITY
            } else {
                ctc / feasible as f64
            },
            gold,
            lr,
        };
        self.last = Some(stats.clone());
        Ok(stats)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new("fusion", self.model.store.clone());
        ckpt.meta = vec![
            ("step".into(), self.step.to_string()),
            (
                "phase".into(),
                self.cfg.schedule.phase(self.step).to_string(),
            ),
        ];
        ckpt.config = self
            .cfg
            .kv_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        ckpt.adam = Some(self.adam.clone());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.require_kind("fusion")?;
        let cfg = TrainConfig::from_kv(ckpt.config_kv()?)?;
        let mut trainer = Self::new(cfg)?;
        ckpt.restore_into(&mut trainer.model.store)?;
        if let Some(adam) = ckpt.adam_for(&trainer.model.store)? {
            trainer.adam = adam;
        }
        trainer.step = ckpt
            .meta("step")
            .ok_or_else(|| Error::Config("checkpoint lacks a step".into()))?
            .parse()
            .map_err(|e| Error::Config(format!("bad checkpoint step: {e}")))?;
        Ok(trainer)
    }

    /// Trains until `until` steps, evaluating on `dev` every `eval_every` steps and
    /// at the end. Each evaluation appends a log line and rewrites `ckpt_path`.
    pub fn run(
        &mut self,
        train: &[Utterance],
        dev: &[Utterance],
        until: u64,
        log: &mut dyn Write,
        ckpt_path: Option<&Path>,
    ) -> Result<Option<EvalStats>> {
        self.check_data(train)?;
        self.check_data(dev)?;
        let mut last_eval = None;
        let mut evaluated_at = None;
        while self.step < until {
            self.train_step(train)?;
            if self.step.is_multiple_of(self.cfg.eval_every) {
                last_eval = self.report(dev, log, ckpt_path)?;
                evaluated_at = Some(self.step);
            }
        }
        if evaluated_at != Some(self.step) {
            last_eval = self.report(dev, log, ckpt_path)?;
        }
        Ok(last_eval)
    }

    fn report(
        &self,
        dev: &[Utterance],
        log: &mut dyn Write,
        ckpt_path: Option<&Path>,
    ) -> Result<Option<EvalStats>> {
        let eval = if dev.is_empty() {
            None
        } else {
            Some(evaluate(&self.model, dev, self.cfg.model.fusion.th)?)
        };
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.6}"));
        let s = self.last.as_ref();
        writeln!(
            log,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6e}\t{}",
            self.step,
            f(s.map(|s| s.loss)),
            f(s.map(|s| s.ce)),
            f(s.map(|s| s.qua)),
            f(s.map(|s| s.ctc)),
            self.cfg.gold.at(self.step),
            self.cfg.schedule.lr_at(self.step),
            eval.as_ref()
                .map_or("-".to_string(), |e| format!("{:.4}", e.cer)),
        )?;
        log.flush()?;
        if let Some(path) = ckpt_path {
            self.checkpoint().save(path)?;
        }
        Ok(eval)
    }
}

/// Config echo followed by the column header of the metrics log.
pub fn write_log_header(cfg: &TrainConfig, log: &mut dyn Write) -> Result<()> {
    for (k, v) in cfg.kv_pairs() {
        writeln!(log, "# {k} = {v}")?;
    }
    writeln!(log, "{}", LOG_COLUMNS.join("\t"))?;
    Ok(())
}
