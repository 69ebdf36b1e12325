use anyhow::{bail, Context};
use ciffuse::checkpoint::Checkpoint;
use ciffuse::config::KvConfig;
use ciffuse::data::{self, TaskSpec, Utterance, DATA_HEADER};
use ciffuse::encoders::{
    evaluate_masked, pretrain_mask_predict, LinguisticEncoder, PretrainConfig,
};
use ciffuse::gradcheck::{run_suite, FD_EPS, REL_TOL};
use ciffuse::metrics::corpus_error_rate;
use ciffuse::params::ParamStore;
use ciffuse::training::{write_log_header, TrainConfig, Trainer};
use ciffuse::Error;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ciffuse",
    version,
    about = "Train and decode CIF-fused acoustic/linguistic recognizers on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// Task description (`key = value` lines); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Sampling seed; the task's prototypes come from the spec's own seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write token sequences only, one per line.
        #[arg(long)]
        tokens_only: bool,
    },
    /// Pretrain the linguistic encoder by mask-predict.
    PretrainLm {
        /// Dataset file or one token sequence per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        out: PathBuf,
        /// Training config supplying the linguistic encoder shape.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Held-out text; the last tenth of the corpus is used when omitted.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long, default_value_t = 0.15)]
        mask_rate: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fine-tune the full model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pretrained linguistic checkpoint, or `none`.
        #[arg(long, default_value = "none")]
        lm_init: String,
        /// Output directory for `model.ckpt` and `metrics.tsv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many total steps instead of the configured count.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy decoding with anchor tokens.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Anchor threshold; the checkpoint's value when omitted.
        #[arg(long)]
        th: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus error rate of a hypothesis file against references.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        /// Dataset file or `id<TAB>tokens` lines.
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A failure of the numbers rather than of the inputs.
#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<NumericFailure>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::Domain { .. }
            | Error::NonFiniteGradient(_)
            | Error::ShapeMismatch { .. }
            | Error::NonScalarLoss(_),
        ) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData {
            spec,
            count,
            out,
            seed,
            tokens_only,
        } => gen_data(spec.as_deref(), count, &out, seed, tokens_only),
        Command::PretrainLm {
            corpus,
            steps,
            out,
            config,
            heldout,
            mask_rate,
            batch_size,
            seed,
        } => {
            let cfg = PretrainConfig {
                steps,
                batch_size,
                mask_rate,
                seed,
                ..PretrainConfig::default()
            };
            pretrain_lm(&corpus, &out, config.as_deref(), heldout.as_deref(), &cfg)
        }
        Command::Train {
            data,
            dev,
            config,
            lm_init,
            out,
            seed,
            steps,
            resume,
        } => train(
            &data,
            &dev,
            config.as_deref(),
            &lm_init,
            &out,
            seed,
            steps,
            resume.as_deref(),
        ),
        Command::Decode {
            ckpt,
            data,
            th,
            out,
        } => decode(&ckpt, &data, th, &out),
        Command::Eval { hyp, reference } => eval(&hyp, &reference),
        Command::GradCheck { seed } => grad_check(seed),
    }
}

fn gen_data(
    spec: Option<&Path>,
    count: usize,
    out: &Path,
    seed: u64,
    tokens_only: bool,
) -> anyhow::Result<()> {
    let spec = match spec {
        Some(p) => TaskSpec::from_kv(
            KvConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => TaskSpec::default(),
    };
    let utts = data::generate(&spec, count, seed)?;
    if tokens_only {
        let corpus: Vec<Vec<usize>> = utts.iter().map(|u| u.tokens.clone()).collect();
        data::save_token_corpus(out, &corpus)?;
    } else {
        data::save(out, &utts)?;
    }
    let frames: usize = utts.iter().map(|u| u.frames.rows()).sum();
    let tokens: usize = utts.iter().map(|u| u.tokens.len()).sum();
    println!(
        "wrote {count} utterances to {}: mean T {:.2}, mean n* {:.2}",
        out.display(),
        frames as f64 / count as f64,
        tokens as f64 / count as f64
    );
    Ok(())
}

fn load_train_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::from_kv(
            KvConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => TrainConfig::default(),
    })
}

fn pretrain_lm(
    corpus: &Path,
    out: &Path,
    config: Option<&Path>,
    heldout: Option<&Path>,
    cfg: &PretrainConfig,
) -> anyhow::Result<()> {
    let lm_cfg = load_train_config(config)?.model.linguistic;
    let mut text =
        data::load_token_corpus(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let held = match heldout {
        Some(p) => {
            data::load_token_corpus(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => {
            let keep = text.len() - (text.len() / 10).max(1).min(text.len().saturating_sub(1));
            text.split_off(keep)
        }
    };
    let mut store = ParamStore::new();
    let enc = LinguisticEncoder::new(&mut store, lm_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let losses = pretrain_mask_predict(&enc, &mut store, &text, cfg)?;
    enc.checkpoint(&store).save(out)?;
    if let Some(last) = losses.last() {
        println!("step {}: train masked loss {last:.4}", losses.len());
    }
    if !held.is_empty() && cfg.mask_rate > 0.0 {
        let report = evaluate_masked(&enc, &store, &held, cfg.mask_rate, cfg.seed.wrapping_add(1))?;
        println!(
            "held-out masked loss {:.4}, accuracy {:.2}% over {} masked tokens",
            report.loss,
            100.0 * report.accuracy,
            report.masked
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn load_data(path: &Path) -> anyhow::Result<Vec<Utterance>> {
    data::load(path).with_context(|| format!("reading {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn train(
    data_path: &Path,
    dev_path: &Path,
    config: Option<&Path>,
    lm_init: &str,
    out: &Path,
    seed: Option<u64>,
    steps: Option<u64>,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    let train_data = load_data(data_path)?;
    let dev = load_data(dev_path)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join("metrics.tsv");
    let ckpt_path = out.join("model.ckpt");
    let (mut trainer, mut log) = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("reading {}", p.display()))?;
            let trainer = Trainer::from_checkpoint(&ckpt)?;
            let log = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)?;
            (trainer, BufWriter::new(log))
        }
        None => {
            let mut cfg = load_train_config(config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let mut trainer = Trainer::new(cfg)?;
            if lm_init != "none" {
                let ckpt = Checkpoint::load(Path::new(lm_init))
                    .with_context(|| format!("reading {lm_init}"))?;
                let (_, store) = LinguisticEncoder::from_checkpoint(&ckpt)?;
                trainer.load_linguistic(&store)?;
            }
            let mut log = BufWriter::new(File::create(&log_path)?);
            write_log_header(&trainer.cfg, &mut log)?;
            (trainer, log)
        }
    };
    let until = steps.unwrap_or(trainer.cfg.steps);
    let eval = trainer.run(&train_data, &dev, until, &mut log, Some(&ckpt_path))?;
    log.flush()?;
    if let Some(e) = eval {
        println!(
            "step {}: dev CER {:.2}%, mean length error {:.3}",
            trainer.step, e.cer, e.length_error
        );
    }
    println!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(())
}

fn decode(ckpt: &Path, data_path: &Path, th: Option<f64>, out: &Path) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    let utts = load_data(data_path)?;
    trainer.check_data(&utts)?;
    let th = th.unwrap_or(trainer.cfg.model.fusion.th);
    let mut w =
        BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    let mut anchored = 0;
    for utt in &utts {
        let d = trainer.model.forward_infer(&utt.frames, th)?;
        anchored += d.anchors.iter().filter(|&&a| a).count();
        let toks: Vec<String> = d.tokens.iter().map(usize::to_string).collect();
        writeln!(w, "{}\t{}", utt.id, toks.join(" "))?;
    }
    w.flush()?;
    println!(
        "decoded {} utterances ({anchored} anchor tokens) to {}",
        utts.len(),
        out.display()
    );
    Ok(())
}

fn read_hypotheses(path: &Path) -> anyhow::Result<Vec<(String, Vec<usize>)>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.lines().next().map(str::trim) == Some(DATA_HEADER) {
        let utts = data::read_dataset(text.as_bytes())?;
        return Ok(utts.into_iter().map(|u| (u.id, u.tokens)).collect());
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (id, toks) = line.split_once('\t').unwrap_or((line, ""));
            let toks = toks
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<Vec<usize>, _>>()
                .with_context(|| format!("{}:{}: bad token list", path.display(), i + 1))?;
            Ok((id.to_string(), toks))
        })
        .collect()
}

fn eval(hyp: &Path, reference: &Path) -> anyhow::Result<()> {
    let hyps: HashMap<String, Vec<usize>> = read_hypotheses(hyp)?.into_iter().collect();
    let refs = read_hypotheses(reference)?;
    let mut pairs = Vec::with_capacity(refs.len());
    for (id, r) in refs {
        let Some(h) = hyps.get(&id) else {
            bail!("no hypothesis for `{id}`");
        };
        pairs.push((h.clone(), r));
    }
    let cer = corpus_error_rate(&pairs)?;
    println!("CER {cer:.4}% over {} utterances", pairs.len());
    Ok(())
}

fn grad_check(seed: u64) -> anyhow::Result<()> {
    let results = run_suite(seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:>4}  {:<26} {} instances, max rel err {:.3e}",
            r.name, r.instances, r.max_rel_err
        );
        failed += usize::from(!r.passed());
    }
    println!("eps {FD_EPS:e}, tolerance {REL_TOL:e}");
    if failed > 0 {
        return Err(NumericFailure(format!("{failed} gradient checks failed")).into());
    }
    Ok(())
}
