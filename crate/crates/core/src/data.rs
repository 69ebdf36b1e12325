//! Synthetic monotonic-alignment transduction tasks and their file format.
//!
//! Each token id owns a fixed Gaussian prototype frame. An utterance is a
//! token sequence drawn from a sparse first-order grammar; every token is
//! rendered as its prototype repeated a random number of times with additive
//! Gaussian noise. The grammar moves from `v` to `(v + o) mod V` for one of
//! `branching` fixed offsets `o`, so the token marginal is uniform and
//! neighbouring tokens constrain each other.
//!
//! Dataset files are line oriented:
//!
//! ```text
//! cif-fuse-data v1
//! utt <id> <T> <F> <n*>
//! <n* token ids>
//! <T lines of F values>
//! ```

use crate::config::{render, KvConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const DATA_HEADER: &str = "cif-fuse-data v1";

/// Offset separating utterance sampling seeds from the task seed space.
const SAMPLE_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub repeat_min: usize,
    pub repeat_max: usize,
    pub noise: f64,
    pub len_min: usize,
    pub len_max: usize,
    /// Number of admissible successors per token (1 makes the grammar deterministic).
    pub branching: usize,
    /// Seeds the prototypes and the grammar.
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            feat_dim: 8,
            repeat_min: 2,
            repeat_max: 6,
            noise: 0.1,
            len_min: 3,
            len_max: 10,
            branching: 2,
            seed: 0,
        }
    }
}

/// Fixed structure of a task: prototypes and successor offsets.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    pub prototypes: Tensor,
    pub offsets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T × F]` acoustic frames.
    pub frames: Tensor,
    pub tokens: Vec<usize>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("task spec: {m}")));
        if self.vocab_size < 2 {
            return bad("vocab_size must be >= 2");
        }
        if self.repeat_min < 1 || self.repeat_max < self.repeat_min {
            return bad("need 1 <= repeat_min <= repeat_max");
        }
        if self.len_min < 1 || self.len_max < self.len_min {
            return bad("need 1 <= len_min <= len_max");
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be >= 1");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and >= 0");
        }
        if self.branching < 1 || self.branching >= self.vocab_size {
            return bad("need 1 <= branching < vocab_size");
        }
        Ok(())
    }

    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let mut s = Self::default();
        kv.take("vocab_size", &mut s.vocab_size)?;
        kv.take("feat_dim", &mut s.feat_dim)?;
        kv.take("repeat_min", &mut s.repeat_min)?;
        kv.take("repeat_max", &mut s.repeat_max)?;
        kv.take("noise", &mut s.noise)?;
        kv.take("len_min", &mut s.len_min)?;
        kv.take("len_max", &mut s.len_max)?;
        kv.take("branching", &mut s.branching)?;
        kv.take("seed", &mut s.seed)?;
        kv.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_kv(&self) -> String {
        render(&[
            ("vocab_size", self.vocab_size.to_string()),
            ("feat_dim", self.feat_dim.to_string()),
            ("repeat_min", self.repeat_min.to_string()),
            ("repeat_max", self.repeat_max.to_string()),
            ("noise", self.noise.to_string()),
            ("len_min", self.len_min.to_string()),
            ("len_max", self.len_max.to_string()),
            ("branching", self.branching.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    pub fn build(&self) -> Result<Task> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let prototypes = Tensor::normal(&[self.vocab_size, self.feat_dim], 1.0, &mut rng);
        rng.set_stream(1);
        let mut pool: Vec<usize> = (1..self.vocab_size).collect();
        let mut offsets = Vec::with_capacity(self.branching);
        for _ in 0..self.branching {
            let i = rng.random_range(0..pool.len());
            offsets.push(pool.swap_remove(i));
        }
        Ok(Task {
            spec: self.clone(),
            prototypes,
            offsets,
        })
    }
}

impl Task {
    pub fn successors(&self, token: usize) -> Vec<usize> {
        self.offsets
            .iter()
            .map(|o| (token + o) % self.spec.vocab_size)
            .collect()
    }

    pub fn sample_tokens<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let s = &self.spec;
        let n = rng.random_range(s.len_min..=s.len_max);
        let mut tokens = Vec::with_capacity(n);
        let mut cur = rng.random_range(0..s.vocab_size);
        tokens.push(cur);
        for _ in 1..n {
            let o = self.offsets[rng.random_range(0..self.offsets.len())];
            cur = (cur + o) % s.vocab_size;
            tokens.push(cur);
        }
        tokens
    }

    fn render<R: Rng + ?Sized>(&self, tokens: &[usize], rng: &mut R) -> Tensor {
        let s = &self.spec;
        let noise = Normal::new(0.0, s.noise).expect("validated noise");
        let mut data = Vec::new();
        for &tok in tokens {
            let reps = rng.random_range(s.repeat_min..=s.repeat_max);
            for _ in 0..reps {
                for &p in self.prototypes.row(tok) {
                    let n = if s.noise > 0.0 {
                        noise.sample(rng)
                    } else {
                        0.0
                    };
                    data.push(p + n);
                }
            }
        }
        let t = data.len() / s.feat_dim;
        Tensor::from_parts(vec![t, s.feat_dim], data)
    }

    fn utterance_rng(sample_seed: u64, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed.wrapping_add(SAMPLE_SEED_SALT));
        rng.set_stream(index as u64);
        rng
    }

    /// Utterance `index` of the corpus drawn with `sample_seed`. Each index has its
    /// own random stream, so corpora can be produced in any order.
    pub fn utterance(&self, sample_seed: u64, index: usize) -> Utterance {
        let mut rng = Self::utterance_rng(sample_seed, index);
        let tokens = self.sample_tokens(&mut rng);
        let frames = self.render(&tokens, &mut rng);
        Utterance {
            id: format!("s{sample_seed}-{index:06}"),
            frames,
            tokens,
        }
    }

    pub fn generate(&self, count: usize, sample_seed: u64) -> Result<Vec<Utterance>> {
        if count == 0 {
            return Err(Error::InvalidArgument("count must be >= 1".into()));
        }
        Ok((0..count).map(|i| self.utterance(sample_seed, i)).collect())
    }

    /// Token sequences only, for language-model pretraining.
    pub fn generate_text(&self, count: usize, sample_seed: u64) -> Vec<Vec<usize>> {
        (0..count)
            .map(|i| self.sample_tokens(&mut Self::utterance_rng(sample_seed, i)))
            .collect()
    }
}

/// Builds the task described by `spec` and draws `count` utterances.
pub fn generate(spec: &TaskSpec, count: usize, sample_seed: u64) -> Result<Vec<Utterance>> {
    spec.build()?.generate(count, sample_seed)
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_dataset<W: Write>(out: W, data: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{DATA_HEADER}")?;
    for u in data {
        let (t, f) = (u.frames.rows(), u.frames.cols());
        writeln!(w, "utt {} {t} {f} {}", u.id, u.tokens.len())?;
        writeln!(w, "{}", join(&u.tokens))?;
        for r in 0..t {
            // `{}` on f64 prints the shortest string that parses back to the same bits.
            writeln!(w, "{}", join(u.frames.row(r)))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save(path: &Path, data: &[Utterance]) -> Result<()> {
    write_dataset(std::fs::File::create(path)?, data)
}

pub(crate) struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    pub(crate) fn new(input: R) -> Self {
        Self {
            inner: input.lines(),
            line: 0,
        }
    }

    pub(crate) fn next(&mut self) -> Result<Option<String>> {
        match self.inner.next() {
            None => Ok(None),
            Some(l) => {
                self.line += 1;
                Ok(Some(l?))
            }
        }
    }

    pub(crate) fn expect(&mut self, what: &str) -> Result<String> {
        self.next()?.ok_or_else(|| Error::Parse {
            line: self.line + 1,
            msg: format!("unexpected end of file, expected {what}"),
        })
    }

    pub(crate) fn err(&self, msg: String) -> Error {
        Error::Parse {
            line: self.line,
            msg,
        }
    }
}

pub(crate) fn parse_fields<T: std::str::FromStr>(line: &str) -> Option<Vec<T>> {
    line.split_whitespace().map(|v| v.parse().ok()).collect()
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<Utterance>> {
    let mut lines = Lines::new(input);
    let header = lines.expect("header")?;
    if header.trim() != DATA_HEADER {
        return Err(Error::Version {
            expected: DATA_HEADER.into(),
            found: header,
        });
    }
    let mut out = Vec::new();
    while let Some(head) = lines.next()? {
        if head.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = head.split_whitespace().collect();
        let ["utt", id, t, f, n] = parts[..] else {
            return Err(lines.err(format!("malformed record header `{head}`")));
        };
        let dims: Option<Vec<usize>> = [t, f, n].iter().map(|v| v.parse().ok()).collect();
        let Some([t, f, n]) = dims.as_deref().map(|d| [d[0], d[1], d[2]]) else {
            return Err(lines.err(format!("record `{id}`: bad extents in `{head}`")));
        };
        let what = format!("token line of record `{id}`");
        let tok_line = lines.expect(&what)?;
        let tokens: Vec<usize> = parse_fields(&tok_line)
            .filter(|v: &Vec<usize>| v.len() == n)
            .ok_or_else(|| lines.err(format!("record `{id}`: expected {n} token ids")))?;
        let mut data = Vec::with_capacity(t * f);
        for r in 0..t {
            let what = format!("frame {r} of record `{id}`");
            let row = lines.expect(&what)?;
            let vals: Vec<f64> = parse_fields(&row)
                .filter(|v: &Vec<f64>| v.len() == f)
                .ok_or_else(|| lines.err(format!("record `{id}`: frame {r} needs {f} values")))?;
            data.extend(vals);
        }
        let frames =
            Tensor::new(vec![t, f], data).map_err(|e| lines.err(format!("record `{id}`: {e}")))?;
        out.push(Utterance {
            id: id.to_string(),
            frames,
            tokens,
        });
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<Utterance>> {
    read_dataset(BufReader::new(std::fs::File::open(path)?))
}

/// Token sequences from either a dataset file or a plain file with one
/// whitespace-separated sequence per line.
pub fn load_token_corpus(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path)?;
    if text.lines().next().map(str::trim) == Some(DATA_HEADER) {
        return Ok(read_dataset(text.as_bytes())?
            .into_iter()
            .map(|u| u.tokens)
            .collect());
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            parse_fields(l).ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected token ids, found `{l}`"),
            })
        })
        .collect()
}

pub fn save_token_corpus(path: &Path, corpus: &[Vec<usize>]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for seq in corpus {
        writeln!(w, "{}", join(seq))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> TaskSpec {
        TaskSpec {
            noise: 0.0,
            repeat_min: 1,
            repeat_max: 1,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn noiseless_frames_are_prototypes() {
        let task = noiseless().build().unwrap();
        for u in task.generate(50, 3).unwrap() {
            assert_eq!(u.frames.rows(), u.tokens.len());
            for (r, &tok) in u.tokens.iter().enumerate() {
                assert_eq!(u.frames.row(r), task.prototypes.row(tok));
            }
        }
    }

    #[test]
    fn nearest_prototype_recovers_tokens_without_noise() {
        let task = noiseless().build().unwrap();
        let mut errors = 0;
        for u in task.generate(100, 9).unwrap() {
            for (r, &tok) in u.tokens.iter().enumerate() {
                let frame = u.frames.row(r);
                let best = (0..task.spec.vocab_size)
                    .min_by(|&a, &b| {
                        let da: f64 = task
                            .prototypes
                            .row(a)
                            .iter()
                            .zip(frame)
                            .map(|(p, x)| (p - x).powi(2))
                            .sum();
                        let db: f64 = task
                            .prototypes
                            .row(b)
                            .iter()
                            .zip(frame)
                            .map(|(p, x)| (p - x).powi(2))
                            .sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                errors += usize::from(best != tok);
            }
        }
        assert_eq!(errors, 0);
    }

    #[test]
    fn frame_count_respects_repeat_bounds() {
        let spec = TaskSpec::default();
        for u in generate(&spec, 200, 1).unwrap() {
            let n = u.tokens.len();
            assert!((spec.len_min..=spec.len_max).contains(&n));
            let t = u.frames.rows();
            assert!(
                t >= spec.repeat_min * n && t <= spec.repeat_max * n,
                "T={t}, n={n}"
            );
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = TaskSpec::default();
        assert_eq!(
            generate(&spec, 20, 5).unwrap(),
            generate(&spec, 20, 5).unwrap()
        );
        assert_ne!(
            generate(&spec, 20, 5).unwrap(),
            generate(&spec, 20, 6).unwrap()
        );
    }

    #[test]
    fn sequences_follow_grammar() {
        let task = TaskSpec::default().build().unwrap();
        for seq in task.generate_text(100, 2) {
            for w in seq.windows(2) {
                assert!(task.successors(w[0]).contains(&w[1]));
                assert_ne!(w[0], w[1]);
            }
        }
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(generate(&TaskSpec::default(), 0, 0).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            TaskSpec {
                repeat_min: 0,
                ..TaskSpec::default()
            },
            TaskSpec {
                vocab_size: 1,
                branching: 1,
                ..TaskSpec::default()
            },
            TaskSpec {
                branching: 16,
                ..TaskSpec::default()
            },
        ] {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let data = generate(&TaskSpec::default(), 5, 11).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), data);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            format!("{DATA_HEADER}\n")
        );
        assert!(read_dataset(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_names_the_record() {
        let data = generate(&TaskSpec::default(), 2, 11).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text
            .lines()
            .take(text.lines().count() - 3)
            .map(|l| format!("{l}\n"))
            .collect();
        let err = read_dataset(cut.as_bytes()).unwrap_err().to_string();
        assert!(err.contains(&data[1].id), "{err}");
    }

    #[test]
    fn wrong_header_is_a_version_error() {
        let err = read_dataset("cif-fuse-data v0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Version { .. }));
    }

    #[test]
    fn spec_kv_round_trip() {
        let spec = TaskSpec {
            noise: 0.25,
            seed: 42,
            ..TaskSpec::default()
        };
        let back = TaskSpec::from_kv(KvConfig::parse(&spec.to_kv()).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
