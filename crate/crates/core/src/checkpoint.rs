//! Versioned, self-describing text checkpoints.
//!
//! ```text
//! cif-fuse-ckpt v1
//! kind fusion
//! meta step 50
//! meta phase warmup
//! config lm_dim = 32
//! param lm.embedding 2 17 32
//! <row-major values>
//! adam 50
//! moments lm.embedding
//! <first moments>
//! <second moments>
//! end
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! save/load cycle is bit-exact.

use crate::config::KvConfig;
use crate::data::{parse_fields, Lines};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::Adam;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const CKPT_HEADER: &str = "cif-fuse-ckpt v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the parameters belong to, e.g. `fusion` or `lm`.
    pub kind: String,
    /// Trainer state such as `step` and `phase`.
    pub meta: Vec<(String, String)>,
    /// Rendered `key = value` configuration.
    pub config: Vec<(String, String)>,
    pub params: ParamStore,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn new(kind: &str, params: ParamStore) -> Self {
        Self {
            kind: kind.into(),
            meta: vec![],
            config: vec![],
            params,
            adam: None,
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )))
        }
    }

    pub fn config_kv(&self) -> Result<KvConfig> {
        let text: String = self
            .config
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        KvConfig::parse(&text)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "{CKPT_HEADER}").unwrap();
        writeln!(s, "kind {}", self.kind).unwrap();
        for (k, v) in &self.meta {
            writeln!(s, "meta {k} {v}").unwrap();
        }
        for (k, v) in &self.config {
            writeln!(s, "config {k} = {v}").unwrap();
        }
        for (_, name, t) in self.params.iter() {
            write!(s, "param {name} {}", t.shape().len()).unwrap();
            for d in t.shape() {
                write!(s, " {d}").unwrap();
            }
            s.push('\n');
            push_values(&mut s, t);
        }
        if let Some(adam) = &self.adam {
            writeln!(s, "adam {}", adam.step).unwrap();
            for (id, name, _) in self.params.iter() {
                writeln!(s, "moments {name}").unwrap();
                push_values(&mut s, &adam.m[id.index()]);
                push_values(&mut s, &adam.v[id.index()]);
            }
        }
        s.push_str("end\n");
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, buf)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = Lines::new(input);
        let header = lines.expect("header")?;
        if header.trim() != CKPT_HEADER {
            return Err(Error::Version {
                expected: CKPT_HEADER.into(),
                found: header,
            });
        }
        let kind_line = lines.expect("kind line")?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| lines.err(format!("expected `kind`, got `{kind_line}`")))?
            .trim()
            .to_string();
        let mut ckpt = Checkpoint::new(&kind, ParamStore::new());
        loop {
            let line = lines.expect("`end`")?;
            let (tag, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            match tag {
                "end" => break,
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ckpt.meta.push((k.to_string(), v.to_string()));
                }
                "config" => {
                    let (k, v) = rest
                        .split_once('=')
                        .ok_or_else(|| lines.err(format!("malformed config line `{line}`")))?;
                    ckpt.config
                        .push((k.trim().to_string(), v.trim().to_string()));
                }
                "param" => {
                    let fields: Vec<&str> = rest.split_whitespace().collect();
                    let shape: Option<Vec<usize>> = fields
                        .get(1..)
                        .and_then(|f| f.iter().map(|x| x.parse().ok()).collect());
                    let name = fields.first().copied().unwrap_or_default();
                    let shape = match shape {
                        Some(s) if !s.is_empty() && s[0] == s.len() - 1 => s[1..].to_vec(),
                        _ => return Err(lines.err(format!("malformed param header `{line}`"))),
                    };
                    let values = read_values(&mut lines, name, shape.iter().product())?;
                    if ckpt.params.id(name).is_some() {
                        return Err(lines.err(format!("duplicate parameter `{name}`")));
                    }
                    ckpt.params.register(name, Tensor::new(shape, values)?);
                }
                "adam" => {
                    let step = rest
                        .trim()
                        .parse()
                        .map_err(|_| lines.err(format!("bad adam step `{rest}`")))?;
                    let mut adam = Adam::new(&ckpt.params);
                    adam.step = step;
                    for _ in 0..ckpt.params.len() {
                        let head = lines.expect("moments header")?;
                        let name = head.strip_prefix("moments ").ok_or_else(|| {
                            lines.err(format!("expected `moments`, got `{head}`"))
                        })?;
                        let id = ckpt.params.id(name).ok_or_else(|| {
                            lines.err(format!("moments for unknown parameter `{name}`"))
                        })?;
                        let n = ckpt.params.get(id).numel();
                        let shape = ckpt.params.get(id).shape().to_vec();
                        adam.m[id.index()] =
                            Tensor::new(shape.clone(), read_values(&mut lines, name, n)?)?;
                        adam.v[id.index()] = Tensor::new(shape, read_values(&mut lines, name, n)?)?;
                    }
                    ckpt.adam = Some(adam);
                }
                _ => return Err(lines.err(format!("unexpected line `{line}`"))),
            }
        }
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(std::fs::File::open(path)?))
    }

    /// Copies stored values into `store` by name; every parameter of `store` must
    /// be present with a matching shape.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let src = self
                .params
                .id(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
            store.set(id, self.params.get(src).clone())?;
        }
        Ok(())
    }

    /// Adam state re-indexed to the parameter order of `store`.
    pub fn adam_for(&self, store: &ParamStore) -> Result<Option<Adam>> {
        let Some(saved) = &self.adam else {
            return Ok(None);
        };
        let mut adam = Adam::new(store);
        adam.step = saved.step;
        for (id, name, _) in store.iter() {
            let src = self
                .params
                .id(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks moments for `{name}`")))?;
            adam.m[id.index()] = saved.m[src.index()].clone();
            adam.v[id.index()] = saved.v[src.index()].clone();
        }
        Ok(Some(adam))
    }
}

fn push_values(s: &mut String, t: &Tensor) {
    for (i, v) in t.data().iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v}").unwrap();
    }
    s.push('\n');
}

fn read_values<R: BufRead>(lines: &mut Lines<R>, name: &str, n: usize) -> Result<Vec<f64>> {
    let line = lines.expect(&format!("values of `{name}`"))?;
    parse_fields(&line)
        .filter(|v: &Vec<f64>| v.len() == n)
        .ok_or_else(|| lines.err(format!("`{name}`: expected {n} values")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.register("a.w", Tensor::normal(&[3, 2], 1.0, &mut rng));
        store.register("b", Tensor::normal(&[4], 1e-300, &mut rng));
        store.register("c", Tensor::scalar(std::f64::consts::PI));
        let mut adam = Adam::new(&store);
        adam.step = 7;
        adam.m[0] = Tensor::normal(&[3, 2], 1.0, &mut rng);
        adam.v[2] = Tensor::scalar(1.0 / 3.0);
        let mut ckpt = Checkpoint::new("fusion", store);
        ckpt.meta = vec![
            ("step".into(), "7".into()),
            ("phase".into(), "warmup".into()),
        ];
        ckpt.config = vec![("mu1".into(), "0.2".into())];
        ckpt.adam = Some(adam);
        ckpt
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let mut buf = Vec::new();
        ckpt.write(&mut buf).unwrap();
        let back = Checkpoint::read(&buf[..]).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.meta("phase"), Some("warmup"));
    }

    #[test]
    fn wrong_header_is_a_version_error() {
        let err = Checkpoint::read(&b"cif-fuse-ckpt v0\nkind lm\nend\n"[..]).unwrap_err();
        assert!(matches!(err, Error::Version { .. }));
    }

    #[test]
    fn truncated_file_names_the_parameter() {
        let mut buf = Vec::new();
        sample().write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(7).map(|l| format!("{l}\n")).collect();
        let err = Checkpoint::read(cut.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("`b`") || err.contains("end"), "{err}");
    }

    #[test]
    fn restore_requires_matching_names() {
        let ckpt = sample();
        let mut other = ParamStore::new();
        other.register("a.w", Tensor::zeros(&[3, 2]));
        other.register("b", Tensor::zeros(&[4]));
        other.register("z", Tensor::zeros(&[]));
        assert!(ckpt.restore_into(&mut other).is_err());
        let mut same = ckpt.params.clone();
        for id in same.ids().collect::<Vec<_>>() {
            let shape = same.get(id).shape().to_vec();
            same.set(id, Tensor::zeros(&shape)).unwrap();
        }
        ckpt.restore_into(&mut same).unwrap();
        assert_eq!(same, ckpt.params);
    }
}
