//! `key = value` configuration files.
//!
//! Lines are UTF-8, `#` starts a comment, blank lines are skipped. Every key a
//! consumer does not take is reported as an error by [`KvConfig::finish`], so a
//! misspelled ablation setting cannot silently fall back to a default.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("invalid key `{key}`"),
                });
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), line_no))
                .is_some()
            {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Removes `key` and parses it, leaving `slot` untouched when absent.
    pub fn take<T>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some((raw, line)) = self.entries.remove(key) {
            *slot = raw.parse().map_err(|e| Error::Parse {
                line,
                msg: format!("`{key} = {raw}`: {e}"),
            })?;
        }
        Ok(())
    }

    /// Like [`take`](Self::take) for optional values; `none` clears the slot.
    pub fn take_opt<T>(&mut self, key: &str, slot: &mut Option<T>) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some((raw, line)) = self.entries.remove(key) {
            *slot = if raw == "none" {
                None
            } else {
                Some(raw.parse().map_err(|e| Error::Parse {
                    line,
                    msg: format!("`{key} = {raw}`: {e}"),
                })?)
            };
        }
        Ok(())
    }

    /// Fails if any key was never taken.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => {
                Err(Error::Config(format!("unknown key `{key}` at line {line}")))
            }
        }
    }
}

/// Renders `(key, value)` pairs in the format [`KvConfig::parse`] reads.
pub fn render(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines() {
        let mut kv = KvConfig::parse("# header\n\nmu1 = 0.5  # weight\nsteps=10\n").unwrap();
        let (mut mu1, mut steps) = (0.2_f64, 0_usize);
        kv.take("mu1", &mut mu1).unwrap();
        kv.take("steps", &mut steps).unwrap();
        kv.finish().unwrap();
        assert_eq!((mu1, steps), (0.5, 10));
    }

    #[test]
    fn unknown_key_is_an_error() {
        let mut kv = KvConfig::parse("mu_1 = 0\n").unwrap();
        let mut mu1 = 0.2_f64;
        kv.take("mu1", &mut mu1).unwrap();
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("mu_1"), "{err}");
    }

    #[test]
    fn malformed_lines_report_position() {
        match KvConfig::parse("a = 1\noops\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let mut kv = KvConfig::parse("x = abc\n").unwrap();
        let mut x = 0.0_f64;
        assert!(kv.take("x", &mut x).is_err());
    }

    #[test]
    fn none_clears_optional() {
        let mut kv = KvConfig::parse("gold_steps = none\n").unwrap();
        let mut v = Some(3_usize);
        kv.take_opt("gold_steps", &mut v).unwrap();
        assert_eq!(v, None);
    }
}
