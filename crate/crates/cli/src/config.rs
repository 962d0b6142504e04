//! Flat `key = value` settings shared by config files and command-line flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ce_core::{CeError, Result};

/// One accepted setting of a subcommand.
#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
    }
}

fn normalize(k: &str) -> String {
    k.trim().replace('_', "-")
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CeError::Config(format!("{origin}:{}: expected `key = value`", i + 1))
        })?;
        let k = normalize(k);
        if k.is_empty() {
            return Err(CeError::Config(format!("{origin}:{}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(CeError::Config(format!(
                "{origin}:{}: duplicate key `{k}`",
                i + 1
            )));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Resolved settings: defaults, then the config file, then flags.
#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    pub fn resolve(
        keys: &[Key],
        config: Option<&Path>,
        flags: &[(&'static str, String)],
    ) -> Result<Self> {
        let mut values: BTreeMap<&'static str, String> = keys
            .iter()
            .map(|k| (k.name, k.default.to_string()))
            .collect();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CeError::Io(format!("{}: {e}", path.display())))?;
            for (k, v) in parse_config(&text, &path.display().to_string())? {
                let Some(known) = keys.iter().find(|key| key.name == k) else {
                    let mut names: Vec<&str> = keys.iter().map(|k| k.name).collect();
                    names.sort_unstable();
                    return Err(CeError::Config(format!(
                        "{}: unknown key `{k}` (accepted: {})",
                        path.display(),
                        names.join(", ")
                    )));
                };
                values.insert(known.name, v);
            }
        }
        for (k, v) in flags {
            values.insert(k, v.clone());
        }
        Ok(Settings { values })
    }

    pub fn raw(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("setting `{name}` is not declared"))
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T> {
        let raw = self.raw(name);
        raw.parse()
            .map_err(|_| CeError::Config(format!("`{name}`: cannot parse `{raw}`")))
    }

    pub fn flag(&self, name: &str) -> Result<bool> {
        match self.raw(name) {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            other => Err(CeError::Config(format!(
                "`{name}`: expected true/false, got `{other}`"
            ))),
        }
    }

    /// Comma-separated list; empty string gives an empty list.
    pub fn list<T: FromStr>(&self, name: &str) -> Result<Vec<T>> {
        let raw = self.raw(name).trim();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    CeError::Config(format!("`{name}`: cannot parse list item `{}`", s.trim()))
                })
            })
            .collect()
    }

    /// `None` for an empty value.
    pub fn opt_str(&self, name: &str) -> Option<&str> {
        Some(self.raw(name).trim()).filter(|s| !s.is_empty())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: [Key; 2] = [key("lr", "0.1", ""), key("seed", "0", "")];

    #[test]
    fn comments_and_underscores() {
        let parsed = parse_config("# header\nweight_decay = 1e-3 # trailing\n\n", "t").unwrap();
        assert_eq!(parsed, vec![("weight-decay".into(), "1e-3".into())]);
        assert!(parse_config("lr 0.1", "t").is_err());
        assert!(parse_config("lr = 1\nlr = 2", "t").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "lr = 0.5\nseed = 3\n").unwrap();
        let s = Settings::resolve(&KEYS, Some(&p), &[("seed", "9".into())]).unwrap();
        assert_eq!(s.get::<f64>("lr").unwrap(), 0.5);
        assert_eq!(s.get::<u64>("seed").unwrap(), 9);
        std::fs::write(&p, "lrr = 0.5\n").unwrap();
        let err = Settings::resolve(&KEYS, Some(&p), &[]).unwrap_err();
        assert!(err.to_string().contains("unknown key `lrr`"));
    }
}
