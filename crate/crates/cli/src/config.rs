//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};

use crate::Validation;

/// Parsed file contents; keys use `_` in place of `-`.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Validation::new(format!("config line {}: expected key = value, got `{raw}`", i + 1)))?;
            let key = k.trim().replace('-', "_");
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Validation::new(format!("config line {}: duplicate key `{key}`", i + 1)).into());
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, command: &str, allowed: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self
            .values
            .keys()
            .map(String::as_str)
            .filter(|k| !allowed.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Validation::new(format!(
                "unknown config key(s) for `{command}`: {} (allowed: {})",
                unknown.join(", "),
                allowed.join(", ")
            ))
            .into())
        }
    }

    /// Flag value if given, else the file value, else `None`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!(Validation::new(format!("config key `{key}`: cannot parse `{v}`: {e}")))),
        }
    }

    /// Boolean switches: the flag wins when set, otherwise `true`/`false` from the file.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.pick::<bool>(None, key)?.unwrap_or(false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_comments() {
        let c = ConfigFile::parse("# comment\nlr = 0.01\nmax-epochs=7 # trailing\n").unwrap();
        assert_eq!(c.pick::<f64>(None, "lr").unwrap(), Some(0.01));
        assert_eq!(c.pick(Some(0.5), "lr").unwrap(), Some(0.5));
        assert_eq!(c.pick::<usize>(None, "max_epochs").unwrap(), Some(7));
        assert_eq!(c.pick::<usize>(None, "seed").unwrap(), None);
    }

    #[test]
    fn unknown_and_malformed() {
        let c = ConfigFile::parse("lr = 1\nbogus = 2\n").unwrap();
        assert!(c.check_keys("train", &["lr"]).unwrap_err().to_string().contains("bogus"));
        assert!(ConfigFile::parse("just text").is_err());
        assert!(ConfigFile::parse("a=1\na=2").is_err());
        assert!(ConfigFile::parse("lr = x").unwrap().pick::<f64>(None, "lr").is_err());
    }
}
