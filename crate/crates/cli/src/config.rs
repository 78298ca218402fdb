//! Flat `key=value` config files and flag/config/default resolution.
//!
//! Config keys are the long flag names without the leading dashes. A flag
//! given on the command line beats the config file, which beats the built-in
//! default. Every resolved value is recorded so the run can log it.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// A value that can come from a config file and be written back to one.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! via_from_str {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                <$t as FromStr>::from_str(s).map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_from_str!(
    usize,
    u64,
    f64,
    String,
    blockpix::imagecore::GridSpec,
    blockpix::attacks::LeadingBitMode
);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(format!("expected true or false, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
        let key = k.trim().trim_start_matches("--").to_string();
        if key.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key {key:?}", n + 1));
        }
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct Resolver {
    source: Option<PathBuf>,
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let file = parse_config(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Ok(Self {
            source: Some(path.to_path_buf()),
            file,
            resolved: Vec::new(),
        })
    }

    fn take_file_value<T: ConfigValue>(&mut self, key: &str) -> Result<Option<T>, CliError> {
        match self.file.remove(key) {
            None => Ok(None),
            Some(raw) => T::parse_value(&raw)
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key {key}: {e}"))),
        }
    }

    /// Flag, then config file, then `default`.
    pub fn value<T: ConfigValue>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, CliError> {
        let v = self.optional(key, flag)?.unwrap_or(default);
        self.record(key, v.render());
        Ok(v)
    }

    /// Flag, then config file; absent if neither is set.
    pub fn optional<T: ConfigValue>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>, CliError> {
        let from_file = self.take_file_value(key)?;
        let v = flag.or(from_file);
        if let Some(v) = &v {
            self.record(key, v.render());
        }
        Ok(v)
    }

    /// Like `optional`, but a missing value is a usage error.
    pub fn required<T: ConfigValue>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError> {
        self.optional(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("--{key} is required (flag or config key)")))
    }

    /// A boolean switch: set on the command line wins, else config, else off.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        self.value(key, flag.then_some(true), false)
    }

    /// Records a value that does not come from a flag, e.g. positional inputs.
    pub fn record(&mut self, key: &str, value: impl Display) {
        self.resolved.retain(|(k, _)| k != key);
        self.resolved.push((key.to_string(), value.to_string()));
    }

    /// Rejects unused config keys and writes the resolved configuration to
    /// `<out_dir>/<command>.resolved.conf`.
    pub fn finish(&mut self, command: &str, out_dir: &Path) -> Result<PathBuf, CliError> {
        if let Some(k) = self.file.keys().next() {
            return Err(CliError::Usage(format!(
                "config key {k:?} is not used by {command}"
            )));
        }
        fs::create_dir_all(out_dir).map_err(|e| blockpix::Error::Io {
            path: out_dir.to_path_buf(),
            source: e,
        })?;
        let mut text = format!("# resolved configuration for `blockpix {command}`\n");
        if let Some(src) = &self.source {
            text.push_str(&format!("# config file: {}\n", src.display()));
        }
        self.resolved.sort();
        for (k, v) in &self.resolved {
            text.push_str(&format!("{k} = {v}\n"));
        }
        let path = out_dir.join(format!("{command}.resolved.conf"));
        fs::write(&path, text).map_err(|e| blockpix::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}
