//! Effective configuration: built-in defaults, then a `key = value` file,
//! then the thread-count environment override, then explicit flags.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, ExitCode};

pub const THREADS_ENV: &str = "EBM_THREADS";
pub const SNAPSHOT_FILE: &str = "effective-config.txt";

/// Keys every command accepts.
pub const GLOBAL_DEFAULTS: [(&str, &str); 3] = [("seed", "0"), ("threads", "1"), ("strict-determinism", "false")];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Settings {
    pub command: String,
    /// Declaration order: globals first, then the command's own keys.
    values: Vec<(String, String)>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

/// Parse a config file body into `(key, value)` pairs. Blank lines and
/// `#` comments are skipped; duplicate keys are an error.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::usage(format!("config line {}: expected key = value", i + 1)));
        };
        let key = normalize(k);
        if key.is_empty() {
            return Err(CliError::usage(format!("config line {}: empty key", i + 1)));
        }
        if out.iter().any(|(k, _)| *k == key) {
            return Err(CliError::usage(format!("config line {}: duplicate key {key:?}", i + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

impl Settings {
    pub fn resolve(
        command: &str,
        defaults: &[(&str, &str)],
        config: Option<&Path>,
        flags: Vec<(&str, Option<String>)>,
    ) -> Result<Self, CliError> {
        let mut s = Settings {
            command: command.to_string(),
            values: GLOBAL_DEFAULTS
                .iter()
                .chain(defaults)
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        };
        if let Some(path) = config {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::new(ExitCode::Io, format!("{}: {e}", path.display())))?;
            for (k, v) in parse_config(&text)? {
                if k == "command" {
                    if v != command {
                        return Err(CliError::usage(format!(
                            "{} is a {v:?} configuration, not {command:?}",
                            path.display()
                        )));
                    }
                    continue;
                }
                s.set(&k, v).map_err(|e| CliError::usage(format!("{}: {}", path.display(), e.message)))?;
            }
        }
        if let Ok(v) = std::env::var(THREADS_ENV) {
            s.set("threads", v)?;
        }
        for (k, v) in flags {
            if let Some(v) = v {
                s.set(k, v)?;
            }
        }
        Ok(s)
    }

    fn set(&mut self, key: &str, value: String) -> Result<(), CliError> {
        let key = normalize(key);
        match self.values.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => {
                slot.1 = value;
                Ok(())
            }
            None => Err(CliError::usage(format!("unknown key {key:?} for command {}", self.command))),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("key {key} is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| CliError::usage(format!("invalid value {v:?} for {key}")))
    }

    /// A value that must be given somewhere.
    pub fn required(&self, key: &str) -> Result<&str, CliError> {
        match self.raw(key) {
            "" => Err(CliError::usage(format!("missing required setting --{key}"))),
            v => Ok(v),
        }
    }

    pub fn snapshot(&self) -> String {
        let mut out = String::from("# effective configuration; pass back with --config to reproduce\n");
        writeln!(out, "command = {}", self.command).expect("string write");
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.snapshot()).map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULTS: [(&str, &str); 2] = [("epochs", "10"), ("out", "")];

    #[test]
    fn precedence_defaults_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "# comment\nepochs = 3\nseed=9\n").unwrap();
        let s = Settings::resolve("train", &DEFAULTS, Some(&cfg), vec![("seed", Some("4".into())), ("out", None)]).unwrap();
        assert_eq!(s.get::<u32>("epochs").unwrap(), 3);
        assert_eq!(s.get::<u64>("seed").unwrap(), 4);
        assert!(s.required("out").is_err());
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(parse_config("a = 1\na = 2").is_err());
        assert!(parse_config("novalue").is_err());
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "epoch = 3\n").unwrap();
        let err = Settings::resolve("train", &DEFAULTS, Some(&cfg), vec![]).unwrap_err();
        assert!(err.message.contains("unknown key \"epoch\""), "{}", err.message);
    }

    #[test]
    fn snapshot_round_trips() {
        let s = Settings::resolve("train", &DEFAULTS, None, vec![("epochs", Some("7".into())), ("out", Some("x".into()))]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.write_snapshot(dir.path()).unwrap();
        let again = Settings::resolve("train", &DEFAULTS, Some(&dir.path().join(SNAPSHOT_FILE)), vec![]).unwrap();
        assert_eq!(again, s);
        assert!(Settings::resolve("sample", &DEFAULTS, Some(&dir.path().join(SNAPSHOT_FILE)), vec![]).is_err());
    }

    #[test]
    fn underscores_accepted_as_dashes() {
        assert_eq!(parse_config("reg_weight = 0").unwrap()[0].0, "reg-weight");
    }
}
