//! Flat `key=value` config files.
//!
//! Keys are long flag names (`peak_lr` and `peak-lr` are equivalent). Values
//! from the file are appended to the command line only for flags the user
//! did not pass, so precedence is: flag, then file, then built-in default.
//! Keys belonging to another subcommand are ignored, which lets one file
//! drive the whole pipeline; keys unknown to every subcommand are errors.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::Command;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config line {line}: expected key=value, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("config line {line}: key {key:?} repeats an earlier line")]
    DuplicateKey { line: usize, key: String },
    #[error("config key {0:?} is not a flag of any subcommand")]
    UnknownKey(String),
    #[error("config key {key:?} is a switch; expected true or false, found {value:?}")]
    BadSwitch { key: String, value: String },
    #[error("config files cannot set `config`")]
    Nested,
}

/// Parse `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; whitespace around keys and values is trimmed.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        if key == "config" {
            return Err(ConfigError::Nested);
        }
        if seen.insert(key.clone(), ()).is_some() {
            return Err(ConfigError::DuplicateKey { line: i + 1, key });
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Long flag name mapped to whether it takes a value.
fn flags_of(cmd: &Command) -> HashMap<String, bool> {
    cmd.get_arguments()
        .filter_map(|a| a.get_long().map(|l| (l.to_string(), a.get_action().takes_values())))
        .filter(|(l, _)| l != "help" && l != "version")
        .collect()
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn subcommand_name(cmd: &Command, args: &[OsString]) -> Option<String> {
    let globals = flags_of(cmd);
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if let Some(flag) = s.strip_prefix("--") {
            if !flag.contains('=') && globals.get(flag).copied().unwrap_or(false) {
                it.next();
            }
        } else if !s.starts_with('-') {
            return cmd.find_subcommand(s.as_ref()).map(|c| c.get_name().to_string());
        }
    }
    None
}

fn given(args: &[OsString], flag: &str) -> bool {
    let eq = format!("--{flag}=");
    let bare = format!("--{flag}");
    args.iter().map(|a| a.to_string_lossy()).any(|s| s == bare || s.starts_with(&eq))
}

/// Append values from the `--config` file, if any, for flags absent on the
/// command line.
pub fn merge_config(cmd: &Command, args: Vec<OsString>) -> Result<Vec<OsString>, ConfigError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let Some(sub) = subcommand_name(cmd, &args) else {
        return Ok(args);
    };
    let entries = read_config(&path)?;
    let mut scope = flags_of(cmd);
    scope.extend(flags_of(cmd.find_subcommand(&sub).expect("subcommand exists")));
    let mut known = scope.clone();
    for c in cmd.get_subcommands() {
        known.extend(flags_of(c));
    }

    let mut out = args;
    let mut extra = Vec::new();
    for (key, value) in entries {
        let Some(&takes_value) = scope.get(&key) else {
            if known.contains_key(&key) {
                continue;
            }
            return Err(ConfigError::UnknownKey(key));
        };
        if given(&out, &key) {
            continue;
        }
        if takes_value {
            extra.push(OsString::from(format!("--{key}={value}")));
        } else {
            match value.as_str() {
                "true" => extra.push(OsString::from(format!("--{key}"))),
                "false" => {}
                _ => return Err(ConfigError::BadSwitch { key, value }),
            }
        }
    }
    out.extend(extra);
    Ok(out)
}

fn read_config(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config(&text)
}
