//! `key=value` run-configuration files. Each key names a long flag of the
//! chosen subcommand (or a global flag); entries are appended to the argument
//! list only when that flag is absent, so the command line always wins.

use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, Command};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses `key = value` lines; `#` starts a comment line, blank lines are
/// skipped, `_` in keys is read as `-`, and matching quotes around the value
/// are removed.
pub fn parse(text: &str) -> Result<Vec<Entry>, UsageError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected key=value, got `{line}`", i + 1)))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(UsageError(format!("config line {}: empty key", i + 1)));
        }
        let value = value.trim();
        let value =
            ['"', '\''].iter().find_map(|&q| value.strip_prefix(q).and_then(|v| v.strip_suffix(q))).unwrap_or(value);
        out.push(Entry { key, value: value.to_string(), line: i + 1 });
    }
    Ok(out)
}

fn flag_name(arg: &OsString) -> Option<String> {
    let s = arg.to_str()?;
    let name = s.strip_prefix("--")?;
    Some(name.split_once('=').map_or(name, |(n, _)| n).to_string())
}

/// Global options that take a value, so the token after them is not the
/// subcommand.
fn global_takes_value(cmd: &Command, name: &str) -> bool {
    cmd.get_arguments()
        .any(|a| a.get_long() == Some(name) && matches!(a.get_action(), ArgAction::Set | ArgAction::Append))
}

/// Path given with `--config`, if any.
pub fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let Some(s) = a.to_str() else { continue };
        if s == "--" {
            break;
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
        if s == "--config" {
            return it.next().cloned();
        }
    }
    None
}

/// Appends config entries for flags missing from `args`.
pub fn apply(
    cmd: &Command,
    mut args: Vec<OsString>,
    entries: &[Entry],
    source: &Path,
) -> Result<Vec<OsString>, UsageError> {
    let present: Vec<String> = args.iter().skip(1).take_while(|a| *a != "--").filter_map(flag_name).collect();

    let mut sub = None;
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        match flag_name(a) {
            Some(name) if a.to_str().is_some_and(|s| !s.contains('=')) && global_takes_value(cmd, &name) => {
                it.next();
            }
            Some(_) => {}
            None if a.to_str().is_some_and(|s| s.starts_with('-')) => {}
            None => {
                sub = a.to_str().and_then(|s| cmd.find_subcommand(s));
                break;
            }
        }
    }

    for e in entries {
        if e.key == "config" {
            return Err(UsageError(format!(
                "{}:{}: a config file cannot name another config file",
                source.display(),
                e.line
            )));
        }
        let arg = sub
            .into_iter()
            .flat_map(|s| s.get_arguments())
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(e.key.as_str()))
            .ok_or_else(|| UsageError(format!("{}:{}: unknown key `{}`", source.display(), e.line, e.key)))?;
        if present.iter().any(|p| p == &e.key) {
            continue;
        }
        let flag = OsString::from(format!("--{}", e.key));
        match arg.get_action() {
            ArgAction::SetTrue => match e.value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" | "on" => args.push(flag),
                "false" | "no" | "0" | "off" => {}
                other => {
                    return Err(UsageError(format!(
                        "{}:{}: `{}` expects true or false, got `{other}`",
                        source.display(),
                        e.line,
                        e.key
                    )))
                }
            },
            _ => {
                args.push(flag);
                args.push(e.value.clone().into());
            }
        }
    }
    Ok(args)
}
