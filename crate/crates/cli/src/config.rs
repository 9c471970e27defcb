//! Config files and their merge with command-line flags.
//!
//! A config file holds `key = value` lines (`#` starts a comment) whose keys
//! are the long flag names of the subcommand. A JSON object, such as a
//! `resolved_config.json` written by an earlier run, is accepted as well.
//! Flags given on the command line win over the file; the file wins over
//! built-in defaults.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command};
use serde::Serialize;

use crate::error::CliError;

/// Reads a config file into key/value pairs with keys in flag spelling.
pub fn load(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        return from_json(&text, path);
    }
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("{}:{}: expected key = value", path.display(), no + 1)));
        };
        insert(&mut out, key.trim(), value.trim().to_owned(), path)?;
    }
    Ok(out)
}

fn from_json(text: &str, path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let serde_json::Value::Object(map) = value else {
        return Err(CliError::Usage(format!("{}: expected a JSON object", path.display())));
    };
    let mut out = BTreeMap::new();
    for (key, v) in map {
        let text = match v {
            // an empty list is the default of every list flag
            serde_json::Value::Null => continue,
            serde_json::Value::Array(items) if items.is_empty() => continue,
            serde_json::Value::String(s) => s,
            serde_json::Value::Array(items) => items
                .into_iter()
                .map(|i| match i {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            other => other.to_string(),
        };
        insert(&mut out, &key, text, path)?;
    }
    Ok(out)
}

fn insert(map: &mut BTreeMap<String, String>, key: &str, value: String, path: &Path) -> Result<(), CliError> {
    let key = key.replace('_', "-");
    if let Some(prev) = map.get(&key) {
        if *prev != value {
            return Err(CliError::Usage(format!(
                "{}: conflicting values for `{key}`: `{prev}` and `{value}`",
                path.display()
            )));
        }
    }
    map.insert(key, value);
    Ok(())
}

/// Rewrites `argv` so that config-file entries not overridden on the command
/// line appear as ordinary flags. Returns `argv` unchanged without `--config`.
pub fn merge_argv(cmd: Command, argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    // required flags may come from the file, so the first pass requires nothing
    let lenient = cmd.clone().mut_subcommands(|s| s.mut_args(|a| a.required(false)));
    let matches = lenient.try_get_matches_from(&argv).map_err(CliError::Clap)?;
    let Some((name, sub)) = matches.subcommand() else {
        return Ok(argv);
    };
    let Some(path) = sub.get_one::<std::path::PathBuf>("config") else {
        return Ok(argv);
    };
    let entries = load(path)?;
    let sub_cmd = cmd.find_subcommand(name).expect("matched subcommand exists");
    let mut extra = Vec::new();
    for (key, value) in entries {
        if key == "command" {
            if value != name {
                return Err(CliError::Usage(format!("config file is for `{value}`, not `{name}`")));
            }
            continue;
        }
        let Some(arg) = sub_cmd.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            return Err(CliError::Usage(format!("unknown config key `{key}` for `{name}`")));
        };
        if key == "config" {
            return Err(CliError::Usage("config files cannot include other config files".into()));
        }
        if given_on_command_line(sub, arg.get_id().as_str()) {
            continue;
        }
        extra.push(OsString::from(format!("--{key}")));
        extra.push(OsString::from(value));
    }
    // insert right after the subcommand name so positional parsing is unaffected
    let pos = argv.iter().position(|a| a == name).expect("subcommand appears in argv");
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn given_on_command_line(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine))
}

/// Writes the effective settings of a subcommand as a flat JSON object.
pub fn write_resolved(dir: &Path, command: &str, args: &impl Serialize) -> Result<(), CliError> {
    let mut value = serde_json::to_value(args).map_err(mirror_core::Error::from)?;
    if let serde_json::Value::Object(map) = &mut value {
        map.remove("config");
        map.insert("command".into(), serde_json::Value::String(command.into()));
    }
    let path = dir.join("resolved_config.json");
    let text = serde_json::to_string_pretty(&value).map_err(mirror_core::Error::from)?;
    std::fs::write(&path, text + "\n").map_err(|e| mirror_core::Error::Io { path, source: e })?;
    Ok(())
}
