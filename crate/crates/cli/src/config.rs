// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config files: `key = value` lines mirroring long flags one to one. Blank
//! lines and `#` comments are ignored. A key only takes effect when the
//! matching flag is absent from the command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgAction, CommandFactory};

use crate::args::Cli;

/// Path given by `--config`, if any.
fn find_config(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(tok) = it.next() {
        let Some(s) = tok.to_str() else { continue };
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Name of the subcommand in `argv`, skipping global options and their values.
fn find_subcommand(argv: &[OsString]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(tok) = it.next() {
        let s = tok.to_str()?;
        if s == "--config" || s == "--workers" {
            it.next();
        } else if !s.starts_with('-') {
            return Some(s.to_string());
        }
    }
    None
}

fn flag_present(argv: &[OsString], long: &str) -> bool {
    let bare = format!("--{long}");
    let eq = format!("--{long}=");
    argv.iter()
        .filter_map(|t| t.to_str())
        .any(|t| t == bare || t.starts_with(&eq))
}

/// Parsed `key = value` pairs in file order.
pub fn parse_config(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", origin.display(), i + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            bail!("{}:{}: empty key", origin.display(), i + 1);
        }
        if out.iter().any(|(k, _)| *k == key) {
            bail!("{}:{}: key {key:?} set twice", origin.display(), i + 1);
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Appends config-file settings for flags not already on the command line.
///
/// Errors here are usage errors: an unreadable file, a malformed line, or a
/// key that names no flag of the subcommand.
pub fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = find_config(&argv) else {
        return Ok(argv);
    };
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading config file {}", path.display()))?;
    let entries = parse_config(&text, &path)?;
    let Some(sub_name) = find_subcommand(&argv) else {
        return Ok(argv);
    };
    let root = Cli::command();
    let Some(sub) = root.find_subcommand(&sub_name) else {
        // clap reports the unknown subcommand
        return Ok(argv);
    };
    let mut merged = argv.clone();
    for (key, value) in entries {
        if key == "config" {
            bail!(
                "{}: a config file cannot name another config file",
                path.display()
            );
        }
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| anyhow!("{}: no flag --{key} for `{sub_name}`", path.display()))?;
        if flag_present(&argv, &key) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" => merged.push(format!("--{key}").into()),
                "false" => {}
                other => bail!("{}: {key} expects true or false, got {other:?}", path.display()),
            },
            _ => merged.push(format!("--{key}={value}").into()),
        }
    }
    Ok(merged)
}
