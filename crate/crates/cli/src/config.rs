//! `key = value` config files. Keys are long flag names; a file is applied
//! by splicing its entries in as flags ahead of the user's own arguments,
//! so flags given on the command line win.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::Command;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        out.push(Entry {
            line: i + 1,
            key,
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

/// Turns entries into flags for subcommand `sub`. Keys belonging to another
/// subcommand are skipped; keys no subcommand knows are an error.
pub fn to_flags(cmd: &Command, sub: &str, entries: &[Entry]) -> Result<Vec<OsString>, String> {
    let target = cmd
        .find_subcommand(sub)
        .ok_or_else(|| format!("unknown subcommand {sub}"))?;
    let known_anywhere = |key: &str| {
        cmd.get_subcommands()
            .chain(std::iter::once(cmd))
            .any(|c| c.get_arguments().any(|a| a.get_long() == Some(key)))
    };
    let mut flags = Vec::new();
    for e in entries {
        if e.key == "config" {
            return Err(format!(
                "line {}: config files cannot include other config files",
                e.line
            ));
        }
        let arg = target
            .get_arguments()
            .chain(cmd.get_arguments().filter(|a| a.is_global_set()))
            .find(|a| a.get_long() == Some(e.key.as_str()));
        let Some(arg) = arg else {
            if known_anywhere(&e.key) {
                continue;
            }
            return Err(format!("line {}: unknown key {:?}", e.line, e.key));
        };
        if arg.get_action().takes_values() {
            flags.push(format!("--{}", e.key).into());
            flags.push(e.value.clone().into());
        } else {
            match e.value.as_str() {
                "true" => flags.push(format!("--{}", e.key).into()),
                "false" => {}
                v => {
                    return Err(format!(
                        "line {}: {} expects true or false, got {v:?}",
                        e.line, e.key
                    ))
                }
            }
        }
    }
    Ok(flags)
}

/// Inserts the flags from `config` right after the subcommand token.
pub fn splice(
    cmd: &Command,
    args: &[OsString],
    sub: &str,
    config: &Path,
) -> Result<Vec<OsString>, String> {
    let text = fs::read_to_string(config).map_err(|e| format!("{}: {e}", config.display()))?;
    let entries = parse(&text).map_err(|e| format!("{}: {e}", config.display()))?;
    let flags = to_flags(cmd, sub, &entries).map_err(|e| format!("{}: {e}", config.display()))?;
    let pos = args
        .iter()
        .position(|a| a == sub)
        .ok_or_else(|| format!("subcommand {sub} not found in arguments"))?;
    let mut out = args[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}
