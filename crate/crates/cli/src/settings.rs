//! `--settings FILE` support: options from the TOML table named after the
//! subcommand are spliced in front of the command-line flags, so flags given
//! on the command line win.
//!
//! ```toml
//! [train]
//! epochs = 50
//! lambda = 8000
//! ```

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Removes `--settings FILE` (or `--settings=FILE`) from `args`.
fn take_settings(args: &mut Vec<OsString>) -> Result<Option<OsString>> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy().into_owned();
        if a == "--settings" {
            if i + 1 >= args.len() {
                bail!("--settings needs a file");
            }
            let file = args.remove(i + 1);
            args.remove(i);
            return Ok(Some(file));
        }
        if let Some(file) = a.strip_prefix("--settings=") {
            let file = OsString::from(file);
            args.remove(i);
            return Ok(Some(file));
        }
        i += 1;
    }
    Ok(None)
}

fn to_flags(table: &toml::Table) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &toml::Value| -> Result<String> {
            Ok(match v {
                toml::Value::String(s) => s.clone(),
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                other => bail!("setting `{key}` has unsupported value {other}"),
            })
        };
        match value {
            toml::Value::Boolean(true) => out.push(flag.into()),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                let joined = items.iter().map(scalar).collect::<Result<Vec<_>>>()?.join(",");
                out.extend([flag.into(), joined.into()]);
            }
            v => out.extend([flag.into(), scalar(v)?.into()]),
        }
    }
    Ok(out)
}

/// Expands `--settings` into explicit flags.
pub fn merge(mut args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(file) = take_settings(&mut args)? else {
        return Ok(args);
    };
    let path = Path::new(&file);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading settings {}", path.display()))?;
    let doc: toml::Table = text
        .parse()
        .with_context(|| format!("parsing settings {}", path.display()))?;
    // The subcommand is the first argument that is not a flag.
    let Some(pos) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Ok(args);
    };
    let pos = pos + 1;
    let sub = args[pos].to_string_lossy().into_owned();
    let Some(section) = doc.get(&sub) else {
        return Ok(args);
    };
    let table = section
        .as_table()
        .with_context(|| format!("settings entry `{sub}` must be a table"))?;
    let flags = to_flags(table)?;
    let tail = args.split_off(pos + 1);
    args.extend(flags);
    args.extend(tail);
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn splices_section_before_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("s.toml");
        std::fs::write(&file, "[train]\nepochs = 5\nlambdas = [10, 30]\nverbose = true\n[bd]\nx = 1\n").unwrap();
        let args = os(&["pccodec", "--settings", file.to_str().unwrap(), "train", "--epochs", "7"]);
        let merged = merge(args).unwrap();
        assert_eq!(
            merged,
            os(&["pccodec", "train", "--epochs", "5", "--lambdas", "10,30", "--verbose", "--epochs", "7"])
        );
    }

    #[test]
    fn no_settings_is_identity() {
        let args = os(&["pccodec", "macs", "--config", "micro"]);
        assert_eq!(merge(args.clone()).unwrap(), args);
        assert!(merge(os(&["pccodec", "--settings"])).is_err());
    }
}
