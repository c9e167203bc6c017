//! Flat key=value run configuration files.
//!
//! One `key=value` per line; `#` starts a comment. An `include=PATH` line
//! merges another file (relative to the including file) at that point;
//! later assignments override earlier ones, so a run config typically
//! includes a scenario preset and then overrides a handful of keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use messenger::{Error, Result};

pub type KeyValues = BTreeMap<String, String>;

pub fn parse_file(path: &Path) -> Result<KeyValues> {
    let mut out = KeyValues::new();
    merge_file(path, &mut out, 0)?;
    Ok(out)
}

fn merge_file(path: &Path, out: &mut KeyValues, depth: usize) -> Result<()> {
    if depth > 8 {
        return Err(Error::config(format!(
            "include chain too deep at {}",
            path.display()
        )));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: format!("expected key=value, found '{line}'"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key == "include" {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            merge_file(&base.join(value), out, depth + 1)?;
        } else {
            out.insert(key.to_string(), value.to_string());
        }
    }
    Ok(())
}

pub fn to_text(kv: &KeyValues) -> String {
    let mut s = String::new();
    for (k, v) in kv {
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    s
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn include_merges_with_override() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("preset.cfg"), "alpha=0.5\niters=2000\n").unwrap();
        fs::write(
            dir.path().join("run.cfg"),
            "# comment\ninclude=preset.cfg\niters=100\n",
        )
        .unwrap();
        let kv = parse_file(&dir.path().join("run.cfg")).unwrap();
        assert_eq!(kv.get("alpha").unwrap(), "0.5");
        assert_eq!(kv.get("iters").unwrap(), "100");
    }

    #[test]
    fn malformed_lines_carry_location() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.cfg"), "alpha 0.5\n").unwrap();
        let err = parse_file(&dir.path().join("bad.cfg")).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }
}
