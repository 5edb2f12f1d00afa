//! JSONL text sidecar: one `{"id": u64, "text": "..."}` object per line.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarLine<'a> {
    id: u64,
    #[serde(borrow)]
    text: std::borrow::Cow<'a, str>,
}

/// `data/train.rge1` -> `data/train.texts.jsonl`.
pub fn sidecar_path(data_path: impl AsRef<Path>) -> PathBuf {
    data_path.as_ref().with_extension("texts.jsonl")
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<HashMap<u64, String>> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SidecarLine = serde_json::from_str(line)
            .map_err(|e| Error::ParseError(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if out.insert(parsed.id, parsed.text.into_owned()).is_some() {
            return Err(Error::ParseError(format!(
                "{}:{}: duplicate id {}",
                path.display(),
                lineno + 1,
                parsed.id
            )));
        }
    }
    Ok(out)
}

/// Writes lines sorted by id so output is deterministic.
pub fn save_sidecar(texts: &HashMap<u64, String>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut ids: Vec<_> = texts.keys().copied().collect();
    ids.sort_unstable();
    let mut out = String::new();
    for id in ids {
        let line = serde_json::to_string(&SidecarLine { id, text: texts[&id].as_str().into() })
            .expect("sidecar line serializes");
        writeln!(out, "{line}").unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
