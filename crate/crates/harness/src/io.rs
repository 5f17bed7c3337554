//! On-disk formats.
//!
//! Every file is one JSON object
//!
//! ```json
//! {"format": "vql-scenario", "version": 1, "body": { ... }}
//! ```
//!
//! where `format` names the payload type and `version` is mandatory. Numbers
//! are written in shortest round-trip form, so parse-then-write reproduces a
//! file byte for byte. Writes go to a temporary file in the target directory
//! that is renamed over the destination once complete.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub const SCENARIO: &str = "vql-scenario";
pub const TRACK: &str = "vql-track";
pub const CONFIG: &str = "vql-config";
pub const REPORT: &str = "vql-report";

#[derive(Serialize)]
struct EnvelopeRef<'a, T> {
    format: &'a str,
    version: u32,
    body: &'a T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope<T> {
    format: String,
    version: u32,
    body: T,
}

pub fn to_string<T: Serialize>(format: &str, body: &T) -> String {
    let env = EnvelopeRef {
        format,
        version: VERSION,
        body,
    };
    let mut s = serde_json::to_string(&env).expect("in-memory values always serialize");
    s.push('\n');
    s
}

/// Parses `text` as a `format` envelope; `origin` only labels diagnostics.
pub fn from_str<T: DeserializeOwned>(text: &str, format: &str, origin: &Path) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let env: Envelope<T> = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        Error::Schema {
            path: origin.to_path_buf(),
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })?;
    if env.format != format {
        return Err(Error::Validation(format!(
            "{}: expected a `{format}` file, found `{}`",
            origin.display(),
            env.format
        )));
    }
    if env.version != VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported version {} (this build reads version {VERSION})",
            origin.display(),
            env.version
        )));
    }
    Ok(env.body)
}

pub fn read<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_str(&text, format, path)
}

pub fn write<T: Serialize>(path: &Path, format: &str, body: &T) -> Result<()> {
    write_atomic(path, to_string(format, body).as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}
