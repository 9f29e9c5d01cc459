use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

/// Bumped whenever a serialized model layout changes.
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    out.write_all(b"\n").and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub(crate) fn check_version(found: u32, what: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "{what} has format version {found}, expected {FORMAT_VERSION}"
        )));
    }
    Ok(())
}
