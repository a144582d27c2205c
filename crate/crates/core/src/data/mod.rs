//! Files: manifests, vocabularies, PPM images, checkpoints, attention
//! dumps, and the synthetic toy corpus.

pub mod attn_dump;
pub mod checkpoint;
pub mod manifest;
pub mod ppm;
pub mod toy;
pub mod vocab;

use std::path::Path;

use crate::error::{Error, Result};

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid("write", format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
