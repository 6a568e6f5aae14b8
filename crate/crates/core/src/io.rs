//! Atomic file output: write to a sibling temp file, then rename.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use crate::error::Result;

pub fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        use std::io::Write;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
