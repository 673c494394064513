use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{SceneError, SceneRecord};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// One JSON object per line.
pub fn write_dataset(scenes: &[SceneRecord], path: &Path) -> Result<(), SceneError> {
    let mut buf = Vec::new();
    for s in scenes {
        serde_json::to_writer(&mut buf, s).map_err(|e| SceneError::Config(e.to_string()))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)?;
    Ok(())
}

/// Reads a file written by [`write_dataset`]; blank lines are skipped.
pub fn read_dataset(path: &Path) -> Result<Vec<SceneRecord>, SceneError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene = serde_json::from_str(&line).map_err(|e| SceneError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(scene);
    }
    Ok(out)
}
