use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::warn;

use modabric::data::catalogue::Rejection;
use modabric::Error;

use crate::config::RunConfig;
use crate::{CliError, CliResult};

/// Missing inputs are usage errors.
pub fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} not found: {}", what, path.display())))
    }
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

pub fn create_parent(file: &Path) -> CliResult<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

pub fn read_text(path: &Path, what: &str) -> CliResult<String> {
    require(path, what)?;
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e).into())
}

pub fn buffered(path: &Path) -> CliResult<BufWriter<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

pub fn csv_writer(path: &Path) -> CliResult<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(buffered(path)?))
}

pub fn finish_csv(path: &Path, mut w: csv::Writer<BufWriter<File>>) -> CliResult<()> {
    w.flush().map_err(|e| Error::io(path, e).into())
}

/// `results.csv` → `results.config.toml` in the same directory.
pub fn snapshot_path_for(file: &Path) -> PathBuf {
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    file.with_file_name(format!("{}.config.toml", stem))
}

pub fn write_snapshot(path: &Path, config: &RunConfig) -> CliResult<()> {
    write_text(path, &config.to_toml())
}

pub fn report_rejections(source: &Path, rejects: &[Rejection]) {
    if rejects.is_empty() {
        return;
    }
    warn!("{}: {} line(s) rejected", source.display(), rejects.len());
    for r in rejects {
        warn!("{}:{}: {}", source.display(), r.line, r.reason);
    }
}

/// Fixed six-decimal rendering for report columns.
pub fn fmt6(v: f64) -> String {
    format!("{:.6}", v)
}
