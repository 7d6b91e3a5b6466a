//! File output helpers. Every write goes to a temporary sibling first and is
//! renamed into place, so an interrupted run never leaves a truncated file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use piano_core::numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Header of the long grid format.
pub const LONG_HEADER: [&str; 3] = ["x_index", "t_index", "value"];

/// Layout of grid CSV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridFormat {
    /// One `x_index,t_index,value` row per node, with a header.
    #[default]
    Long,
    /// One row per spatial node, one column per time index, no header.
    Dense,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp: PathBuf = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Serializes CSV records built by `fill` and writes them atomically.
pub fn write_csv(
    path: &Path,
    fill: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    fill(&mut w).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bytes = w.into_inner().map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    write_atomic(path, &bytes)
}

pub fn write_grid(path: &Path, field: &Tensor, format: GridFormat) -> Result<(), CliError> {
    let (rows, cols) = field.dims2();
    write_csv(path, |w| {
        match format {
            GridFormat::Long => {
                w.write_record(LONG_HEADER)?;
                for i in 0..rows {
                    for j in 0..cols {
                        w.write_record([i.to_string(), j.to_string(), field.at(i, j).to_string()])?;
                    }
                }
            }
            GridFormat::Dense => {
                for i in 0..rows {
                    w.write_record((0..cols).map(|j| field.at(i, j).to_string()))?;
                }
            }
        }
        Ok(())
    })
}

/// Reads a grid in either format; the long format is recognized by its
/// header.
pub fn read_grid(path: &Path) -> Result<Tensor, CliError> {
    let bad = |reason: String| CliError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for r in reader.records() {
        records.push(r.map_err(|e| bad(e.to_string()))?);
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("not a number: {s:?}")));
    let is_long = records
        .first()
        .is_some_and(|r| r.iter().eq(LONG_HEADER.iter().copied()));
    if is_long {
        let mut cells = Vec::new();
        for r in &records[1..] {
            if r.len() != 3 {
                return Err(bad("expected 3 columns".into()));
            }
            let i = num(&r[0])? as usize;
            let j = num(&r[1])? as usize;
            cells.push((i, j, num(&r[2])?));
        }
        let rows = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let cols = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        if cells.len() != rows * cols {
            return Err(bad(format!("{} values for a {rows}x{cols} grid", cells.len())));
        }
        let mut t = Tensor::zeros(&[rows, cols]);
        for (i, j, v) in cells {
            t.set(i, j, v);
        }
        Ok(t)
    } else {
        let rows: Vec<Vec<f64>> = records
            .iter()
            .map(|r| r.iter().map(num).collect::<Result<_, _>>())
            .collect::<Result<_, _>>()?;
        Tensor::from_rows(&rows).map_err(|e| bad(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::matrix(2, 3, vec![0.1, -2.0, 3.5, 1e-17, 4.0, 0.0]).unwrap();
        for (name, fmt) in [("a.csv", GridFormat::Long), ("b.csv", GridFormat::Dense)] {
            let p = dir.path().join(name);
            write_grid(&p, &t, fmt).unwrap();
            assert_eq!(read_grid(&p).unwrap(), t);
        }
        let long = fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert!(long.starts_with("x_index,t_index,value\n0,0,0.1\n0,1,-2\n"));
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested").join("f.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn malformed_grid_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "1,2\n3\n").unwrap();
        assert!(matches!(read_grid(&p), Err(CliError::Format { .. })));
        fs::write(&p, "1,x\n").unwrap();
        assert!(matches!(read_grid(&p), Err(CliError::Format { .. })));
    }
}
