//! Feature dump format shared across the pipeline: "SBFX" magic, version,
//! dim, count header, then row-major little-endian f32. Also the text format
//! for per-speaker average tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SBFX";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatIoError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad feature file {path}: {reason}")]
    BadFile { path: PathBuf, reason: String },
    #[error("bad speaker table line: {0}")]
    BadTable(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatIoError + '_ {
    move |source| FeatIoError::Io { path: path.to_path_buf(), source }
}

/// Write rows (count x dim) of features.
pub fn write_features(path: &Path, rows: &[Vec<f64>]) -> Result<(), FeatIoError> {
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut buf = Vec::with_capacity(20 + rows.len() * dim * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    for row in rows {
        debug_assert_eq!(row.len(), dim);
        for v in row {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<Vec<Vec<f64>>, FeatIoError> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut header = [0u8; 20];
    f.read_exact(&mut header).map_err(io_err(path))?;
    if &header[0..4] != MAGIC {
        return Err(FeatIoError::BadFile { path: path.into(), reason: "bad magic".into() });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FeatIoError::BadFile {
            path: path.into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    f.read_to_end(&mut body).map_err(io_err(path))?;
    if body.len() != dim * count * 4 {
        return Err(FeatIoError::BadFile {
            path: path.into(),
            reason: format!("payload {} bytes, expected {}", body.len(), dim * count * 4),
        });
    }
    let mut rows = Vec::with_capacity(count);
    for r in 0..count {
        let row = body[r * dim * 4..(r + 1) * dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        rows.push(row);
    }
    Ok(rows)
}

pub fn features_as_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut m = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    m
}

/// Speaker table text format: `speaker_id<TAB>v1,...,vE`, one line per
/// speaker, sorted by id. Values use the shortest round-trip f64 form.
pub fn write_speaker_table(
    path: &Path,
    table: &BTreeMap<String, Vec<f64>>,
) -> Result<(), FeatIoError> {
    let mut out = String::new();
    for (id, v) in table {
        let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        out.push_str(&format!("{id}\t{}\n", vals.join(",")));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_speaker_table(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, FeatIoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut table = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| FeatIoError::BadTable(line.to_string()))?;
        let vals = rest
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| FeatIoError::BadTable(line.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        table.insert(id.to_string(), vals);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.sbfx");
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| (0..25).map(|j| ((i * 25 + j) as f64).sin() as f32 as f64).collect())
            .collect();
        write_features(&path, &rows).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn bad_magic_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.sbfx");
        fs::write(&path, b"OOPS\x01\x00\x00\x00 lots of junk here").unwrap();
        assert!(matches!(
            read_features(&path),
            Err(FeatIoError::BadFile { .. })
        ));
    }

    #[test]
    fn speaker_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.tsv");
        let mut table = BTreeMap::new();
        table.insert("spk000".to_string(), vec![0.25, -1.5, 3.1415926535]);
        table.insert("spk001".to_string(), vec![1e-12, 2.0, -0.0625]);
        write_speaker_table(&path, &table).unwrap();
        assert_eq!(read_speaker_table(&path).unwrap(), table);
    }
}
