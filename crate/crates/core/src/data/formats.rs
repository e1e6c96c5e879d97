//! Feature-file formats.
//!
//! CSV: header `label,f0,...,f{d-1}`, label -1 for unlabeled rows, UTF-8
//! with LF line endings.
//!
//! Binary: magic `CCOD`, little-endian u32 version (=1), u64 N, u32 d,
//! u8 has_labels; then N rows of d little-endian f32 values; then, when
//! has_labels, N little-endian i32 labels.

use super::{RawDataset, UNLABELED};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const BINARY_MAGIC: &[u8; 4] = b"CCOD";
pub const BINARY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Binary,
}

impl FileFormat {
    /// Pick a format from a path extension: `.csv` is CSV, anything else
    /// is the binary container.
    pub fn from_path(path: &Path) -> FileFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => FileFormat::Csv,
            _ => FileFormat::Binary,
        }
    }
}

pub fn load_features(path: &Path, format: FileFormat) -> Result<RawDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        FileFormat::Csv => parse_csv(path, &bytes),
        FileFormat::Binary => parse_binary(path, &bytes),
    }
}

pub fn save_features(
    path: &Path,
    format: FileFormat,
    features: &[Vec<f64>],
    labels: Option<&[i32]>,
) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != features.len() {
            return Err(Error::InvalidInput(format!(
                "{} rows but {} labels",
                features.len(),
                l.len()
            )));
        }
    }
    let bytes = match format {
        FileFormat::Csv => write_csv(features, labels),
        FileFormat::Binary => write_binary(features, labels),
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_csv(features: &[Vec<f64>], labels: Option<&[i32]>) -> Vec<u8> {
    let d = features.first().map(|f| f.len()).unwrap_or(0);
    let mut out = String::from("label");
    for j in 0..d {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (i, row) in features.iter().enumerate() {
        let label = labels.map(|l| l[i]).unwrap_or(UNLABELED);
        out.push_str(&label.to_string());
        for v in row {
            // Shortest round-trip formatting keeps read(write(x)) == x.
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out.into_bytes()
}

fn parse_csv(path: &Path, bytes: &[u8]) -> Result<RawDataset> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        row: 0,
        col: 0,
        message: "file is not valid UTF-8".into(),
    })?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        row: 1,
        col: 1,
        message: "missing header line".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            col: 1,
            message: format!("header must start with `label`, got `{}`", cols[0]),
        });
    }
    for (j, c) in cols.iter().enumerate().skip(1) {
        if *c != format!("f{}", j - 1) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: 1,
                col: j + 1,
                message: format!("expected column `f{}`, got `{c}`", j - 1),
            });
        }
    }
    let d = cols.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (li, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row_no = li + 2; // 1-based, after the header
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: row_no,
                col: fields.len(),
                message: format!("expected {} fields, got {}", d + 1, fields.len()),
            });
        }
        let label: i32 = fields[0].trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row: row_no,
            col: 1,
            message: format!("bad label `{}`", fields[0]),
        })?;
        let mut row = Vec::with_capacity(d);
        for (j, f) in fields.iter().enumerate().skip(1) {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row: row_no,
                col: j + 1,
                message: format!("bad float `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: row_no,
                    col: j + 1,
                    message: format!("non-finite value `{f}`"),
                });
            }
            row.push(v);
        }
        features.push(row);
        labels.push(label);
    }
    Ok(RawDataset { features, labels })
}

fn write_binary(features: &[Vec<f64>], labels: Option<&[i32]>) -> Vec<u8> {
    let n = features.len() as u64;
    let d = features.first().map(|f| f.len()).unwrap_or(0) as u32;
    let mut out = Vec::with_capacity(17 + features.len() * d as usize * 4);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.push(labels.is_some() as u8);
    for row in features {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(ls) = labels {
        for &l in ls {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                row: 0,
                col: self.pos,
                message: format!("truncated file while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse_binary(path: &Path, bytes: &[u8]) -> Result<RawDataset> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    let magic = cur.take(4, "magic")?;
    if magic != BINARY_MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 0,
            col: 0,
            message: format!("bad magic {magic:?}, expected {BINARY_MAGIC:?}"),
        });
    }
    let version = cur.u32("version")?;
    if version != BINARY_VERSION {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 0,
            col: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let n = cur.u64("sample count")? as usize;
    let d = cur.u32("dimension")? as usize;
    let has_labels = cur.take(1, "label flag")?[0] != 0;
    let mut features = Vec::with_capacity(n);
    for i in 0..n {
        let raw = cur.take(d * 4, "feature row")?;
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            let v = f32::from_le_bytes(raw[j * 4..j * 4 + 4].try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: i + 1,
                    col: j + 1,
                    message: "non-finite feature value".into(),
                });
            }
            row.push(v);
        }
        features.push(row);
    }
    let labels = if has_labels {
        let raw = cur.take(n * 4, "labels")?;
        (0..n)
            .map(|i| i32::from_le_bytes(raw[i * 4..i * 4 + 4].try_into().unwrap()))
            .collect()
    } else {
        vec![UNLABELED; n]
    };
    Ok(RawDataset { features, labels })
}

/// Shared tensor container used by checkpoints: same header conventions as
/// the feature format, with a different magic and f64 payloads.
pub(crate) fn read_exact_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub(crate) fn write_all_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_ccod;
    use crate::data::SynthConfig;

    #[test]
    fn csv_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.csv");
        std::fs::write(&p, "label,f0,f1\n1,0.5,0.5\n").unwrap();
        let raw = load_features(&p, FileFormat::Csv).unwrap();
        assert_eq!(raw.len(), 1);
        assert_eq!(raw.labels, vec![1]);
        assert_eq!(raw.features[0], vec![0.5, 0.5]);
    }

    #[test]
    fn csv_bad_float_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "label,f0,f1\n1,0.5,oops\n").unwrap();
        match load_features(&p, FileFormat::Csv) {
            Err(Error::Parse { row, col, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(col, 3);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn binary_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.bin");
        save_features(&p, FileFormat::Binary, &[], None).unwrap();
        let raw = load_features(&p, FileFormat::Binary).unwrap();
        assert!(raw.is_empty());
    }

    #[test]
    fn binary_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load_features(&p, FileFormat::Binary),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn generated_dataset_roundtrips_both_formats() {
        let cfg = SynthConfig {
            k_source: 3,
            k_target: 2,
            d_raw: 4,
            n_max: 25,
            mu: 3.0,
            seed: 11,
            ..SynthConfig::default()
        };
        let (src, tgt) = generate_synthetic_ccod(&cfg).unwrap();
        let labels: Vec<i32> = src.labels().iter().map(|&l| l as i32).collect();
        let dir = tempfile::tempdir().unwrap();
        for fmt in [FileFormat::Csv, FileFormat::Binary] {
            let p = dir.path().join(match fmt {
                FileFormat::Csv => "src.csv",
                FileFormat::Binary => "src.bin",
            });
            save_features(&p, fmt, src.features(), Some(&labels)).unwrap();
            let raw = load_features(&p, fmt).unwrap();
            assert_eq!(raw.features, src.features(), "{fmt:?}");
            assert_eq!(raw.labels, labels, "{fmt:?}");
        }
        // Target with ground truth.
        let gt: Vec<i32> = tgt.ground_truth().unwrap().iter().map(|&l| l as i32).collect();
        let p = dir.path().join("tgt.bin");
        save_features(&p, FileFormat::Binary, tgt.features(), Some(&gt)).unwrap();
        let raw = load_features(&p, FileFormat::Binary).unwrap();
        assert_eq!(raw.features, tgt.features());
        let back = raw.into_target().unwrap();
        assert_eq!(back.ground_truth(), tgt.ground_truth());
    }

    #[test]
    fn unlabeled_binary_loads_as_target() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        save_features(&p, FileFormat::Binary, &[vec![1.0, 2.0]], None).unwrap();
        let t = load_features(&p, FileFormat::Binary)
            .unwrap()
            .into_target()
            .unwrap();
        assert!(t.ground_truth().is_none());
    }
}
