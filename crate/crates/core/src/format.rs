//! On-disk embedding files.
//!
//! EMB1 layout, little-endian:
//!
//! | bytes | field                        |
//! |-------|------------------------------|
//! | 0-3   | magic `EMB1`                 |
//! | 4-7   | u32 version (= 1)            |
//! | 8-11  | u32 n_points                 |
//! | 12-15 | u32 dim                      |
//! | 16-19 | u32 layer_index              |
//! | 20-23 | u32 has_labels (0 or 1)      |
//! | ...   | n_points × dim f32 row-major |
//! | ...   | n_points × u32 labels, if has_labels |
//!
//! The CSV fallback has a `label,f0,f1,...` header and one row per point.

use std::fs;
use std::path::Path;

use crate::embedding::{EmbeddingMatrix, LabelVector};
use crate::error::{Error, Result, ResultExt};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Emb1,
    Csv,
}

/// Everything read from one embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub matrix: EmbeddingMatrix,
    pub labels: Option<LabelVector>,
    pub kind: FileKind,
}

pub fn encode_emb1(matrix: &EmbeddingMatrix, labels: Option<&LabelVector>) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Shape(format!("{what} {v} does not fit in u32")))
    };
    let n = to_u32(matrix.n_points(), "n_points")?;
    let d = to_u32(matrix.dim(), "dim")?;
    if let Some(l) = labels {
        if l.len() != matrix.n_points() {
            return Err(Error::Shape(format!(
                "{} labels for {} points",
                l.len(),
                matrix.n_points()
            )));
        }
    }

    let mut out = Vec::with_capacity(
        HEADER_LEN + matrix.values().len() * 4 + labels.map_or(0, |l| l.len() * 4),
    );
    out.extend_from_slice(MAGIC);
    for word in [VERSION, n, d, matrix.layer_index(), u32::from(labels.is_some())] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    for (i, &v) in matrix.values().iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::Data(format!(
                "value {v} at point {}, feature {} overflows f32",
                i / matrix.dim(),
                i % matrix.dim()
            )));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    if let Some(l) = labels {
        for &label in l.as_slice() {
            out.extend_from_slice(&label.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_emb1(bytes: &[u8]) -> Result<(EmbeddingMatrix, Option<LabelVector>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"EMB1\"",
            String::from_utf8_lossy(&bytes[..bytes.len().min(4)])
        )));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "truncated header: {} bytes, need {HEADER_LEN}",
            bytes.len()
        )));
    }
    let word = |i: usize| {
        let off = 4 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4-byte slice"))
    };
    let (version, n, d, layer, has_labels) = (word(0), word(1), word(2), word(3), word(4));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported EMB1 version {version}")));
    }
    if has_labels > 1 {
        return Err(Error::Format(format!("has_labels must be 0 or 1, got {has_labels}")));
    }
    let (n, d) = (n as usize, d as usize);
    let n_values = n
        .checked_mul(d)
        .ok_or_else(|| Error::Shape(format!("{n}x{d} overflows")))?;
    let expected = n_values * 4 + if has_labels == 1 { n * 4 } else { 0 };
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Shape(format!(
            "header declares {n}x{d}{} ({expected} payload bytes), file has {}",
            if has_labels == 1 { " with labels" } else { "" },
            payload.len()
        )));
    }

    let (floats, label_bytes) = payload.split_at(n_values * 4);
    let values = floats
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
        .collect();
    let matrix = EmbeddingMatrix::new(layer, n, d, values)?;
    let labels = (has_labels == 1).then(|| {
        LabelVector::new(
            label_bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect(),
        )
    });
    Ok((matrix, labels))
}

pub fn decode_csv(bytes: &[u8], layer_index: u32) -> Result<(EmbeddingMatrix, LabelVector)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header = reader
        .headers()
        .map_err(|e| Error::Format(format!("unreadable CSV header: {e}")))?
        .clone();
    if header.get(0) != Some("label") {
        return Err(Error::Format("CSV header must start with 'label'".into()));
    }
    let dim = header.len() - 1;
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Format(format!(
                "CSV column {} is '{name}', expected 'f{j}'",
                j + 1
            )));
        }
    }

    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("CSV row {row}: {e}")))?;
        if record.len() != dim + 1 {
            return Err(Error::Shape(format!(
                "CSV row {row} has {} fields, expected {}",
                record.len(),
                dim + 1
            )));
        }
        let label = record[0]
            .parse::<u32>()
            .map_err(|_| Error::Format(format!("CSV row {row}: bad label '{}'", &record[0])))?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v = field
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("CSV row {row}: bad number '{field}'")))?;
            values.push(v);
        }
    }
    let matrix = EmbeddingMatrix::new(layer_index, labels.len(), dim, values)?;
    Ok((matrix, LabelVector::new(labels)))
}

pub fn encode_csv(matrix: &EmbeddingMatrix, labels: &LabelVector) -> Result<Vec<u8>> {
    if labels.len() != matrix.n_points() {
        return Err(Error::Shape(format!(
            "{} labels for {} points",
            labels.len(),
            matrix.n_points()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    header.extend((0..matrix.dim()).map(|j| format!("f{j}")));
    let to_err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(&header).map_err(to_err)?;
    for (row, &label) in matrix.rows().zip(labels.as_slice()) {
        let mut rec = vec![label.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

/// Reads an EMB1 or CSV embedding file, dispatching on the leading bytes.
/// CSV files carry no layer index; they are tagged with `fallback_layer`.
pub fn read_embedding_file(path: &Path, fallback_layer: u32) -> Result<EmbeddingFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parsed = if bytes.starts_with(b"label") {
        decode_csv(&bytes, fallback_layer).map(|(matrix, labels)| EmbeddingFile {
            matrix,
            labels: Some(labels),
            kind: FileKind::Csv,
        })
    } else {
        decode_emb1(&bytes).map(|(matrix, labels)| EmbeddingFile {
            matrix,
            labels,
            kind: FileKind::Emb1,
        })
    };
    parsed.context_with(|| path.display().to_string())
}

pub fn load_embedding_file(path: &Path) -> Result<EmbeddingMatrix> {
    read_embedding_file(path, 0).map(|f| f.matrix)
}

/// Writes an EMB1 file. Values are narrowed to f32; nothing is written if the
/// matrix or labels fail validation.
pub fn save_embedding_file(
    matrix: &EmbeddingMatrix,
    labels: Option<&LabelVector>,
    path: &Path,
) -> Result<()> {
    let bytes = encode_emb1(matrix, labels).context_with(|| path.display().to_string())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_embedding_csv(matrix: &EmbeddingMatrix, labels: &LabelVector, path: &Path) -> Result<()> {
    let bytes = encode_csv(matrix, labels).context_with(|| path.display().to_string())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> (EmbeddingMatrix, LabelVector) {
        let m = EmbeddingMatrix::new(
            7,
            4,
            3,
            vec![0.5, -1.25, 3.0, 1e-3, 2.0, 0.0, -7.5, 8.0, 9.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        (m, LabelVector::new(vec![0, 1, 1, 4]))
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let (m, l) = sample();
        let bytes = encode_emb1(&m, Some(&l)).unwrap();
        assert_eq!(&bytes[0..4], b"EMB1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &4u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &7u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 12 * 4 + 4 * 4);
        assert_eq!(&bytes[bytes.len() - 4..], &4u32.to_le_bytes());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.emb");
        let (m, l) = sample();
        let m = m.map_rows(|r| r.iter().map(|&v| f64::from(v as f32)).collect()).unwrap();
        save_embedding_file(&m, Some(&l), &path).unwrap();
        let f = read_embedding_file(&path, 0).unwrap();
        assert_eq!(f.kind, FileKind::Emb1);
        assert_eq!(f.matrix, m);
        assert_eq!(f.labels.as_ref(), Some(&l));
        let bytes = fs::read(&path).unwrap();
        assert_eq!(encode_emb1(&f.matrix, f.labels.as_ref()).unwrap(), bytes);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let (m, _) = sample();
        let mut bytes = encode_emb1(&m, None).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_emb1(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_emb1(&m, None).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_emb1(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_emb1(b"EMB1\x01\0"), Err(Error::Format(_))));
    }

    #[test]
    fn payload_length_mismatch_is_shape_error() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EMB1");
        for w in [1u32, 2, 2, 0, 0] {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode_emb1(&bytes), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_payload_is_data_error() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EMB1");
        for w in [1u32, 1, 2, 0, 0] {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        for v in [1.0f32, f32::INFINITY] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode_emb1(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn save_refuses_values_outside_f32() {
        let m = EmbeddingMatrix::new(0, 1, 1, vec![1e300]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb");
        assert!(matches!(
            save_embedding_file(&m, None, &path).unwrap_err().root(),
            Error::Data(_)
        ));
        assert!(!path.exists());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let (m, _) = sample();
        let err = save_embedding_file(&m, None, Path::new("/nonexistent-dir/x.emb")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn csv_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        let (m, l) = sample();
        save_embedding_csv(&m, &l, &path).unwrap();
        let f = read_embedding_file(&path, 5).unwrap();
        assert_eq!(f.kind, FileKind::Csv);
        assert_eq!(f.matrix, m.clone().with_layer_index(5));
        assert_eq!(f.labels, Some(l));

        let ragged = b"label,f0,f1\n0,1.0,2.0\n1,3.0\n";
        assert!(matches!(decode_csv(ragged, 0), Err(Error::Shape(_))));
        let bad_header = b"label,x0\n0,1.0\n";
        assert!(matches!(decode_csv(bad_header, 0), Err(Error::Format(_))));
        let nan = b"label,f0\n0,NaN\n";
        assert!(matches!(decode_csv(nan, 0), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn emb1_round_trip(
            n in 1usize..12,
            d in 1usize..6,
            layer in any::<u32>(),
            seed in prop::collection::vec(-1e6f32..1e6, 72),
            with_labels in any::<bool>(),
        ) {
            let values: Vec<f64> = seed.iter().take(n * d).map(|&v| f64::from(v)).collect();
            let m = EmbeddingMatrix::new(layer, n, d, values).unwrap();
            let labels = with_labels.then(|| LabelVector::new((0..n as u32).map(|i| i % 3).collect()));
            let bytes = encode_emb1(&m, labels.as_ref()).unwrap();
            let (back, back_labels) = decode_emb1(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(back_labels, labels);
        }
    }
}
