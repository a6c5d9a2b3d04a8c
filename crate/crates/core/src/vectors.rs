//! Embedding matrices and the paired output-representation space.
//!
//! Two on-disk formats are supported:
//!
//! * JSONL: one `{"id": "...", "vector": [...]}` object per line.
//! * Raw binary: magic `DFUV`, version byte `0x01`, `count: u32 LE`,
//!   `dim: u32 LE`, `count * dim` little-endian `f32` values in row-major
//!   order, then a UTF-8 JSON array of ids as trailer.
//!
//! Values are held as `f64` in memory whatever the source precision.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BINARY_MAGIC: &[u8; 4] = b"DFUV";
pub const BINARY_VERSION: u8 = 0x01;

#[derive(Debug, Error)]
pub enum VectorError {
    #[error("record {record}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {record}: duplicate id {id:?}")]
    DuplicateId { record: usize, id: String },
    #[error("record {record}: non-finite entry at coordinate {coordinate}")]
    NonFinite { record: usize, coordinate: usize },
    #[error("record {record}: malformed record: {reason}")]
    Malformed { record: usize, reason: String },
    #[error("no records")]
    Empty,
    #[error("matrices have different dimensions ({0} vs {1})")]
    PairDimension(usize, usize),
    #[error("need at least 2 common ids, found {0}")]
    TooFewCommon(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingFormat {
    Jsonl,
    RawBinary,
}

impl EmbeddingFormat {
    /// Binary files are recognised by their magic bytes; anything else is JSONL.
    pub fn sniff(head: &[u8]) -> Self {
        if head.starts_with(BINARY_MAGIC) {
            EmbeddingFormat::RawBinary
        } else {
            EmbeddingFormat::Jsonl
        }
    }
}

/// Id-aligned rows of fixed-dimension vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

#[derive(Deserialize, Serialize)]
struct JsonRecord<'a> {
    #[serde(borrow)]
    id: std::borrow::Cow<'a, str>,
    vector: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, VectorError> {
        if ids.len() != rows.len() {
            return Err(VectorError::Malformed {
                record: 0,
                reason: format!("{} ids for {} rows", ids.len(), rows.len()),
            });
        }
        let dim = rows.first().map(Vec::len).ok_or(VectorError::Empty)?;
        let mut builder = Builder::default();
        for (i, (id, row)) in ids.into_iter().zip(rows).enumerate() {
            builder.push(i + 1, id, &row, Some(dim))?;
        }
        builder.finish(Some(dim))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row_by_id(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Copy with every non-zero row scaled to unit Euclidean length.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.dim) {
            let norm = euclidean_norm(row);
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        out
    }

    pub fn read<R: Read>(mut reader: R) -> Result<Self, VectorError> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        match EmbeddingFormat::sniff(&bytes) {
            EmbeddingFormat::RawBinary => Self::from_binary(&bytes),
            EmbeddingFormat::Jsonl => Self::read_jsonl(bytes.as_slice()),
        }
    }

    pub fn read_format<R: Read>(reader: R, format: EmbeddingFormat) -> Result<Self, VectorError> {
        match format {
            EmbeddingFormat::Jsonl => Self::read_jsonl(reader),
            EmbeddingFormat::RawBinary => {
                let mut bytes = Vec::new();
                BufReader::new(reader).read_to_end(&mut bytes)?;
                Self::from_binary(&bytes)
            }
        }
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self, VectorError> {
        let mut builder = Builder::default();
        let mut dim = None;
        let mut record = 0;
        for line in BufReader::new(reader).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            record += 1;
            let parsed: JsonRecord<'_> = serde_json::from_str(&line).map_err(|e| VectorError::Malformed {
                record,
                reason: e.to_string(),
            })?;
            let expected = *dim.get_or_insert(parsed.vector.len());
            builder.push(record, parsed.id.into_owned(), &parsed.vector, Some(expected))?;
        }
        builder.finish(dim)
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self, VectorError> {
        let header = |reason: &str| VectorError::Malformed {
            record: 0,
            reason: reason.to_string(),
        };
        if bytes.len() < 13 || &bytes[..4] != BINARY_MAGIC {
            return Err(header("missing DFUV header"));
        }
        if bytes[4] != BINARY_VERSION {
            return Err(header(&format!("unsupported version {}", bytes[4])));
        }
        let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(header("dimension must be positive"));
        }
        let body_len = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| header("count * dim overflows"))?;
        let body_end = 13 + body_len;
        if bytes.len() < body_end {
            return Err(header("truncated vector block"));
        }
        let ids: Vec<String> =
            serde_json::from_slice(&bytes[body_end..]).map_err(|e| header(&format!("bad id trailer: {e}")))?;
        if ids.len() != count {
            return Err(header(&format!("trailer has {} ids, header says {count}", ids.len())));
        }
        let mut builder = Builder::default();
        let mut row = vec![0.0; dim];
        for (i, id) in ids.into_iter().enumerate() {
            let start = 13 + i * dim * 4;
            for (j, chunk) in bytes[start..start + dim * 4].chunks_exact(4).enumerate() {
                row[j] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
            builder.push(i + 1, id, &row, Some(dim))?;
        }
        builder.finish(Some(dim))
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<(), VectorError> {
        for (id, row) in self.ids.iter().zip(self.rows()) {
            let record = JsonRecord {
                id: id.as_str().into(),
                vector: row.to_vec(),
            };
            serde_json::to_writer(&mut writer, &record).map_err(std::io::Error::from)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes the raw-binary format. Values are narrowed to `f32`.
    pub fn write_binary<W: Write>(&self, mut writer: W) -> Result<(), VectorError> {
        writer.write_all(BINARY_MAGIC)?;
        writer.write_all(&[BINARY_VERSION])?;
        writer.write_all(&(self.len() as u32).to_le_bytes())?;
        writer.write_all(&(self.dim as u32).to_le_bytes())?;
        for x in &self.data {
            writer.write_all(&(*x as f32).to_le_bytes())?;
        }
        serde_json::to_writer(&mut writer, &self.ids).map_err(std::io::Error::from)?;
        Ok(())
    }

    pub fn write_format<W: Write>(&self, writer: W, format: EmbeddingFormat) -> Result<(), VectorError> {
        match format {
            EmbeddingFormat::Jsonl => self.write_jsonl(writer),
            EmbeddingFormat::RawBinary => self.write_binary(writer),
        }
    }
}

#[derive(Default)]
struct Builder {
    ids: Vec<String>,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl Builder {
    fn push(&mut self, record: usize, id: String, row: &[f64], dim: Option<usize>) -> Result<(), VectorError> {
        if let Some(expected) = dim {
            if row.len() != expected || expected == 0 {
                return Err(VectorError::DimensionMismatch {
                    record,
                    expected,
                    found: row.len(),
                });
            }
        }
        if let Some(coordinate) = row.iter().position(|x| !x.is_finite()) {
            return Err(VectorError::NonFinite { record, coordinate });
        }
        if self.index.contains_key(&id) {
            return Err(VectorError::DuplicateId { record, id });
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(row);
        Ok(())
    }

    fn finish(self, dim: Option<usize>) -> Result<EmbeddingMatrix, VectorError> {
        let dim = dim.ok_or(VectorError::Empty)?;
        Ok(EmbeddingMatrix {
            ids: self.ids,
            dim,
            data: self.data,
            index: self.index,
        })
    }
}

/// How two models' embeddings of the same example are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceMode {
    #[default]
    Subtract,
    Concat,
    Add,
    /// A single matrix used as-is (e.g. input embeddings).
    Raw,
}

impl std::str::FromStr for SpaceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "subtract" => Ok(SpaceMode::Subtract),
            "concat" => Ok(SpaceMode::Concat),
            "add" => Ok(SpaceMode::Add),
            "raw" => Ok(SpaceMode::Raw),
            other => Err(format!(
                "unknown mode {other:?} (expected subtract, concat, add or raw)"
            )),
        }
    }
}

/// Per-example vectors for one model pair, with cached norms.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceSpace {
    ids: Vec<String>,
    mode: SpaceMode,
    dim: usize,
    data: Vec<f64>,
    norms: Vec<f64>,
    unmatched: usize,
}

impl DifferenceSpace {
    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f64>>, mode: SpaceMode) -> Result<Self, VectorError> {
        let matrix = EmbeddingMatrix::new(ids, rows)?;
        Ok(Self::from_matrix(&matrix, mode))
    }

    /// Wraps one matrix unchanged.
    pub fn from_matrix(matrix: &EmbeddingMatrix, mode: SpaceMode) -> Self {
        let norms = matrix.rows().map(euclidean_norm).collect();
        DifferenceSpace {
            ids: matrix.ids.clone(),
            mode,
            dim: matrix.dim,
            data: matrix.data.clone(),
            norms,
            unmatched: 0,
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn mode(&self) -> SpaceMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Ids present in only one of the source matrices.
    pub fn unmatched(&self) -> usize {
        self.unmatched
    }

    /// Restriction to the given positions, in the given order.
    pub fn subset(&self, positions: &[usize]) -> Self {
        let mut data = Vec::with_capacity(positions.len() * self.dim);
        for &p in positions {
            data.extend_from_slice(self.vector(p));
        }
        DifferenceSpace {
            ids: positions.iter().map(|&p| self.ids[p].clone()).collect(),
            mode: self.mode,
            dim: self.dim,
            data,
            norms: positions.iter().map(|&p| self.norms[p]).collect(),
            unmatched: 0,
        }
    }
}

/// Combines two models' embeddings over their common ids, in `a`'s order.
pub fn pair_space(a: &EmbeddingMatrix, b: &EmbeddingMatrix, mode: SpaceMode) -> Result<DifferenceSpace, VectorError> {
    if a.dim != b.dim {
        return Err(VectorError::PairDimension(a.dim, b.dim));
    }
    let common: Vec<(usize, usize)> = a
        .ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| b.position(id).map(|j| (i, j)))
        .collect();
    if common.len() < 2 {
        return Err(VectorError::TooFewCommon(common.len()));
    }
    let b_only = {
        let in_a: HashSet<&str> = a.ids.iter().map(String::as_str).collect();
        b.ids.iter().filter(|id| !in_a.contains(id.as_str())).count()
    };
    let unmatched = (a.len() - common.len()) + b_only;
    if unmatched > 0 {
        log::warn!("dropped {unmatched} examples present in only one embedding matrix");
    }

    let dim = match mode {
        SpaceMode::Concat => 2 * a.dim,
        _ => a.dim,
    };
    let mut data = Vec::with_capacity(common.len() * dim);
    for &(i, j) in &common {
        let (x, y) = (a.row(i), b.row(j));
        match mode {
            SpaceMode::Subtract => data.extend(x.iter().zip(y).map(|(p, q)| p - q)),
            SpaceMode::Add => data.extend(x.iter().zip(y).map(|(p, q)| p + q)),
            SpaceMode::Concat => {
                data.extend_from_slice(x);
                data.extend_from_slice(y);
            }
            SpaceMode::Raw => data.extend_from_slice(x),
        }
    }
    let norms = data.chunks_exact(dim).map(euclidean_norm).collect();
    Ok(DifferenceSpace {
        ids: common.iter().map(|&(i, _)| a.ids[i].clone()).collect(),
        mode,
        dim,
        data,
        norms,
        unmatched,
    })
}

pub fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - cos(a, b)`; `2.0` (the maximum) when either vector is zero.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (euclidean_norm(a), euclidean_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 2.0;
    }
    (1.0 - dot(a, b) / (na * nb)).clamp(0.0, 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[(&str, &[f64])]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(
            rows.iter().map(|(id, _)| id.to_string()).collect(),
            rows.iter().map(|(_, r)| r.to_vec()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_jsonl() {
        let text = "{\"id\": \"a\", \"vector\": [1, 2, 3]}\n{\"id\": \"b\", \"vector\": [4.5, 5, 6]}\n";
        let m = EmbeddingMatrix::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.dim(), 3);
        assert_eq!(m.row_by_id("b").unwrap(), &[4.5, 5.0, 6.0]);
    }

    #[test]
    fn dimension_mismatch_names_record() {
        let text = "{\"id\": \"a\", \"vector\": [1, 2, 3]}\n{\"id\": \"b\", \"vector\": [4, 5]}\n";
        match EmbeddingMatrix::read_jsonl(text.as_bytes()) {
            Err(VectorError::DimensionMismatch {
                record,
                expected,
                found,
            }) => {
                assert_eq!((record, expected, found), (2, 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_malformed_records() {
        let dup = "{\"id\": \"a\", \"vector\": [1]}\n{\"id\": \"a\", \"vector\": [2]}\n";
        assert!(matches!(
            EmbeddingMatrix::read_jsonl(dup.as_bytes()),
            Err(VectorError::DuplicateId { record: 2, .. })
        ));
        let bad = "{\"id\": \"a\", \"vector\": [1]}\nnot json\n";
        assert!(matches!(
            EmbeddingMatrix::read_jsonl(bad.as_bytes()),
            Err(VectorError::Malformed { record: 2, .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let err = EmbeddingMatrix::new(vec!["a".into(), "b".into()], vec![vec![0.0, 1.0], vec![f64::NAN, 0.0]]);
        assert!(matches!(
            err,
            Err(VectorError::NonFinite {
                record: 2,
                coordinate: 0
            })
        ));
    }

    #[test]
    fn binary_header_checks() {
        assert!(EmbeddingMatrix::from_binary(b"DFUV").is_err());
        let m = matrix(&[("x", &[1.0, 2.0]), ("y", &[3.0, 4.0])]);
        let mut bytes = Vec::new();
        m.write_binary(&mut bytes).unwrap();
        assert_eq!(&bytes[..5], b"DFUV\x01");
        assert_eq!(EmbeddingFormat::sniff(&bytes), EmbeddingFormat::RawBinary);
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(EmbeddingMatrix::from_binary(&bad).is_err());
        bytes.truncate(20);
        assert!(EmbeddingMatrix::from_binary(&bytes).is_err());
    }

    #[test]
    fn identical_outputs_give_zero_vectors() {
        let a = matrix(&[("1", &[0.3, -1.0]), ("2", &[2.0, 5.0])]);
        let s = pair_space(&a, &a, SpaceMode::Subtract).unwrap();
        assert!(s.vectors().all(|v| v.iter().all(|&x| x == 0.0)));
        assert!(s.norms().iter().all(|&n| n == 0.0));
    }

    #[test]
    fn subtract_arithmetic() {
        let a = matrix(&[("1", &[1.0, 2.0]), ("2", &[0.0, 0.0])]);
        let b = matrix(&[("1", &[0.0, 2.0]), ("2", &[0.0, 0.0])]);
        let s = pair_space(&a, &b, SpaceMode::Subtract).unwrap();
        assert_eq!(s.vector(0), &[1.0, 0.0]);
        assert_eq!(s.norms()[0], 1.0);
    }

    #[test]
    fn concat_and_add_layouts() {
        let a = matrix(&[("1", &[1.0, 2.0]), ("2", &[3.0, 4.0])]);
        let b = matrix(&[("2", &[10.0, 20.0]), ("1", &[5.0, 6.0])]);
        let c = pair_space(&a, &b, SpaceMode::Concat).unwrap();
        assert_eq!(c.dim(), 4);
        assert_eq!(c.vector(0), &[1.0, 2.0, 5.0, 6.0]);
        let s = pair_space(&a, &b, SpaceMode::Add).unwrap();
        assert_eq!(s.vector(1), &[13.0, 24.0]);
    }

    #[test]
    fn alignment_drops_stragglers() {
        let a = matrix(&[("1", &[1.0]), ("2", &[2.0]), ("3", &[3.0])]);
        let b = matrix(&[("3", &[1.0]), ("4", &[1.0]), ("1", &[1.0])]);
        let s = pair_space(&a, &b, SpaceMode::Subtract).unwrap();
        assert_eq!(s.ids(), &["1".to_string(), "3".to_string()]);
        assert_eq!(s.unmatched(), 2);
    }

    #[test]
    fn pair_errors() {
        let a = matrix(&[("1", &[1.0]), ("2", &[2.0])]);
        let b = matrix(&[("1", &[1.0, 0.0]), ("2", &[2.0, 0.0])]);
        assert!(matches!(
            pair_space(&a, &b, SpaceMode::Subtract),
            Err(VectorError::PairDimension(1, 2))
        ));
        let c = matrix(&[("1", &[1.0]), ("9", &[2.0])]);
        assert!(matches!(
            pair_space(&a, &c, SpaceMode::Subtract),
            Err(VectorError::TooFewCommon(1))
        ));
    }

    #[test]
    fn cosine_distance_edges() {
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 2.0);
        assert!(cosine_distance(&[2.0, 0.0], &[1.0, 0.0]).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-15);
    }
}
