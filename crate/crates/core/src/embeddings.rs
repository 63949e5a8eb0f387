//! Patch embeddings, slice-level aggregation, and the `EMB1` exchange format.
//!
//! `EMB1` is how externally computed features (e.g. from a pretrained
//! backbone) enter the pipeline:
//!
//! ```text
//! "EMB1" | u32 count | u32 dim | count × dim f32     (all little-endian)
//! ```
//!
//! with a sidecar CSV `row,patch_id` listing exactly `count` rows.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("empty embedding list")]
    EmptyList,
    #[error("non-finite value in embedding {0}")]
    NonFinite(String),
    #[error("bad magic bytes (expected EMB1)")]
    BadMagic,
    #[error("file truncated: header promises {expected} payload bytes, found {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("sidecar index mismatch: {0}")]
    IndexMismatch(String),
    #[error("malformed embedding CSV: {0}")]
    BadCsv(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = EmbeddingError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub patch_id: String,
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(patch_id: impl Into<String>, values: Vec<f32>) -> Result<Self> {
        let patch_id = patch_id.into();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(patch_id));
        }
        Ok(Self { patch_id, values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combination {
    Concat,
    Sum,
}

impl Combination {
    pub fn name(self) -> &'static str {
        match self {
            Combination::Concat => "concat",
            Combination::Sum => "sum",
        }
    }
}

impl std::str::FromStr for Combination {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "concat" => Ok(Self::Concat),
            "sum" => Ok(Self::Sum),
            _ => Err(format!("unknown combination method {s:?} (expected concat or sum)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceEmbedding {
    pub slice_id: String,
    pub method: Combination,
    pub values: Vec<f32>,
}

fn shared_dim(patches: &[EmbeddingVector]) -> Result<usize> {
    let first = patches.first().ok_or(EmbeddingError::EmptyList)?;
    let dim = first.dim();
    for p in patches {
        if p.dim() != dim {
            return Err(EmbeddingError::DimMismatch {
                expected: dim,
                actual: p.dim(),
            });
        }
    }
    Ok(dim)
}

/// Concatenates patch vectors in the given (global row-major) order.
pub fn concat_embeddings(slice_id: &str, patches: &[EmbeddingVector]) -> Result<SliceEmbedding> {
    let dim = shared_dim(patches)?;
    let mut values = Vec::with_capacity(dim * patches.len());
    for p in patches {
        values.extend_from_slice(&p.values);
    }
    Ok(SliceEmbedding {
        slice_id: slice_id.to_string(),
        method: Combination::Concat,
        values,
    })
}

/// Element-wise sum. Each coordinate is summed in sorted order in `f64`, so
/// the result is bit-identical for any permutation of `patches`.
pub fn sum_embeddings(slice_id: &str, patches: &[EmbeddingVector]) -> Result<SliceEmbedding> {
    let dim = shared_dim(patches)?;
    let mut column = Vec::with_capacity(patches.len());
    let values = (0..dim)
        .map(|j| {
            column.clear();
            column.extend(patches.iter().map(|p| p.values[j]));
            column.sort_by(f32::total_cmp);
            column.iter().map(|&v| f64::from(v)).sum::<f64>() as f32
        })
        .collect();
    Ok(SliceEmbedding {
        slice_id: slice_id.to_string(),
        method: Combination::Sum,
        values,
    })
}

pub fn aggregate(
    method: Combination,
    slice_id: &str,
    patches: &[EmbeddingVector],
) -> Result<SliceEmbedding> {
    match method {
        Combination::Concat => concat_embeddings(slice_id, patches),
        Combination::Sum => sum_embeddings(slice_id, patches),
    }
}

/// Patch embeddings keyed by patch id.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    rows: Vec<EmbeddingVector>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(rows: Vec<EmbeddingVector>) -> Result<Self> {
        if !rows.is_empty() {
            shared_dim(&rows)?;
        }
        let mut index = HashMap::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if index.insert(r.patch_id.clone(), i).is_some() {
                return Err(EmbeddingError::IndexMismatch(format!(
                    "duplicate patch id {}",
                    r.patch_id
                )));
            }
        }
        Ok(Self { rows, index })
    }

    pub fn get(&self, patch_id: &str) -> Option<&EmbeddingVector> {
        self.index.get(patch_id).map(|&i| &self.rows[i])
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, EmbeddingVector::dim)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[EmbeddingVector] {
        &self.rows
    }
}

/// Per-feature z-scoring, fitted on training rows only. Off by default in
/// the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(EmbeddingError::EmptyList)?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(EmbeddingError::DimMismatch {
                    expected: d,
                    actual: r.len(),
                });
            }
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut()
                .zip(r.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
        }
        let scale = var
            .into_iter()
            .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Files

const MAGIC: &[u8; 4] = b"EMB1";

/// Sidecar path for an `EMB1` file: `x.emb` → `x.emb.csv`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

pub fn encode_emb1(vectors: &[EmbeddingVector]) -> Result<Vec<u8>> {
    let dim = if vectors.is_empty() { 0 } else { shared_dim(vectors)? };
    let mut out = Vec::with_capacity(12 + vectors.len() * dim * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(vectors.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in vectors {
        for x in &v.values {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes the binary payload into `count` rows of `dim` values.
pub fn decode_emb1(bytes: &[u8]) -> Result<Vec<Vec<f32>>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(EmbeddingError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(EmbeddingError::TruncatedFile {
            expected: 12,
            actual: bytes.len(),
        });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .unwrap_or(usize::MAX);
    if payload.len() < expected {
        return Err(EmbeddingError::TruncatedFile {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(EmbeddingError::IndexMismatch(format!(
            "{} trailing payload bytes",
            payload.len() - expected
        )));
    }
    if dim == 0 {
        return Ok(vec![Vec::new(); count]);
    }
    Ok(payload
        .chunks_exact(dim * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
        .collect())
}

/// Writes `path` (binary) and its `row,patch_id` sidecar.
pub fn export_embeddings(path: &Path, vectors: &[EmbeddingVector]) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_emb1(vectors)?)?;
    let mut w = csv::Writer::from_path(sidecar_path(path))?;
    w.write_record(["row", "patch_id"])?;
    for (i, v) in vectors.iter().enumerate() {
        w.write_record([i.to_string().as_str(), v.patch_id.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `EMB1` file (with sidecar) or, for `.csv` paths, the plain CSV
/// form `patch_id,v0,v1,...`.
pub fn import_embeddings(path: &Path) -> Result<Vec<EmbeddingVector>> {
    if path.extension().is_some_and(|e| e == "csv") {
        return import_plain_csv(path);
    }
    let rows = decode_emb1(&std::fs::read(path)?)?;
    let mut r = csv::Reader::from_path(sidecar_path(path))?;
    let mut ids: Vec<Option<String>> = vec![None; rows.len()];
    let mut seen = 0;
    for rec in r.deserialize::<(usize, String)>() {
        let (row, id) = rec?;
        let slot = ids.get_mut(row).ok_or_else(|| {
            EmbeddingError::IndexMismatch(format!("row {row} out of range for {} vectors", rows.len()))
        })?;
        if slot.replace(id).is_some() {
            return Err(EmbeddingError::IndexMismatch(format!("row {row} listed twice")));
        }
        seen += 1;
    }
    if seen != rows.len() {
        return Err(EmbeddingError::IndexMismatch(format!(
            "sidecar lists {seen} rows, payload has {}",
            rows.len()
        )));
    }
    rows.into_iter()
        .zip(ids)
        .map(|(values, id)| EmbeddingVector::new(id.expect("all rows seen"), values))
        .collect()
}

fn import_plain_csv(path: &Path) -> Result<Vec<EmbeddingVector>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut out: Vec<EmbeddingVector> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut fields = rec.iter();
        let id = fields
            .next()
            .ok_or_else(|| EmbeddingError::BadCsv("empty row".into()))?;
        let values = fields
            .map(|f| {
                f.trim()
                    .parse::<f32>()
                    .map_err(|_| EmbeddingError::BadCsv(format!("bad value {f:?} for {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = out.first() {
            if first.dim() != values.len() {
                return Err(EmbeddingError::DimMismatch {
                    expected: first.dim(),
                    actual: values.len(),
                });
            }
        }
        out.push(EmbeddingVector::new(id, values)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(id: &str, values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(id, values.to_vec()).unwrap()
    }

    #[test]
    fn concat_lengths() {
        let twelve: Vec<_> = (0..12).map(|i| ev(&i.to_string(), &[i as f32; 1024])).collect();
        assert_eq!(concat_embeddings("s", &twelve).unwrap().values.len(), 12288);
        let desk: Vec<_> = (0..12).map(|i| ev(&i.to_string(), &[0.5; 64])).collect();
        assert_eq!(concat_embeddings("s", &desk).unwrap().values.len(), 768);
        let one = ev("a", &[1.0, -2.0, 3.5]);
        assert_eq!(concat_embeddings("s", &[one.clone()]).unwrap().values, one.values);
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(concat_embeddings("s", &[]), Err(EmbeddingError::EmptyList)));
        assert!(matches!(sum_embeddings("s", &[]), Err(EmbeddingError::EmptyList)));
        let mixed = [ev("a", &[1.0, 2.0]), ev("b", &[1.0])];
        assert!(matches!(
            concat_embeddings("s", &mixed),
            Err(EmbeddingError::DimMismatch { expected: 2, actual: 1 })
        ));
        assert!(matches!(sum_embeddings("s", &mixed), Err(EmbeddingError::DimMismatch { .. })));
        assert!(EmbeddingVector::new("x", vec![f32::NAN]).is_err());
    }

    #[test]
    fn sum_identities() {
        let v = ev("v", &[0.1, -3.0, 7.25]);
        let copies = vec![v.clone(); 12];
        let s = sum_embeddings("s", &copies).unwrap();
        for (a, b) in s.values.iter().zip(&v.values) {
            assert!((a - 12.0 * b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        let base = [ev("a", &[1.5, 2.0, -1.0]), ev("b", &[0.25, 4.0, 8.0])];
        let with_zero = [base[0].clone(), base[1].clone(), ev("z", &[0.0; 3])];
        assert_eq!(
            sum_embeddings("s", &base).unwrap().values,
            sum_embeddings("s", &with_zero).unwrap().values
        );
    }

    proptest! {
        #[test]
        fn sum_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-1e6f32..1e6, 5), 1..14),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let vs: Vec<_> = rows.iter().enumerate().map(|(i, r)| ev(&i.to_string(), r)).collect();
            let mut shuffled = vs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                sum_embeddings("s", &vs).unwrap().values,
                sum_embeddings("s", &shuffled).unwrap().values
            );
            let cat = concat_embeddings("s", &shuffled).unwrap();
            for (k, v) in shuffled.iter().enumerate() {
                prop_assert_eq!(&cat.values[k * 5..(k + 1) * 5], v.values.as_slice());
            }
        }

        #[test]
        fn emb1_round_trips(rows in prop::collection::vec(prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 3), 0..6)) {
            let vs: Vec<_> = rows.iter().enumerate().map(|(i, r)| ev(&format!("p{i}"), r)).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.emb");
            export_embeddings(&path, &vs).unwrap();
            let back = import_embeddings(&path).unwrap();
            prop_assert_eq!(back.len(), vs.len());
            for (a, b) in back.iter().zip(&vs) {
                prop_assert_eq!(&a.patch_id, &b.patch_id);
                let bits_a: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn known_bytes_decode() {
        let mut bytes = b"EMB1".to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for i in 0..12 {
            bytes.extend_from_slice(&(i as f32 * 0.5).to_le_bytes());
        }
        let rows = decode_emb1(&bytes).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2], vec![4.0, 4.5, 5.0, 5.5]);

        let mut empty = b"EMB1".to_vec();
        empty.extend_from_slice(&0u32.to_le_bytes());
        empty.extend_from_slice(&4u32.to_le_bytes());
        assert!(decode_emb1(&empty).unwrap().is_empty());

        assert!(matches!(
            decode_emb1(&bytes[..bytes.len() - 4]),
            Err(EmbeddingError::TruncatedFile { expected: 48, actual: 44 })
        ));
        let mut wrong = bytes.clone();
        wrong[3] = b'2';
        assert!(matches!(decode_emb1(&wrong), Err(EmbeddingError::BadMagic)));
    }

    #[test]
    fn sidecar_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb");
        export_embeddings(&path, &[ev("a", &[1.0]), ev("b", &[2.0])]).unwrap();
        std::fs::write(sidecar_path(&path), "row,patch_id\n0,a\n").unwrap();
        assert!(matches!(import_embeddings(&path), Err(EmbeddingError::IndexMismatch(_))));
        std::fs::write(sidecar_path(&path), "row,patch_id\n0,a\n0,b\n").unwrap();
        assert!(matches!(import_embeddings(&path), Err(EmbeddingError::IndexMismatch(_))));
        std::fs::write(sidecar_path(&path), "row,patch_id\n1,b\n0,a\n").unwrap();
        let back = import_embeddings(&path).unwrap();
        assert_eq!(back[1].patch_id, "b");
    }

    #[test]
    fn plain_csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "patch_id,v0,v1\ns#r0c0,1.5,2\ns#r0c1,-1,0.25\n").unwrap();
        let v = import_embeddings(&path).unwrap();
        assert_eq!(v[1], ev("s#r0c1", &[-1.0, 0.25]));
        std::fs::write(&path, "patch_id,v0,v1\na,1,2\nb,1\n").unwrap();
        assert!(import_embeddings(&path).is_err());
    }

    #[test]
    fn standardizer_fits_training_rows() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = Standardizer::fit(&rows).unwrap();
        assert_eq!(s.transform(&[2.0, 5.0]), vec![0.0, 0.0]);
        assert_eq!(s.transform(&[3.0, 6.0]), vec![1.0, 1.0]);
    }
}
