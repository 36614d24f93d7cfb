//! Crop embeddings: the provider contract, the in-memory store and its
//! `EMB1` binary file format.
//!
//! File layout (little-endian):
//!
//! ```text
//! "EMB1" | u32 d | u32 count | count × (u16 id_len | id | d × f32) | u16 tag_len | tag
//! ```
//!
//! Entries are written in ascending crop-id order, which makes the encoding
//! canonical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detection::CropRecord;

pub const STORE_MAGIC: &[u8; 4] = b"EMB1";
pub const DEFAULT_SYNTHETIC_DIM: usize = 32;
const NORMALIZED_SUFFIX: &str = "+l2";

#[derive(Error, Debug)]
pub enum EmbeddingError {
    #[error("degenerate embedding: zero vector cannot be normalized")]
    Degenerate,
    #[error("embedding for {id} has non-finite entries")]
    NonFinite { id: String },
    #[error("dimension mismatch for {id}: expected {expected}, got {actual}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("cannot mix provider {incoming:?} into store built by {existing:?}")]
    ProviderMismatch { existing: String, incoming: String },
    #[error("provider tag must not be empty")]
    EmptyTag,
    #[error("duplicate crop id {0}")]
    Duplicate(String),
    #[error("crop id {0:?} is longer than 65535 bytes")]
    IdTooLong(String),
    #[error("no precomputed embedding for crop {0}")]
    Missing(String),
    #[error("cannot read crop {id}: {message}")]
    Unreadable { id: String, message: String },
    #[error("malformed embedding store: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A feature vector in double precision, as consumed by the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector {
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l2_normalize(&self) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(EmbeddingVector {
            values: l2_normalize(&self.values)?,
            normalized: true,
        })
    }
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    // Scale by the max magnitude first so the sum of squares cannot overflow.
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !scale.is_finite() {
        return Err(EmbeddingError::NonFinite { id: String::new() });
    }
    if scale == 0.0 {
        return Err(EmbeddingError::Degenerate);
    }
    let norm = v.iter().map(|x| (x / scale).powi(2)).sum::<f64>().sqrt();
    Ok(v.iter().map(|x| (x / scale) / norm).collect())
}

/// Fixed-dimension vectors keyed by crop id, all from one provider.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    provider_tag: String,
    vectors: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, provider_tag: impl Into<String>) -> Result<Self, EmbeddingError> {
        let provider_tag = provider_tag.into();
        if provider_tag.is_empty() {
            return Err(EmbeddingError::EmptyTag);
        }
        Ok(EmbeddingStore {
            dim,
            provider_tag,
            vectors: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn vector(&self, id: &str) -> Option<EmbeddingVector> {
        self.get(id).map(|v| EmbeddingVector {
            values: v.iter().map(|&x| x as f64).collect(),
            normalized: self.provider_tag.ends_with(NORMALIZED_SUFFIX),
        })
    }

    /// Ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn insert(&mut self, id: impl Into<String>, values: Vec<f32>) -> Result<(), EmbeddingError> {
        let id = id.into();
        if id.len() > u16::MAX as usize {
            return Err(EmbeddingError::IdTooLong(id));
        }
        if values.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                id,
                expected: self.dim,
                actual: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(EmbeddingError::NonFinite { id });
        }
        if self.vectors.contains_key(&id) {
            return Err(EmbeddingError::Duplicate(id));
        }
        self.vectors.insert(id, values);
        Ok(())
    }

    /// Moves every vector of `other` into this store. Both must come from the
    /// same provider and share a dimension.
    pub fn merge(&mut self, other: EmbeddingStore) -> Result<(), EmbeddingError> {
        if other.provider_tag != self.provider_tag {
            return Err(EmbeddingError::ProviderMismatch {
                existing: self.provider_tag.clone(),
                incoming: other.provider_tag,
            });
        }
        for (id, v) in other.vectors {
            self.insert(id, v)?;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), EmbeddingError> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.vectors.len() as u32).to_le_bytes())?;
        for (id, values) in &self.vectors {
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&(self.provider_tag.len() as u16).to_le_bytes())?;
        w.write_all(self.provider_tag.as_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != STORE_MAGIC {
            return Err(EmbeddingError::Malformed("missing EMB1 magic".into()));
        }
        let dim = cur.u32("dimension")? as usize;
        let count = cur.u32("count")? as usize;
        let mut vectors = BTreeMap::new();
        let mut prev: Option<String> = None;
        for row in 1..=count {
            let at = |what: &str| match &prev {
                Some(p) => format!("row {row} (after {p:?}) {what}"),
                None => format!("row {row} {what}"),
            };
            // A row wider than `dim` shifts every later field, which usually
            // surfaces as an empty, unsorted or non-UTF-8 id on the next row.
            let suspect = |problem: &str| {
                EmbeddingError::Malformed(match &prev {
                    Some(p) => format!(
                        "row {row} {problem}; row {} ({p:?}) may hold more than {dim} values",
                        row - 1
                    ),
                    None => format!("row {row} {problem}"),
                })
            };
            let id_len = cur.u16(&at("id length"))? as usize;
            let id_bytes = cur.take(id_len, &at("id"))?;
            let id = std::str::from_utf8(id_bytes)
                .map_err(|_| suspect("id is not UTF-8"))?
                .to_string();
            if id.is_empty() {
                return Err(suspect("has an empty id"));
            }
            if prev.as_ref().is_some_and(|p| *p >= id) {
                if prev.as_deref() == Some(id.as_str()) {
                    return Err(EmbeddingError::Duplicate(id));
                }
                return Err(suspect("id is out of order"));
            }
            let mut values = Vec::with_capacity(dim.min(4096));
            for _ in 0..dim {
                values.push(f32::from_le_bytes(cur.array4(&at("values"))?));
            }
            vectors.insert(id.clone(), values);
            prev = Some(id);
        }
        let tag_len = cur.u16("provider tag length")? as usize;
        let tag = std::str::from_utf8(cur.take(tag_len, "provider tag")?)
            .map_err(|_| EmbeddingError::Malformed("provider tag is not UTF-8".into()))?
            .to_string();
        if cur.pos != bytes.len() {
            return Err(EmbeddingError::Malformed(format!(
                "{} trailing bytes after provider tag; a row may not match dimension {dim}",
                bytes.len() - cur.pos
            )));
        }
        if tag.is_empty() {
            return Err(EmbeddingError::EmptyTag);
        }
        Ok(EmbeddingStore {
            dim,
            provider_tag: tag,
            vectors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// Reads an `EMB1` file produced offline by any backbone.
pub fn load_precomputed(path: &Path) -> Result<EmbeddingStore, EmbeddingError> {
    EmbeddingStore::from_bytes(&fs::read(path)?)
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EmbeddingError> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(EmbeddingError::Malformed(format!(
                "{what}: need {n} bytes at offset {}, only {remaining} left",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array4(&mut self, what: &str) -> Result<[u8; 4], EmbeddingError> {
        Ok(self.take(4, what)?.try_into().expect("4 bytes"))
    }

    fn u32(&mut self, what: &str) -> Result<u32, EmbeddingError> {
        Ok(u32::from_le_bytes(self.array4(what)?))
    }

    fn u16(&mut self, what: &str) -> Result<u16, EmbeddingError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
}

/// Maps one crop to a feature vector. Implementations must be deterministic.
pub trait EmbeddingProvider: Sync {
    /// Identifies provider and version; recorded in the store.
    fn tag(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed(&self, crop: &CropRecord) -> Result<Vec<f32>, EmbeddingError>;
}

/// Test provider: a seeded Gaussian vector keyed by the SHA-256 of the crop
/// file contents, so byte-identical crops embed identically.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    pub dim: usize,
    pub seed: u64,
}

impl Default for SyntheticProvider {
    fn default() -> Self {
        SyntheticProvider {
            dim: DEFAULT_SYNTHETIC_DIM,
            seed: 0,
        }
    }
}

impl SyntheticProvider {
    pub fn embed_bytes(&self, bytes: &[u8]) -> Vec<f32> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(bytes);
        let key: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(key);
        (0..self.dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect()
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn tag(&self) -> String {
        format!("synthetic-gauss-v1/d{}/seed{}", self.dim, self.seed)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, crop: &CropRecord) -> Result<Vec<f32>, EmbeddingError> {
        let bytes = fs::read(&crop.crop_path).map_err(|e| EmbeddingError::Unreadable {
            id: crop.crop_id.clone(),
            message: e.to_string(),
        })?;
        Ok(self.embed_bytes(&bytes))
    }
}

/// Serves vectors computed offline (for example by a fine-tuned backbone).
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    store: EmbeddingStore,
}

impl PrecomputedProvider {
    pub fn new(store: EmbeddingStore) -> Self {
        PrecomputedProvider { store }
    }

    pub fn open(path: &Path) -> Result<Self, EmbeddingError> {
        Ok(PrecomputedProvider::new(load_precomputed(path)?))
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn tag(&self) -> String {
        self.store.provider_tag().to_string()
    }

    fn dimension(&self) -> usize {
        self.store.dim()
    }

    fn embed(&self, crop: &CropRecord) -> Result<Vec<f32>, EmbeddingError> {
        self.store
            .get(&crop.crop_id)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| EmbeddingError::Missing(crop.crop_id.clone()))
    }
}

#[derive(Debug)]
pub struct EmbedReport {
    pub store: EmbeddingStore,
    /// `(crop_id, reason)` for crops that produced no vector.
    pub skipped: Vec<(String, String)>,
}

/// Embeds every crop. Unreadable or missing crops are skipped and reported;
/// a vector of the wrong dimension aborts the batch.
pub fn embed_batch(
    provider: &dyn EmbeddingProvider,
    crops: &[CropRecord],
    normalize: bool,
) -> Result<EmbedReport, EmbeddingError> {
    let dim = provider.dimension();
    let mut tag = provider.tag();
    if normalize {
        tag.push_str(NORMALIZED_SUFFIX);
    }
    let mut store = EmbeddingStore::new(dim, tag)?;

    let results: Vec<Result<Vec<f32>, EmbeddingError>> = crops
        .par_iter()
        .map(|crop| {
            let v = provider.embed(crop)?;
            if v.len() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    id: crop.crop_id.clone(),
                    expected: dim,
                    actual: v.len(),
                });
            }
            if normalize {
                let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
                Ok(l2_normalize(&wide)?.into_iter().map(|x| x as f32).collect())
            } else {
                Ok(v)
            }
        })
        .collect();

    let mut skipped = Vec::new();
    for (crop, result) in crops.iter().zip(results) {
        match result {
            Ok(v) => store.insert(crop.crop_id.clone(), v)?,
            Err(e @ EmbeddingError::DimensionMismatch { .. }) => return Err(e),
            Err(e) => {
                log::warn!("skipping crop {}: {e}", crop.crop_id);
                skipped.push((crop.crop_id.clone(), e.to_string()));
            }
        }
    }
    Ok(EmbedReport { store, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::PixelRect;
    use proptest::prelude::*;
    use rand::Rng;
    use std::path::PathBuf;

    fn crop(id: &str, path: PathBuf) -> CropRecord {
        CropRecord {
            crop_id: id.into(),
            source_image: "src.jpg".into(),
            rect: PixelRect::new(0, 0, 1, 1),
            detection_confidence: 0.9,
            crop_path: path,
        }
    }

    fn sample_store() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(3, "test/v1").unwrap();
        s.insert("b", vec![1.0, -2.5, 3.25]).unwrap();
        s.insert("a", vec![0.0, f32::MIN_POSITIVE, -0.0]).unwrap();
        s
    }

    #[test]
    fn normalize_examples() {
        let out = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
        let unit = [0.0, 1.0, 0.0];
        let again = l2_normalize(&unit).unwrap();
        for (a, b) in unit.iter().zip(&again) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(EmbeddingError::Degenerate)));
    }

    #[test]
    fn normalize_norm_over_many_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100_000 {
            let d = rng.random_range(1..64);
            let scale = 10f64.powi(rng.random_range(-150..150));
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            if v.iter().all(|&x| x == 0.0) {
                continue;
            }
            let n = l2_normalize(&v).unwrap();
            let norm = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "norm {norm}");
        }
    }

    #[test]
    fn store_round_trip_is_byte_identical() {
        let s = sample_store();
        let bytes = s.to_bytes();
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.ids().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn header_only_store_is_valid() {
        let s = EmbeddingStore::new(4, "p").unwrap();
        let back = EmbeddingStore::from_bytes(&s.to_bytes()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn row_longer_than_dimension_is_named() {
        // d = 4 in the header, but the first row carries 5 values.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EMB1");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&5u16.to_le_bytes());
        bytes.extend_from_slice(b"crop0");
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&5u16.to_le_bytes());
        bytes.extend_from_slice(b"crop1");
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(b"p");
        let err = EmbeddingStore::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
        assert!(err.contains("crop0"), "{err}");
    }

    #[test]
    fn insert_rejects_mismatches() {
        let mut s = sample_store();
        assert!(matches!(
            s.insert("c", vec![1.0]),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            s.insert("c", vec![f32::NAN, 0.0, 0.0]),
            Err(EmbeddingError::NonFinite { .. })
        ));
        assert!(matches!(s.insert("a", vec![0.0; 3]), Err(EmbeddingError::Duplicate(_))));
        assert!(matches!(EmbeddingStore::new(3, ""), Err(EmbeddingError::EmptyTag)));
    }

    #[test]
    fn mixing_providers_is_an_error() {
        let mut s = sample_store();
        let other = EmbeddingStore::new(3, "other/v2").unwrap();
        assert!(matches!(s.merge(other), Err(EmbeddingError::ProviderMismatch { .. })));
    }

    #[test]
    fn synthetic_provider_is_deterministic_and_content_keyed() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("x.png");
        let p2 = dir.path().join("y.png");
        fs::write(&p1, b"same bytes").unwrap();
        fs::write(&p2, b"same bytes").unwrap();
        let provider = SyntheticProvider::default();
        let crops = vec![crop("x", p1), crop("y", p2)];
        let a = embed_batch(&provider, &crops, false).unwrap();
        let b = embed_batch(&provider, &crops, false).unwrap();
        assert_eq!(a.store.digest(), b.store.digest());
        assert_eq!(a.store.get("x").unwrap().len(), 32);
        assert_eq!(a.store.get("x"), a.store.get("y"));
    }

    #[test]
    fn precomputed_provider_reports_missing() {
        let provider = PrecomputedProvider::new(sample_store());
        let crops = vec![
            crop("a", PathBuf::new()),
            crop("zz", PathBuf::new()),
            crop("b", PathBuf::new()),
        ];
        let report = embed_batch(&provider, &crops, false).unwrap();
        assert_eq!(report.store.len(), 2);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].0, "zz");
        assert_eq!(report.store.provider_tag(), "test/v1");
    }

    #[test]
    fn unreadable_crop_is_skipped() {
        let provider = SyntheticProvider::default();
        let crops = vec![crop("gone", PathBuf::from("/nonexistent/crop.png"))];
        let report = embed_batch(&provider, &crops, false).unwrap();
        assert!(report.store.is_empty());
        assert_eq!(report.skipped.len(), 1);
    }

    struct WrongDim;
    impl EmbeddingProvider for WrongDim {
        fn tag(&self) -> String {
            "wrong".into()
        }
        fn dimension(&self) -> usize {
            4
        }
        fn embed(&self, _: &CropRecord) -> Result<Vec<f32>, EmbeddingError> {
            Ok(vec![1.0; 3])
        }
    }

    #[test]
    fn provider_dimension_mismatch_is_fatal() {
        let err = embed_batch(&WrongDim, &[crop("a", PathBuf::new())], false).unwrap_err();
        assert!(matches!(err, EmbeddingError::DimensionMismatch { .. }));
    }

    #[test]
    fn normalized_batch_records_flag_in_tag() {
        let provider = PrecomputedProvider::new(sample_store());
        let report = embed_batch(&provider, &[crop("b", PathBuf::new())], true).unwrap();
        assert!(report.store.provider_tag().ends_with("+l2"));
        let v = report.store.vector("b").unwrap();
        assert!(v.normalized);
        let norm = v.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn canonical_encoding_round_trips(
            rows in proptest::collection::btree_map("[a-z0-9]{1,12}", proptest::collection::vec(-1e6f32..1e6, 5), 0..20)
        ) {
            let mut s = EmbeddingStore::new(5, "prop").unwrap();
            for (id, v) in rows {
                s.insert(id, v).unwrap();
            }
            let bytes = s.to_bytes();
            let back = EmbeddingStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, s);
        }
    }
}
