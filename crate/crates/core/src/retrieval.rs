//! Exact dense retrieval over a fixed document index.
//!
//! # Index file layout (`.rtix`)
//!
//! All integers little-endian.
//!
//! | field   | type                          |
//! |---------|-------------------------------|
//! | magic   | 4 bytes, `b"RTIX"`            |
//! | version | u32, currently 1              |
//! | dim     | u32                           |
//! | count   | u64                           |
//! | ids     | `count` x (u32 byte length, UTF-8 bytes) |
//! | rows    | `count * dim` x f32, row-major |

use std::cmp::Ordering;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::backends::EncoderBackend;
use crate::error::{Error, Result};
use crate::model::{ensure_unique_ids, Document, Embedding, UNIT_NORM_TOL};
use crate::scalar::{self, Real};

pub const INDEX_MAGIC: &[u8; 4] = b"RTIX";
pub const INDEX_VERSION: u32 = 1;

/// Document embeddings, row-aligned with their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex<T: Real> {
    ids: Vec<String>,
    rows: Vec<T>,
    dim: usize,
    backend_name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit<T> {
    pub doc_id: String,
    pub score: T,
}

impl<T: Real> CorpusIndex<T> {
    /// Assembles an index from precomputed unit-norm rows.
    pub fn from_embeddings(
        ids: Vec<String>,
        embeddings: Vec<Embedding<T>>,
        backend_name: impl Into<String>,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("index needs at least one document"));
        }
        if ids.len() != embeddings.len() {
            return Err(Error::DimMismatch {
                expected: ids.len(),
                got: embeddings.len(),
            });
        }
        ensure_unique_ids(ids.iter().map(String::as_str))?;
        let dim = embeddings[0].dim();
        let mut rows = Vec::with_capacity(ids.len() * dim);
        for (id, e) in ids.iter().zip(&embeddings) {
            if e.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: e.dim(),
                });
            }
            check_unit(id, e.values())?;
            rows.extend_from_slice(e.values());
        }
        Ok(Self {
            ids,
            rows,
            dim,
            backend_name: backend_name.into(),
        })
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

    pub fn backend_name(&self) -> &str {
        &self.backend_name
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.ids.len() as u64)?;
        for id in &self.ids {
            w.write_u32::<LittleEndian>(id.len() as u32)?;
            w.write_all(id.as_bytes())?;
        }
        for v in &self.rows {
            w.write_f32::<LittleEndian>(v.to_f64_lossy() as f32)?;
        }
        Ok(())
    }

    /// Reads an index file. Rows are stored as `f32`, so a round trip through
    /// `f64` loses precision beyond single.
    pub fn read_from<R: Read>(mut r: R, backend_name: impl Into<String>) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::invalid("not an RTIX index file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != INDEX_VERSION {
            return Err(Error::invalid(format!("unsupported index version {version}")));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let count = r.read_u64::<LittleEndian>()? as usize;
        if dim == 0 || count == 0 {
            return Err(Error::invalid("index header has zero dim or count"));
        }
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            ids.push(String::from_utf8(buf).map_err(|_| Error::invalid("index id is not UTF-8"))?);
        }
        ensure_unique_ids(ids.iter().map(String::as_str))?;
        let mut rows = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            rows.push(T::from_f64_lossy(f64::from(r.read_f32::<LittleEndian>()?)));
        }
        let index = Self {
            ids,
            rows,
            dim,
            backend_name: backend_name.into(),
        };
        for (i, id) in index.ids.iter().enumerate() {
            check_unit(id, index.row(i))?;
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>, backend_name: impl Into<String>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f), backend_name)
    }
}

fn check_unit<T: Real>(id: &str, row: &[T]) -> Result<()> {
    let n = scalar::norm(row).to_f64_lossy();
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::invalid(format!("row for {id:?} has norm {n}, expected 1")));
    }
    Ok(())
}

/// Encodes every document with no prefix states and stacks the rows.
///
/// Fails if any document fails, listing all failures.
pub fn build_index<T: Real, B: EncoderBackend<T> + ?Sized>(
    backend: &B,
    corpus: &[Document],
) -> Result<CorpusIndex<T>> {
    if corpus.is_empty() {
        return Err(Error::invalid("corpus is empty"));
    }
    ensure_unique_ids(corpus.iter().map(|d| d.id.as_str()))?;
    let encoded: Vec<Result<Embedding<T>>> = corpus
        .par_iter()
        .map(|d| backend.encode(&d.encoder_input(), &[]))
        .collect();
    let mut embeddings = Vec::with_capacity(corpus.len());
    let mut failed = Vec::new();
    for (doc, r) in corpus.iter().zip(encoded) {
        match r {
            Ok(e) => embeddings.push(e),
            Err(e) => failed.push((doc.id.clone(), e)),
        }
    }
    if !failed.is_empty() {
        return Err(Error::Batch { failed });
    }
    CorpusIndex::from_embeddings(
        corpus.iter().map(|d| d.id.clone()).collect(),
        embeddings,
        backend.name(),
    )
}

/// Descending score, then ascending id.
pub(crate) fn rank_order<T: Real>(a: (&str, T), b: (&str, T)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(b.0))
}

/// Exact top-`k` by cosine similarity.
///
/// The query is normalized once; scores are then dot products against the
/// unit rows. Ties are broken by ascending document id.
pub fn search<T: Real>(index: &CorpusIndex<T>, query: &Embedding<T>, k: usize) -> Result<Vec<Hit<T>>> {
    if query.dim() != index.dim {
        return Err(Error::DimMismatch {
            expected: index.dim,
            got: query.dim(),
        });
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let qn = query.norm();
    if qn == T::zero() {
        return Err(Error::ZeroNorm);
    }
    let q: Vec<T> = query.values().iter().map(|&v| v / qn).collect();
    let mut scored: Vec<(usize, T)> = (0..index.len())
        .map(|i| (i, scalar::dot(&q, index.row(i))))
        .collect();
    let cmp = |a: &(usize, T), b: &(usize, T)| {
        rank_order((index.ids[a.0].as_str(), a.1), (index.ids[b.0].as_str(), b.1))
    };
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored
        .into_iter()
        .map(|(i, score)| Hit {
            doc_id: index.ids[i].clone(),
            score,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{AdditiveBackend, AdditiveRefParams};

    fn unit(v: &[f64]) -> Embedding<f64> {
        crate::model::l2_normalize(&Embedding::new(v.to_vec()).unwrap()).unwrap()
    }

    fn docs(n: usize) -> Vec<Document> {
        (0..n)
            .map(|i| Document::new(format!("d{i}"), "", format!("document number {i}")))
            .collect()
    }

    #[test]
    fn single_document_index() {
        let b = AdditiveBackend::<f64>::new(AdditiveRefParams::new(8, 0.5, 1)).unwrap();
        let corpus = vec![Document::new("only", "Title", "body")];
        let idx = build_index(&b, &corpus).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.row(0), b.encode("Title\nbody", &[]).unwrap().values());
        assert_eq!(idx.backend_name(), b.name());
    }

    #[test]
    fn additive_rows_are_base_embeddings() {
        let b = AdditiveBackend::<f64>::new(AdditiveRefParams::new(8, 0.5, 1)).unwrap();
        let corpus = docs(3);
        let idx = build_index(&b, &corpus).unwrap();
        for (i, d) in corpus.iter().enumerate() {
            assert_eq!(idx.row(i), b.base(&d.text).unwrap().values());
        }
    }

    #[test]
    fn build_errors() {
        let b = AdditiveBackend::<f64>::new(AdditiveRefParams::new(4, 0.5, 1)).unwrap();
        let mut corpus = docs(2);
        corpus.push(Document::new("d0", "", "again"));
        assert!(matches!(build_index(&b, &corpus), Err(Error::DuplicateId(_))));
        assert!(build_index(&b, &[]).is_err());
    }

    #[test]
    fn self_retrieval_and_clamping() {
        let b = AdditiveBackend::<f64>::new(AdditiveRefParams::new(16, 0.5, 2)).unwrap();
        let idx = build_index(&b, &docs(5)).unwrap();
        let q = b.encode("document number 3", &[]).unwrap();
        let hits = search(&idx, &q, 100).unwrap();
        assert_eq!(hits.len(), 5);
        assert_eq!(hits[0].doc_id, "d3");
        assert!((hits[0].score - 1.0).abs() < 1e-9);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(search(&idx, &unit(&[1.0, 0.0]), 1).is_err());
        assert!(search(&idx, &q, 0).is_err());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let idx = CorpusIndex::from_embeddings(
            vec!["b".into(), "c".into(), "a".into()],
            vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 0.0])],
            "manual",
        )
        .unwrap();
        let hits = search(&idx, &unit(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(hits[0].doc_id, "a");
        assert_eq!(hits[1].doc_id, "b");
        // non-unit query is normalized
        let hits = search(&idx, &Embedding::new(vec![5.0, 0.0]).unwrap(), 1).unwrap();
        assert!((hits[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn file_roundtrip_layout() {
        let idx = CorpusIndex::from_embeddings(
            vec!["x".into(), "yz".into()],
            vec![unit(&[0.6, 0.8]), unit(&[0.0, 1.0])],
            "manual",
        )
        .unwrap();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"RTIX");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(b"x");
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"yz");
        for v in [0.6f32, 0.8, 0.0, 1.0] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(buf, want);

        let back = CorpusIndex::<f32>::read_from(buf.as_slice(), "manual").unwrap();
        assert_eq!(back.ids(), idx.ids());
        assert_eq!(back.row(0), &[0.6f32, 0.8]);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(CorpusIndex::<f64>::read_from(bad.as_slice(), "m").is_err());
        assert!(CorpusIndex::<f64>::read_from(&buf[..buf.len() - 2], "m").is_err());
    }
}
