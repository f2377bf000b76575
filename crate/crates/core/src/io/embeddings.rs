//! Binary word/region embedding container.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic    4 bytes  "EMBF"
//! version  u32      1
//! dim      u32
//! count    u32
//! count × record:
//!   sample_id  u32 byte length + UTF-8
//!   n_tokens   u32
//!   n_tokens × (u32 byte length + UTF-8)
//!   n_tokens × dim f32   word embeddings, row-major
//!   dim f32              region embedding
//! ```

use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::lexical::CaptionRecord;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::write_atomic;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"EMBF";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub tokens: Vec<String>,
    /// `tokens.len() × dim`, row-major.
    pub words: Vec<f32>,
    pub region: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub records: IndexMap<String, EmbeddingRecord>,
}

impl EmbeddingFile {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: IndexMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&EmbeddingRecord> {
        self.records.get(sample_id)
    }

    /// Adds a record after checking its shapes against `dim`.
    pub fn insert(&mut self, sample_id: String, rec: EmbeddingRecord) -> Result<()> {
        if rec.words.len() != rec.tokens.len() * self.dim || rec.region.len() != self.dim {
            return Err(Error::Precondition(format!(
                "record {sample_id}: {} tokens, {} word values and {} region values do not fit dim {}",
                rec.tokens.len(),
                rec.words.len(),
                rec.region.len(),
                self.dim
            )));
        }
        if self.records.contains_key(&sample_id) {
            return Err(Error::Precondition(format!("duplicate record {sample_id}")));
        }
        self.records.insert(sample_id, rec);
        Ok(())
    }

    /// Record converted to the scalar type used by the certainty scorer.
    pub fn caption_record<T: Scalar>(&self, sample_id: &str) -> Option<CaptionRecord<T>> {
        let r = self.records.get(sample_id)?;
        let cast = |v: &[f32]| v.iter().map(|&x| T::lit(x as f64)).collect::<Vec<T>>();
        Some(CaptionRecord {
            sample_id: sample_id.to_owned(),
            tokens: r.tokens.clone(),
            word_embeddings: Tensor::matrix(r.tokens.len().max(1), self.dim, {
                let w = cast(&r.words);
                if r.tokens.is_empty() {
                    vec![T::zero(); self.dim]
                } else {
                    w
                }
            })
            .ok()?,
            region_embedding: Tensor::vector(cast(&r.region)).ok()?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&EMBEDDING_MAGIC);
        let w32 = |out: &mut Vec<u8>, v: u32| out.write_u32::<LittleEndian>(v).expect("vec write");
        w32(&mut out, EMBEDDING_VERSION);
        w32(&mut out, self.dim as u32);
        w32(&mut out, self.records.len() as u32);
        let wstr = |out: &mut Vec<u8>, s: &str| {
            out.write_u32::<LittleEndian>(s.len() as u32)
                .expect("vec write");
            out.extend_from_slice(s.as_bytes());
        };
        for (id, r) in &self.records {
            wstr(&mut out, id);
            w32(&mut out, r.tokens.len() as u32);
            for t in &r.tokens {
                wstr(&mut out, t);
            }
            for &v in r.words.iter().chain(&r.region) {
                out.write_f32::<LittleEndian>(v).expect("vec write");
            }
        }
        out
    }

    /// Decodes a complete file image; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: String| Error::Format {
            path: path.to_owned(),
            message,
        };
        let mut cur = Cursor::new(bytes);
        let mut decode = || -> std::result::Result<Self, String> {
            let mut magic = [0u8; 4];
            read_exact(&mut cur, &mut magic, "magic")?;
            if magic != EMBEDDING_MAGIC {
                return Err(format!("bad magic {magic:?}"));
            }
            let version = read_u32(&mut cur, "version")?;
            if version != EMBEDDING_VERSION {
                return Err(format!("unsupported version {version}"));
            }
            let dim = read_u32(&mut cur, "dim")? as usize;
            let count = read_u32(&mut cur, "count")? as usize;
            let mut file = EmbeddingFile::new(dim);
            for i in 0..count {
                let id = read_string(&mut cur, "sample_id")?;
                let n = read_u32(&mut cur, "token count")? as usize;
                let tokens = (0..n)
                    .map(|_| read_string(&mut cur, "token"))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let words = read_f32s(&mut cur, n * dim, "word embeddings")?;
                let region = read_f32s(&mut cur, dim, "region embedding")?;
                file.insert(
                    id,
                    EmbeddingRecord {
                        tokens,
                        words,
                        region,
                    },
                )
                .map_err(|e| format!("record {i}: {e}"))?;
            }
            let rest = bytes.len() as u64 - cur.position();
            if rest != 0 {
                return Err(format!("{rest} trailing bytes after {count} records"));
            }
            Ok(file)
        };
        decode().map_err(fail)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Fails unless every record's region dimension is `expected`.
    pub fn expect_dim(&self, expected: usize, path: &Path) -> Result<()> {
        if self.dim != expected {
            return Err(Error::Format {
                path: path.to_owned(),
                message: format!(
                    "embedding dim {} does not match expected {expected}",
                    self.dim
                ),
            });
        }
        Ok(())
    }
}

fn read_exact(
    cur: &mut Cursor<&[u8]>,
    buf: &mut [u8],
    what: &str,
) -> std::result::Result<(), String> {
    cur.read_exact(buf)
        .map_err(|_| format!("truncated while reading {what} at byte {}", cur.position()))
}

fn read_u32(cur: &mut Cursor<&[u8]>, what: &str) -> std::result::Result<u32, String> {
    cur.read_u32::<LittleEndian>()
        .map_err(|_| format!("truncated while reading {what} at byte {}", cur.position()))
}

fn remaining(cur: &Cursor<&[u8]>) -> u64 {
    cur.get_ref().len() as u64 - cur.position()
}

fn read_string(cur: &mut Cursor<&[u8]>, what: &str) -> std::result::Result<String, String> {
    let len = read_u32(cur, what)? as u64;
    if len > remaining(cur) {
        return Err(format!(
            "truncated while reading {what} at byte {}",
            cur.position()
        ));
    }
    let mut buf = vec![0u8; len as usize];
    read_exact(cur, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| format!("{what} is not valid UTF-8"))
}

fn read_f32s(
    cur: &mut Cursor<&[u8]>,
    n: usize,
    what: &str,
) -> std::result::Result<Vec<f32>, String> {
    if (n as u64) * 4 > remaining(cur) {
        return Err(format!(
            "truncated while reading {what} at byte {}",
            cur.position()
        ));
    }
    let mut v = vec![0f32; n];
    cur.read_f32_into::<LittleEndian>(&mut v)
        .map_err(|_| format!("truncated while reading {what}"))?;
    Ok(v)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(PathBuf::from(path), e))?;
    EmbeddingFile::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingFile {
        let mut f = EmbeddingFile::new(2);
        f.insert(
            "a".into(),
            EmbeddingRecord {
                tokens: vec!["red".into(), "car".into()],
                words: vec![1.0, 0.0, 0.5, -0.25],
                region: vec![0.0, 1.0],
            },
        )
        .unwrap();
        f.insert(
            "b".into(),
            EmbeddingRecord {
                tokens: vec!["ü".into()],
                words: vec![f32::MIN_POSITIVE, -0.0],
                region: vec![3.5, 1e-30],
            },
        )
        .unwrap();
        f
    }

    #[test]
    fn byte_exact_round_trip() {
        let f = sample();
        let bytes = f.to_bytes();
        let g = EmbeddingFile::from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(g.to_bytes(), bytes);
        assert_eq!(g.get("b").unwrap().tokens, vec!["ü".to_owned()]);
        assert_eq!(g.records.get_index(0).unwrap().0, "a");
    }

    #[test]
    fn empty_file_is_valid() {
        let f = EmbeddingFile::new(512);
        let g = EmbeddingFile::from_bytes(&f.to_bytes(), Path::new("m")).unwrap();
        assert!(g.is_empty());
        assert_eq!(g.dim, 512);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        let p = Path::new("m");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            EmbeddingFile::from_bytes(&bad, p),
            Err(Error::Format { .. })
        ));
        for cut in [3, 10, 20, bytes.len() - 1] {
            let err = EmbeddingFile::from_bytes(&bytes[..cut], p).unwrap_err();
            assert!(err.to_string().contains("truncated"), "{cut}: {err}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(EmbeddingFile::from_bytes(&long, p)
            .unwrap_err()
            .to_string()
            .contains("trailing"));
        assert!(sample().expect_dim(3, p).is_err());
    }

    #[test]
    fn insert_checks_shapes() {
        let mut f = EmbeddingFile::new(2);
        let r = EmbeddingRecord {
            tokens: vec!["x".into()],
            words: vec![1.0],
            region: vec![0.0, 1.0],
        };
        assert!(f.insert("x".into(), r).is_err());
    }

    #[test]
    fn converts_to_caption_record() {
        let c = sample().caption_record::<f64>("a").unwrap();
        assert_eq!(c.word_embeddings.shape(), &[2, 2]);
        assert_eq!(c.region_embedding.data(), &[0.0, 1.0]);
        c.validate().unwrap();
    }
}
