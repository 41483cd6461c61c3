//! Text-embedding providers standing in for a frozen text encoder.

use std::collections::HashMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::scenegraph::fmt_f64;

pub const DEFAULT_TEXT_DIM: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    Stub,
    File,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
}

/// Deterministic pseudo-random unit vectors keyed by a hash of the sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StubProvider {
    pub dim: usize,
    pub seed: u64,
}

impl StubProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn embed(&self, sentence: &str) -> Vec<f64> {
        let digest = Sha256::digest(sentence.as_bytes());
        let key = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
        let mut rng = stream_rng(self.seed, &[key]);
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }
}

/// Precomputed `sentence -> vector` table, e.g. exported from a real encoder.
///
/// File layout: `dim <d>` header, then `<sentence>\t<values...>` per line.
#[derive(Clone, Debug, PartialEq)]
pub struct FileProvider {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl FileProvider {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: HashMap::new(),
        }
    }

    pub fn insert(&mut self, sentence: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "embedding for {sentence:?} has {} values, expected {}",
                values.len(),
                self.dim
            )));
        }
        self.table.insert(sentence.to_string(), values);
        Ok(())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let dim = match lines.next().map(|(_, l)| l.split_whitespace().collect::<Vec<_>>()) {
            Some(h) if h.len() == 2 && h[0] == "dim" => h[1]
                .parse()
                .map_err(|_| Error::parse(source, 1, "bad dimension"))?,
            _ => return Err(Error::parse(source, 1, "expected `dim <d>`")),
        };
        let mut out = Self::new(dim);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (sentence, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(source, i + 1, "missing TAB separator"))?;
            let values = values
                .split_whitespace()
                .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::parse(source, i + 1, "bad number"))?;
            out.insert(sentence, values)
                .map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Serialized table, sentences sorted.
    pub fn to_text(&self) -> String {
        let mut keys: Vec<&String> = self.table.keys().collect();
        keys.sort();
        let mut out = format!("dim {}\n", self.dim);
        for k in keys {
            let vals: Vec<String> = self.table[k].iter().map(|v| fmt_f64(*v)).collect();
            out.push_str(&format!("{k}\t{}\n", vals.join(" ")));
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, sentence: &str) -> Option<&[f64]> {
        self.table.get(sentence).map(Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TextProvider {
    Stub(StubProvider),
    File(FileProvider),
}

impl TextProvider {
    pub fn dim(&self) -> usize {
        match self {
            TextProvider::Stub(s) => s.dim,
            TextProvider::File(f) => f.dim,
        }
    }
}

pub fn embed_text(sentence: &str, provider: &TextProvider) -> Result<TextEmbedding> {
    match provider {
        TextProvider::Stub(s) => Ok(TextEmbedding {
            values: s.embed(sentence),
            source: EmbeddingSource::Stub,
        }),
        TextProvider::File(f) => f
            .get(sentence)
            .map(|v| TextEmbedding {
                values: v.to_vec(),
                source: EmbeddingSource::File,
            })
            .ok_or_else(|| Error::UnknownSentence(sentence.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_is_deterministic_unit_norm() {
        let p = TextProvider::Stub(StubProvider::new(512, 0));
        let a = embed_text("a photo of a person sitting on a bed", &p).unwrap();
        let b = embed_text("a photo of a person sitting on a bed", &p).unwrap();
        assert_eq!(a, b);
        let norm = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let c = embed_text("a photo of a person lying on a bed", &p).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn file_lookup_is_exact() {
        let text = "dim 2\nalpha\t1.5 -2\nbeta gamma\t0 0.25\nlast one\t3 4\n";
        let f = FileProvider::parse(text, "t").unwrap();
        let p = TextProvider::File(f.clone());
        assert_eq!(embed_text("alpha", &p).unwrap().values, vec![1.5, -2.0]);
        assert_eq!(embed_text("beta gamma", &p).unwrap().values, vec![0.0, 0.25]);
        assert_eq!(embed_text("last one", &p).unwrap().values, vec![3.0, 4.0]);
        assert_eq!(embed_text("last one", &p).unwrap().source, EmbeddingSource::File);
        assert!(matches!(embed_text("missing", &p), Err(Error::UnknownSentence(s)) if s == "missing"));
        assert_eq!(FileProvider::parse(&f.to_text(), "again").unwrap(), f);
    }

    #[test]
    fn file_parse_errors() {
        assert!(FileProvider::parse("alpha\t1\n", "t").is_err());
        assert!(FileProvider::parse("dim 2\nalpha 1 2\n", "t").is_err());
        assert!(FileProvider::parse("dim 2\nalpha\t1\n", "t").is_err());
        assert!(FileProvider::parse("dim 1\nalpha\tnan\n", "t").is_err());
    }
}
