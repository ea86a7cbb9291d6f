//! Word-vector table and name embeddings.
//!
//! Names on disk use `+` between words (`persian+cat`). A name embeds to the
//! mean of its constituent word vectors; words missing from the table are
//! dropped with a warning, and a name with no known word is an error.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Result, ZslError};
use crate::tensor::Matrix;

/// Token → vector lookup table with a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct WordSpace {
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

/// An embedded name, plus the words that could not be resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct NameEmbedding {
    pub vector: Vec<f64>,
    pub missing: Vec<String>,
}

/// Class and attribute embeddings stacked in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpaces {
    pub class_vectors: Matrix,
    pub attribute_vectors: Matrix,
    pub warnings: Vec<String>,
}

/// Lowercases and trims a token for lookup.
pub fn normalize_token(token: &str) -> String {
    token.trim().to_lowercase()
}

impl WordSpace {
    pub fn new(dim: usize) -> Self {
        WordSpace {
            dim,
            table: BTreeMap::new(),
        }
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

    /// Inserts a vector, returning the previous one for the same token.
    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<Option<Vec<f64>>> {
        if vector.len() != self.dim {
            return Err(ZslError::Dimension {
                op: "WordSpace::insert",
                left: (1, vector.len()),
                right: (1, self.dim),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(ZslError::NonFinite {
                op: "WordSpace::insert",
            });
        }
        Ok(self.table.insert(normalize_token(token), vector))
    }

    pub fn lookup(&self, token: &str) -> Option<&[f64]> {
        self.table.get(&normalize_token(token)).map(Vec::as_slice)
    }

    pub fn tokens(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.table.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Returns a copy with every vector multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> WordSpace {
        WordSpace {
            dim: self.dim,
            table: self
                .table
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| x * factor).collect()))
                .collect(),
        }
    }

    /// SHA-256 over the dimension and the sorted vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.dim as u64).to_le_bytes());
        for token in self.table.keys() {
            hasher.update(token.as_bytes());
            hasher.update([0u8]);
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Mean of the word vectors making up a `+`-separated name.
    ///
    /// With `normalize_words` each word vector is scaled to unit length
    /// before averaging.
    pub fn embed_name(&self, name: &str, normalize_words: bool) -> Result<NameEmbedding> {
        let words: Vec<&str> = name
            .split('+')
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return Err(ZslError::MissingToken(name.to_string()));
        }
        let mut sum = vec![0.0; self.dim];
        let mut found = 0usize;
        let mut missing = Vec::new();
        for word in words {
            match self.lookup(word) {
                Some(v) => {
                    let norm = if normalize_words {
                        v.iter().map(|x| x * x).sum::<f64>().sqrt()
                    } else {
                        1.0
                    };
                    let norm = if norm > 0.0 { norm } else { 1.0 };
                    for (s, x) in sum.iter_mut().zip(v) {
                        *s += x / norm;
                    }
                    found += 1;
                }
                None => missing.push(normalize_token(word)),
            }
        }
        if found == 0 {
            log::warn!("no word of `{name}` found in the word space");
            return Err(ZslError::MissingToken(name.to_string()));
        }
        if !missing.is_empty() {
            log::warn!(
                "`{name}`: dropped {} missing word(s) from the average: {}",
                missing.len(),
                missing.join(", ")
            );
        }
        if found > 1 {
            let n = found as f64;
            sum.iter_mut().for_each(|s| *s /= n);
        }
        Ok(NameEmbedding {
            vector: sum,
            missing,
        })
    }

    /// Embeds every class and attribute name, stacking rows in list order.
    pub fn build_spaces(
        &self,
        class_names: &[String],
        attribute_names: &[String],
        normalize_words: bool,
    ) -> Result<LabelSpaces> {
        let mut warnings = Vec::new();
        let class_vectors = self.embed_all(class_names, normalize_words, &mut warnings)?;
        let attribute_vectors = self.embed_all(attribute_names, normalize_words, &mut warnings)?;
        Ok(LabelSpaces {
            class_vectors,
            attribute_vectors,
            warnings,
        })
    }

    fn embed_all(&self, names: &[String], normalize_words: bool, warnings: &mut Vec<String>) -> Result<Matrix> {
        let mut data = Vec::with_capacity(names.len() * self.dim);
        for name in names {
            let e = self.embed_name(name, normalize_words)?;
            if !e.missing.is_empty() {
                warnings.push(format!("`{name}`: partial coverage, missing {}", e.missing.join(", ")));
            }
            data.extend(e.vector);
        }
        Matrix::new(names.len(), self.dim, data)
    }
}
