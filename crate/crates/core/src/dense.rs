//! Exact dot-product search over fixed-dimension f64 vectors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::{read_records, record_error};
use crate::ranking::{Channel, RankedList};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorRecord {
    pub id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl VectorStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("vector dimension must be positive"));
        }
        Ok(Self {
            dim,
            vectors: BTreeMap::new(),
        })
    }

    /// Builds a store from records; dimension comes from the first record.
    pub fn from_records(records: impl IntoIterator<Item = VectorRecord>) -> Result<Self> {
        let mut store: Option<Self> = None;
        for rec in records {
            let s = match store.as_mut() {
                Some(s) => s,
                None => store.insert(Self::new(rec.vector.len())?),
            };
            s.insert(rec.id, rec.vector)?;
        }
        store.ok_or_else(|| Error::invalid("vector file contains no records"))
    }

    pub fn insert(&mut self, id: String, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                id,
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("vector \"{id}\"")));
        }
        if self.vectors.contains_key(&id) {
            return Err(Error::DuplicateId { kind: "vector", id });
        }
        self.vectors.insert(id, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Top-`n` ids by dot product with `query`, ties by ascending id.
    pub fn search(&self, query: &[f64], n: usize) -> Result<RankedList> {
        if n == 0 {
            return Err(Error::invalid("search depth n must be >= 1"));
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                id: "<query>".into(),
                expected: self.dim,
                found: query.len(),
            });
        }
        let scored = self
            .vectors
            .iter()
            .map(|(id, v)| Ok((id.clone(), semantic_score(query, v)?)))
            .collect::<Result<Vec<_>>>()?;
        RankedList::from_scores(Channel::Semantic, scored, Some(n))
    }
}

/// Loads `{"id", "vector"}` lines. Errors carry the offending line.
pub fn load_vectors(path: &Path) -> Result<VectorStore> {
    let rows: Vec<(usize, VectorRecord)> = read_records(path)?;
    let mut store: Option<VectorStore> = None;
    for (line, rec) in rows {
        let s = match store.as_mut() {
            Some(s) => s,
            None => store.insert(
                VectorStore::new(rec.vector.len())
                    .map_err(|e| record_error(path, line, e.to_string()))?,
            ),
        };
        s.insert(rec.id, rec.vector)?;
    }
    store.ok_or_else(|| Error::invalid(format!("{} contains no vectors", path.display())))
}

/// Plain dot product, summed in index order.
pub fn semantic_score(q: &[f64], d: &[f64]) -> Result<f64> {
    if q.len() != d.len() {
        return Err(Error::invalid(format!(
            "vector length mismatch: {} vs {}",
            q.len(),
            d.len()
        )));
    }
    Ok(q.iter().zip(d).fold(0.0, |acc, (a, b)| acc + a * b))
}

pub fn search_semantic(store: &VectorStore, q_vec: &[f64], n: usize) -> Result<RankedList> {
    store.search(q_vec, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn rec(id: &str, v: &[f64]) -> VectorRecord {
        VectorRecord {
            id: id.into(),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn dot_products() {
        assert_eq!(semantic_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(semantic_score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        let u = [0.6, 0.8];
        assert!((semantic_score(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!(semantic_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn identity_retrieval() {
        let store = VectorStore::from_records(vec![
            rec("x", &[1.0, 0.0, 0.0]),
            rec("y", &[0.0, 1.0, 0.0]),
            rec("z", &[0.0, 0.0, 1.0]),
        ])
        .unwrap();
        let res = search_semantic(&store, &[0.0, 1.0, 0.0], 3).unwrap();
        assert_eq!(res.entries()[0].doc_id, "y");
        assert_eq!(res.entries()[0].score, 1.0);
        assert_eq!(res.ids().skip(1).collect::<Vec<_>>(), vec!["x", "z"]);
        assert!(search_semantic(&store, &[0.0, 1.0, 0.0], 0).is_err());
        assert!(search_semantic(&store, &[0.0, 1.0], 1).is_err());
    }

    #[test]
    fn load_validation() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","vector":[1,2,3,4]}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","vector":[1,2,3,4]}}"#).unwrap();
        assert_eq!(load_vectors(f.path()).unwrap().dim(), 4);

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","vector":[1,2,3,4]}}"#).unwrap();
        writeln!(f, r#"{{"id":"short","vector":[1,2,3]}}"#).unwrap();
        let err = load_vectors(f.path()).unwrap_err();
        assert!(err.to_string().contains("short"), "{err}");

        // JSON has no NaN literal, so non-finite values reach us only through the API.
        let err = VectorStore::from_records(vec![rec("a", &[1.0, f64::NAN])]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","vector":[1e400, 0]}}"#).unwrap();
        assert!(load_vectors(f.path()).is_err());
    }
}
