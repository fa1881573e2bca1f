use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{EmbeddingError, Result, CONTINUATION_PREFIX, ENTITY_PREFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Namespace {
    Word,
    Entity,
    Wordpiece,
}

/// Decides where unprefixed keys land when reading a table file. Keys with
/// the `ENTITY/` prefix always go to [`Namespace::Entity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NamespacePolicy {
    pub plain_keys: Namespace,
    pub cased: bool,
}

impl NamespacePolicy {
    /// Entity/word tables such as Wikipedia2Vec exports (cased).
    pub fn words() -> Self {
        Self {
            plain_keys: Namespace::Word,
            cased: true,
        }
    }

    /// Wordpiece tables of an uncased language encoder.
    pub fn wordpieces() -> Self {
        Self {
            plain_keys: Namespace::Wordpiece,
            cased: false,
        }
    }
}

/// Keyed fixed-dimension vectors in three namespaces.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    cased: bool,
    words: IndexMap<String, Vec<f64>>,
    entities: IndexMap<String, Vec<f64>>,
    wordpieces: IndexMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, cased: bool) -> Result<Self> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        Ok(Self {
            dim,
            cased,
            words: IndexMap::new(),
            entities: IndexMap::new(),
            wordpieces: IndexMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cased(&self) -> bool {
        self.cased
    }

    fn space(&self, ns: Namespace) -> &IndexMap<String, Vec<f64>> {
        match ns {
            Namespace::Word => &self.words,
            Namespace::Entity => &self.entities,
            Namespace::Wordpiece => &self.wordpieces,
        }
    }

    fn space_mut(&mut self, ns: Namespace) -> &mut IndexMap<String, Vec<f64>> {
        match ns {
            Namespace::Word => &mut self.words,
            Namespace::Entity => &mut self.entities,
            Namespace::Wordpiece => &mut self.wordpieces,
        }
    }

    pub fn insert(
        &mut self,
        ns: Namespace,
        key: impl Into<String>,
        vector: Vec<f64>,
    ) -> Result<()> {
        let key = key.into();
        if vector.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        let space = self.space_mut(ns);
        if space.contains_key(&key) {
            return Err(EmbeddingError::Duplicate(key));
        }
        space.insert(key, vector);
        Ok(())
    }

    pub fn get(&self, ns: Namespace, key: &str) -> Option<&[f64]> {
        self.space(ns).get(key).map(Vec::as_slice)
    }

    pub fn contains(&self, ns: Namespace, key: &str) -> bool {
        self.space(ns).contains_key(key)
    }

    /// Keys of a namespace in insertion order.
    pub fn keys(&self, ns: Namespace) -> impl Iterator<Item = &str> {
        self.space(ns).keys().map(String::as_str)
    }

    pub fn len(&self, ns: Namespace) -> usize {
        self.space(ns).len()
    }

    pub fn total_len(&self) -> usize {
        self.words.len() + self.entities.len() + self.wordpieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    pub fn load(path: impl AsRef<Path>, policy: NamespacePolicy) -> Result<Self> {
        let file = File::open(path)?;
        Self::read(BufReader::new(file), policy)
    }

    /// Reads the `<count> <dim>` header format. Errors name the offending
    /// 1-based line. Underscores in entity keys read as spaces.
    pub fn read<R: BufRead>(reader: R, policy: NamespacePolicy) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or(EmbeddingError::MissingHeader)??;
        if header.trim().is_empty() {
            return Err(EmbeddingError::MissingHeader);
        }
        let mut fields = header.split(' ');
        let parse_header = |field: Option<&str>, what: &str| -> Result<usize> {
            field
                .and_then(|f| f.parse::<usize>().ok())
                .ok_or_else(|| EmbeddingError::Malformed {
                    line: 1,
                    message: format!("header: cannot parse {what}"),
                })
        };
        let count = parse_header(fields.next(), "count")?;
        let dim = parse_header(fields.next(), "dim")?;
        if fields.next().is_some() {
            return Err(EmbeddingError::Malformed {
                line: 1,
                message: "header: expected `<count> <dim>`".to_string(),
            });
        }
        if dim == 0 {
            return Err(EmbeddingError::Malformed {
                line: 1,
                message: "header: dim must be positive".to_string(),
            });
        }

        let mut table = Self::new(dim, policy.cased)?;
        let mut rows = 0;
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let key = parts.next().unwrap_or_default();
            if key.is_empty() {
                return Err(EmbeddingError::Malformed {
                    line: line_no,
                    message: "empty key".to_string(),
                });
            }
            let values = parts
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| EmbeddingError::Malformed {
                    line: line_no,
                    message: format!("bad float: {e}"),
                })?;
            if values.len() != dim {
                return Err(EmbeddingError::RowDimension {
                    line: line_no,
                    expected: dim,
                    found: values.len(),
                });
            }
            let (ns, key) = match key.strip_prefix(ENTITY_PREFIX) {
                Some(stripped) => (Namespace::Entity, stripped.replace('_', " ")),
                None => (policy.plain_keys, key.to_string()),
            };
            if table.contains(ns, &key) {
                return Err(EmbeddingError::DuplicateKey { line: line_no, key });
            }
            table.insert(ns, key, values)?;
            rows += 1;
            if rows > count {
                return Err(EmbeddingError::Malformed {
                    line: line_no,
                    message: format!("more rows than the declared count {count}"),
                });
            }
        }
        if rows != count {
            return Err(EmbeddingError::Malformed {
                line: rows + 1,
                message: format!("declared {count} rows, found {rows}"),
            });
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    /// Writes words, then wordpieces, then prefixed entities with spaces
    /// written as underscores. Floats use the shortest representation that
    /// round-trips.
    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{} {}", self.total_len(), self.dim)?;
        let mut emit = |key: &str, v: &[f64]| -> std::io::Result<()> {
            out.write_all(key.as_bytes())?;
            for x in v {
                write!(out, " {x}")?;
            }
            out.write_all(b"\n")
        };
        for (k, v) in &self.words {
            emit(k, v)?;
        }
        for (k, v) in &self.wordpieces {
            emit(k, v)?;
        }
        for (k, v) in &self.entities {
            emit(&format!("{ENTITY_PREFIX}{}", k.replace(' ', "_")), v)?;
        }
        Ok(())
    }
}

/// A case-folded key present on both sides, with the original spelling used
/// to look it up in each table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedKey {
    pub key: String,
    pub source_key: String,
    pub target_key: String,
}

fn folded_index<'a>(
    keys: impl Iterator<Item = &'a str>,
    skip_continuations: bool,
) -> BTreeMap<String, &'a str> {
    let mut index: BTreeMap<String, &'a str> = BTreeMap::new();
    for key in keys {
        if skip_continuations && key.starts_with(CONTINUATION_PREFIX) {
            continue;
        }
        let folded = key.to_lowercase();
        // Several originals may fold together: an exact lowercase spelling
        // wins, otherwise the lexicographically smallest original.
        let replace = match index.get(&folded) {
            None => true,
            Some(existing) => {
                let existing_exact = *existing == folded;
                let key_exact = key == folded;
                (key_exact && !existing_exact) || (key_exact == existing_exact && key < *existing)
            }
        };
        if replace {
            index.insert(folded, key);
        }
    }
    index
}

/// Words of `src` that are also full wordpieces of `tgt`, compared after
/// lowercasing both sides, sorted by folded key.
pub fn shared_vocabulary(src: &EmbeddingTable, tgt: &EmbeddingTable) -> Result<Vec<SharedKey>> {
    let source = folded_index(src.keys(Namespace::Word), false);
    let target = folded_index(tgt.keys(Namespace::Wordpiece), true);
    let shared: Vec<SharedKey> = source
        .iter()
        .filter_map(|(folded, src_key)| {
            target.get(folded).map(|tgt_key| SharedKey {
                key: folded.clone(),
                source_key: (*src_key).to_string(),
                target_key: (*tgt_key).to_string(),
            })
        })
        .collect();
    if shared.is_empty() {
        return Err(EmbeddingError::NoSharedVocabulary);
    }
    Ok(shared)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str, policy: NamespacePolicy) -> Result<EmbeddingTable> {
        EmbeddingTable::read(text.as_bytes(), policy)
    }

    #[test]
    fn loads_words_and_entities() {
        let t = read(
            "2 3\ncat 1 0 0\nENTITY/Cat 0 1 0\n",
            NamespacePolicy::words(),
        )
        .unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.get(Namespace::Word, "cat"), Some(&[1.0, 0.0, 0.0][..]));
        assert_eq!(t.get(Namespace::Entity, "Cat"), Some(&[0.0, 1.0, 0.0][..]));
        assert!(!t.contains(Namespace::Word, "ENTITY/Cat"));
    }

    #[test]
    fn row_dimension_mismatch_names_line() {
        let err = read("1 2\ndog 1 0 0\n", NamespacePolicy::words()).unwrap_err();
        match err {
            EmbeddingError::RowDimension {
                line,
                expected,
                found,
            } => {
                assert_eq!((line, expected, found), (2, 2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_missing_header() {
        let err = read("", NamespacePolicy::words()).unwrap_err();
        assert_eq!(err.to_string(), "missing header");
    }

    #[test]
    fn duplicate_key_names_line() {
        let err = read("2 1\na 1\na 2\n", NamespacePolicy::words()).unwrap_err();
        assert!(matches!(err, EmbeddingError::DuplicateKey { line: 3, .. }));
        // same key in different namespaces is fine
        read("2 1\na 1\nENTITY/a 2\n", NamespacePolicy::words()).unwrap();
    }

    #[test]
    fn count_mismatch_is_an_error() {
        assert!(read("3 1\na 1\nb 2\n", NamespacePolicy::words()).is_err());
        assert!(read("1 1\na 1\nb 2\n", NamespacePolicy::words()).is_err());
        assert!(read("x 1\n", NamespacePolicy::words()).is_err());
    }

    #[test]
    fn write_then_read_preserves_rows() {
        let mut t = EmbeddingTable::new(2, false).unwrap();
        t.insert(Namespace::Wordpiece, "the", vec![0.1, -2.5e-7])
            .unwrap();
        t.insert(Namespace::Wordpiece, "##s", vec![1.0 / 3.0, 7.0])
            .unwrap();
        t.insert(Namespace::Entity, "Paris", vec![4.0, 5.0])
            .unwrap();
        t.insert(Namespace::Entity, "Barack Obama", vec![6.0, 7.0])
            .unwrap();
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert!(std::str::from_utf8(&buf)
            .unwrap()
            .contains("ENTITY/Barack_Obama 6 7\n"));
        let back = read(
            std::str::from_utf8(&buf).unwrap(),
            NamespacePolicy::wordpieces(),
        )
        .unwrap();
        assert_eq!(back, t);
    }

    fn table(ns: Namespace, keys: &[&str]) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(1, ns == Namespace::Word).unwrap();
        for (i, k) in keys.iter().enumerate() {
            t.insert(ns, *k, vec![i as f64]).unwrap();
        }
        t
    }

    #[test]
    fn shared_vocabulary_folds_case_and_skips_continuations() {
        let src = table(Namespace::Word, &["the", "Paris"]);
        let tgt = table(Namespace::Wordpiece, &["the", "paris", "##s"]);
        let shared = shared_vocabulary(&src, &tgt).unwrap();
        let keys: Vec<_> = shared.iter().map(|k| k.key.as_str()).collect();
        assert_eq!(keys, ["paris", "the"]);
        assert_eq!(shared[0].source_key, "Paris");
        assert_eq!(shared[0].target_key, "paris");
    }

    #[test]
    fn shared_vocabulary_identity_and_disjoint() {
        let src = table(Namespace::Word, &["a"]);
        let tgt = table(Namespace::Wordpiece, &["a"]);
        assert_eq!(shared_vocabulary(&src, &tgt).unwrap()[0].key, "a");

        let tgt = table(Namespace::Wordpiece, &["b", "##a"]);
        assert!(matches!(
            shared_vocabulary(&src, &tgt),
            Err(EmbeddingError::NoSharedVocabulary)
        ));
    }

    #[test]
    fn folding_collisions_prefer_lowercase_spelling() {
        let src = table(Namespace::Word, &["Apple", "apple", "APPLE"]);
        let tgt = table(Namespace::Wordpiece, &["apple"]);
        let shared = shared_vocabulary(&src, &tgt).unwrap();
        assert_eq!(shared.len(), 1);
        assert_eq!(shared[0].source_key, "apple");
    }
}
