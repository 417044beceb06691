use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use super::DataError;

/// Precomputed text vectors keyed by text id.
///
/// File layout: a header line `dim<TAB>N`, then one line per entry,
/// `id<TAB>base64(little-endian f32 × N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalEmbeddingTable {
    dim: usize,
    entries: BTreeMap<String, Vec<f32>>,
}

impl ExternalEmbeddingTable {
    pub fn new(dim: usize) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::Schema("embedding dim must be positive".into()));
        }
        Ok(Self {
            dim,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<(), DataError> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(DataError::Schema(format!(
                "entry {id}: length {} but table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if id.is_empty() || id.contains(['\t', '\n', '\r']) {
            return Err(DataError::Schema(format!("invalid text id {id:?}")));
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[f32], DataError> {
        self.entries
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| DataError::Lookup(format!("no embedding for text id {id:?}")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| DataError::Schema("empty embedding table: missing dim header".into()))?;
        let dim = header
            .strip_prefix("dim\t")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .ok_or_else(|| DataError::Parse {
                line: 1,
                message: format!("expected `dim<TAB>N` header, got {header:?}"),
            })?;
        let mut table = Self::new(dim)?;
        for (n, line) in lines {
            let (id, payload) = line.split_once('\t').ok_or_else(|| DataError::Parse {
                line: n + 1,
                message: "expected id<TAB>base64".into(),
            })?;
            let bytes = STANDARD.decode(payload.trim()).map_err(|e| DataError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            if bytes.len() != dim * 4 {
                return Err(DataError::Schema(format!(
                    "line {}: entry {id} has {} bytes, dim {dim} needs {}",
                    n + 1,
                    bytes.len(),
                    dim * 4
                )));
            }
            let v = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            table.insert(id, v)?;
        }
        Ok(table)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dim\t{}\n", self.dim);
        for (id, v) in &self.entries {
            let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            let _ = writeln!(out, "{id}\t{}", STANDARD.encode(bytes));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_text()).map_err(|e| DataError::io(path, e))
    }
}
