//! Domain types shared by every other module: samples, the dataset manifest
//! (JSONL on disk) and the binary embedding store.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VttError};

/// A reference to one state image. Pixels are never stored; the embedding
/// store holds the vector for `state_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRef {
    pub state_id: String,
    pub source: String,
    pub timestamp_sec: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = VttError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(VttError::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One task instance: N+1 ordered states and the N transformations between
/// consecutive states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VttSample {
    pub sample_id: String,
    pub category: String,
    pub topic: String,
    pub split: Split,
    pub states: Vec<StateRef>,
    pub transformations: Vec<String>,
}

impl VttSample {
    /// Number of transformations N.
    pub fn n_transformations(&self) -> usize {
        self.transformations.len()
    }

    /// Check the per-sample invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| VttError::invalid("sample", &self.sample_id, reason);
        if self.sample_id.trim().is_empty() {
            return Err(bad("empty sample_id".into()));
        }
        if self.transformations.is_empty() {
            return Err(bad("needs at least one transformation".into()));
        }
        if self.states.len() != self.transformations.len() + 1 {
            return Err(bad(format!(
                "len(states) == len(transformations) + 1 violated: {} states, {} transformations",
                self.states.len(),
                self.transformations.len()
            )));
        }
        if let Some(i) = self.transformations.iter().position(|t| t.trim().is_empty()) {
            return Err(bad(format!("transformation {i} is empty")));
        }
        if self.category.trim().is_empty() || self.topic.trim().is_empty() {
            return Err(bad("category and topic must be non-empty".into()));
        }
        for s in &self.states {
            if s.state_id.is_empty() {
                return Err(bad("empty state_id".into()));
            }
            if let Some(t) = s.timestamp_sec {
                if !t.is_finite() || t < 0.0 {
                    return Err(bad(format!("state `{}` has invalid timestamp {t}", s.state_id)));
                }
            }
        }
        Ok(())
    }
}

/// A dataset: samples plus the closed, sorted label sets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub samples: Vec<VttSample>,
    pub categories: Vec<String>,
    pub topics: Vec<String>,
}

impl DatasetManifest {
    /// Build a manifest, deriving the sorted label lists from the samples.
    pub fn new(samples: Vec<VttSample>) -> Self {
        let categories: BTreeSet<_> = samples.iter().map(|s| s.category.clone()).collect();
        let topics: BTreeSet<_> = samples.iter().map(|s| s.topic.clone()).collect();
        DatasetManifest {
            samples,
            categories: categories.into_iter().collect(),
            topics: topics.into_iter().collect(),
        }
    }

    /// Check every invariant: per-sample rules plus uniqueness of sample and
    /// state ids across the manifest.
    pub fn validate(&self) -> Result<()> {
        let mut sample_ids = HashSet::new();
        let mut state_ids = HashSet::new();
        for s in &self.samples {
            s.validate()?;
            if !sample_ids.insert(s.sample_id.as_str()) {
                return Err(VttError::invalid("sample", &s.sample_id, "duplicate sample_id"));
            }
            for st in &s.states {
                if !state_ids.insert(st.state_id.as_str()) {
                    return Err(VttError::invalid(
                        "sample",
                        &s.sample_id,
                        format!("state_id `{}` is not unique in the manifest", st.state_id),
                    ));
                }
            }
            if self.category_index(&s.category).is_none() || self.topic_index(&s.topic).is_none() {
                return Err(VttError::invalid("sample", &s.sample_id, "label outside the closed label set"));
            }
        }
        Ok(())
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.binary_search_by(|c| c.as_str().cmp(label)).ok()
    }

    pub fn topic_index(&self, label: &str) -> Option<usize> {
        self.topics.binary_search_by(|t| t.as_str().cmp(label)).ok()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VttSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Manifest restricted to one split. Label lists are kept so indices stay
    /// aligned with the full dataset.
    pub fn subset(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            samples: self.split(split).cloned().collect(),
            categories: self.categories.clone(),
            topics: self.topics.clone(),
        }
    }
}

/// Write one sample per line. The whole manifest is validated first; nothing
/// is written if any sample is invalid.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let file = File::create(path).map_err(|e| VttError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for sample in &manifest.samples {
        let line = serde_json::to_string(sample).expect("sample serializes");
        writeln!(out, "{line}").map_err(|e| VttError::io(path, e))?;
    }
    out.flush().map_err(|e| VttError::io(path, e))
}

/// Read a JSONL manifest, validating every sample. Errors carry the 1-based
/// line number.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = File::open(path).map_err(|e| VttError::io(path, e))?;
    let mut samples = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| VttError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: VttSample = serde_json::from_str(&line).map_err(|e| VttError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if let Err(e) = sample.validate() {
            return Err(VttError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            });
        }
        samples.push(sample);
        lines.push(i + 1);
    }
    let manifest = DatasetManifest::new(samples);
    manifest.validate().map_err(|e| {
        // Attribute cross-sample violations to the offending line.
        let line = match &e {
            VttError::Invalid { id, .. } => manifest
                .samples
                .iter()
                .rposition(|s| &s.sample_id == id)
                .map(|k| lines[k])
                .unwrap_or(0),
            _ => 0,
        };
        VttError::Parse {
            path: path.to_path_buf(),
            line,
            reason: e.to_string(),
        }
    })?;
    Ok(manifest)
}

const STORE_MAGIC: &[u8; 4] = b"VTTE";
const STORE_VERSION: u32 = 1;

/// Fixed-width state vectors keyed by state id, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: IndexMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(VttError::Store("dim must be positive".into()));
        }
        Ok(EmbeddingStore {
            dim,
            entries: IndexMap::new(),
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

    pub fn insert(&mut self, state_id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = state_id.into();
        if vector.len() != self.dim {
            return Err(VttError::Store(format!(
                "vector for `{id}` has {} components, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(VttError::Store(format!("vector for `{id}` has non-finite components")));
        }
        if id.len() > u16::MAX as usize {
            return Err(VttError::Store(format!("state id of {} bytes is too long", id.len())));
        }
        if self.entries.contains_key(&id) {
            return Err(VttError::Store(format!("duplicate state_id `{id}`")));
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    pub fn get(&self, state_id: &str) -> Result<&[f32]> {
        self.entries
            .get(state_id)
            .map(Vec::as_slice)
            .ok_or_else(|| VttError::MissingEmbedding(state_id.to_string()))
    }

    pub fn contains(&self, state_id: &str) -> bool {
        self.entries.contains_key(state_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| VttError::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| VttError::io(path, e);
        out.write_all(STORE_MAGIC).map_err(io)?;
        out.write_all(&STORE_VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        out.write_all(&(self.entries.len() as u64).to_le_bytes()).map_err(io)?;
        for (id, v) in &self.entries {
            out.write_all(&(id.len() as u16).to_le_bytes()).map_err(io)?;
            out.write_all(id.as_bytes()).map_err(io)?;
            for x in v {
                out.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }
}

/// Load an embedding store written by [`EmbeddingStore::write`].
pub fn open_embedding_store(path: &Path) -> Result<EmbeddingStore> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| VttError::io(path, e))?;
    parse_store(&bytes)
}

fn parse_store(bytes: &[u8]) -> Result<EmbeddingStore> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != STORE_MAGIC {
        return Err(VttError::Store("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.array()?);
    if version != STORE_VERSION {
        return Err(VttError::Store(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(cur.array()?) as usize;
    let count = u64::from_le_bytes(cur.array()?);
    let mut store = EmbeddingStore::new(dim)?;
    for k in 0..count {
        let id_len = u16::from_le_bytes(cur.array()?) as usize;
        let id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|_| VttError::Store(format!("record {k}: id is not UTF-8")))?
            .to_string();
        let raw = cur.take(dim * 4)?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(id, vector)?;
    }
    if cur.pos != bytes.len() {
        return Err(VttError::Store(format!("{} trailing bytes after {count} records", bytes.len() - cur.pos)));
    }
    Ok(store)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(VttError::Store(format!("truncated record at byte {}", self.pos))),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: &str, n: usize, split: Split) -> VttSample {
        VttSample {
            sample_id: id.to_string(),
            category: "dish".into(),
            topic: "boil noodles".into(),
            split,
            states: (0..=n)
                .map(|k| StateRef {
                    state_id: format!("{id}/{k}"),
                    source: "vid".into(),
                    timestamp_sec: Some(k as f64 * 1.5),
                })
                .collect(),
            transformations: (0..n).map(|k| format!("step {k}")).collect(),
        }
    }

    #[test]
    fn empty_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&DatasetManifest::default(), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert_eq!(read_manifest(&path).unwrap(), DatasetManifest::default());
    }

    #[test]
    fn single_sample_is_one_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = DatasetManifest::new(vec![sample("a", 1, Split::Train)]);
        write_manifest(&m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with(r#"{"sample_id":"a","category":"dish","topic":"boil noodles","split":"train","states":[{"state_id":"a/0""#));
        assert_eq!(read_manifest(&path).unwrap(), m);
    }

    #[test]
    fn read_reports_invariant_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&sample("a", 2, Split::Train)).unwrap();
        let mut bad = sample("b", 2, Split::Train);
        bad.states.pop();
        let bad = serde_json::to_string(&bad).unwrap();
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        let err = read_manifest(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(err.contains("len(states) == len(transformations) + 1"), "{err}");

        std::fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(VttError::Parse { line: 1, .. })));
    }

    #[test]
    fn write_aborts_on_invalid_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut s = sample("bad-one", 1, Split::Train);
        s.transformations[0] = "   ".into();
        let err = write_manifest(&DatasetManifest::new(vec![s]), &path).unwrap_err();
        assert!(err.to_string().contains("bad-one"));
    }

    #[test]
    fn duplicate_state_ids_rejected() {
        let a = sample("a", 1, Split::Train);
        let mut b = sample("b", 1, Split::Train);
        b.states[0].state_id = "a/0".into();
        assert!(DatasetManifest::new(vec![a, b]).validate().is_err());
    }

    #[test]
    fn store_round_trip_and_missing_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.vtte");
        let mut store = EmbeddingStore::new(8).unwrap();
        for k in 0..3 {
            store
                .insert(format!("s{k}"), (0..8).map(|i| (k * 8 + i) as f32 * 0.37 - 1.0).collect())
                .unwrap();
        }
        store.write(&path).unwrap();
        let back = open_embedding_store(&path).unwrap();
        assert_eq!(back.dim(), 8);
        assert_eq!(back.len(), 3);
        for (id, v) in store.iter() {
            let got = back.get(id).unwrap();
            let a: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = got.iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert!(matches!(back.get("nope"), Err(VttError::MissingEmbedding(_))));
    }

    #[test]
    fn store_rejects_corruption() {
        let mut store = EmbeddingStore::new(2).unwrap();
        store.insert("x", vec![1.0, 2.0]).unwrap();
        assert!(store.insert("x", vec![1.0, 2.0]).is_err());
        assert!(store.insert("y", vec![1.0]).is_err());
        assert!(store.insert("z", vec![f32::NAN, 0.0]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.vtte");
        store.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(parse_store(&bad_magic).unwrap_err().to_string().contains("magic"));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(parse_store(&bad_version).unwrap_err().to_string().contains("version"));
        assert!(parse_store(&bytes[..bytes.len() - 1]).unwrap_err().to_string().contains("truncated"));

        // Same record twice with count bumped to 2.
        let mut dup = bytes.clone();
        dup[12..20].copy_from_slice(&2u64.to_le_bytes());
        dup.extend_from_slice(&bytes[20..]);
        assert!(parse_store(&dup).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn store_768_dim_matches_hand_written_bytes() {
        // Independent writer: lay out the documented format by hand.
        let dim = 768usize;
        let ids = ["clip/a", "clip/b"];
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VTTE");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        bytes.extend_from_slice(&(ids.len() as u64).to_le_bytes());
        for (k, id) in ids.iter().enumerate() {
            bytes.extend_from_slice(&(id.len() as u16).to_le_bytes());
            bytes.extend_from_slice(id.as_bytes());
            for i in 0..dim {
                bytes.extend_from_slice(&((i as f32).sin() * (k + 1) as f32).to_le_bytes());
            }
        }
        let store = parse_store(&bytes).unwrap();
        assert_eq!(store.dim(), 768);
        assert_eq!(store.get("clip/b").unwrap()[5].to_bits(), ((5f32).sin() * 2.0).to_bits());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.vtte");
        store.write(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    fn arb_manifest() -> impl Strategy<Value = DatasetManifest> {
        let fields = (
            1usize..5,
            prop::sample::select(vec![Split::Train, Split::Val, Split::Test]),
            "[a-z]{1,6}",
            "[a-z]{1,6}( [a-z]{1,6}){0,2}",
            prop::option::of(0.0f64..1e6),
        );
        prop::collection::vec(fields, 0..6).prop_map(|rows| {
            let samples = rows
                .into_iter()
                .enumerate()
                .map(|(idx, (n, split, cat, words, ts))| VttSample {
                    sample_id: format!("s{idx}"),
                    category: cat.clone(),
                    topic: format!("{cat} topic"),
                    split,
                    states: (0..=n)
                        .map(|k| StateRef {
                            state_id: format!("s{idx}/{k}"),
                            source: format!("v{idx}"),
                            timestamp_sec: ts.map(|t| t + k as f64 * 0.1),
                        })
                        .collect(),
                    transformations: (0..n).map(|k| format!("{words} {k}")).collect(),
                })
                .collect();
            DatasetManifest::new(samples)
        })
    }

    proptest! {
        #[test]
        fn manifest_round_trip(m in arb_manifest()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.jsonl");
            write_manifest(&m, &path).unwrap();
            let back = read_manifest(&path).unwrap();
            let total: usize = Split::ALL.iter().map(|&s| back.split_len(s)).sum();
            prop_assert_eq!(total, back.samples.len());
            prop_assert_eq!(back, m);
        }

        #[test]
        fn store_round_trip_bit_exact(vals in prop::collection::vec(prop::collection::vec(-1e30f32..1e30, 3), 0..6)) {
            let mut store = EmbeddingStore::new(3).unwrap();
            for (i, v) in vals.iter().enumerate() {
                store.insert(format!("id{i}"), v.clone()).unwrap();
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("e.vtte");
            store.write(&path).unwrap();
            let back = open_embedding_store(&path).unwrap();
            prop_assert_eq!(back.len(), vals.len());
            for (id, v) in store.iter() {
                let a: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = back.get(id).unwrap().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
