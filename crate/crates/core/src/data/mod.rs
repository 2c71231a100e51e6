//! Dataset ingestion, leave-one-out splitting, dataset bundles, and the
//! synthetic multi-behavior generator.
//!
//! Interaction files are UTF-8 text with one `user<TAB>item[<TAB>timestamp]`
//! record per line and no header. Tokens are arbitrary strings; dense
//! indices follow lexicographic token order.

mod bundle;
mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HgibError, Result};
use crate::graph::BehaviorSchema;

pub use bundle::{read_bundle, write_bundle};
pub use split::{leave_one_out_split, SplitDataset};
pub use synth::{generate_synthetic, write_synthetic, SynthConfig, SyntheticData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub behaviors: Vec<String>,
    pub target: String,
    /// Behavior name to interaction file. Relative paths resolve against
    /// the manifest's directory.
    pub files: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_users: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_items: Option<usize>,
}

impl DatasetManifest {
    /// Reads a manifest and resolves its file paths.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HgibError::io(path, e))?;
        let mut manifest: Self = serde_json::from_str(&text)
            .map_err(|e| HgibError::Data(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for file in manifest.files.values_mut() {
            if file.is_relative() {
                *file = base.join(&*file);
            }
        }
        Ok(manifest)
    }

    pub fn schema(&self) -> Result<BehaviorSchema> {
        BehaviorSchema::with_target(self.behaviors.clone(), &self.target)
    }
}

/// Sorted token list; a token's position is its dense index.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IdMap {
    tokens: Vec<String>,
}

impl IdMap {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = tokens.into_iter().collect();
        Self { tokens: set.into_iter().collect() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.tokens.binary_search_by(|t| t.as_str().cmp(token)).ok()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawEdge {
    pub user: usize,
    pub item: usize,
    pub timestamp: Option<f64>,
}

/// Parsed interactions with dense indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub schema: BehaviorSchema,
    pub num_users: usize,
    pub num_items: usize,
    pub user_ids: IdMap,
    pub item_ids: IdMap,
    /// Deduplicated edges per behavior in schema order, sorted by
    /// `(user, item)`. A repeated pair keeps its latest timestamp.
    pub behaviors: Vec<Vec<RawEdge>>,
}

impl RawDataset {
    pub fn edge_counts(&self) -> Vec<(String, usize)> {
        self.schema.names().iter().cloned().zip(self.behaviors.iter().map(Vec::len)).collect()
    }
}

struct ParsedLine {
    user: String,
    item: String,
    timestamp: Option<f64>,
}

fn parse_file(path: &Path) -> Result<Vec<ParsedLine>> {
    let text = fs::read_to_string(path).map_err(|e| HgibError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| HgibError::Parse { file: path.to_path_buf(), line: line_no, msg };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(err(format!("expected 2 or 3 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(err("empty user or item token".into()));
        }
        let timestamp = match fields.get(2) {
            Some(ts) => Some(ts.parse::<f64>().ok().filter(|t| t.is_finite()).ok_or_else(|| err(format!("bad timestamp {ts:?}")))?),
            None => None,
        };
        out.push(ParsedLine { user: fields[0].to_string(), item: fields[1].to_string(), timestamp });
    }
    Ok(out)
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<RawDataset> {
    let schema = manifest.schema()?;
    let mut parsed = Vec::with_capacity(schema.len());
    for name in schema.names() {
        let path = manifest
            .files
            .get(name)
            .ok_or_else(|| HgibError::Data(format!("manifest has no file for behavior {name:?}")))?;
        parsed.push(parse_file(path)?);
    }
    if parsed[schema.target_index()].is_empty() {
        return Err(HgibError::Data(format!("target behavior {:?} has no interactions", schema.target_name())));
    }

    let user_ids = IdMap::from_tokens(parsed.iter().flatten().map(|l| l.user.clone()));
    let item_ids = IdMap::from_tokens(parsed.iter().flatten().map(|l| l.item.clone()));
    let num_users = manifest.num_users.unwrap_or(0).max(user_ids.len());
    let num_items = manifest.num_items.unwrap_or(0).max(item_ids.len());

    let behaviors = parsed
        .iter()
        .map(|lines| {
            let mut edges: BTreeMap<(usize, usize), Option<f64>> = BTreeMap::new();
            for l in lines {
                let key = (user_ids.index_of(&l.user).unwrap(), item_ids.index_of(&l.item).unwrap());
                let slot = edges.entry(key).or_insert(l.timestamp);
                if let (Some(old), Some(new)) = (*slot, l.timestamp) {
                    *slot = Some(old.max(new));
                }
            }
            edges.into_iter().map(|((user, item), timestamp)| RawEdge { user, item, timestamp }).collect()
        })
        .collect();
    Ok(RawDataset { schema, num_users, num_items, user_ids, item_ids, behaviors })
}

/// Writes edges as `user<TAB>item` lines using the given token maps.
pub fn write_interactions(path: &Path, edges: &[(usize, usize)], user_ids: &IdMap, item_ids: &IdMap) -> Result<()> {
    let mut text = String::new();
    for &(u, v) in edges {
        let (ut, it) = user_ids
            .token(u)
            .zip(item_ids.token(v))
            .ok_or_else(|| HgibError::OutOfRange(format!("edge ({u}, {v}) has no token")))?;
        text.push_str(ut);
        text.push('\t');
        text.push_str(it);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| HgibError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_in(dir: &Path, files: &[(&str, &str)], target: &str) -> DatasetManifest {
        let mut map = BTreeMap::new();
        for (name, body) in files {
            let p = dir.join(format!("{name}.tsv"));
            fs::write(&p, body).unwrap();
            map.insert(name.to_string(), p);
        }
        DatasetManifest {
            behaviors: files.iter().map(|(n, _)| n.to_string()).collect(),
            target: target.into(),
            files: map,
            num_users: None,
            num_items: None,
        }
    }

    #[test]
    fn duplicates_and_whitespace() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_in(dir.path(), &[("buy", "a\t x\na\tx\n")], "buy");
        let raw = load_dataset(&m).unwrap();
        assert_eq!((raw.num_users, raw.num_items, raw.behaviors[0].len()), (1, 1, 1));
    }

    #[test]
    fn disjoint_user_tokens_union() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_in(dir.path(), &[("view", "a\tx\n"), ("cart", "b\tx\n"), ("buy", "c\tx\n")], "buy");
        let raw = load_dataset(&m).unwrap();
        assert_eq!(raw.num_users, 3);
        assert_eq!(raw.user_ids.tokens(), &["a", "b", "c"]);
    }

    #[test]
    fn malformed_line_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_in(dir.path(), &[("buy", "a\tx\nbroken\n")], "buy");
        match load_dataset(&m).unwrap_err() {
            HgibError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn empty_target_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_in(dir.path(), &[("view", "a\tx\n"), ("buy", "")], "buy");
        assert!(load_dataset(&m).is_err());
    }

    #[test]
    fn latest_timestamp_kept() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_in(dir.path(), &[("buy", "a\tx\t5\na\tx\t9\na\tx\t2\n")], "buy");
        let raw = load_dataset(&m).unwrap();
        assert_eq!(raw.behaviors[0][0].timestamp, Some(9.0));
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(&p, r#"{"behaviors":["buy"],"target":"buy","files":{"buy":"b.tsv"},"extra":1}"#).unwrap();
        assert!(DatasetManifest::read(&p).is_err());
    }
}
