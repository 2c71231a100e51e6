//! Binary dataset bundle: magic, version, a length-prefixed JSON header
//! (schema, sizes, ID maps) and little-endian `u64` edge lists for every
//! training graph, then test and validation pairs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IdMap, SplitDataset};
use crate::error::{HgibError, Result};
use crate::graph::{BehaviorSchema, InteractionGraph};
use crate::report::atomic_write;

const MAGIC: &[u8; 8] = b"HGIBDATA";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    behaviors: Vec<String>,
    target: String,
    num_users: usize,
    num_items: usize,
    user_ids: IdMap,
    item_ids: IdMap,
}

fn put_pairs(out: &mut Vec<u8>, pairs: &[(usize, usize)]) {
    out.extend_from_slice(&(pairs.len() as u64).to_le_bytes());
    for &(u, v) in pairs {
        out.extend_from_slice(&(u as u64).to_le_bytes());
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
}

pub fn write_bundle(split: &SplitDataset, path: &Path) -> Result<()> {
    let header = Header {
        behaviors: split.schema.names().to_vec(),
        target: split.schema.target_name().to_string(),
        num_users: split.num_users,
        num_items: split.num_items,
        user_ids: split.user_ids.clone(),
        item_ids: split.item_ids.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for g in &split.train {
        put_pairs(&mut out, g.edges());
    }
    put_pairs(&mut out, &split.test);
    put_pairs(&mut out, &split.validation);
    atomic_write(path, &out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| HgibError::Format("dataset bundle truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().unwrap());
        usize::try_from(v).map_err(|_| HgibError::Format(format!("value {v} does not fit in usize")))
    }

    fn pairs(&mut self) -> Result<Vec<(usize, usize)>> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) / 16 {
            return Err(HgibError::Format(format!("edge count {n} exceeds bundle size")));
        }
        (0..n).map(|_| Ok((self.u64()?, self.u64()?))).collect()
    }
}

pub fn read_bundle(path: &Path) -> Result<SplitDataset> {
    let buf = fs::read(path).map_err(|e| HgibError::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(HgibError::Format(format!("{} is not a dataset bundle", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(HgibError::Format(format!("unsupported dataset bundle version {version}")));
    }
    let len = r.u64()?;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    let schema = BehaviorSchema::with_target(header.behaviors, &header.target)?;
    let train = (0..schema.len())
        .map(|_| InteractionGraph::build(header.num_users, header.num_items, r.pairs()?))
        .collect::<Result<Vec<_>>>()?;
    let test = r.pairs()?;
    let validation = r.pairs()?;
    if r.pos != buf.len() {
        return Err(HgibError::Format("trailing bytes after dataset bundle".into()));
    }
    for &(u, v) in test.iter().chain(&validation) {
        if u >= header.num_users || v >= header.num_items {
            return Err(HgibError::Format(format!("held-out pair ({u}, {v}) out of range")));
        }
    }
    let split = SplitDataset {
        schema,
        num_users: header.num_users,
        num_items: header.num_items,
        train,
        test,
        validation,
        user_ids: header.user_ids,
        item_ids: header.item_ids,
    };
    split.check_no_leak()?;
    Ok(split)
}
