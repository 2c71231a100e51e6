use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{IdMap, RawDataset, RawEdge};
use crate::error::{HgibError, Result};
use crate::graph::{BehaviorSchema, InteractionGraph};
use crate::model::{build_hierarchy, HierarchyGraphs};

/// Training graphs plus held-out target pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub schema: BehaviorSchema,
    pub num_users: usize,
    pub num_items: usize,
    /// Training graph per behavior, in schema order.
    pub train: Vec<InteractionGraph>,
    pub test: Vec<(usize, usize)>,
    pub validation: Vec<(usize, usize)>,
    pub user_ids: IdMap,
    pub item_ids: IdMap,
}

impl SplitDataset {
    pub fn target_train(&self) -> &InteractionGraph {
        &self.train[self.schema.target_index()]
    }

    pub fn hierarchy(&self) -> Result<HierarchyGraphs> {
        build_hierarchy(&self.schema, self.train.clone())
    }

    /// Checks that no held-out pair appears in target training and that
    /// every test user keeps a target training edge.
    pub fn check_no_leak(&self) -> Result<()> {
        let train = self.target_train();
        for &(u, v) in self.test.iter().chain(&self.validation) {
            if train.contains(u, v) {
                return Err(HgibError::Data(format!("held-out pair ({u}, {v}) is in target training")));
            }
        }
        for &(u, _) in &self.test {
            if train.user_neighbors(u).is_empty() {
                return Err(HgibError::Data(format!("test user {u} has no target training edge")));
            }
        }
        Ok(())
    }
}

/// Holds out the latest target interaction of each user for testing and
/// the next latest for validation. Users need at least 3 target edges for
/// a validation entry and at least 2 for a test entry. Without complete
/// timestamps the order is a seeded shuffle.
pub fn leave_one_out_split(raw: &RawDataset, seed: u64) -> Result<SplitDataset> {
    let t = raw.schema.target_index();
    let target = &raw.behaviors[t];
    let timed = target.iter().all(|e| e.timestamp.is_some());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_user: Vec<Vec<RawEdge>> = vec![Vec::new(); raw.num_users];
    for e in target {
        by_user[e.user].push(*e);
    }

    let mut test = Vec::new();
    let mut validation = Vec::new();
    let mut held: BTreeSet<(usize, usize)> = BTreeSet::new();
    for edges in &mut by_user {
        if timed {
            edges.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).unwrap().then(a.item.cmp(&b.item)));
        } else {
            edges.shuffle(&mut rng);
        }
        if edges.len() >= 2 {
            let last = edges[edges.len() - 1];
            test.push((last.user, last.item));
            held.insert((last.user, last.item));
        }
        if edges.len() >= 3 {
            let next = edges[edges.len() - 2];
            validation.push((next.user, next.item));
            held.insert((next.user, next.item));
        }
    }

    let train = raw
        .behaviors
        .iter()
        .enumerate()
        .map(|(b, edges)| {
            let pairs = edges
                .iter()
                .map(|e| (e.user, e.item))
                .filter(|p| b != t || !held.contains(p));
            InteractionGraph::build(raw.num_users, raw.num_items, pairs)
        })
        .collect::<Result<Vec<_>>>()?;

    let split = SplitDataset {
        schema: raw.schema.clone(),
        num_users: raw.num_users,
        num_items: raw.num_items,
        train,
        test,
        validation,
        user_ids: raw.user_ids.clone(),
        item_ids: raw.item_ids.clone(),
    };
    split.check_no_leak()?;
    Ok(split)
}
