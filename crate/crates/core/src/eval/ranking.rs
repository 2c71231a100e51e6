use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HgibError, Result};
use crate::graph::InteractionGraph;
use crate::model::{score_rows, ForwardOutputs};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub users: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankingOptions {
    pub k: usize,
    /// Keep the user's training positives in the candidate set.
    pub include_train: bool,
    /// Worker threads; results are identical for any value.
    pub threads: usize,
}

impl Default for RankingOptions {
    fn default() -> Self {
        Self { k: 10, include_train: false, threads: 1 }
    }
}

/// 1-based rank of `target` when candidates are sorted by descending score
/// with ties broken by ascending index. Excluded candidates never outrank
/// the target; the target itself is never excluded.
pub fn rank_of<T: Scalar>(scores: &[T], target: usize, excluded: impl Fn(usize) -> bool) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != target && !excluded(j) && (s > st || (s == st && j < target)))
        .count()
}

/// HR@K and NDCG@K over `test_pairs` with one held-out item per user;
/// `score_fn(user)` returns scores for every item.
pub fn rank_metrics_with<T, F>(
    score_fn: F,
    test_pairs: &[(usize, usize)],
    train: Option<&InteractionGraph>,
    opts: RankingOptions,
) -> Result<RankingResult>
where
    T: Scalar,
    F: Fn(usize) -> Result<Vec<T>> + Sync,
{
    if opts.k == 0 {
        return Err(HgibError::InvalidArgument("k must be at least 1".into()));
    }
    if test_pairs.is_empty() {
        return Err(HgibError::InvalidArgument("empty test set".into()));
    }
    let rank_one = |&(u, v): &(usize, usize)| -> Result<usize> {
        let scores = score_fn(u)?;
        if v >= scores.len() {
            return Err(HgibError::OutOfRange(format!("test item {v} of {}", scores.len())));
        }
        Ok(match train {
            Some(g) => {
                let seen = g.user_neighbors(u);
                rank_of(&scores, v, |j| seen.binary_search(&j).is_ok())
            }
            None => rank_of(&scores, v, |_| false),
        })
    };
    let ranks: Vec<usize> = if opts.threads <= 1 {
        test_pairs.iter().map(rank_one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| HgibError::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| test_pairs.par_iter().map(rank_one).collect::<Result<_>>())?
    };

    // fixed user order keeps the sums bit-identical across thread counts
    let (mut hits, mut gain) = (0usize, 0.0f64);
    for &r in &ranks {
        if r <= opts.k {
            hits += 1;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    Ok(RankingResult { k: opts.k, hr: hits as f64 / n, ndcg: gain / n, users: ranks.len() })
}

/// Full ranking with the model's final representation.
pub fn rank_metrics<T: Scalar>(
    outputs: &ForwardOutputs<T>,
    test_pairs: &[(usize, usize)],
    train: &InteractionGraph,
    opts: RankingOptions,
) -> Result<RankingResult> {
    let num_items = outputs.o.rows() - outputs.num_users;
    let all: Vec<usize> = (0..num_items).collect();
    let exclusions = (!opts.include_train).then_some(train);
    rank_metrics_with(|u| score_rows(&outputs.o, outputs.num_users, u, &all), test_pairs, exclusions, opts)
}
