use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_interactions, DatasetManifest, IdMap};
use crate::error::{HgibError, Result};

pub const P_VIEW_WITHIN: f64 = 0.3;
pub const P_VIEW_ACROSS: f64 = 0.02;
pub const P_CART_WITHIN: f64 = 0.3;
pub const P_CART_ACROSS: f64 = 0.05;
pub const P_BUY_FROM_CART: f64 = 0.4;
pub const P_BUY_DIRECT: f64 = 0.02;

const MAX_ENTITIES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_users: 500, num_items: 200, num_clusters: 5, noise_rate: 0.3, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters < 2 {
            return Err(HgibError::InvalidArgument(format!("need at least 2 clusters, got {}", self.num_clusters)));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(HgibError::InvalidArgument(format!("noise_rate {} outside [0, 1)", self.noise_rate)));
        }
        if self.num_users < self.num_clusters || self.num_items < self.num_clusters {
            return Err(HgibError::InvalidArgument(format!(
                "{} users and {} items cannot fill {} clusters",
                self.num_users, self.num_items, self.num_clusters
            )));
        }
        if self.num_users >= MAX_ENTITIES || self.num_items >= MAX_ENTITIES {
            return Err(HgibError::InvalidArgument(format!("sizes must be below {MAX_ENTITIES}")));
        }
        Ok(())
    }
}

/// Planted multi-behavior data. Edge lists are sorted by `(user, item)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub config: SynthConfig,
    pub user_cluster: Vec<usize>,
    pub item_cluster: Vec<usize>,
    /// Views including noise edges.
    pub view: Vec<(usize, usize)>,
    pub cart: Vec<(usize, usize)>,
    pub buy: Vec<(usize, usize)>,
    /// Buys not preceded by a cart.
    pub direct_buys: Vec<(usize, usize)>,
    /// Uniformly random view edges added on top of the planted views.
    pub noise: Vec<(usize, usize)>,
}

fn balanced_clusters(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut c: Vec<usize> = (0..n).map(|i| i % k).collect();
    c.shuffle(rng);
    c
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticData> {
    config.validate()?;
    let SynthConfig { num_users, num_items, num_clusters, noise_rate, seed } = *config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user_cluster = balanced_clusters(num_users, num_clusters, &mut rng);
    let item_cluster = balanced_clusters(num_items, num_clusters, &mut rng);

    let mut view = BTreeSet::new();
    let mut cart = BTreeSet::new();
    let mut buy = BTreeSet::new();
    let mut direct_buys = BTreeSet::new();
    for u in 0..num_users {
        for v in 0..num_items {
            let within = user_cluster[u] == item_cluster[v];
            let (p_view, p_cart) = if within { (P_VIEW_WITHIN, P_CART_WITHIN) } else { (P_VIEW_ACROSS, P_CART_ACROSS) };
            if rng.gen_bool(p_view) {
                view.insert((u, v));
                if rng.gen_bool(p_cart) {
                    cart.insert((u, v));
                    if rng.gen_bool(P_BUY_FROM_CART) {
                        buy.insert((u, v));
                    }
                }
            }
        }
    }
    for u in 0..num_users {
        for v in 0..num_items {
            if user_cluster[u] == item_cluster[v] && !buy.contains(&(u, v)) && rng.gen_bool(P_BUY_DIRECT) {
                buy.insert((u, v));
                direct_buys.insert((u, v));
            }
        }
    }

    let target = (noise_rate * view.len() as f64).floor() as usize;
    let free = num_users * num_items - view.len();
    if target > free {
        return Err(HgibError::InvalidArgument(format!("{target} noise edges requested, only {free} free pairs")));
    }
    let mut noise = BTreeSet::new();
    while noise.len() < target {
        let pair = (rng.gen_range(0..num_users), rng.gen_range(0..num_items));
        if !view.contains(&pair) {
            noise.insert(pair);
        }
    }
    view.extend(noise.iter().copied());

    Ok(SyntheticData {
        config: *config,
        user_cluster,
        item_cluster,
        view: view.into_iter().collect(),
        cart: cart.into_iter().collect(),
        buy: buy.into_iter().collect(),
        direct_buys: direct_buys.into_iter().collect(),
        noise: noise.into_iter().collect(),
    })
}

pub fn user_token(u: usize) -> String {
    format!("u{u:05}")
}

pub fn item_token(v: usize) -> String {
    format!("i{v:05}")
}

/// Writes `view.tsv`, `cart.tsv`, `buy.tsv`, `manifest.json`, and the
/// `truth.json` sidecar listing noise edges as token pairs. Returns the
/// manifest path.
pub fn write_synthetic(data: &SyntheticData, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| HgibError::io(dir, e))?;
    let users = IdMap::from_tokens((0..data.config.num_users).map(user_token));
    let items = IdMap::from_tokens((0..data.config.num_items).map(item_token));
    let mut files = BTreeMap::new();
    for (name, edges) in [("view", &data.view), ("cart", &data.cart), ("buy", &data.buy)] {
        let file = format!("{name}.tsv");
        write_interactions(&dir.join(&file), edges, &users, &items)?;
        files.insert(name.to_string(), PathBuf::from(file));
    }
    let manifest = DatasetManifest {
        behaviors: vec!["view".into(), "cart".into(), "buy".into()],
        target: "buy".into(),
        files,
        num_users: Some(data.config.num_users),
        num_items: Some(data.config.num_items),
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| HgibError::io(&manifest_path, e))?;

    let truth: Vec<(String, String)> = data.noise.iter().map(|&(u, v)| (user_token(u), item_token(v))).collect();
    let truth_path = dir.join("truth.json");
    fs::write(&truth_path, serde_json::to_string(&truth)? + "\n").map_err(|e| HgibError::io(&truth_path, e))?;
    Ok(manifest_path)
}
