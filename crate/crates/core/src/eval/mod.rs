//! Full-ranking evaluation and spectral diagnostics of embeddings.

mod abundance;
mod ranking;

pub use abundance::{
    diagnose_hierarchy, information_abundance, singular_values, symmetric_eigen, StageAbundance, SymmetricEigen,
};
pub use ranking::{rank_metrics, rank_metrics_with, rank_of, RankingOptions, RankingResult};
