//! Graph refinement encoder.
//!
//! Edge weights are the sigmoid of endpoint-embedding dot products, pruned
//! to zero at or below `tau`. In training, each surviving edge is kept by a
//! binary-concrete gate whose keep probability equals its weight; the hard
//! gate is used forward and the relaxed sample carries the gradient. The
//! refined graph is then propagated LightGCN-style with the layer-0 term
//! included in the readout mean.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{dot, DenseMatrix, Tape, Var};
use crate::error::{HgibError, Result};
use crate::graph::{InteractionGraph, WeightedAdjacency};
use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub tau: f64,
    pub gumbel_temperature: f64,
    pub num_prop_layers: usize,
    pub mode: Mode,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self { tau: 0.05, gumbel_temperature: 0.5, num_prop_layers: 1, mode: Mode::Eval }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(HgibError::InvalidArgument(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.gumbel_temperature > 0.0) || !self.gumbel_temperature.is_finite() {
            return Err(HgibError::InvalidArgument(format!(
                "gumbel temperature must be positive, got {}",
                self.gumbel_temperature
            )));
        }
        if self.num_prop_layers == 0 {
            return Err(HgibError::InvalidArgument("num_prop_layers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }
}

fn check_rows<T: Scalar>(e: &DenseMatrix<T>, graph: &InteractionGraph) -> Result<()> {
    if e.rows() != graph.num_nodes() {
        return Err(HgibError::shape(
            "gre",
            format!("embedding has {} rows, graph has {} nodes", e.rows(), graph.num_nodes()),
        ));
    }
    Ok(())
}

/// `e_u . e_v` for every edge, in canonical edge order.
pub fn edge_logits<T: Scalar>(e: &DenseMatrix<T>, graph: &InteractionGraph) -> Result<Vec<T>> {
    check_rows(e, graph)?;
    let nu = graph.num_users();
    Ok(graph.edges().iter().map(|&(u, v)| dot(e.row(u), e.row(nu + v))).collect())
}

/// Refined edge weights: `sigmoid(e_u . e_v)` when above `tau`, else 0.
pub fn edge_weights<T: Scalar>(e: &DenseMatrix<T>, graph: &InteractionGraph, tau: f64) -> Result<Vec<T>> {
    let tau = T::of(tau);
    Ok(edge_logits(e, graph)?
        .into_iter()
        .map(|z| {
            let s = sigmoid(z);
            if s > tau {
                s
            } else {
                T::zero()
            }
        })
        .collect())
}

/// Difference of two independent standard Gumbel draws (a standard
/// logistic variate) per edge.
pub fn sample_gate_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, num_edges: usize) -> Vec<T> {
    let mut gumbel = || {
        // open interval keeps both logs finite
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    };
    (0..num_edges).map(|_| T::of(gumbel() - gumbel())).collect()
}

/// Relaxed gate `sigmoid((logit + noise) / temperature)`.
pub fn soft_gate<T: Scalar>(logit: T, noise: T, temperature: f64) -> T {
    sigmoid((logit + noise) / T::of(temperature))
}

/// Per-edge gates. Eval mode passes every positive weight; train mode keeps
/// a positive-weight edge with probability equal to its weight using the
/// supplied logistic noise. Zero weights are always gated off.
pub fn refine_mask<T: Scalar>(weights: &[T], config: &RefinementConfig, noise: Option<&[T]>) -> Result<Vec<T>> {
    match config.mode {
        Mode::Eval => Ok(weights.iter().map(|&w| if w > T::zero() { T::one() } else { T::zero() }).collect()),
        Mode::Train => {
            let noise = train_noise(noise, weights.len())?;
            let half = T::of(0.5);
            Ok(weights
                .iter()
                .zip(noise)
                .map(|(&w, &n)| {
                    if w > T::zero() && soft_gate(logit(w), n, config.gumbel_temperature) > half {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect())
        }
    }
}

fn logit<T: Scalar>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

fn train_noise<T>(noise: Option<&[T]>, num_edges: usize) -> Result<&[T]> {
    let noise = noise.ok_or_else(|| HgibError::InvalidArgument("train-mode refinement needs gate noise".into()))?;
    if noise.len() != num_edges {
        return Err(HgibError::shape("refine_mask", format!("{} noise draws for {num_edges} edges", noise.len())));
    }
    Ok(noise)
}

/// LightGCN readout: mean of layers `0..=num_layers` where each layer is a
/// normalized weighted propagation of the previous one.
pub fn propagate<T: Scalar>(
    graph: &InteractionGraph,
    refined_weights: &[T],
    e: &DenseMatrix<T>,
    num_layers: usize,
) -> Result<DenseMatrix<T>> {
    if num_layers == 0 {
        return Err(HgibError::InvalidArgument("num_prop_layers must be at least 1".into()));
    }
    check_rows(e, graph)?;
    let adj = WeightedAdjacency::new(graph, refined_weights)?;
    let mut layer = e.clone();
    let mut total = e.clone();
    for _ in 0..num_layers {
        layer = adj.propagate(&layer)?;
        total.add_assign(&layer);
    }
    Ok(total.scaled(T::one() / T::of_usize(num_layers + 1)))
}

/// Value-only encoder pass.
pub fn gre_forward<T: Scalar>(
    e: &DenseMatrix<T>,
    graph: &InteractionGraph,
    config: &RefinementConfig,
    noise: Option<&[T]>,
) -> Result<DenseMatrix<T>> {
    config.validate()?;
    let weights = edge_weights(e, graph, config.tau)?;
    let gates = refine_mask(&weights, config, noise)?;
    let refined: Vec<T> = weights.iter().zip(&gates).map(|(&w, &g)| w * g).collect();
    propagate(graph, &refined, e, config.num_prop_layers)
}

/// Records the encoder on `tape`. With `refine` off, every edge has unit
/// weight and no gating (plain LightGCN).
pub fn gre_forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    e: Var,
    graph: &Arc<InteractionGraph>,
    config: &RefinementConfig,
    noise: Option<&[T]>,
    refine: bool,
) -> Result<Var> {
    check_rows(tape.value(e), graph)?;
    let weights = if refine {
        refined_weights_tape(tape, e, graph, config, noise)?
    } else {
        tape.constant(DenseMatrix::filled(graph.num_edges(), 1, T::one()))?
    };
    let mut layer = e;
    let mut total = e;
    for _ in 0..config.num_prop_layers {
        layer = tape.sparse_propagate(graph, weights, layer)?;
        total = tape.add(total, layer)?;
    }
    tape.scale(total, T::one() / T::of_usize(config.num_prop_layers + 1))
}

fn refined_weights_tape<T: Scalar>(
    tape: &mut Tape<T>,
    e: Var,
    graph: &InteractionGraph,
    config: &RefinementConfig,
    noise: Option<&[T]>,
) -> Result<Var> {
    let nu = graph.num_users();
    let users: Vec<usize> = graph.edges().iter().map(|&(u, _)| u).collect();
    let items: Vec<usize> = graph.edges().iter().map(|&(_, v)| nu + v).collect();
    let eu = tape.row_gather(e, &users)?;
    let ev = tape.row_gather(e, &items)?;
    let logits = tape.row_dot(eu, ev)?;
    let probs = tape.sigmoid(logits)?;
    let tau = T::of(config.tau);
    let keep = DenseMatrix::column(
        tape.value(probs).as_slice().iter().map(|&p| if p > tau { T::one() } else { T::zero() }).collect(),
    );
    let keep_var = tape.constant(keep.clone())?;
    let weights = tape.mul(probs, keep_var)?;
    match config.mode {
        Mode::Eval => Ok(weights),
        Mode::Train => {
            let noise = train_noise(noise, graph.num_edges())?;
            // logit(sigmoid(z)) = z, so the relaxed sample is built from the raw logits
            let noise_var = tape.constant(DenseMatrix::column(noise.to_vec()))?;
            let shifted = tape.add(logits, noise_var)?;
            let scaled = tape.scale(shifted, T::one() / T::of(config.gumbel_temperature))?;
            let soft = tape.sigmoid(scaled)?;
            let half = T::of(0.5);
            let hard = DenseMatrix::column(
                tape.value(soft)
                    .as_slice()
                    .iter()
                    .zip(keep.as_slice())
                    .map(|(&s, &k)| if k > T::zero() && s > half { T::one() } else { T::zero() })
                    .collect(),
            );
            let gate = tape.straight_through(hard, soft)?;
            tape.mul(weights, gate)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_edge(a: &[f64], b: &[f64]) -> (InteractionGraph, DenseMatrix<f64>) {
        let g = InteractionGraph::build(1, 1, [(0, 0)]).unwrap();
        let e = DenseMatrix::from_rows(&[a.to_vec(), b.to_vec()]).unwrap();
        (g, e)
    }

    #[test]
    fn weight_examples() {
        let (g, e) = single_edge(&[0.0, 1.0], &[1.0, 0.0]);
        assert_eq!(edge_weights(&e, &g, 0.05).unwrap(), vec![0.5]);
        let (g, e) = single_edge(&[2.0, 0.0], &[-2.0, 0.0]);
        // sigmoid(-4) ~ 0.0180 <= 0.05
        assert_eq!(edge_weights(&e, &g, 0.05).unwrap(), vec![0.0]);
        assert!(edge_weights(&e, &g, 1e-9).unwrap()[0] > 0.0);
    }

    #[test]
    fn eval_mask() {
        let cfg = RefinementConfig::default();
        assert_eq!(refine_mask(&[0.5, 0.0], &cfg, None).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn train_mask_needs_noise() {
        let cfg = RefinementConfig::default().with_mode(Mode::Train);
        assert!(refine_mask(&[0.5], &cfg, None).is_err());
        assert!(refine_mask(&[0.5], &cfg, Some(&[0.1, 0.2])).is_err());
        // zero weight gated off regardless of noise
        assert_eq!(refine_mask(&[0.0], &cfg, Some(&[50.0])).unwrap(), vec![0.0]);
    }

    #[test]
    fn keep_frequency_matches_weight() {
        let cfg = RefinementConfig::default().with_mode(Mode::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let noise: Vec<f64> = sample_gate_noise(&mut rng, n);
        let weights = vec![0.5; n];
        let kept: f64 = refine_mask(&weights, &cfg, Some(&noise)).unwrap().iter().sum();
        let freq = kept / n as f64;
        assert!((freq - 0.5).abs() <= 3.0 * (0.25 / n as f64).sqrt(), "{freq}");
    }

    #[test]
    fn cold_temperature_soft_sample_matches_hard() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<f64> = sample_gate_noise(&mut rng, 10_000);
        let logit_w = logit(0.3_f64);
        let mut agree = 0;
        for &n in &noise {
            let soft = soft_gate(logit_w, n, 1e-3);
            let hard = if logit_w + n > 0.0 { 1.0 } else { 0.0 };
            if (soft - hard).abs() < 1e-3 {
                agree += 1;
            }
        }
        // a miss needs |logit + noise| < 1e-3 * ln(1000); the logistic density is
        // at most 1/4, so misses average under 35 of 10,000
        assert!(agree >= 9_940, "{agree}");
    }

    #[test]
    fn single_edge_propagation() {
        let (g, e) = single_edge(&[1.0, 2.0], &[3.0, -1.0]);
        let out = propagate(&g, &[1.0], &e, 1).unwrap();
        assert_eq!(out.row(0), &[2.0, 0.5]);
        assert_eq!(out.row(1), &[2.0, 0.5]);
    }

    #[test]
    fn empty_graph_keeps_layer_zero_only() {
        let g = InteractionGraph::empty(2, 2);
        let e = DenseMatrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64);
        let out = gre_forward(&e, &g, &RefinementConfig { num_prop_layers: 2, ..Default::default() }, None).unwrap();
        assert!(out.max_abs_diff(&e.scaled(1.0 / 3.0)) < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(RefinementConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(RefinementConfig { tau: 1.0, ..Default::default() }.validate().is_err());
        assert!(RefinementConfig { gumbel_temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(RefinementConfig { num_prop_layers: 0, ..Default::default() }.validate().is_err());
        assert!(RefinementConfig::default().validate().is_ok());
    }

    #[test]
    fn tape_path_matches_value_path() {
        let g = Arc::new(InteractionGraph::build(3, 3, [(0, 0), (0, 2), (1, 1), (2, 0), (2, 1)]).unwrap());
        let e = DenseMatrix::from_fn(6, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6);
        for mode in [Mode::Eval, Mode::Train] {
            let cfg = RefinementConfig { num_prop_layers: 2, ..Default::default() }.with_mode(mode);
            let noise: Vec<f64> = sample_gate_noise(&mut ChaCha8Rng::seed_from_u64(3), g.num_edges());
            let plain = gre_forward(&e, &g, &cfg, Some(&noise)).unwrap();
            let mut tape = Tape::new();
            let ev = tape.constant(e.clone()).unwrap();
            let out = gre_forward_tape(&mut tape, ev, &g, &cfg, Some(&noise), true).unwrap();
            assert!(tape.value(out).max_abs_diff(&plain) < 1e-14);
        }
    }
}
