//! The hierarchical encoder stack: unified graph, behavior-specific graphs,
//! behavior-component graphs (intersection with and difference from the
//! target behavior), fused by two stages of target attention.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{dot, DenseMatrix, ParamId, ParameterSet, Tape, Var};
use crate::error::{HgibError, Result};
use crate::graph::{union_graphs, BehaviorSchema, InteractionGraph};
use crate::gre::{gre_forward_tape, sample_gate_noise, RefinementConfig};
use crate::scalar::Scalar;

/// Component graphs of one auxiliary behavior.
#[derive(Debug, Clone)]
pub struct ComponentGraphs {
    pub behavior: usize,
    /// Edges shared with the target behavior.
    pub intersection: Arc<InteractionGraph>,
    /// Edges absent from the target behavior.
    pub difference: Arc<InteractionGraph>,
}

#[derive(Debug, Clone)]
pub struct HierarchyGraphs {
    pub schema: BehaviorSchema,
    pub unified: Arc<InteractionGraph>,
    /// One graph per behavior, in schema order.
    pub per_behavior: Vec<Arc<InteractionGraph>>,
    /// One entry per auxiliary behavior, in schema order.
    pub components: Vec<ComponentGraphs>,
}

pub fn build_hierarchy(schema: &BehaviorSchema, graphs: Vec<InteractionGraph>) -> Result<HierarchyGraphs> {
    if graphs.len() != schema.len() {
        return Err(HgibError::InvalidArgument(format!(
            "{} behavior graphs for {} behaviors",
            graphs.len(),
            schema.len()
        )));
    }
    let unified = union_graphs(&graphs)?;
    let target = &graphs[schema.target_index()];
    let components = schema
        .auxiliary()
        .map(|b| {
            Ok(ComponentGraphs {
                behavior: b,
                intersection: Arc::new(graphs[b].intersect(target)?),
                difference: Arc::new(graphs[b].difference(target)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hierarchy = HierarchyGraphs {
        schema: schema.clone(),
        unified: Arc::new(unified),
        per_behavior: graphs.into_iter().map(Arc::new).collect(),
        components,
    };
    hierarchy.check_invariants()?;
    Ok(hierarchy)
}

impl HierarchyGraphs {
    pub fn num_users(&self) -> usize {
        self.unified.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.unified.num_items()
    }

    pub fn target(&self) -> &InteractionGraph {
        &self.per_behavior[self.schema.target_index()]
    }

    /// Number of encoder invocations in one forward pass.
    pub fn num_stages(&self) -> usize {
        1 + self.per_behavior.len() + 2 * self.components.len()
    }

    /// Exhaustively checks that components partition their behavior graph
    /// and that the unified graph is the union of all behaviors.
    pub fn check_invariants(&self) -> Result<()> {
        let broken = |msg: String| Err(HgibError::Data(format!("hierarchy invariant violated: {msg}")));
        let target = self.target();
        for comp in &self.components {
            let g = &self.per_behavior[comp.behavior];
            let name = &self.schema.names()[comp.behavior];
            if comp.intersection.num_edges() + comp.difference.num_edges() != g.num_edges() {
                return broken(format!("{name}: component sizes do not add up"));
            }
            for &(u, v) in g.edges() {
                let in_i = comp.intersection.contains(u, v);
                let in_d = comp.difference.contains(u, v);
                if in_i == in_d || in_i != target.contains(u, v) {
                    return broken(format!("{name}: edge ({u}, {v}) misassigned"));
                }
            }
        }
        let mut expected = 0;
        for g in &self.per_behavior {
            for &(u, v) in g.edges() {
                if !self.unified.contains(u, v) {
                    return broken(format!("edge ({u}, {v}) missing from unified graph"));
                }
            }
        }
        for &(u, v) in self.unified.edges() {
            if self.per_behavior.iter().any(|g| g.contains(u, v)) {
                expected += 1;
            }
        }
        if expected != self.unified.num_edges() {
            return broken("unified graph has edges outside every behavior".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub refinement: RefinementConfig,
    /// Off: every encoder is plain unit-weight propagation.
    pub use_refinement: bool,
    /// Learned `d x d` query/key projections inside target attention.
    pub learned_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { refinement: RefinementConfig::default(), use_refinement: true, learned_attention: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
}

/// Trainable state: the `(num_users + num_items) x d` embedding table and
/// optional attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct HgibParams<T> {
    pub params: ParameterSet<T>,
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    pub embedding: ParamId,
    pub attention: Option<AttentionParams>,
}

pub const INIT_SCALE: f64 = 0.05;

impl<T: Scalar> HgibParams<T> {
    /// Embeddings uniform in `[-0.05, 0.05]`; projections start at identity.
    pub fn init<R: Rng + ?Sized>(
        num_users: usize,
        num_items: usize,
        dim: usize,
        learned_attention: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let table = DenseMatrix::from_fn(num_users + num_items, dim, |_, _| {
            T::of(rng.gen_range(-INIT_SCALE..=INIT_SCALE))
        });
        Self::from_embedding(num_users, num_items, table, learned_attention)
    }

    pub fn from_embedding(
        num_users: usize,
        num_items: usize,
        table: DenseMatrix<T>,
        learned_attention: bool,
    ) -> Result<Self> {
        let dim = table.cols();
        if dim == 0 || table.rows() != num_users + num_items {
            return Err(HgibError::shape(
                "embedding_table",
                format!("{:?} for {num_users} users and {num_items} items", table.shape()),
            ));
        }
        let mut params = ParameterSet::new();
        let embedding = params.add("embedding", table);
        let attention = learned_attention.then(|| AttentionParams {
            query: params.add("attention_query", DenseMatrix::identity(dim)),
            key: params.add("attention_key", DenseMatrix::identity(dim)),
        });
        Ok(Self { params, num_users, num_items, dim, embedding, attention })
    }

    pub fn embedding_table(&self) -> &DenseMatrix<T> {
        self.params.value(self.embedding)
    }
}

/// Per-stage logistic gate noise for a train-mode forward pass, ordered
/// unified, behaviors, then (intersection, difference) per component.
#[derive(Debug, Clone)]
pub struct GateNoise<T> {
    stages: Vec<Vec<T>>,
}

impl<T: Scalar> GateNoise<T> {
    pub fn sample<R: Rng + ?Sized>(hierarchy: &HierarchyGraphs, rng: &mut R) -> Self {
        let mut stages = vec![sample_gate_noise(rng, hierarchy.unified.num_edges())];
        for g in &hierarchy.per_behavior {
            stages.push(sample_gate_noise(rng, g.num_edges()));
        }
        for c in &hierarchy.components {
            stages.push(sample_gate_noise(rng, c.intersection.num_edges()));
            stages.push(sample_gate_noise(rng, c.difference.num_edges()));
        }
        Self { stages }
    }

    fn stage(&self, idx: usize) -> Option<&[T]> {
        self.stages.get(idx).map(Vec::as_slice)
    }
}

/// Tape handles of every encoder output.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub e0: Var,
    pub uni: Var,
    pub behaviors: Vec<Var>,
    /// `(intersection, difference)` per auxiliary behavior.
    pub components: Vec<(Var, Var)>,
    /// Behavior index owning each component pair.
    pub component_owners: Vec<usize>,
    pub e_hat: Var,
    pub o: Var,
    /// Every parameter leaf registered for this pass.
    pub param_vars: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentOutputs<T> {
    pub behavior: usize,
    pub intersection: DenseMatrix<T>,
    pub difference: DenseMatrix<T>,
}

/// Values of every encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs<T> {
    pub num_users: usize,
    pub e0: DenseMatrix<T>,
    pub uni: DenseMatrix<T>,
    pub behaviors: Vec<DenseMatrix<T>>,
    pub components: Vec<ComponentOutputs<T>>,
    pub e_hat: DenseMatrix<T>,
    pub o: DenseMatrix<T>,
}

/// Records the full encoder stack on `tape`.
pub fn forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &HgibParams<T>,
    hierarchy: &HierarchyGraphs,
    config: &ModelConfig,
    noise: Option<&GateNoise<T>>,
) -> Result<ForwardVars> {
    config.refinement.validate()?;
    if hierarchy.num_users() != params.num_users || hierarchy.num_items() != params.num_items {
        return Err(HgibError::DimensionMismatch(format!(
            "parameters for {}x{}, graphs are {}x{}",
            params.num_users,
            params.num_items,
            hierarchy.num_users(),
            hierarchy.num_items()
        )));
    }
    let e0 = tape.param(&params.params, params.embedding)?;
    let mut param_vars = vec![e0];
    let projections = match params.attention {
        Some(a) => {
            let q = tape.param(&params.params, a.query)?;
            let k = tape.param(&params.params, a.key)?;
            param_vars.extend([q, k]);
            Some((q, k))
        }
        None => None,
    };

    let mut stage = 0;
    let mut encode = |tape: &mut Tape<T>, graph: &Arc<InteractionGraph>, input: Var| {
        let n = noise.and_then(|n| n.stage(stage));
        stage += 1;
        gre_forward_tape(tape, input, graph, &config.refinement, n, config.use_refinement)
    };

    let uni = encode(tape, &hierarchy.unified, e0)?;
    let behaviors = hierarchy
        .per_behavior
        .iter()
        .map(|g| encode(tape, g, uni))
        .collect::<Result<Vec<_>>>()?;
    let components = hierarchy
        .components
        .iter()
        .map(|c| {
            let owner = behaviors[c.behavior];
            Ok((encode(tape, &c.intersection, owner)?, encode(tape, &c.difference, owner)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let target = behaviors[hierarchy.schema.target_index()];
    let e_hat = target_attention_tape(tape, target, &behaviors, projections)?;
    let component_keys: Vec<Var> = components.iter().flat_map(|&(i, d)| [i, d]).collect();
    let o = if component_keys.is_empty() {
        // no auxiliary behaviors: second stage has nothing to attend over
        e_hat
    } else {
        target_attention_tape(tape, e_hat, &component_keys, projections)?
    };
    let component_owners = hierarchy.components.iter().map(|c| c.behavior).collect();
    Ok(ForwardVars { e0, uni, behaviors, components, component_owners, e_hat, o, param_vars })
}

/// Value-only forward pass.
pub fn forward<T: Scalar>(
    params: &HgibParams<T>,
    hierarchy: &HierarchyGraphs,
    config: &ModelConfig,
    noise: Option<&GateNoise<T>>,
) -> Result<ForwardOutputs<T>> {
    let mut tape = Tape::new();
    let vars = forward_tape(&mut tape, params, hierarchy, config, noise)?;
    Ok(collect_outputs(&tape, &vars, hierarchy, params.num_users))
}

pub fn collect_outputs<T: Scalar>(
    tape: &Tape<T>,
    vars: &ForwardVars,
    hierarchy: &HierarchyGraphs,
    num_users: usize,
) -> ForwardOutputs<T> {
    let v = |x: Var| tape.value(x).clone();
    ForwardOutputs {
        num_users,
        e0: v(vars.e0),
        uni: v(vars.uni),
        behaviors: vars.behaviors.iter().map(|&b| v(b)).collect(),
        components: hierarchy
            .components
            .iter()
            .zip(&vars.components)
            .map(|(c, &(i, d))| ComponentOutputs { behavior: c.behavior, intersection: v(i), difference: v(d) })
            .collect(),
        e_hat: v(vars.e_hat),
        o: v(vars.o),
    }
}

/// Per node, softmax over keys of `q . k / sqrt(d)` (with optional learned
/// projections of both sides), returning the weighted sum of raw keys.
pub fn target_attention_tape<T: Scalar>(
    tape: &mut Tape<T>,
    query: Var,
    keys: &[Var],
    projections: Option<(Var, Var)>,
) -> Result<Var> {
    let weights = attention_weights_tape(tape, query, keys, projections)?;
    let mut out: Option<Var> = None;
    for (j, &k) in keys.iter().enumerate() {
        let w = tape.column(weights, j)?;
        let term = tape.scale_rows(k, w)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(out.expect("at least one key"))
}

fn attention_weights_tape<T: Scalar>(
    tape: &mut Tape<T>,
    query: Var,
    keys: &[Var],
    projections: Option<(Var, Var)>,
) -> Result<Var> {
    if keys.is_empty() {
        return Err(HgibError::InvalidArgument("target attention needs at least one key".into()));
    }
    let d = tape.shape(query).1;
    let inv_sqrt_d = T::one() / T::of_usize(d).sqrt();
    let q = match projections {
        Some((wq, _)) => tape.matmul(query, wq)?,
        None => query,
    };
    let mut scores = Vec::with_capacity(keys.len());
    for &k in keys {
        let kp = match projections {
            Some((_, wk)) => tape.matmul(k, wk)?,
            None => k,
        };
        let s = tape.row_dot(q, kp)?;
        scores.push(tape.scale(s, inv_sqrt_d)?);
    }
    let stacked = tape.concat_cols(&scores)?;
    tape.softmax_rows(stacked)
}

/// Parameter-free target attention on plain matrices.
pub fn target_attention<T: Scalar>(query: &DenseMatrix<T>, keys: &[&DenseMatrix<T>]) -> Result<DenseMatrix<T>> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone())?;
    let ks = keys.iter().map(|k| tape.constant((*k).clone())).collect::<Result<Vec<_>>>()?;
    let out = target_attention_tape(&mut tape, q, &ks, None)?;
    Ok(tape.value(out).clone())
}

/// The `n x keys` attention weight matrix used by [`target_attention`].
pub fn attention_weights<T: Scalar>(query: &DenseMatrix<T>, keys: &[&DenseMatrix<T>]) -> Result<DenseMatrix<T>> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone())?;
    let ks = keys.iter().map(|k| tape.constant((*k).clone())).collect::<Result<Vec<_>>>()?;
    let w = attention_weights_tape(&mut tape, q, &ks, None)?;
    Ok(tape.value(w).clone())
}

/// `O_u . O_v` for each requested item.
pub fn score_items<T: Scalar>(outputs: &ForwardOutputs<T>, user: usize, items: &[usize]) -> Result<Vec<T>> {
    score_rows(&outputs.o, outputs.num_users, user, items)
}

pub(crate) fn score_rows<T: Scalar>(o: &DenseMatrix<T>, num_users: usize, user: usize, items: &[usize]) -> Result<Vec<T>> {
    let num_items = o.rows() - num_users;
    if user >= num_users {
        return Err(HgibError::OutOfRange(format!("user {user} of {num_users}")));
    }
    let ou = o.row(user);
    items
        .iter()
        .map(|&v| {
            if v >= num_items {
                return Err(HgibError::OutOfRange(format!("item {v} of {num_items}")));
            }
            Ok(dot(ou, o.row(num_users + v)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema2() -> BehaviorSchema {
        BehaviorSchema::with_target(vec!["view".into(), "buy".into()], "buy").unwrap()
    }

    #[test]
    fn hierarchy_example() {
        let view = InteractionGraph::build(1, 2, [(0, 0), (0, 1)]).unwrap();
        let buy = InteractionGraph::build(1, 2, [(0, 1)]).unwrap();
        let h = build_hierarchy(&schema2(), vec![view, buy]).unwrap();
        assert_eq!(h.components[0].intersection.edges(), &[(0, 1)]);
        assert_eq!(h.components[0].difference.edges(), &[(0, 0)]);
        assert_eq!(h.unified.edges(), &[(0, 0), (0, 1)]);
        assert_eq!(h.num_stages(), 5);
    }

    #[test]
    fn missing_behavior_graph_rejected() {
        let view = InteractionGraph::empty(1, 1);
        assert!(build_hierarchy(&schema2(), vec![view]).is_err());
    }

    #[test]
    fn attention_examples() {
        let q = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k1 = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k2 = DenseMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let out = target_attention(&q, &[&k1, &k2]).unwrap();
        let a = 0.5_f64.sqrt().exp();
        let w1 = a / (a + 1.0);
        assert!((out.get(0, 0) - w1).abs() < 1e-12);
        assert!((out.get(0, 1) - (1.0 - w1)).abs() < 1e-12);
        assert!((w1 - 0.6698).abs() < 1e-4);

        // singleton key is returned as-is
        let k = DenseMatrix::from_rows(&[vec![3.0, -2.0]]).unwrap();
        assert_eq!(target_attention(&q, &[&k]).unwrap(), k);
        assert!(target_attention::<f64>(&q, &[]).is_err());
    }

    #[test]
    fn scoring() {
        let o = DenseMatrix::from_rows(&[vec![0.6_f64, 0.8], vec![0.6, 0.8], vec![1.0, -1.0]]).unwrap();
        let out = ForwardOutputs {
            num_users: 1,
            e0: o.clone(),
            uni: o.clone(),
            behaviors: vec![],
            components: vec![],
            e_hat: o.clone(),
            o,
        };
        let s = score_items(&out, 0, &[0, 1]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!((s[1] + 0.2).abs() < 1e-12);
        assert!(score_items(&out, 1, &[0]).is_err());
        assert!(score_items(&out, 0, &[2]).is_err());
    }
}
