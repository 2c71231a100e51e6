//! Toy builders and independent reference implementations shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeSet;

use hgib::diff::DenseMatrix;
use hgib::graph::{BehaviorSchema, InteractionGraph};
use hgib::model::{build_hierarchy, HierarchyGraphs};
use hgib::objectives::KernelKind;
use rand::Rng;

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

pub fn random_graph<R: Rng>(num_users: usize, num_items: usize, density: f64, rng: &mut R) -> InteractionGraph {
    let mut pairs = Vec::new();
    for u in 0..num_users {
        for v in 0..num_items {
            if rng.gen_bool(density) {
                pairs.push((u, v));
            }
        }
    }
    InteractionGraph::build(num_users, num_items, pairs).unwrap()
}

pub fn view_cart_buy() -> BehaviorSchema {
    BehaviorSchema::with_target(vec!["view".into(), "cart".into(), "buy".into()], "buy").unwrap()
}

/// Three nested-ish random behaviors where every buy user has at least one edge.
pub fn toy_hierarchy<R: Rng>(num_users: usize, num_items: usize, rng: &mut R) -> HierarchyGraphs {
    let view = random_graph(num_users, num_items, 0.5, rng);
    let cart: Vec<_> = view.edges().iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
    let mut buy: Vec<_> = cart.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
    for u in 0..num_users {
        buy.push((u, rng.gen_range(0..num_items)));
    }
    let graphs = vec![
        view,
        InteractionGraph::build(num_users, num_items, cart).unwrap(),
        InteractionGraph::build(num_users, num_items, buy).unwrap(),
    ];
    build_hierarchy(&view_cart_buy(), graphs).unwrap()
}

pub fn edge_set(g: &InteractionGraph) -> BTreeSet<(usize, usize)> {
    g.edges().iter().copied().collect()
}

type Dense = Vec<Vec<f64>>;

fn dense_mul(a: &Dense, b: &Dense) -> Dense {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..m {
            for j in 0..p {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn to_dense(m: &DenseMatrix<f64>) -> Dense {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Mean over layers `0..=layers` of powers of the symmetric-normalized
/// bipartite adjacency applied to `e`, via an explicit node x node matrix.
pub fn dense_propagation(graph: &InteractionGraph, weights: &[f64], e: &DenseMatrix<f64>, layers: usize) -> Dense {
    let n = graph.num_nodes();
    let nu = graph.num_users();
    let mut a = vec![vec![0.0; n]; n];
    for (&(u, v), &w) in graph.edges().iter().zip(weights) {
        a[u][nu + v] = w;
        a[nu + v][u] = w;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let mut norm = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if deg[i] >= 1e-12 && deg[j] >= 1e-12 {
                norm[i][j] = a[i][j] / (deg[i].sqrt() * deg[j].sqrt());
            }
        }
    }
    let mut layer = to_dense(e);
    let mut total = layer.clone();
    for _ in 0..layers {
        layer = dense_mul(&norm, &layer);
        for (t, l) in total.iter_mut().zip(&layer) {
            for (x, y) in t.iter_mut().zip(l) {
                *x += y;
            }
        }
    }
    let k = (layers + 1) as f64;
    total.iter().map(|r| r.iter().map(|x| x / k).collect()).collect()
}

pub fn max_abs_diff(a: &Dense, b: &DenseMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, x) in row.iter().enumerate() {
            worst = worst.max((x - b.get(r, c)).abs());
        }
    }
    worst
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = xs.len();
    if m % 2 == 1 {
        xs[m / 2]
    } else {
        0.5 * (xs[m / 2 - 1] + xs[m / 2])
    }
}

fn kernel(x: &Dense, kind: KernelKind) -> Dense {
    let n = x.len();
    let dot = |i: usize, j: usize| x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum::<f64>();
    match kind {
        KernelKind::Linear => (0..n).map(|i| (0..n).map(|j| dot(i, j)).collect()).collect(),
        KernelKind::Rbf => {
            let d: Dense = (0..n)
                .map(|i| (0..n).map(|j| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum()).collect())
                .collect();
            let upper: Vec<f64> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| d[i][j]).collect();
            let m = median(upper);
            let m = if m < 1e-12 { 1.0 } else { m };
            d.iter().map(|r| r.iter().map(|v| (-v / m).exp()).collect()).collect()
        }
    }
}

/// `tr(K_A H K_B H) / (n - 1)^2` with an explicit centering matrix.
pub fn hsic_oracle(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>, kind: KernelKind) -> f64 {
    let n = a.rows();
    let ka = kernel(&to_dense(a), kind);
    let kb = kernel(&to_dense(b), kind);
    let h: Dense = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64).collect()).collect();
    let m = dense_mul(&dense_mul(&dense_mul(&ka, &h), &kb), &h);
    let tr: f64 = (0..n).map(|i| m[i][i]).sum();
    tr / ((n - 1) * (n - 1)) as f64
}

/// Rank by full sort: descending score, ascending index on ties.
pub fn sorted_rank(scores: &[f64], target: usize, excluded: &BTreeSet<usize>) -> usize {
    let mut cands: Vec<usize> = (0..scores.len()).filter(|j| *j == target || !excluded.contains(j)).collect();
    cands.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    cands.iter().position(|&j| j == target).unwrap() + 1
}

/// `sum(sigma) / max(sigma)` from nalgebra's symmetric eigensolver on the Gram matrix.
pub fn ia_oracle(e: &DenseMatrix<f64>) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(e.rows(), e.cols(), e.as_slice());
    let gram = m.transpose() * &m;
    let eig = gram.symmetric_eigen();
    let sv: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().sum::<f64>() / max
}

pub const TOY_DIM: usize = 20;

/// Finite-difference check of the full weighted objective (eval-mode gates)
/// on a 6-user, 6-item, 3-behavior toy, over every embedding coordinate.
pub fn toy_objective_check(seed: u64, learned_attention: bool, kernel: KernelKind) -> hgib::diff::FdReport {
    use hgib::diff::{finite_diff_check, FdOptions};
    use hgib::gre::{Mode, RefinementConfig};
    use hgib::model::{forward_tape, HgibParams, ModelConfig};
    use hgib::objectives::{objective_tape, BatchIndexSet, LossCoefficients, ObjectiveConfig};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = toy_hierarchy(6, 6, &mut rng);
    let table = random_matrix(12, TOY_DIM, 0.5, &mut rng);
    let mut template = HgibParams::from_embedding(6, 6, table, learned_attention).unwrap();
    if let Some(a) = template.attention {
        for id in [a.query, a.key] {
            let noise = random_matrix(TOY_DIM, TOY_DIM, 0.1, &mut rng);
            template.params.value_mut(id).add_assign(&noise);
        }
    }
    let target = h.target().clone();
    let users: Vec<usize> = (0..6).filter(|&u| !target.user_neighbors(u).is_empty()).collect();
    let pos: Vec<usize> = users.iter().map(|&u| target.user_neighbors(u)[0]).collect();
    let neg: Vec<usize> = users.iter().flat_map(|&u| [(u + 1) % 6, (u + 3) % 6]).collect();
    let batch = BatchIndexSet::new(users, pos, neg, 2).unwrap();
    let rows: Vec<usize> = (0..12).collect();
    let objective = ObjectiveConfig {
        coefficients: LossCoefficients { alpha: 1.0, beta: 50.0, reg_coeff: 0.1 },
        infonce_temperature: 0.2,
        kernel,
    };
    let model = ModelConfig {
        refinement: RefinementConfig { mode: Mode::Eval, ..RefinementConfig::default() },
        use_refinement: true,
        learned_attention,
    };
    let mut params = template.params.clone();
    let max_coords = params.num_scalars();
    finite_diff_check(
        |tape, p| {
            let hp = HgibParams { params: p.clone(), ..template.clone() };
            let fv = forward_tape(tape, &hp, &h, &model, None)?;
            Ok(objective_tape(tape, &fv, 6, &batch, &rows, &objective)?.total)
        },
        &mut params,
        FdOptions { max_coords, ..FdOptions::default() },
    )
    .unwrap()
}
