//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p hgib --test acceptance`.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use hgib::checkpoint::save_checkpoint;
use hgib::data::{generate_synthetic, leave_one_out_split, load_dataset, write_synthetic, DatasetManifest, SplitDataset, SynthConfig};
use hgib::diff::DenseMatrix;
use hgib::eval::{diagnose_hierarchy, information_abundance, rank_metrics, rank_metrics_with, RankingOptions};
use hgib::gre::{edge_weights, gre_forward, refine_mask, sample_gate_noise, Mode, RefinementConfig};
use hgib::model::forward;
use hgib::objectives::{hsic_value, infonce_loss, KernelKind};
use hgib::trainer::{fit_with, read_training_log, EpochRecord, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gradient_correctness() -> Outcome {
    let r = common::toy_objective_check(1, false, KernelKind::Rbf);
    outcome(
        r.coords_checked >= 200 && r.passes(1e-4),
        format!("{} coordinates, max relative error {:.2e}", r.coords_checked, r.max_rel_error),
    )
}

fn hsic_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut min_value = f64::INFINITY;
    for _ in 0..100 {
        let n = rng.gen_range(4..=16);
        let a = common::random_matrix(n, rng.gen_range(1..8), 1.0, &mut rng);
        let b = common::random_matrix(n, rng.gen_range(1..8), 1.0, &mut rng);
        let rows: Vec<usize> = (0..n).collect();
        for kind in [KernelKind::Rbf, KernelKind::Linear] {
            let got = hsic_value(&a, &b, &rows, kind).unwrap();
            worst = worst.max((got - common::hsic_oracle(&a, &b, kind)).abs());
            min_value = min_value.min(got);
        }
    }
    let b = common::random_matrix(9, 3, 1.0, &mut rng);
    let rows: Vec<usize> = (0..9).collect();
    let constant_zero = [KernelKind::Rbf, KernelKind::Linear]
        .iter()
        .all(|&k| hsic_value(&DenseMatrix::filled(9, 4, 0.7), &b, &rows, k).unwrap() == 0.0);
    outcome(
        worst < 1e-10 && constant_zero && min_value >= -1e-12,
        format!("max |diff| {worst:.2e}, constant input exact zero {constant_zero}, min value {min_value:.2e}"),
    )
}

fn infonce_anchors() -> Outcome {
    let n = 6;
    let a = DenseMatrix::from_fn(n, 4, |_, c| c as f64 - 1.5);
    let rows: Vec<usize> = (0..n).collect();
    let log_n = (infonce_loss(&a, &a, &rows, 0.2).unwrap() - (n as f64).ln()).abs();
    let e = DenseMatrix::<f64>::identity(2);
    let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    let pair = (infonce_loss(&e, &e, &[0, 1], 1.0).unwrap() - want).abs();
    outcome(log_n < 1e-9 && pair < 1e-6, format!("|L - log N| {log_n:.2e}, |L - 0.3133| {pair:.2e}"))
}

fn propagation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let cfg = RefinementConfig { mode: Mode::Eval, ..RefinementConfig::default() };
    for _ in 0..50 {
        let users = rng.gen_range(1..=16);
        let items = rng.gen_range(1..=32 - users);
        let g = common::random_graph(users, items, rng.gen_range(0.1..0.7), &mut rng);
        let e = common::random_matrix(users + items, rng.gen_range(1..6), 2.0, &mut rng);
        let got = gre_forward(&e, &g, &cfg, None).unwrap();
        let w = edge_weights(&e, &g, cfg.tau).unwrap();
        worst = worst.max(common::max_abs_diff(&common::dense_propagation(&g, &w, &e, 1), &got));
    }
    outcome(worst < 1e-12, format!("max |diff| {worst:.2e} over 50 graphs"))
}

fn gate_statistics() -> Outcome {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = RefinementConfig { mode: Mode::Train, ..RefinementConfig::default() };
    let mut pass = true;
    let mut parts = Vec::new();
    for p in [0.2, 0.5, 0.8] {
        let noise: Vec<f64> = sample_gate_noise(&mut rng, n);
        let freq = refine_mask(&vec![p; n], &cfg, Some(&noise)).unwrap().iter().sum::<f64>() / n as f64;
        let z = (freq - p) / (p * (1.0 - p) / n as f64).sqrt();
        pass &= z.abs() <= 3.0;
        parts.push(format!("p={p}: {freq:.4} (z={z:+.2})"));
    }
    outcome(pass, parts.join(", "))
}

fn ranking_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scores: Vec<Vec<f64>> = (0..20).map(|_| (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let test: Vec<(usize, usize)> = (0..20).map(|u| (u, rng.gen_range(0..50))).collect();
    let got = rank_metrics_with(|u| Ok(scores[u].clone()), &test, None, RankingOptions::default()).unwrap();
    let (mut hr, mut ndcg) = (0.0, 0.0);
    for &(u, v) in &test {
        let r = common::sorted_rank(&scores[u], v, &BTreeSet::new());
        if r <= 10 {
            hr += 1.0;
            ndcg += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let exact = got.hr == hr / 20.0 && got.ndcg == ndcg / 20.0;

    let top = rank_metrics_with(|_| Ok(vec![3.0, 1.0, 0.0]), &[(0, 0), (1, 0)], None, RankingOptions::default()).unwrap();
    let third = rank_metrics_with(|_| Ok(vec![5.0, 4.0, 3.0, 2.0]), &[(0, 2)], None, RankingOptions::default()).unwrap();
    let anchors = top.hr == 1.0 && top.ndcg == 1.0 && third.hr == 1.0 && third.ndcg == 0.5;
    outcome(exact && anchors, format!("HR {:.3} NDCG {:.4} vs oracle exact {exact}; anchors {anchors}", got.hr, got.ndcg))
}

fn information_abundance_check() -> Outcome {
    let eq = DenseMatrix::from_fn(8, 4, |r, c| if r == c { 3.0 } else { 0.0 });
    let rank1 = DenseMatrix::from_fn(9, 6, |r, c| (r as f64 + 0.5) * (c as f64 - 2.0));
    let diag = DenseMatrix::from_fn(8, 3, |r, c| if r == c { [2.0, 1.0, 1.0][r] } else { 0.0 });
    let anchor_err = [(eq, 4.0), (rank1, 1.0), (diag, 2.0)]
        .iter()
        .map(|(m, want)| (information_abundance(m).unwrap() - want).abs())
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let d = rng.gen_range(2..=64);
        let e = common::random_matrix(rng.gen_range(d..3 * d + 2), d, 1.0, &mut rng);
        let ia = information_abundance(&e).unwrap();
        worst = worst.max((ia - common::ia_oracle(&e)).abs() / ia);
    }
    outcome(anchor_err < 1e-9 && worst < 1e-8, format!("anchor error {anchor_err:.2e}, oracle relative error {worst:.2e}"))
}

fn ingest_synthetic(seed: u64) -> SplitDataset {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { seed, ..SynthConfig::default() };
    let manifest = write_synthetic(&generate_synthetic(&cfg).unwrap(), dir.path()).unwrap();
    let raw = load_dataset(&DatasetManifest::read(&manifest).unwrap()).unwrap();
    leave_one_out_split(&raw, seed).unwrap()
}

fn hierarchy_set_algebra(datasets: &[SplitDataset]) -> Outcome {
    let mut checked = 0;
    for s in datasets {
        let h = s.hierarchy().unwrap();
        let target = common::edge_set(h.target());
        let mut all = BTreeSet::new();
        for g in &h.per_behavior {
            all.extend(common::edge_set(g));
        }
        if common::edge_set(&h.unified) != all {
            return outcome(false, "unified graph differs from the union");
        }
        for c in &h.components {
            let whole = common::edge_set(&h.per_behavior[c.behavior]);
            let inter = common::edge_set(&c.intersection);
            let diff = common::edge_set(&c.difference);
            let ok = inter.is_disjoint(&diff) && &inter | &diff == whole && inter.is_subset(&target) && diff.is_disjoint(&target);
            if !ok {
                return outcome(false, format!("partition broken for behavior {}", c.behavior));
            }
            checked += whole.len();
        }
    }
    outcome(true, format!("{} datasets, {checked} auxiliary edges partitioned", datasets.len()))
}

/// Desk-scale training schedule; loss coefficients stay at their defaults.
fn desk(seed: u64) -> TrainConfig {
    TrainConfig { lr: 1e-2, batch_size: 256, max_epochs: 40, patience: 10, seed, ..TrainConfig::default() }
}

struct Run {
    test_hr: f64,
    ia_uni: f64,
    ia_deepest: f64,
    log: Vec<EpochRecord>,
}

fn train_and_test(data: &SplitDataset, cfg: &TrainConfig, log_path: &std::path::Path) -> Run {
    let mut lines = String::new();
    let fit = fit_with::<f64>(data, cfg, |r| {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
        Ok(())
    })
    .unwrap();
    std::fs::write(log_path, lines).unwrap();
    let h = data.hierarchy().unwrap();
    let out = forward(&fit.params, &h, &cfg.model_config(Mode::Eval), None).unwrap();
    let test = rank_metrics(&out, &data.test, data.target_train(), RankingOptions::default()).unwrap();
    let stages = diagnose_hierarchy(&out, &data.schema).unwrap();
    let ia = |name: &str| stages.iter().find(|s| s.stage == name).unwrap().ia;
    let ia_deepest = stages.iter().filter(|s| s.stage.contains('∩') || s.stage.contains('/')).map(|s| s.ia).fold(f64::MIN, f64::max);
    Run { test_hr: test.hr, ia_uni: ia("uni"), ia_deepest, log: fit.log }
}

struct Experiment {
    full: Vec<Run>,
    backbone: Vec<Run>,
    no_pres: Vec<Run>,
    log_files: Vec<std::path::PathBuf>,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn run_experiment(datasets: &[SplitDataset]) -> Experiment {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut exp = Experiment { full: vec![], backbone: vec![], no_pres: vec![], log_files: vec![], elapsed: Duration::ZERO, _dir: tempfile::tempdir().unwrap() };
    for (seed, data) in datasets.iter().enumerate() {
        let base = desk(seed as u64);
        let variants = [
            ("full", base),
            ("backbone", TrainConfig { alpha: 0.0, beta: 0.0, no_gre: true, ..base }),
            ("no_pres", TrainConfig { no_pres: true, ..base }),
        ];
        for (name, cfg) in variants {
            let path = dir.path().join(format!("{name}-{seed}.jsonl"));
            let run = train_and_test(data, &cfg, &path);
            println!(
                "    seed {seed} {name:<8} test HR@10 {:.4}  IA(uni) {:.2}  max IA(components) {:.2}  epochs {}",
                run.test_hr,
                run.ia_uni,
                run.ia_deepest,
                run.log.len()
            );
            exp.log_files.push(path);
            match name {
                "full" => exp.full.push(run),
                "backbone" => exp.backbone.push(run),
                _ => exp.no_pres.push(run),
            }
        }
    }
    exp.elapsed = start.elapsed();
    exp._dir = dir;
    exp
}

fn directional_benefit(exp: &Experiment) -> Outcome {
    let wins = exp.full.iter().zip(&exp.backbone).filter(|(f, b)| f.test_hr > b.test_hr).count();
    let mean = |runs: &[Run]| runs.iter().map(|r| r.test_hr).sum::<f64>() / runs.len() as f64;
    let (full, backbone, no_pres) = (mean(&exp.full), mean(&exp.backbone), mean(&exp.no_pres));
    outcome(
        wins >= 5 && no_pres < full,
        format!(
            "full beats backbone in {wins}/7 seeds; mean HR@10 full {full:.4}, backbone {backbone:.4}, w/o pres {no_pres:.4}"
        ),
    )
}

fn diagnostic_direction(exp: &Experiment) -> Outcome {
    let ok: Vec<bool> = exp.full.iter().map(|r| r.ia_uni >= r.ia_deepest).collect();
    let count = ok.iter().filter(|&&b| b).count();
    let failed: Vec<usize> = ok.iter().enumerate().filter(|(_, &b)| !b).map(|(i, _)| i).collect();
    outcome(count >= 5, format!("IA(uni) >= max component IA in {count}/7 seeds; failing seeds {failed:?}"))
}

fn determinism() -> Outcome {
    let data = ingest_synthetic(11);
    let cfg = TrainConfig { max_epochs: 8, ..desk(11) };
    let dir = tempfile::tempdir().unwrap();
    let mut models = Vec::new();
    let mut metrics = Vec::new();
    for run in 0..2 {
        let fit = fit_with::<f64>(&data, &cfg, |_| Ok(())).unwrap();
        let path = dir.path().join(format!("model-{run}.bin"));
        save_checkpoint(&path, &fit.params, &data.schema, &cfg, fit.best_epoch).unwrap();
        models.push(std::fs::read(&path).unwrap());
        let h = data.hierarchy().unwrap();
        let out = forward(&fit.params, &h, &cfg.model_config(Mode::Eval), None).unwrap();
        let m = rank_metrics(&out, &data.test, data.target_train(), RankingOptions::default()).unwrap();
        metrics.push(serde_json::to_string(&m).unwrap());
    }
    let same_model = models[0] == models[1];
    let same_metrics = metrics[0] == metrics[1];
    outcome(same_model && same_metrics, format!("model files identical {same_model} ({} bytes), metrics identical {same_metrics}", models[0].len()))
}

fn composition_identity(exp: &Experiment) -> Outcome {
    let mut records = 0;
    let mut worst: f64 = 0.0;
    for path in &exp.log_files {
        let log = match read_training_log(path) {
            Ok(l) => l,
            Err(e) => return outcome(false, format!("{}: {e}", path.display())),
        };
        for r in &log {
            let b = r.breakdown();
            worst = worst.max((b.total - (b.rec + b.alpha * b.pres + b.beta * b.comp + b.reg_coeff * b.reg)).abs());
            records += 1;
        }
    }
    outcome(records > 0 && worst <= 1e-12, format!("{records} records from {} logs, max error {worst:.2e}", exp.log_files.len()))
}

fn report(id: usize, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let elapsed = start.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let pass = o.pass && in_time;
    let limit = budget.map_or(String::new(), |b| format!(" / {:.0}s", b.as_secs_f64()));
    println!(
        "criterion {id:>2}: {} - {} [{:.2}s{limit}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn main() {
    let secs = Duration::from_secs;
    let mut results = vec![
        report(1, Some(secs(30)), gradient_correctness),
        report(2, Some(secs(5)), hsic_oracle),
        report(3, Some(secs(1)), infonce_anchors),
        report(4, Some(secs(5)), propagation_oracle),
        report(5, Some(secs(5)), gate_statistics),
        report(6, Some(secs(1)), ranking_oracle),
        report(7, Some(secs(5)), information_abundance_check),
    ];

    let datasets: Vec<SplitDataset> = (0..7).map(ingest_synthetic).collect();
    results.push(report(8, None, || hierarchy_set_algebra(&datasets)));

    println!("    training 7 seeds x 3 variants on 500 users / 200 items / 5 clusters / noise 0.3");
    let exp = run_experiment(&datasets);
    let in_time = exp.elapsed <= secs(600);
    results.push(report(9, None, || {
        let mut o = directional_benefit(&exp);
        o.pass &= in_time;
        o.detail.push_str(&format!("; 21 trainings in {:.1}s / 600s", exp.elapsed.as_secs_f64()));
        o
    }));
    results.push(report(10, None, || diagnostic_direction(&exp)));
    results.push(report(11, Some(secs(300)), determinism));
    results.push(report(12, None, || composition_identity(&exp)));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
