//! Mini-batch Adam training with negative sampling, per-epoch validation,
//! best-checkpoint tracking and early stopping.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::diff::{DenseMatrix, ParameterSet, Tape};
use crate::error::{HgibError, Result};
use crate::eval::{rank_metrics, RankingOptions, RankingResult};
use crate::graph::InteractionGraph;
use crate::gre::{Mode, RefinementConfig};
use crate::model::{forward, forward_tape, GateNoise, HgibParams, HierarchyGraphs, ModelConfig};
use crate::objectives::{
    objective_tape, BatchIndexSet, KernelKind, LossBreakdown, LossCoefficients, ObjectiveConfig,
};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Draws per requested negative before an instance is dropped.
pub const NEGATIVE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub reg_coeff: f64,
    pub n_neg: usize,
    pub infonce_temperature: f64,
    pub gumbel_temperature: f64,
    pub num_prop_layers: usize,
    pub kernel: KernelKind,
    pub seed: u64,
    /// Epochs without validation HR improvement before stopping; 0 disables.
    pub patience: usize,
    /// Cap on the distinct batch rows fed to the contrastive and HSIC terms.
    pub max_contrast_rows: usize,
    pub learned_attention: bool,
    pub no_pres: bool,
    pub no_comp: bool,
    pub no_gre: bool,
    pub eval_threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            lr: 5e-4,
            batch_size: 1024,
            max_epochs: 100,
            alpha: 1.0,
            beta: 50.0,
            tau: 0.05,
            reg_coeff: 0.1,
            n_neg: 4,
            infonce_temperature: 0.2,
            gumbel_temperature: 0.5,
            num_prop_layers: 1,
            kernel: KernelKind::Rbf,
            seed: 0,
            patience: 10,
            max_contrast_rows: 256,
            learned_attention: false,
            no_pres: false,
            no_comp: false,
            no_gre: false,
            eval_threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("batch_size", self.batch_size),
            ("n_neg", self.n_neg),
            ("num_prop_layers", self.num_prop_layers),
            ("max_contrast_rows", self.max_contrast_rows),
            ("eval_threads", self.eval_threads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(HgibError::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(HgibError::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.infonce_temperature > 0.0) || !self.infonce_temperature.is_finite() {
            return Err(HgibError::InvalidArgument(format!(
                "infonce_temperature must be positive, got {}",
                self.infonce_temperature
            )));
        }
        self.coefficients().validate()?;
        self.model_config(Mode::Train).refinement.validate()
    }

    /// Loss weights after the ablation switches.
    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            alpha: if self.no_pres { 0.0 } else { self.alpha },
            beta: if self.no_comp { 0.0 } else { self.beta },
            reg_coeff: self.reg_coeff,
        }
    }

    pub fn model_config(&self, mode: Mode) -> ModelConfig {
        ModelConfig {
            refinement: RefinementConfig {
                tau: self.tau,
                gumbel_temperature: self.gumbel_temperature,
                num_prop_layers: self.num_prop_layers,
                mode,
            },
            use_refinement: !self.no_gre,
            learned_attention: self.learned_attention,
        }
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            coefficients: self.coefficients(),
            infonce_temperature: self.infonce_temperature,
            kernel: self.kernel,
        }
    }
}

/// Adam moments for every parameter in a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<DenseMatrix<T>>,
    pub v: Vec<DenseMatrix<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros: Vec<DenseMatrix<T>> =
            params.ids().map(|id| DenseMatrix::zeros(params.value(id).rows(), params.value(id).cols())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }

    /// One bias-corrected Adam update from the accumulated gradients.
    pub fn apply(&mut self, params: &mut ParameterSet<T>, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(HgibError::shape("adam", format!("{} moments for {} parameters", self.m.len(), params.len())));
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - T::of(self.beta1.powf(self.step as f64));
        let c2 = T::one() - T::of(self.beta2.powf(self.step as f64));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (value, grad) = params.value_and_grad_mut(id);
            if value.shape() != self.m[k].shape() {
                return Err(HgibError::shape("adam", format!("moment {:?} vs parameter {:?}", self.m[k].shape(), value.shape())));
            }
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (((p, &g), m), v) in value.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Samples `batch_size` target training edges with replacement and
/// `n_neg` negatives per edge from items the user has not interacted with
/// in target training.
pub fn sample_training_batch<R: Rng + ?Sized>(
    target: &InteractionGraph,
    batch_size: usize,
    n_neg: usize,
    rng: &mut R,
) -> Result<BatchIndexSet> {
    let edges = target.edges();
    if edges.is_empty() {
        return Err(HgibError::Data("no target training edges to sample".into()));
    }
    let num_items = target.num_items();
    let mut users = Vec::with_capacity(batch_size);
    let mut pos = Vec::with_capacity(batch_size);
    let mut neg = Vec::with_capacity(batch_size * n_neg);
    let mut skipped = 0usize;
    for _ in 0..batch_size {
        let (u, v) = edges[rng.gen_range(0..edges.len())];
        let seen = target.user_neighbors(u);
        let mut picked = Vec::with_capacity(n_neg);
        for _ in 0..NEGATIVE_ATTEMPTS * n_neg {
            let j = rng.gen_range(0..num_items);
            if seen.binary_search(&j).is_err() {
                picked.push(j);
                if picked.len() == n_neg {
                    break;
                }
            }
        }
        if picked.len() < n_neg {
            skipped += 1;
            continue;
        }
        users.push(u);
        pos.push(v);
        neg.extend(picked);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} batch instances: no negatives found");
    }
    BatchIndexSet::new(users, pos, neg, n_neg)
}

/// One optimization step. On any error, parameters and optimizer state are
/// left exactly as they were.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    params: &mut HgibParams<T>,
    hierarchy: &HierarchyGraphs,
    batch: &BatchIndexSet,
    config: &TrainConfig,
    opt: &mut OptimizerState<T>,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let model = config.model_config(Mode::Train);
    let noise = (!config.no_gre).then(|| GateNoise::sample(hierarchy, rng));
    let rows = batch.contrast_rows(params.num_users, config.max_contrast_rows);

    let mut tape = Tape::new();
    let fv = forward_tape(&mut tape, params, hierarchy, &model, noise.as_ref())?;
    let obj = objective_tape(&mut tape, &fv, params.num_users, batch, &rows, &config.objective_config())?;
    let breakdown = obj.breakdown(&tape, &config.coefficients())?;

    let snapshot = (params.params.clone(), opt.clone());
    params.params.zero_grad();
    let outcome = tape.backward(obj.total, &mut params.params).and_then(|_| {
        if !params.params.ids().all(|id| params.params.grad(id).is_finite()) {
            return Err(HgibError::NonFinite { op: "backward" });
        }
        opt.apply(&mut params.params, config.lr)?;
        if !params.params.is_finite() {
            return Err(HgibError::NonFinite { op: "adam" });
        }
        Ok(())
    });
    match outcome {
        Ok(()) => {
            params.params.zero_grad();
            Ok(breakdown)
        }
        Err(e) => {
            params.params = snapshot.0;
            *opt = snapshot.1;
            Err(e)
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rec: f64,
    pub pres: f64,
    pub comp: f64,
    pub reg: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub reg_coeff: f64,
    pub val_hr: Option<f64>,
    pub val_ndcg: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            rec: self.rec,
            pres: self.pres,
            comp: self.comp,
            reg: self.reg,
            total: self.total,
            alpha: self.alpha,
            beta: self.beta,
            reg_coeff: self.reg_coeff,
        }
    }
}

/// Parses a JSON-lines training log and re-checks the loss composition of
/// every record.
pub fn read_training_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| HgibError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: EpochRecord = serde_json::from_str(line).map_err(|e| HgibError::Parse {
            file: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let b = rec.breakdown();
        if b.composition_error() > 1e-9 * b.total.abs().max(1.0) {
            return Err(HgibError::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                msg: format!("total {} does not match its components", b.total),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    /// Best-validation parameters (final ones without a validation set).
    pub params: HgibParams<T>,
    pub log: Vec<EpochRecord>,
    /// Validation metrics of the untrained parameters.
    pub initial_validation: Option<RankingResult>,
    pub best_validation: Option<RankingResult>,
    /// 0 when the initial parameters were never beaten.
    pub best_epoch: usize,
    pub steps: u64,
}

pub fn validate_params<T: Scalar>(
    params: &HgibParams<T>,
    hierarchy: &HierarchyGraphs,
    data: &SplitDataset,
    config: &TrainConfig,
    pairs: &[(usize, usize)],
) -> Result<RankingResult> {
    let outputs = forward(params, hierarchy, &config.model_config(Mode::Eval), None)?;
    let opts = RankingOptions { k: 10, include_train: false, threads: config.eval_threads };
    rank_metrics(&outputs, pairs, data.target_train(), opts)
}

pub fn fit<T: Scalar>(data: &SplitDataset, config: &TrainConfig) -> Result<FitResult<T>> {
    fit_with(data, config, |_| Ok(()))
}

/// Trains and calls `on_epoch` after every epoch, before early stopping is
/// decided.
pub fn fit_with<T: Scalar>(
    data: &SplitDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<FitResult<T>> {
    config.validate()?;
    let hierarchy = data.hierarchy()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = HgibParams::<T>::init(data.num_users, data.num_items, config.dim, config.learned_attention, &mut rng)?;
    let mut opt = OptimizerState::new(&params.params);

    let has_val = !data.validation.is_empty();
    let initial_validation = if has_val && config.max_epochs > 0 {
        Some(validate_params(&params, &hierarchy, data, config, &data.validation)?)
    } else {
        None
    };
    let mut best = initial_validation;
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut log = Vec::new();
    let target = data.target_train();
    let steps_per_epoch = target.num_edges().div_ceil(config.batch_size).max(1);

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let mut sums = [0.0f64; 4];
        for _ in 0..steps_per_epoch {
            let batch = sample_training_batch(target, config.batch_size, config.n_neg, &mut rng)?;
            let b = train_step(&mut params, &hierarchy, &batch, config, &mut opt, &mut rng)?;
            for (s, x) in sums.iter_mut().zip([b.rec, b.pres, b.comp, b.reg]) {
                *s += x;
            }
        }
        let n = steps_per_epoch as f64;
        let [rec, pres, comp, reg] = sums.map(|s| s / n);
        let c = config.coefficients();
        let val = if has_val { Some(validate_params(&params, &hierarchy, data, config, &data.validation)?) } else { None };
        let record = EpochRecord {
            epoch,
            rec,
            pres,
            comp,
            reg,
            total: LossBreakdown::compose_total(rec, pres, comp, reg, &c),
            alpha: c.alpha,
            beta: c.beta,
            reg_coeff: c.reg_coeff,
            val_hr: val.map(|v| v.hr),
            val_ndcg: val.map(|v| v.ndcg),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: total {:.5} rec {:.5} val_hr {}",
            record.total,
            record.rec,
            record.val_hr.map_or("-".into(), |h| format!("{h:.4}"))
        );
        on_epoch(&record)?;
        log.push(record);

        match (val, best) {
            (Some(v), Some(b)) if v.hr > b.hr => {
                best = Some(v);
                best_params = params.clone();
                best_epoch = epoch;
                since_best = 0;
            }
            (Some(_), _) => since_best += 1,
            (None, _) => {}
        }
        if has_val && config.patience > 0 && since_best >= config.patience {
            log::info!("early stop after epoch {epoch}; best epoch {best_epoch}");
            break;
        }
    }

    let params = if has_val { best_params } else { params };
    Ok(FitResult { params, log, initial_validation, best_validation: best, best_epoch, steps: opt.step })
}
