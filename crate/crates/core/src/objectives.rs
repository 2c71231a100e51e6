//! Loss terms: sampled-softmax recommendation loss, InfoNCE preservation,
//! HSIC compression and L2 regularization, plus their weighted total.

use serde::{Deserialize, Serialize};

use crate::diff::{DenseMatrix, Tape, Var};
use crate::error::{HgibError, Result};
use crate::model::{ForwardOutputs, ForwardVars};
use crate::scalar::Scalar;

/// Median bandwidths below this fall back to 1.
pub const BANDWIDTH_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// `exp(-|a - b|^2 / m)` with `m` the batch median squared distance.
    Rbf,
    Linear,
}

/// Training instances of one mini-batch. `neg_items` holds `n_neg`
/// consecutive negatives per instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndexSet {
    pub users: Vec<usize>,
    pub pos_items: Vec<usize>,
    pub neg_items: Vec<usize>,
    pub n_neg: usize,
}

impl BatchIndexSet {
    pub fn new(users: Vec<usize>, pos_items: Vec<usize>, neg_items: Vec<usize>, n_neg: usize) -> Result<Self> {
        if users.is_empty() {
            return Err(HgibError::InvalidArgument("empty batch".into()));
        }
        if pos_items.len() != users.len() || neg_items.len() != users.len() * n_neg {
            return Err(HgibError::shape(
                "batch",
                format!(
                    "{} users, {} positives, {} negatives at {n_neg} per instance",
                    users.len(),
                    pos_items.len(),
                    neg_items.len()
                ),
            ));
        }
        Ok(Self { users, pos_items, neg_items, n_neg })
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Distinct user rows and positive-item rows in batch order
    /// (interleaved), truncated to `cap`. These anchor the contrastive and
    /// independence terms.
    pub fn contrast_rows(&self, num_users: usize, cap: usize) -> Vec<usize> {
        let mut seen = std::collections::HashSet::new();
        let mut rows = Vec::new();
        for (&u, &v) in self.users.iter().zip(&self.pos_items) {
            for r in [u, num_users + v] {
                if rows.len() < cap && seen.insert(r) {
                    rows.push(r);
                }
            }
        }
        rows
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(HgibError::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// Symmetric InfoNCE between matched rows of `a` and `b` over in-batch
/// candidates, with cosine similarity divided by `temperature`.
pub fn infonce_tape<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, rows: &[usize], temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    if tape.shape(a) != tape.shape(b) {
        return Err(HgibError::shape("infonce", format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    if rows.is_empty() {
        return Err(HgibError::InvalidArgument("infonce over zero rows".into()));
    }
    let n = rows.len();
    let ga = tape.row_gather(a, rows)?;
    let gb = tape.row_gather(b, rows)?;
    let na = tape.normalize_rows(ga)?;
    let nb = tape.normalize_rows(gb)?;
    let nbt = tape.transpose(nb)?;
    let sim = tape.matmul(na, nbt)?;
    let logits = tape.scale(sim, T::one() / T::of(temperature))?;
    let eye = tape.constant(DenseMatrix::identity(n))?;

    let forward = tape.log_softmax_rows(logits)?;
    let logits_t = tape.transpose(logits)?;
    let backward = tape.log_softmax_rows(logits_t)?;
    let both = tape.add(forward, backward)?;
    let diag = tape.mul(both, eye)?;
    let total = tape.sum(diag)?;
    tape.scale(total, -T::one() / T::of_usize(2 * n))
}

pub fn infonce_loss<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>, rows: &[usize], temperature: f64) -> Result<T> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone())?;
    let bv = tape.constant(b.clone())?;
    let loss = infonce_tape(&mut tape, av, bv, rows, temperature)?;
    Ok(tape.value(loss).item())
}

/// Kernel matrix over the selected rows.
pub fn kernel_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, rows: &[usize], kind: KernelKind) -> Result<Var> {
    if rows.len() < 2 {
        return Err(HgibError::InvalidArgument(format!("HSIC needs at least 2 rows, got {}", rows.len())));
    }
    let g = tape.row_gather(x, rows)?;
    match kind {
        KernelKind::Linear => {
            let gt = tape.transpose(g)?;
            tape.matmul(g, gt)
        }
        KernelKind::Rbf => {
            let dist = tape.pairwise_sq_dist(g)?;
            let median = tape.median_off_diagonal(dist)?;
            let bandwidth = if tape.value(median).item() < T::of(BANDWIDTH_FLOOR) {
                tape.constant(DenseMatrix::scalar(T::one()))?
            } else {
                median
            };
            let scaled = tape.div_scalar(dist, bandwidth)?;
            let neg = tape.scale(scaled, -T::one())?;
            tape.exp(neg)
        }
    }
}

/// `tr(K_a H K_b H) / (n - 1)^2` from both centered kernels, evaluated as
/// `sum(HK_aH * HK_bH)` so a constant kernel on either side gives exactly 0.
fn hsic_from_kernels<T: Scalar>(tape: &mut Tape<T>, ka_centered: Var, kb_centered: Var) -> Result<Var> {
    let n = tape.shape(ka_centered).0;
    let prod = tape.mul(ka_centered, kb_centered)?;
    let total = tape.sum(prod)?;
    let denom = T::of_usize(n - 1);
    tape.scale(total, T::one() / (denom * denom))
}

pub fn hsic_tape<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, rows: &[usize], kind: KernelKind) -> Result<Var> {
    let ka = kernel_tape(tape, a, rows, kind)?;
    let kb = kernel_tape(tape, b, rows, kind)?;
    let kac = tape.center(ka)?;
    let kbc = tape.center(kb)?;
    hsic_from_kernels(tape, kac, kbc)
}

pub fn hsic_value<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>, rows: &[usize], kind: KernelKind) -> Result<T> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone())?;
    let bv = tape.constant(b.clone())?;
    let h = hsic_tape(&mut tape, av, bv, rows, kind)?;
    Ok(tape.value(h).item())
}

/// Sampled-softmax cross-entropy of each positive against its negatives.
pub fn recommendation_tape<T: Scalar>(tape: &mut Tape<T>, o: Var, num_users: usize, batch: &BatchIndexSet) -> Result<Var> {
    let b = batch.len();
    let ou = tape.row_gather(o, &batch.users)?;
    let pos_rows: Vec<usize> = batch.pos_items.iter().map(|&v| num_users + v).collect();
    let op = tape.row_gather(o, &pos_rows)?;
    let mut logits = vec![tape.row_dot(ou, op)?];
    for k in 0..batch.n_neg {
        let rows: Vec<usize> = (0..b).map(|i| num_users + batch.neg_items[i * batch.n_neg + k]).collect();
        let on = tape.row_gather(o, &rows)?;
        logits.push(tape.row_dot(ou, on)?);
    }
    let stacked = tape.concat_cols(&logits)?;
    let log_probs = tape.log_softmax_rows(stacked)?;
    let pos = tape.column(log_probs, 0)?;
    let total = tape.sum(pos)?;
    tape.scale(total, -T::one() / T::of_usize(b))
}

pub fn recommendation_loss<T: Scalar>(outputs: &ForwardOutputs<T>, batch: &BatchIndexSet) -> Result<T> {
    let mut tape = Tape::new();
    let o = tape.constant(outputs.o.clone())?;
    let loss = recommendation_tape(&mut tape, o, outputs.num_users, batch)?;
    Ok(tape.value(loss).item())
}

/// InfoNCE of the unified output and of every behavior output against `O`.
pub fn preservation_tape<T: Scalar>(tape: &mut Tape<T>, fv: &ForwardVars, rows: &[usize], temperature: f64) -> Result<Var> {
    let mut total = infonce_tape(tape, fv.uni, fv.o, rows, temperature)?;
    for &b in &fv.behaviors {
        let term = infonce_tape(tape, b, fv.o, rows, temperature)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

pub fn preservation_loss<T: Scalar>(outputs: &ForwardOutputs<T>, rows: &[usize], temperature: f64) -> Result<T> {
    let (mut tape, fv) = constant_outputs(outputs)?;
    let loss = preservation_tape(&mut tape, &fv, rows, temperature)?;
    Ok(tape.value(loss).item())
}

/// HSIC between each encoder output and that encoder's input: unified vs
/// `E0`, each behavior vs unified, each component vs its behavior.
pub fn compression_tape<T: Scalar>(tape: &mut Tape<T>, fv: &ForwardVars, rows: &[usize], kind: KernelKind) -> Result<Var> {
    let k_e0 = kernel_tape(tape, fv.e0, rows, kind)?;
    let k_uni = kernel_tape(tape, fv.uni, rows, kind)?;
    let kc_e0 = tape.center(k_e0)?;
    let kc_uni = tape.center(k_uni)?;
    let mut total = hsic_from_kernels(tape, kc_uni, kc_e0)?;

    let mut behavior_centered = Vec::with_capacity(fv.behaviors.len());
    for &b in &fv.behaviors {
        let kb = kernel_tape(tape, b, rows, kind)?;
        let kbc = tape.center(kb)?;
        let term = hsic_from_kernels(tape, kbc, kc_uni)?;
        total = tape.add(total, term)?;
        behavior_centered.push(kbc);
    }
    for (&(inter, diff), &owner) in fv.components.iter().zip(&fv.component_owners) {
        for comp in [inter, diff] {
            let kc = kernel_tape(tape, comp, rows, kind)?;
            let kcc = tape.center(kc)?;
            let term = hsic_from_kernels(tape, kcc, behavior_centered[owner])?;
            total = tape.add(total, term)?;
        }
    }
    Ok(total)
}

pub fn compression_loss<T: Scalar>(outputs: &ForwardOutputs<T>, rows: &[usize], kind: KernelKind) -> Result<T> {
    let (mut tape, fv) = constant_outputs(outputs)?;
    let loss = compression_tape(&mut tape, &fv, rows, kind)?;
    Ok(tape.value(loss).item())
}

/// Places recorded outputs on a fresh tape as constants.
fn constant_outputs<T: Scalar>(outputs: &ForwardOutputs<T>) -> Result<(Tape<T>, ForwardVars)> {
    let mut tape = Tape::new();
    let e0 = tape.constant(outputs.e0.clone())?;
    let uni = tape.constant(outputs.uni.clone())?;
    let behaviors = outputs.behaviors.iter().map(|b| tape.constant(b.clone())).collect::<Result<Vec<_>>>()?;
    let components = outputs
        .components
        .iter()
        .map(|c| Ok((tape.constant(c.intersection.clone())?, tape.constant(c.difference.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let e_hat = tape.constant(outputs.e_hat.clone())?;
    let o = tape.constant(outputs.o.clone())?;
    let owners = outputs.components.iter().map(|c| c.behavior).collect();
    Ok((tape, ForwardVars { e0, uni, behaviors, components, component_owners: owners, e_hat, o, param_vars: vec![] }))
}

/// Squared L2 norm of every parameter leaf.
pub fn regularization_tape<T: Scalar>(tape: &mut Tape<T>, param_vars: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in param_vars {
        let sq = tape.mul(p, p)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(DenseMatrix::scalar(T::zero())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub reg_coeff: f64,
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("reg_coeff", self.reg_coeff)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(HgibError::InvalidArgument(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub pres: f64,
    pub comp: f64,
    pub reg: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub reg_coeff: f64,
}

impl LossBreakdown {
    /// `total = rec + alpha * pres + beta * comp + reg_coeff * reg`,
    /// evaluated left to right.
    pub fn compose_total(rec: f64, pres: f64, comp: f64, reg: f64, c: &LossCoefficients) -> f64 {
        rec + c.alpha * pres + c.beta * comp + c.reg_coeff * reg
    }

    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients { alpha: self.alpha, beta: self.beta, reg_coeff: self.reg_coeff }
    }

    /// `|total - composed total|`.
    pub fn composition_error(&self) -> f64 {
        (self.total - Self::compose_total(self.rec, self.pres, self.comp, self.reg, &self.coefficients())).abs()
    }
}

pub fn total_objective(rec: f64, pres: f64, comp: f64, reg: f64, coefficients: &LossCoefficients) -> Result<LossBreakdown> {
    coefficients.validate()?;
    let total = LossBreakdown::compose_total(rec, pres, comp, reg, coefficients);
    let b = LossBreakdown {
        rec,
        pres,
        comp,
        reg,
        total,
        alpha: coefficients.alpha,
        beta: coefficients.beta,
        reg_coeff: coefficients.reg_coeff,
    };
    if ![rec, pres, comp, reg, total].iter().all(|v| v.is_finite()) {
        return Err(HgibError::NonFinite { op: "total_objective" });
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub coefficients: LossCoefficients,
    pub infonce_temperature: f64,
    pub kernel: KernelKind,
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub rec: Var,
    /// Absent when its coefficient is zero; the term is then not evaluated.
    pub pres: Option<Var>,
    pub comp: Option<Var>,
    pub reg: Var,
    pub total: Var,
}

/// Records the full weighted objective.
pub fn objective_tape<T: Scalar>(
    tape: &mut Tape<T>,
    fv: &ForwardVars,
    num_users: usize,
    batch: &BatchIndexSet,
    contrast_rows: &[usize],
    config: &ObjectiveConfig,
) -> Result<ObjectiveVars> {
    let c = &config.coefficients;
    c.validate()?;
    let rec = recommendation_tape(tape, fv.o, num_users, batch)?;
    let pres = if c.alpha > 0.0 {
        Some(preservation_tape(tape, fv, contrast_rows, config.infonce_temperature)?)
    } else {
        None
    };
    let comp = if c.beta > 0.0 { Some(compression_tape(tape, fv, contrast_rows, config.kernel)?) } else { None };
    let reg = regularization_tape(tape, &fv.param_vars)?;

    let mut total = rec;
    if let Some(p) = pres {
        let w = tape.scale(p, T::of(c.alpha))?;
        total = tape.add(total, w)?;
    }
    if let Some(p) = comp {
        let w = tape.scale(p, T::of(c.beta))?;
        total = tape.add(total, w)?;
    }
    let w = tape.scale(reg, T::of(c.reg_coeff))?;
    total = tape.add(total, w)?;
    Ok(ObjectiveVars { rec, pres, comp, reg, total })
}

impl ObjectiveVars {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>, coefficients: &LossCoefficients) -> Result<LossBreakdown> {
        let v = |x: Var| tape.value(x).item().as_f64();
        total_objective(
            v(self.rec),
            self.pres.map_or(0.0, v),
            self.comp.map_or(0.0, v),
            v(self.reg),
            coefficients,
        )
    }
}
