use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParameterSet, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    /// Coordinates sampled across all parameters; every coordinate is
    /// checked when the parameter set is smaller.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_coords: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// max over checked coordinates of `|analytic - fd| / max(1, |fd|)`.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// The worst coordinate as `(parameter, flat index)`.
    pub worst: Option<(ParamId, usize)>,
    /// Set when some perturbed loss was non-finite or failed to build.
    pub failed: bool,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.failed && self.max_rel_error < tol
    }
}

/// Compares reverse-mode gradients of the loss built by `build` against
/// central finite differences on sampled parameter coordinates.
///
/// `params` is perturbed in place and restored before returning; its
/// gradient accumulators are left holding the analytic gradient.
pub fn finite_diff_check<T, F>(build: F, params: &mut ParameterSet<T>, opts: FdOptions) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParameterSet<T>) -> Result<Var>,
{
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    tape.backward(loss, params)?;
    drop(tape);

    let mut coords: Vec<(ParamId, usize)> = Vec::with_capacity(params.num_scalars());
    for id in params.ids() {
        coords.extend((0..params.value(id).len()).map(|k| (id, k)));
    }
    let chosen: Vec<(ParamId, usize)> = if coords.len() <= opts.max_coords {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked: Vec<usize> = sample(&mut rng, coords.len(), opts.max_coords).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| coords[i]).collect()
    };

    let eval = |params: &ParameterSet<T>| -> Option<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params).ok()?;
        let v = tape.value(loss).item().as_f64();
        v.is_finite().then_some(v)
    };

    let h = T::of(opts.step);
    let mut report = FdReport { max_rel_error: 0.0, coords_checked: 0, worst: None, failed: false };
    for (id, k) in chosen {
        let original = params.value(id).as_slice()[k];
        params.value_mut(id).as_mut_slice()[k] = original + h;
        let plus = eval(params);
        params.value_mut(id).as_mut_slice()[k] = original - h;
        let minus = eval(params);
        params.value_mut(id).as_mut_slice()[k] = original;

        let (Some(plus), Some(minus)) = (plus, minus) else {
            report.failed = true;
            continue;
        };
        let fd = (plus - minus) / (2.0 * opts.step);
        let analytic = params.grad(id).as_slice()[k].as_f64();
        let err = (analytic - fd).abs() / fd.abs().max(1.0);
        report.coords_checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((id, k));
        }
    }
    Ok(report)
}
