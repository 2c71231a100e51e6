//! Information abundance: sum of singular values over the largest one.
//!
//! Singular values come from the eigenvalues of the `d x d` Gram matrix
//! `E^T E`, diagonalized with cyclic Jacobi rotations.

use serde::{Deserialize, Serialize};

use crate::diff::DenseMatrix;
use crate::error::{HgibError, Result};
use crate::graph::BehaviorSchema;
use crate::model::ForwardOutputs;
use crate::scalar::Scalar;

const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen<T> {
    /// Eigenvalues in descending order.
    pub values: Vec<T>,
    /// Column `k` is the eigenvector of `values[k]`.
    pub vectors: DenseMatrix<T>,
    pub sweeps: usize,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn symmetric_eigen<T: Scalar>(a: &DenseMatrix<T>) -> Result<SymmetricEigen<T>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(HgibError::shape("symmetric_eigen", format!("{:?} is not square", a.shape())));
    }
    let mut m = a.clone();
    let mut v = DenseMatrix::identity(n);
    let tol = T::of(OFF_DIAGONAL_TOL).max(T::epsilon()) * m.squared_norm().sqrt();

    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j) * m.get(i, j))
            .sum::<T>()
            .sqrt();
        if off <= tol {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == T::zero() {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    *m.get_mut(k, p) = c * mkp - s * mkq;
                    *m.get_mut(k, q) = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    *m.get_mut(p, k) = c * mpk - s * mqk;
                    *m.get_mut(q, k) = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    *v.get_mut(k, p) = c * vkp - s * vkq;
                    *v.get_mut(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).partial_cmp(&m.get(i, i)).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = DenseMatrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok(SymmetricEigen { values, vectors, sweeps })
}

/// Singular values of `e` in descending order. Gram eigenvalues below
/// `d * eps * max` are rounding noise and map to exactly zero.
pub fn singular_values<T: Scalar>(e: &DenseMatrix<T>) -> Result<Vec<T>> {
    let gram = e.t_matmul(e)?;
    let eig = symmetric_eigen(&gram)?;
    let top = eig.values.first().copied().unwrap_or(T::zero());
    let floor = T::of_usize(gram.rows()) * T::epsilon() * top;
    Ok(eig.values.into_iter().map(|l| if l <= floor { T::zero() } else { l.sqrt() }).collect())
}

pub fn information_abundance<T: Scalar>(e: &DenseMatrix<T>) -> Result<f64> {
    let sv = singular_values(e)?;
    let max = sv.first().copied().unwrap_or(T::zero());
    if !(max > T::zero()) {
        return Err(HgibError::InvalidArgument("information abundance of a zero matrix".into()));
    }
    Ok((sv.iter().copied().sum::<T>() / max).as_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAbundance {
    pub stage: String,
    pub ia: f64,
}

/// Abundance of every encoder output in hierarchy order: `E0`, unified,
/// each behavior, each component (`b∩t`, `b/t`), then `O`.
pub fn diagnose_hierarchy<T: Scalar>(outputs: &ForwardOutputs<T>, schema: &BehaviorSchema) -> Result<Vec<StageAbundance>> {
    let names = schema.names();
    let target = schema.target_name();
    let mut stages: Vec<(String, &DenseMatrix<T>)> = vec![("E0".into(), &outputs.e0), ("uni".into(), &outputs.uni)];
    for (name, m) in names.iter().zip(&outputs.behaviors) {
        stages.push((name.clone(), m));
    }
    for c in &outputs.components {
        let b = &names[c.behavior];
        stages.push((format!("{b}∩{target}"), &c.intersection));
        stages.push((format!("{b}/{target}"), &c.difference));
    }
    stages.push(("O".into(), &outputs.o));
    stages
        .into_iter()
        .map(|(stage, m)| Ok(StageAbundance { stage, ia: information_abundance(m)? }))
        .collect()
}
