//! Sparse coding (SC) and non-negative sparse coding (SC+) by a fixed number
//! of projected gradient steps on `‖x − Mα‖² + κ‖α‖₁`.
//!
//! SC+ starts from uniform `U(1e-6, 1)` codes, L1-normalized per column, and
//! clips to the non-negative orthant after each step. SC splits `α = α₊ − α₋`
//! with both parts non-negative and runs the same scheme on the pair. The
//! step at iteration `i` (1-based) is `ω / (1 + i)^0.3`.

use nalgebra::DMatrix;

use super::{check_dims, Codes};
use crate::error::{Error, Result};
use crate::matrix::{matmul, Matrix};
use crate::rng::{Rng, UniformSource};

const STEP_DECAY: f64 = 0.3;
const NORM_EPS: f64 = 1e-6;

fn step_size(lr: f64, i: usize) -> f64 {
    lr / (1.0 + i as f64).powf(STEP_DECAY)
}

/// Per-column objective `‖x_n − M α_n‖₂² + κ ‖α_n‖₁`.
pub fn sc_objective(x: &Matrix, atoms: &Matrix, alpha: &Matrix, kappa: f64) -> Result<Vec<f64>> {
    let res = x.sub(&matmul(atoms, alpha)?)?;
    Ok((0..x.cols())
        .map(|n| {
            let fit: f64 = (0..res.rows()).map(|i| res[(i, n)].powi(2)).sum();
            let l1: f64 = (0..alpha.rows()).map(|j| alpha[(j, n)].abs()).sum();
            fit + kappa * l1
        })
        .collect())
}

/// Per-column objective of the split SC scheme,
/// `‖x_n − M(α₊ − α₋)‖₂² + κ (1ᵀα₊ + 1ᵀα₋)`. It bounds [`sc_objective`] of
/// `α₊ − α₋` from above, with equality when the two parts have disjoint
/// supports.
pub fn sc_split_objective(x: &Matrix, atoms: &Matrix, pos: &Matrix, neg: &Matrix, kappa: f64) -> Result<Vec<f64>> {
    let fit = sc_objective(x, atoms, &pos.sub(neg)?, 0.0)?;
    Ok(fit
        .into_iter()
        .enumerate()
        .map(|(n, f)| f + kappa * (0..pos.rows()).map(|j| pos[(j, n)] + neg[(j, n)]).sum::<f64>())
        .collect())
}

/// A base step `ω` for which every SC/SC+ iteration is a descent step:
/// `1 / (4 λ_max(MᵀM))`.
///
/// The data term has a `2 λ_max`-Lipschitz gradient; the split SC scheme moves
/// `α` by twice the step, hence the extra factor of two.
pub fn sc_safe_lr(atoms: &Matrix) -> f64 {
    let g = matmul(atoms, &atoms.transpose()).expect("square product");
    let n = g.rows();
    let dm = DMatrix::from_row_slice(n, n, g.data());
    let lmax = dm
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |m, v| m.max(*v));
    if lmax > 0.0 {
        1.0 / (4.0 * lmax)
    } else {
        1.0
    }
}

fn check_params(kappa: f64, iters: usize, lr: f64) -> Result<()> {
    if !(kappa >= 0.0) {
        return Err(Error::InvalidParameter(format!("kappa must be non-negative, got {kappa}")));
    }
    if iters == 0 {
        return Err(Error::InvalidParameter("iters must be at least 1".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidParameter(format!("lr must be positive, got {lr}")));
    }
    Ok(())
}

fn l1_normalize_columns(a: &mut Matrix) {
    for n in 0..a.cols() {
        let s: f64 = (0..a.rows()).map(|j| a[(j, n)].abs()).sum::<f64>() + NORM_EPS;
        for j in 0..a.rows() {
            a[(j, n)] /= s;
        }
    }
}

/// `2 Mᵀ(M α − X)`, the gradient of the data term.
fn data_gradient(x: &Matrix, atoms: &Matrix, atoms_t: &Matrix, alpha: &Matrix) -> Result<Matrix> {
    let res = matmul(atoms, alpha)?.sub(x)?;
    Ok(matmul(atoms_t, &res)?.scale(2.0))
}

pub fn encode_sc_plus(
    x: &Matrix,
    atoms: &Matrix,
    kappa: f64,
    iters: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<Codes> {
    Ok(run_sc_plus(x, atoms, kappa, iters, lr, rng, false)?.0)
}

/// [`encode_sc_plus`] plus the per-column objective after every iteration
/// (`trace[0]` is the initialization).
pub fn encode_sc_plus_traced(
    x: &Matrix,
    atoms: &Matrix,
    kappa: f64,
    iters: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<(Codes, Vec<Vec<f64>>)> {
    run_sc_plus(x, atoms, kappa, iters, lr, rng, true)
}

fn run_sc_plus(
    x: &Matrix,
    atoms: &Matrix,
    kappa: f64,
    iters: usize,
    lr: f64,
    rng: &mut Rng,
    trace: bool,
) -> Result<(Codes, Vec<Vec<f64>>)> {
    check_dims("encode_sc_plus", x, atoms)?;
    check_params(kappa, iters, lr)?;
    let (k, n) = (atoms.cols(), x.cols());
    let atoms_t = atoms.transpose();

    let mut alpha = Matrix::zeros(k, n);
    for v in alpha.data_mut() {
        *v = rng.uniform(1e-6, 1.0);
    }
    l1_normalize_columns(&mut alpha);

    let mut history = Vec::new();
    if trace {
        history.push(sc_objective(x, atoms, &alpha, kappa)?);
    }
    for i in 1..=iters {
        let grad = data_gradient(x, atoms, &atoms_t, &alpha)?;
        let eta = step_size(lr, i);
        for (a, g) in alpha.data_mut().iter_mut().zip(grad.data()) {
            *a = (*a - eta * (g + kappa)).max(0.0);
        }
        if trace {
            history.push(sc_objective(x, atoms, &alpha, kappa)?);
        }
    }
    Ok((Codes::dense(alpha), history))
}

pub fn encode_sc(
    x: &Matrix,
    atoms: &Matrix,
    kappa: f64,
    iters: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<Codes> {
    Ok(run_sc(x, atoms, kappa, iters, lr, rng, false)?.0)
}

/// [`encode_sc`] plus the per-column [`sc_split_objective`] after every
/// iteration (`trace[0]` is the initialization). The split objective is the
/// one the iterations descend; the plain objective of `α₊ − α₋` can rise
/// while overlapping mass in the two parts cancels.
pub fn encode_sc_traced(
    x: &Matrix,
    atoms: &Matrix,
    kappa: f64,
    iters: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<(Codes, Vec<Vec<f64>>)> {
    run_sc(x, atoms, kappa, iters, lr, rng, true)
}

fn run_sc(
    x: &Matrix,
    atoms: &Matrix,
    kappa: f64,
    iters: usize,
    lr: f64,
    rng: &mut Rng,
    trace: bool,
) -> Result<(Codes, Vec<Vec<f64>>)> {
    check_dims("encode_sc", x, atoms)?;
    check_params(kappa, iters, lr)?;
    let (k, n) = (atoms.cols(), x.cols());
    let atoms_t = atoms.transpose();

    let init = rng.uniform_matrix(k, n, -1.0, 1.0);
    let mut pos = init.map(|v| v.max(0.0) + 1e-6);
    let mut neg = init.map(|v| (-v).max(0.0) + 1e-6);
    l1_normalize_columns(&mut pos);
    l1_normalize_columns(&mut neg);

    let mut history = Vec::new();
    if trace {
        history.push(sc_split_objective(x, atoms, &pos, &neg, kappa)?);
    }
    for i in 1..=iters {
        let alpha = pos.sub(&neg)?;
        let grad = data_gradient(x, atoms, &atoms_t, &alpha)?;
        let eta = step_size(lr, i);
        for ((p, m), g) in pos
            .data_mut()
            .iter_mut()
            .zip(neg.data_mut().iter_mut())
            .zip(grad.data())
        {
            *p = (*p - eta * (g + kappa)).max(0.0);
            *m = (*m - eta * (-g + kappa)).max(0.0);
        }
        if trace {
            history.push(sc_split_objective(x, atoms, &pos, &neg, kappa)?);
        }
    }
    Ok((Codes::dense(pos.sub(&neg)?), history))
}
