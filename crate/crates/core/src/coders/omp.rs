use super::{check_dims, encode_columns, ColumnCode, Codes};
use crate::error::{Error, Result};
use crate::matrix::{dot, solve, Matrix};
use crate::support::SupportSet;

/// Ridge used when the active Gram matrix is numerically singular.
const RANK_RIDGE: f64 = 1e-10;

/// Orthogonal matching pursuit with at most `tau` atoms per column.
///
/// Each round correlates the residual with every atom, activates the atom
/// with the largest absolute correlation, refits the coefficients of all
/// active atoms by solving the normal equations, and recomputes the residual.
/// Columns whose residual vanishes stop early. Columns that needed the
/// fallback ridge are listed in [`Codes::flagged`].
pub fn encode_omp(x: &Matrix, atoms: &Matrix, tau: usize) -> Result<Codes> {
    check_dims("encode_omp", x, atoms)?;
    let k = atoms.cols();
    if tau == 0 || tau > k {
        return Err(Error::InvalidParameter(format!("tau must be in 1..={k}, got {tau}")));
    }
    encode_columns(x, atoms, |_, col, atoms_t| {
        let x_norm = dot(col, col).sqrt();
        let mut residual = col.to_vec();
        let mut active: Vec<usize> = Vec::with_capacity(tau);
        let mut coef: Vec<f64> = Vec::new();
        let mut flagged = false;
        for _ in 0..tau {
            if dot(&residual, &residual).sqrt() <= 1e-14 * x_norm.max(f64::MIN_POSITIVE) {
                break;
            }
            let mut best: Option<(usize, f64)> = None;
            for j in 0..k {
                if active.contains(&j) {
                    continue;
                }
                let p = dot(atoms_t.row(j), &residual).abs();
                if best.is_none_or(|(_, b)| p > b) {
                    best = Some((j, p));
                }
            }
            let Some((j, _)) = best else { break };
            active.push(j);

            let a = active.len();
            let mut gram = Matrix::zeros(a, a);
            let mut rhs = vec![0.0; a];
            for (r, &jr) in active.iter().enumerate() {
                rhs[r] = dot(atoms_t.row(jr), col);
                for (c, &jc) in active.iter().enumerate().skip(r) {
                    let v = dot(atoms_t.row(jr), atoms_t.row(jc));
                    gram[(r, c)] = v;
                    gram[(c, r)] = v;
                }
            }
            coef = match solve(&gram, &rhs) {
                Some(c) => c,
                None => {
                    flagged = true;
                    for r in 0..a {
                        gram[(r, r)] += RANK_RIDGE;
                    }
                    solve(&gram, &rhs).unwrap_or_else(|| vec![0.0; a])
                }
            };
            residual.copy_from_slice(col);
            for (&jr, &c) in active.iter().zip(&coef) {
                for (e, m) in residual.iter_mut().zip(atoms_t.row(jr)) {
                    *e -= c * m;
                }
            }
        }
        Ok(ColumnCode {
            entries: active.iter().copied().zip(coef).collect(),
            support: Some(SupportSet::new(active)),
            flagged,
        })
    })
}
