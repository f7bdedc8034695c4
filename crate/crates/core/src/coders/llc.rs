use super::{check_dims, encode_columns, sq_dists_to_atoms, ColumnCode, Codes};
use crate::error::{Error, Result};
use crate::matrix::{dot, solve, Matrix};
use crate::support::partial_sort_knn;

/// Approximate locality-constrained linear coding.
///
/// For each column the `kprime` nearest atoms are shifted by `x`
/// (`z_j = m_j − x`), the local covariance `C = [z_a · z_b]` is ridged with
/// `rho`, `(C + ρI) w = 1` is solved and `w` is rescaled to sum to one.
pub fn encode_llc(x: &Matrix, atoms: &Matrix, kprime: usize, rho: f64) -> Result<Codes> {
    check_dims("encode_llc", x, atoms)?;
    if !(rho >= 0.0) {
        return Err(Error::InvalidParameter(format!("rho must be non-negative, got {rho}")));
    }
    encode_columns(x, atoms, |n, col, atoms_t| {
        let d2 = sq_dists_to_atoms(col, atoms_t);
        let support = partial_sort_knn(&d2, kprime)?;
        let idx = support.indices();
        let shifted: Vec<Vec<f64>> = idx
            .iter()
            .map(|&j| atoms_t.row(j).iter().zip(col).map(|(m, xv)| m - xv).collect())
            .collect();
        let kp = idx.len();
        let mut cov = Matrix::zeros(kp, kp);
        for a in 0..kp {
            for b in a..kp {
                let v = dot(&shifted[a], &shifted[b]);
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
            cov[(a, a)] += rho;
        }
        let w = solve(&cov, &vec![1.0; kp]).ok_or(Error::Singular { column: n })?;
        let total: f64 = w.iter().sum();
        if !(total.abs() > f64::MIN_POSITIVE) || !total.is_finite() {
            return Err(Error::Singular { column: n });
        }
        Ok(ColumnCode {
            entries: idx.iter().copied().zip(w.iter().map(|v| v / total)).collect(),
            support: Some(support),
            flagged: false,
        })
    })
}
