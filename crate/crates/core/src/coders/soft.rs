//! Soft assignment (SA) and its locality-constrained variant (LCSA).
//!
//! The code of `x` is the softmax of `−‖x − m_j‖² / 2σ²`, over all atoms for SA
//! and over the `k'` nearest atoms for LCSA. Inside a Voronoi cell (a region
//! where the `k'`-nearest set is constant) `h(x) = M α(x)` is smooth with
//! Jacobian `(1/σ²) Σ_j α_j (m_j − y)(m_j − y)ᵀ`, `y = h(x)`.

use super::{check_dims, encode_columns, sq_dists_to_atoms, ColumnCode, Codes, CELL_MARGIN_TOL};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::support::{by_dist_then_index, partial_sort_knn, SupportSet};

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")))
    }
}

/// Softmax of `−d2 / 2σ²` over the listed indices, shifted by the smallest
/// listed distance before exponentiation.
fn softmax_over(d2: &[f64], idx: &[usize], sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let min = idx.iter().fold(f64::INFINITY, |m, &j| m.min(d2[j]));
    let mut w: Vec<f64> = idx.iter().map(|&j| (-(d2[j] - min) * inv).exp()).collect();
    let z: f64 = w.iter().sum();
    for v in &mut w {
        *v /= z;
    }
    w
}

/// Gap between the `(k'+1)`-th and `k'`-th smallest Euclidean distance, given
/// squared distances. Infinite when every atom is in the support.
pub fn cell_margin(d2: &[f64], kprime: usize) -> f64 {
    if kprime >= d2.len() {
        return f64::INFINITY;
    }
    let mut idx: Vec<usize> = (0..d2.len()).collect();
    let cmp = by_dist_then_index(d2);
    idx.select_nth_unstable_by(kprime, &cmp);
    let inner = idx[..kprime].iter().fold(0.0f64, |m, &j| m.max(d2[j]));
    d2[idx[kprime]].sqrt() - inner.sqrt()
}

/// LCSA state of one point: its support, the code restricted to the support
/// and its distance to the nearest cell facet.
#[derive(Debug, Clone)]
pub struct SoftLocal {
    pub support: SupportSet,
    /// Coefficients aligned with `support.indices()`.
    pub weights: Vec<f64>,
    pub margin: f64,
}

impl SoftLocal {
    pub fn compute(x: &[f64], atoms_t: &Matrix, sigma: f64, kprime: usize) -> Result<SoftLocal> {
        let d2 = sq_dists_to_atoms(x, atoms_t);
        let k = d2.len();
        if kprime == 0 || kprime > k {
            // reuse the standard error message
            partial_sort_knn(&d2, kprime)?;
        }
        // keep the kprime + 1 nearest atoms sorted by (distance, index); the
        // extra one gives the margin
        let keep = (kprime + 1).min(k);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(keep + 1);
        for (j, &dj) in d2.iter().enumerate() {
            if best.len() == keep && !(dj < best[keep - 1].0) {
                continue;
            }
            // later indices lose ties, so insert after equal distances
            let pos = best.partition_point(|&(db, _)| !(dj < db));
            best.insert(pos, (dj, j));
            best.truncate(keep);
        }
        let margin = if kprime < k {
            best[kprime].0.sqrt() - best[kprime - 1].0.sqrt()
        } else {
            f64::INFINITY
        };
        let idx: Vec<usize> = best[..kprime].iter().map(|&(_, j)| j).collect();
        let support = SupportSet::new(idx);
        let weights = softmax_over(&d2, support.indices(), sigma);
        Ok(SoftLocal {
            support,
            weights,
            margin,
        })
    }

    /// `y = Σ α_j m_j`.
    pub fn reconstruct(&self, atoms_t: &Matrix) -> Vec<f64> {
        let d = atoms_t.cols();
        let mut y = vec![0.0; d];
        for (&j, &w) in self.support.indices().iter().zip(&self.weights) {
            for (yi, mi) in y.iter_mut().zip(atoms_t.row(j)) {
                *yi += w * mi;
            }
        }
        y
    }

    pub fn is_interior(&self) -> bool {
        self.margin > CELL_MARGIN_TOL
    }
}

/// Soft assignment over all atoms.
pub fn encode_sa(x: &Matrix, atoms: &Matrix, sigma: f64) -> Result<Codes> {
    check_dims("encode_sa", x, atoms)?;
    check_sigma(sigma)?;
    let all: Vec<usize> = (0..atoms.cols()).collect();
    encode_columns(x, atoms, |_, col, atoms_t| {
        let d2 = sq_dists_to_atoms(col, atoms_t);
        let w = softmax_over(&d2, &all, sigma);
        Ok(ColumnCode {
            entries: all.iter().copied().zip(w).collect(),
            support: None,
            flagged: false,
        })
    })
}

/// Soft assignment restricted to the `kprime` nearest atoms.
pub fn encode_lcsa(x: &Matrix, atoms: &Matrix, sigma: f64, kprime: usize) -> Result<Codes> {
    check_dims("encode_lcsa", x, atoms)?;
    check_sigma(sigma)?;
    encode_columns(x, atoms, |_, col, atoms_t| {
        let d2 = sq_dists_to_atoms(col, atoms_t);
        let support = partial_sort_knn(&d2, kprime)?;
        let w = softmax_over(&d2, support.indices(), sigma);
        Ok(ColumnCode {
            entries: support.indices().iter().copied().zip(w).collect(),
            support: Some(support),
            flagged: false,
        })
    })
}

/// Jacobian of `h = M α_LCSA` at `x` (a `d × d` symmetric PSD matrix).
///
/// Fails with [`Error::Boundary`] when `x` is within [`CELL_MARGIN_TOL`] of a
/// cell facet, where `h` is discontinuous.
pub fn lcsa_jacobian(x: &[f64], atoms: &Matrix, sigma: f64, kprime: usize) -> Result<Matrix> {
    soft_jacobian(x, atoms, sigma, kprime)
}

/// Same as [`lcsa_jacobian`]; `kprime == k` gives the SA Jacobian, which has
/// no boundaries.
pub fn soft_jacobian(x: &[f64], atoms: &Matrix, sigma: f64, kprime: usize) -> Result<Matrix> {
    if x.len() != atoms.rows() {
        return Err(Error::dims("lcsa_jacobian", atoms.rows(), x.len()));
    }
    if atoms.cols() == 0 {
        return Err(Error::EmptyDictionary);
    }
    check_sigma(sigma)?;
    let atoms_t = atoms.transpose();
    let local = SoftLocal::compute(x, &atoms_t, sigma, kprime)?;
    if !local.is_interior() {
        return Err(Error::Boundary {
            margin: local.margin,
        });
    }
    let y = local.reconstruct(&atoms_t);
    let d = x.len();
    let inv = 1.0 / (sigma * sigma);
    let mut jac = Matrix::zeros(d, d);
    let mut centred = vec![0.0; d];
    for (&j, &w) in local.support.indices().iter().zip(&local.weights) {
        for (c, (m, yv)) in centred.iter_mut().zip(atoms_t.row(j).iter().zip(&y)) {
            *c = m - yv;
        }
        let s = w * inv;
        for a in 0..d {
            let sa = s * centred[a];
            if sa == 0.0 {
                continue;
            }
            for b in 0..d {
                jac[(a, b)] += sa * centred[b];
            }
        }
    }
    // mirror the upper triangle so J == Jᵀ bit for bit
    for a in 0..d {
        for b in a + 1..d {
            jac[(b, a)] = jac[(a, b)];
        }
    }
    Ok(jac)
}

/// `Jᵀ g` (= `J g`) for the soft coder at `x`, without forming `J`.
/// `atoms_t` holds the atoms as rows.
pub fn soft_vjp(x: &[f64], atoms_t: &Matrix, sigma: f64, kprime: usize, g: &[f64]) -> Result<Vec<f64>> {
    let local = SoftLocal::compute(x, atoms_t, sigma, kprime)?;
    if !local.is_interior() {
        return Err(Error::Boundary {
            margin: local.margin,
        });
    }
    Ok(local.jacobian_times(atoms_t, sigma, g))
}

impl SoftLocal {
    /// `J g` at the point this state was computed for. The caller is
    /// responsible for checking [`SoftLocal::is_interior`].
    pub fn jacobian_times(&self, atoms_t: &Matrix, sigma: f64, g: &[f64]) -> Vec<f64> {
        let y = self.reconstruct(atoms_t);
        let inv = 1.0 / (sigma * sigma);
        let mut out = vec![0.0; g.len()];
        for (&j, &w) in self.support.indices().iter().zip(&self.weights) {
            let m = atoms_t.row(j);
            let proj: f64 = m.iter().zip(&y).zip(g).map(|((mi, yi), gi)| (mi - yi) * gi).sum();
            let s = w * inv * proj;
            for (o, (mi, yi)) in out.iter_mut().zip(m.iter().zip(&y)) {
                *o += s * (mi - yi);
            }
        }
        out
    }
}
