//! Feature coders `α(x)` and the manifold view `h(x) = M α(x)`.
//!
//! Every coder works column-wise: `x` is `d × N`, the atoms are `d × k` and the
//! resulting codes are `k × N`. Columns are encoded independently (and in
//! parallel), so results do not depend on the worker count.

mod dae;
mod hard;
mod llc;
mod omp;
mod soft;
mod sparse;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{matmul, Matrix};
use crate::rng::Rng;
use crate::support::SupportSet;

pub use dae::{dae_forward, dae_gradients, dae_train_step, DaeEncoder, DaeGradients};
pub use hard::encode_ha;
pub use llc::encode_llc;
pub use omp::encode_omp;
pub use soft::{
    cell_margin, encode_lcsa, encode_sa, lcsa_jacobian, soft_jacobian, soft_vjp, SoftLocal,
};
pub use sparse::{
    encode_sc, encode_sc_plus, encode_sc_plus_traced, encode_sc_traced, sc_objective, sc_safe_lr, sc_split_objective,
};

/// Points closer than this (in distance units) to a Voronoi facet count as
/// boundary points.
pub const CELL_MARGIN_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoderKind {
    /// Hard assignment to the nearest atom.
    Ha,
    /// Sparse coding (L1 penalized least squares).
    Sc,
    /// Non-negative sparse coding.
    ScPlus,
    /// Orthogonal matching pursuit.
    Omp,
    /// Locality-constrained linear coding.
    Llc,
    /// Soft assignment over all atoms.
    Sa,
    /// Soft assignment over the `k'` nearest atoms.
    Lcsa,
    /// Denoising auto-encoder; has no dictionary codes.
    Dae,
}

impl CoderKind {
    pub const ALL: [CoderKind; 8] = [
        CoderKind::Ha,
        CoderKind::Sc,
        CoderKind::ScPlus,
        CoderKind::Omp,
        CoderKind::Llc,
        CoderKind::Sa,
        CoderKind::Lcsa,
        CoderKind::Dae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CoderKind::Ha => "ha",
            CoderKind::Sc => "sc",
            CoderKind::ScPlus => "sc+",
            CoderKind::Omp => "omp",
            CoderKind::Llc => "llc",
            CoderKind::Sa => "sa",
            CoderKind::Lcsa => "lcsa",
            CoderKind::Dae => "dae",
        }
    }

    /// Coders with a closed-form Jacobian.
    pub fn is_soft(self) -> bool {
        matches!(self, CoderKind::Sa | CoderKind::Lcsa)
    }
}

impl fmt::Display for CoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let kind = match lower.as_str() {
            "ha" => CoderKind::Ha,
            "sc" => CoderKind::Sc,
            "sc+" | "scplus" | "sc_plus" => CoderKind::ScPlus,
            "omp" => CoderKind::Omp,
            "llc" => CoderKind::Llc,
            "sa" => CoderKind::Sa,
            "lcsa" => CoderKind::Lcsa,
            "dae" => CoderKind::Dae,
            _ => return Err(Error::InvalidParameter(format!("unknown coder '{s}'"))),
        };
        Ok(kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoderConfig {
    pub kind: CoderKind,
    /// Bandwidth of SA/LCSA.
    pub sigma: f64,
    /// Neighbourhood size of LLC/LCSA.
    pub kprime: usize,
    /// L1 penalty of SC/SC+.
    pub kappa: f64,
    /// Maximum non-zeros of OMP.
    pub tau: usize,
    /// Ridge added to the LLC local covariance.
    pub rho: f64,
    /// Inner gradient iterations of SC/SC+.
    pub iters: usize,
    /// Base inner step of SC/SC+.
    pub lr: f64,
}

impl Default for CoderConfig {
    fn default() -> Self {
        CoderConfig {
            kind: CoderKind::Lcsa,
            sigma: 1.2,
            kprime: 8,
            kappa: 0.1,
            tau: 3,
            rho: 1e-6,
            iters: 5,
            lr: 0.05,
        }
    }
}

impl CoderConfig {
    pub fn with_kind(kind: CoderKind) -> Self {
        CoderConfig {
            kind,
            ..Default::default()
        }
    }

    /// Checks the parameters used by `kind` against a dictionary of `k` atoms.
    pub fn validate(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::EmptyDictionary);
        }
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        match self.kind {
            CoderKind::Sa | CoderKind::Lcsa if !(self.sigma > 0.0 && self.sigma.is_finite()) => {
                return bad(format!("sigma must be positive, got {}", self.sigma));
            }
            CoderKind::Lcsa | CoderKind::Llc if self.kprime == 0 || self.kprime > k => {
                return bad(format!("kprime must be in 1..={k}, got {}", self.kprime));
            }
            CoderKind::Omp if self.tau == 0 || self.tau > k => {
                return bad(format!("tau must be in 1..={k}, got {}", self.tau));
            }
            CoderKind::Sc | CoderKind::ScPlus => {
                if !(self.kappa >= 0.0) {
                    return bad(format!("kappa must be non-negative, got {}", self.kappa));
                }
                if self.iters == 0 {
                    return bad("iters must be at least 1".into());
                }
                if !(self.lr > 0.0) {
                    return bad(format!("lr must be positive, got {}", self.lr));
                }
            }
            CoderKind::Llc if !(self.rho >= 0.0) => {
                return bad(format!("rho must be non-negative, got {}", self.rho));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Column codes `α` (`k × N`).
#[derive(Debug, Clone, PartialEq)]
pub struct Codes {
    pub alpha: Matrix,
    /// Per-column support, for coders that select atoms explicitly.
    pub supports: Option<Vec<SupportSet>>,
    /// Columns whose local system needed regularization (OMP rank deficiency).
    pub flagged: Vec<usize>,
}

impl Codes {
    pub fn dense(alpha: Matrix) -> Self {
        Codes {
            alpha,
            supports: None,
            flagged: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.alpha.rows()
    }

    pub fn n(&self) -> usize {
        self.alpha.cols()
    }

    /// Index of the largest coefficient of each column (lowest index on ties).
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.n())
            .map(|n| {
                let mut best = 0;
                for j in 1..self.k() {
                    if self.alpha[(j, n)] > self.alpha[(best, n)] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Encodes every column of `x` with the coder selected by `cfg`.
///
/// `rng` is only consumed by the SC/SC+ initializations.
pub fn encode(x: &Matrix, atoms: &Matrix, cfg: &CoderConfig, rng: &mut Rng) -> Result<Codes> {
    cfg.validate(atoms.cols())?;
    match cfg.kind {
        CoderKind::Ha => encode_ha(x, atoms),
        CoderKind::Sa => encode_sa(x, atoms, cfg.sigma),
        CoderKind::Lcsa => encode_lcsa(x, atoms, cfg.sigma, cfg.kprime),
        CoderKind::Llc => encode_llc(x, atoms, cfg.kprime, cfg.rho),
        CoderKind::Omp => encode_omp(x, atoms, cfg.tau),
        CoderKind::Sc => encode_sc(x, atoms, cfg.kappa, cfg.iters, cfg.lr, rng),
        CoderKind::ScPlus => encode_sc_plus(x, atoms, cfg.kappa, cfg.iters, cfg.lr, rng),
        CoderKind::Dae => Err(Error::InvalidParameter(
            "the DAE coder has no dictionary codes; use dae_forward".into(),
        )),
    }
}

/// `M α`.
pub fn decode(codes: &Codes, atoms: &Matrix) -> Result<Matrix> {
    if atoms.cols() != codes.alpha.rows() {
        return Err(Error::dims("decode", atoms.cols(), codes.alpha.rows()));
    }
    // (αᵀ Mᵀ)ᵀ lets the product skip the zeros of sparse codes
    Ok(matmul(&codes.alpha.transpose(), &atoms.transpose())?.transpose())
}

/// Mean over columns of `‖x_n − M α_n‖₂`.
pub fn mean_reconstruction_error(x: &Matrix, atoms: &Matrix, codes: &Codes) -> Result<f64> {
    let rec = decode(codes, atoms)?;
    let diff = x.sub(&rec)?;
    let n = x.cols();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..n)
        .map(|j| (0..diff.rows()).map(|i| diff[(i, j)].powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / n as f64)
}

pub(crate) fn check_dims(op: &'static str, x: &Matrix, atoms: &Matrix) -> Result<()> {
    if atoms.cols() == 0 {
        return Err(Error::EmptyDictionary);
    }
    if x.rows() != atoms.rows() {
        return Err(Error::dims(op, atoms.rows(), x.rows()));
    }
    Ok(())
}

/// Output of encoding a single column.
pub(crate) struct ColumnCode {
    /// `(atom index, coefficient)` pairs; atoms not listed are zero.
    pub entries: Vec<(usize, f64)>,
    pub support: Option<SupportSet>,
    pub flagged: bool,
}

/// Runs `f` on every column of `x` in parallel and assembles the codes.
/// `f` receives the column index, the column, and the atoms as rows of `Mᵀ`.
pub(crate) fn encode_columns<F>(x: &Matrix, atoms: &Matrix, f: F) -> Result<Codes>
where
    F: Fn(usize, &[f64], &Matrix) -> Result<ColumnCode> + Sync,
{
    let k = atoms.cols();
    let xt = x.transpose();
    let atoms_t = atoms.transpose();
    let cols: Vec<ColumnCode> = (0..x.cols())
        .into_par_iter()
        .map(|n| f(n, xt.row(n), &atoms_t))
        .collect::<Result<_>>()?;

    let mut alpha = Matrix::zeros(k, x.cols());
    let mut supports = Vec::with_capacity(cols.len());
    let mut flagged = Vec::new();
    let mut any_support = false;
    for (n, c) in cols.into_iter().enumerate() {
        for (j, v) in c.entries {
            alpha[(j, n)] = v;
        }
        if c.flagged {
            flagged.push(n);
        }
        any_support |= c.support.is_some();
        supports.push(c.support.unwrap_or_else(|| SupportSet::new(Vec::new())));
    }
    Ok(Codes {
        alpha,
        supports: any_support.then_some(supports),
        flagged,
    })
}

/// Squared distances from `x` to every atom row of `atoms_t`.
pub(crate) fn sq_dists_to_atoms(x: &[f64], atoms_t: &Matrix) -> Vec<f64> {
    (0..atoms_t.rows())
        .map(|j| crate::matrix::sq_dist(x, atoms_t.row(j)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_round_trips_through_names() {
        for kind in CoderKind::ALL {
            assert_eq!(kind.name().parse::<CoderKind>().unwrap(), kind);
        }
        assert!("kmeans".parse::<CoderKind>().is_err());
    }

    #[test]
    fn validate_rejects_bad_params() {
        let mut cfg = CoderConfig::with_kind(CoderKind::Lcsa);
        cfg.sigma = 0.0;
        assert!(cfg.validate(10).is_err());
        cfg.sigma = 1.0;
        cfg.kprime = 11;
        assert!(cfg.validate(10).is_err());
        assert!(matches!(cfg.validate(0), Err(Error::EmptyDictionary)));
    }

    #[test]
    fn decode_one_hot_selects_atom() {
        let atoms = Matrix::from_rows(&[vec![1.0, 4.0, 7.0], vec![2.0, 5.0, 8.0]]).unwrap();
        let mut alpha = Matrix::zeros(3, 1);
        alpha[(1, 0)] = 1.0;
        let out = decode(&Codes::dense(alpha), &atoms).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0]);
    }

    #[test]
    fn decode_uniform_gives_atom_mean() {
        let atoms = Matrix::from_rows(&[vec![1.0, 4.0, 7.0], vec![2.0, 5.0, 11.0]]).unwrap();
        let alpha = Matrix::filled(3, 1, 1.0 / 3.0);
        let out = decode(&Codes::dense(alpha), &atoms).unwrap();
        assert!((out[(0, 0)] - 4.0).abs() < 1e-14);
        assert!((out[(1, 0)] - 6.0).abs() < 1e-14);
    }

    #[test]
    fn decode_of_near_hard_lcsa_reproduces_atoms() {
        let mut rng = Rng::new(9);
        let atoms = rng.normal_matrix(5, 12);
        let codes = encode_lcsa(&atoms, &atoms, 1e-3, 4).unwrap();
        let rec = decode(&codes, &atoms).unwrap();
        assert!(rec.max_abs_diff(&atoms) < 1e-5);
    }

    #[test]
    fn dae_kind_is_not_a_dictionary_coder() {
        let mut rng = Rng::new(0);
        let cfg = CoderConfig::with_kind(CoderKind::Dae);
        let x = Matrix::zeros(2, 1);
        assert!(encode(&x, &Matrix::identity(2), &cfg, &mut rng).is_err());
    }
}
