//! A network block whose output is pulled toward a learned dictionary
//! manifold.
//!
//! The block computes `X̃ = f(X)`, the manifold view `h(X̃) = M α(X̃)`, and
//! passes on `(1 − β) X̃ + β h(X̃)`. A proximity penalty
//! `(γ / L) Σ_l ‖X̃_l − h_l(X̃_l)‖²_F` with `h` held constant pulls features
//! toward the manifold.

use rayon::prelude::*;

use crate::coders::{encode, CoderConfig, CoderKind, Codes, SoftLocal};
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Dense, DenseCache, DenseGrads};
use crate::rng::Rng;
use crate::support::SupportSet;

/// How gradients pass through `h` on the mixing path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// `h` acts as the identity.
    StraightThrough,
    /// Exact Jacobian of the soft coders; zero on cell boundaries.
    AnalyticJacobian,
}

impl std::fmt::Display for GradMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GradMode::StraightThrough => "straight_through",
            GradMode::AnalyticJacobian => "analytic_jacobian",
        })
    }
}

impl std::str::FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight_through" => Ok(GradMode::StraightThrough),
            "analytic_jacobian" => Ok(GradMode::AnalyticJacobian),
            _ => Err(Error::InvalidParameter(format!("unknown grad mode '{s}'"))),
        }
    }
}

/// How the block output combines `X̃` and `h(X̃)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixRule {
    /// `(1 − β) X̃ + β h(X̃)`
    Convex,
    /// `(1 − β) X̃`, dropping the manifold term.
    ScaleOnly,
}

#[derive(Debug, Clone)]
pub struct ManifoldBlock {
    pub index: usize,
    pub layer: Dense,
    pub coder: CoderConfig,
    pub dict: Dictionary,
    pub grad_mode: GradMode,
    pub mix: MixRule,
}

#[derive(Debug, Clone)]
pub struct BlockForwardRecord {
    pub layer_cache: DenseCache,
    pub x_tilde: Matrix,
    pub h_out: Matrix,
    pub mixed: Matrix,
    /// `‖x̃_n − h(x̃_n)‖²` per column.
    pub per_sample_prox: Vec<f64>,
    pub codes: Codes,
    /// Columns within the boundary tolerance of a cell facet.
    pub boundary: Vec<bool>,
    locals: Option<Vec<SoftLocal>>,
}

impl ManifoldBlock {
    pub fn new(index: usize, layer: Dense, coder: CoderConfig, dict: Dictionary, grad_mode: GradMode) -> Result<Self> {
        if dict.dim() != layer.output_dim() {
            return Err(Error::dims("ManifoldBlock::new", layer.output_dim(), dict.dim()).in_block(index));
        }
        coder.validate(dict.k()).map_err(|e| e.in_block(index))?;
        if coder.kind == CoderKind::Dae {
            return Err(Error::InvalidParameter("manifold blocks need a dictionary coder".into()).in_block(index));
        }
        if grad_mode == GradMode::AnalyticJacobian && !coder.kind.is_soft() {
            return Err(Error::InvalidParameter(format!(
                "analytic Jacobian is only available for sa and lcsa, not {}",
                coder.kind
            ))
            .in_block(index));
        }
        Ok(ManifoldBlock {
            index,
            layer,
            coder,
            dict,
            grad_mode,
            mix: MixRule::Convex,
        })
    }

    fn soft_kprime(&self) -> usize {
        match self.coder.kind {
            CoderKind::Sa => self.dict.k(),
            _ => self.coder.kprime,
        }
    }

    /// Codes and manifold view of `x_tilde`.
    pub fn project(&self, x_tilde: &Matrix, rng: &mut Rng) -> Result<(Codes, Matrix, Option<Vec<SoftLocal>>)> {
        let atoms = self.dict.atoms();
        if !self.coder.kind.is_soft() {
            let codes = encode(x_tilde, atoms, &self.coder, rng)?;
            let h = crate::coders::decode(&codes, atoms)?;
            return Ok((codes, h, None));
        }
        let atoms_t = atoms.transpose();
        let xt = x_tilde.transpose();
        let (sigma, kprime) = (self.coder.sigma, self.soft_kprime());
        let locals: Vec<SoftLocal> = (0..x_tilde.cols())
            .into_iter()
            .map(|n| SoftLocal::compute(xt.row(n), &atoms_t, sigma, kprime))
            .collect::<Result<_>>()?;
        let (d, k, n) = (atoms.rows(), atoms.cols(), x_tilde.cols());
        let mut alpha = Matrix::zeros(k, n);
        let mut h = Matrix::zeros(d, n);
        for (col, local) in locals.iter().enumerate() {
            for (&j, &w) in local.support.indices().iter().zip(&local.weights) {
                alpha[(j, col)] = w;
            }
            for (i, v) in local.reconstruct(&atoms_t).into_iter().enumerate() {
                h[(i, col)] = v;
            }
        }
        let supports: Option<Vec<SupportSet>> =
            (self.coder.kind == CoderKind::Lcsa).then(|| locals.iter().map(|l| l.support.clone()).collect());
        let codes = Codes {
            alpha,
            supports,
            flagged: Vec::new(),
        };
        Ok((codes, h, Some(locals)))
    }

    pub fn block_forward(&self, x_in: &Matrix, beta: f64, rng: &mut Rng) -> Result<BlockForwardRecord> {
        self.forward_inner(x_in, beta, rng).map_err(|e| e.in_block(self.index))
    }

    fn forward_inner(&self, x_in: &Matrix, beta: f64, rng: &mut Rng) -> Result<BlockForwardRecord> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidParameter(format!("beta must lie in [0, 1], got {beta}")));
        }
        let (x_tilde, layer_cache) = self.layer.forward(x_in)?;
        let (codes, h_out, locals) = self.project(&x_tilde, rng)?;
        let mixed = match self.mix {
            MixRule::Convex => x_tilde.zip_with(&h_out, "block_forward", |a, b| (1.0 - beta) * a + beta * b)?,
            MixRule::ScaleOnly => x_tilde.scale(1.0 - beta),
        };
        let per_sample_prox = (0..x_tilde.cols())
            .map(|n| (0..x_tilde.rows()).map(|i| (x_tilde[(i, n)] - h_out[(i, n)]).powi(2)).sum())
            .collect();
        let boundary = match &locals {
            Some(ls) => ls.iter().map(|l| !l.is_interior()).collect(),
            None => vec![false; x_tilde.cols()],
        };
        Ok(BlockForwardRecord {
            layer_cache,
            x_tilde,
            h_out,
            mixed,
            per_sample_prox,
            codes,
            boundary,
            locals,
        })
    }

    /// Gradient with respect to `X̃` given the gradient at the mixed output.
    pub fn block_backward(&self, record: &BlockForwardRecord, grad_out: &Matrix, beta: f64) -> Result<Matrix> {
        self.backward_inner(record, grad_out, beta).map_err(|e| e.in_block(self.index))
    }

    fn backward_inner(&self, record: &BlockForwardRecord, grad_out: &Matrix, beta: f64) -> Result<Matrix> {
        if grad_out.shape() != record.mixed.shape() {
            return Err(Error::dims(
                "block_backward",
                format!("{:?}", record.mixed.shape()),
                format!("{:?}", grad_out.shape()),
            ));
        }
        if self.mix == MixRule::ScaleOnly {
            return Ok(grad_out.scale(1.0 - beta));
        }
        match self.grad_mode {
            GradMode::StraightThrough => Ok(grad_out.clone()),
            GradMode::AnalyticJacobian => {
                let locals = record.locals.as_ref().ok_or_else(|| {
                    Error::InvalidParameter("analytic Jacobian needs a soft-coder forward record".into())
                })?;
                if beta == 0.0 {
                    return Ok(grad_out.clone());
                }
                let atoms_t = self.dict.atoms().transpose();
                let gt = grad_out.transpose();
                let sigma = self.coder.sigma;
                let cols: Vec<Vec<f64>> = locals
                    .par_iter()
                    .enumerate()
                    .map(|(n, local)| {
                        let g = gt.row(n);
                        let jg = if record.boundary[n] {
                            vec![0.0; g.len()]
                        } else {
                            local.jacobian_times(&atoms_t, sigma, g)
                        };
                        g.iter().zip(&jg).map(|(gi, ji)| (1.0 - beta) * gi + beta * ji).collect()
                    })
                    .collect();
                Matrix::from_columns(grad_out.rows(), &cols)
            }
        }
    }

    /// Full backward through the mix and the layer. `prox_grad` is an extra
    /// gradient on `X̃` from the proximity penalty.
    pub fn backward(
        &self,
        record: &BlockForwardRecord,
        grad_out: &Matrix,
        beta: f64,
        prox_grad: Option<&Matrix>,
    ) -> Result<(DenseGrads, Matrix)> {
        let mut g = self.block_backward(record, grad_out, beta)?;
        if let Some(p) = prox_grad {
            g.axpy(1.0, p).map_err(|e| e.in_block(self.index))?;
        }
        self.layer.backward(&record.layer_cache, &g).map_err(|e| e.in_block(self.index))
    }
}

/// `(γ / L) Σ_l ‖X̃_l − h_l‖²_F`.
pub fn proximity_loss(records: &[BlockForwardRecord], gamma: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("proximity loss needs at least one block".into()));
    }
    let total: f64 = records.iter().map(|r| r.per_sample_prox.iter().sum::<f64>()).sum();
    Ok(gamma / records.len() as f64 * total)
}

/// Gradient of [`proximity_loss`] with respect to one block's `X̃`, with `h`
/// held constant: `2γ/L (X̃ − h)`.
pub fn proximity_grad(record: &BlockForwardRecord, gamma: f64, n_blocks: usize) -> Result<Matrix> {
    Ok(record.x_tilde.sub(&record.h_out)?.scale(2.0 * gamma / n_blocks as f64))
}
