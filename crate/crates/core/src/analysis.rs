//! Numerical checks of the geometric properties of the soft coders.
//!
//! Every check samples points from Gaussian clouds around randomly chosen
//! atoms, evaluates one property per sample, and summarizes the outcome in a
//! [`CheckResult`]. Samples that land too close to a cell boundary are
//! rejected and counted separately.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::coders::{lcsa_jacobian, SoftLocal, CELL_MARGIN_TOL};
use crate::error::{Error, Result};
use crate::matrix::{norm1, norm2, sq_dist, Matrix};
use crate::rng::Rng;
use crate::support::{partial_sort_knn, rank_by_distance, SupportSet};

/// Rejection sampling gives up after this many attempts.
pub const MAX_ATTEMPTS: usize = 1_000_000;
/// Absolute slack on every inequality.
pub const BOUND_SLACK: f64 = 1e-9;
/// Jacobian samples need this much margin so the finite-difference stencil
/// stays inside the cell.
pub const FD_MARGIN: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub samples_tested: usize,
    /// Samples discarded before testing (boundary proximity, failed
    /// constructions).
    pub rejected: usize,
    pub violations: usize,
    /// Smallest `bound − measured` over all samples; negative on violation.
    pub worst_margin: f64,
    pub tolerance: f64,
    /// Existential checks pass on finding one witness.
    pub existential: bool,
    pub pass: bool,
    pub note: String,
}

impl CheckResult {
    fn new(name: &str, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            samples_tested: 0,
            rejected: 0,
            violations: 0,
            worst_margin: f64::INFINITY,
            tolerance,
            existential: false,
            pass: false,
            note: String::new(),
        }
    }

    /// Records one sample where `measured ≤ bound + tolerance` must hold.
    fn observe(&mut self, measured: f64, bound: f64) {
        let slack = bound - measured;
        self.worst_margin = self.worst_margin.min(slack);
        if !(slack >= -self.tolerance) {
            self.violations += 1;
        }
    }

    fn finish(mut self) -> Self {
        if !self.existential {
            self.pass = self.violations == 0;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub checks: Vec<CheckResult>,
}

impl PropertyReport {
    /// True when every non-existential check passed.
    pub fn all_pass(&self) -> bool {
        self.checks.iter().filter(|c| !c.existential).all(|c| c.pass)
    }

    /// `key=value` lines: an environment record, then one record per check,
    /// records separated by blank lines.
    pub fn to_text(&self) -> String {
        let mut s = format!("seed={}\n", self.seed);
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "all_pass={}", self.all_pass());
        for c in &self.checks {
            let _ = write!(
                s,
                "\ncheck={}\nsamples_tested={}\nrejected={}\nviolations={}\nworst_margin={:e}\ntolerance={:e}\nexistential={}\npass={}\n",
                c.name, c.samples_tested, c.rejected, c.violations, c.worst_margin, c.tolerance, c.existential, c.pass
            );
            if !c.note.is_empty() {
                let _ = writeln!(s, "note={}", c.note.replace('\n', " "));
            }
        }
        s
    }
}

/// Local Voronoi geometry around a point.
#[derive(Debug, Clone, PartialEq)]
pub struct CellProbe {
    pub x: Vec<f64>,
    pub support: SupportSet,
    /// `d_(k'+1) − d_(k')` over sorted Euclidean distances.
    pub margin: f64,
    /// Largest distance between two support atoms.
    pub diameter: f64,
    /// Mean of the support atoms.
    pub centroid: Vec<f64>,
    /// Nearest atom.
    pub nn: Vec<f64>,
}

fn atoms_as_rows(atoms: &Matrix) -> Result<Matrix> {
    if atoms.cols() == 0 {
        return Err(Error::EmptyDictionary);
    }
    Ok(atoms.transpose())
}

fn diameter(atoms_t: &Matrix, support: &[usize]) -> f64 {
    let mut d2 = 0.0f64;
    for (a, &i) in support.iter().enumerate() {
        for &j in &support[a + 1..] {
            d2 = d2.max(sq_dist(atoms_t.row(i), atoms_t.row(j)));
        }
    }
    d2.sqrt()
}

fn probe_rows(x: &[f64], atoms_t: &Matrix, kprime: usize) -> Result<CellProbe> {
    let k = atoms_t.rows();
    if kprime >= k {
        return Err(Error::InvalidParameter(format!(
            "probe_cell needs kprime < k, got kprime={kprime}, k={k}"
        )));
    }
    if x.len() != atoms_t.cols() {
        return Err(Error::dims("probe_cell", atoms_t.cols(), x.len()));
    }
    let d2: Vec<f64> = (0..k).map(|j| sq_dist(x, atoms_t.row(j))).collect();
    let order = rank_by_distance(&d2);
    let support = SupportSet::new(order[..kprime].to_vec());
    let margin = d2[order[kprime]].sqrt() - d2[order[kprime - 1]].sqrt();
    let dim = x.len();
    let mut centroid = vec![0.0; dim];
    for &j in support.indices() {
        for (c, m) in centroid.iter_mut().zip(atoms_t.row(j)) {
            *c += m / kprime as f64;
        }
    }
    Ok(CellProbe {
        x: x.to_vec(),
        diameter: diameter(atoms_t, support.indices()),
        support,
        margin,
        centroid,
        nn: atoms_t.row(order[0]).to_vec(),
    })
}

/// Support, margin, diameter, centroid and nearest atom of `x`.
pub fn probe_cell(x: &[f64], atoms: &Matrix, kprime: usize) -> Result<CellProbe> {
    probe_rows(x, &atoms_as_rows(atoms)?, kprime)
}

/// Point drawn from `N(m_j, spread² I)` around a uniformly chosen atom.
fn cloud_point(atoms_t: &Matrix, spread: f64, rng: &mut Rng) -> Vec<f64> {
    let j = rng.below(atoms_t.rows());
    atoms_t.row(j).iter().map(|m| m + spread * rng.normal()).collect()
}

/// Median distance from an atom to its nearest other atom; sets the scale
/// of the sampling clouds.
pub fn typical_spacing(atoms: &Matrix) -> f64 {
    let atoms_t = atoms.transpose();
    let k = atoms_t.rows();
    if k < 2 {
        return 1.0;
    }
    let mut nn: Vec<f64> = (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| sq_dist(atoms_t.row(i), atoms_t.row(j)))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    let s = nn[k / 2];
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")))
    }
}

fn check_kprime(kprime: usize, k: usize) -> Result<()> {
    if kprime == 0 || kprime > k {
        return Err(Error::InvalidParameter(format!("kprime must be in 1..={k}, got {kprime}")));
    }
    Ok(())
}

struct Attempts {
    check: &'static str,
    used: usize,
}

impl Attempts {
    fn new(check: &'static str) -> Self {
        Attempts { check, used: 0 }
    }

    fn next(&mut self) -> Result<()> {
        self.used += 1;
        if self.used > MAX_ATTEMPTS {
            return Err(Error::SamplingStall {
                check: self.check,
                attempts: MAX_ATTEMPTS,
            });
        }
        Ok(())
    }
}

/// Same-cell pairs obey `‖h(x) − h(x')‖_p ≤ K ‖x − x'‖_p` for `p ∈ {1, 2}`
/// with `K = D²/σ²`. `bound_scale` multiplies `K` and is only meant for
/// negative controls.
pub fn check_lipschitz(
    atoms: &Matrix,
    sigma: f64,
    kprime: usize,
    n_pairs: usize,
    bound_scale: f64,
    rng: &mut Rng,
) -> Result<CheckResult> {
    check_sigma(sigma)?;
    check_kprime(kprime, atoms.cols())?;
    if n_pairs == 0 {
        return Err(Error::InvalidParameter("n_pairs must be at least 1".into()));
    }
    let atoms_t = atoms_as_rows(atoms)?;
    let spread = typical_spacing(atoms);
    let mut res = CheckResult::new("lipschitz", BOUND_SLACK);
    let mut attempts = Attempts::new("lipschitz");
    let mut worst_ratio = 0.0f64;
    while res.samples_tested < n_pairs {
        attempts.next()?;
        let x = cloud_point(&atoms_t, spread, rng);
        let a = SoftLocal::compute(&x, &atoms_t, sigma, kprime)?;
        if !a.is_interior() {
            res.rejected += 1;
            continue;
        }
        // a step of up to twice the margin may leave the cell; those pairs
        // are rejected below
        let dir = rng.normal_vec(x.len());
        let len = rng.normal().abs().min(3.0) / 1.5 * a.margin.min(spread) / norm2(&dir).max(f64::MIN_POSITIVE);
        let y: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + len * di).collect();
        let b = SoftLocal::compute(&y, &atoms_t, sigma, kprime)?;
        if !b.is_interior() || b.support != a.support {
            res.rejected += 1;
            continue;
        }
        let k_bound = bound_scale * diameter(&atoms_t, a.support.indices()).powi(2) / (sigma * sigma);
        let dh: Vec<f64> = a.reconstruct(&atoms_t).iter().zip(b.reconstruct(&atoms_t)).map(|(p, q)| p - q).collect();
        let dx: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p - q).collect();
        for (nh, nx) in [(norm1(&dh), norm1(&dx)), (norm2(&dh), norm2(&dx))] {
            res.observe(nh, k_bound * nx);
            if nx > 0.0 && k_bound > 0.0 {
                worst_ratio = worst_ratio.max(nh / (k_bound * nx));
            }
        }
        if kprime == 1 {
            // hard cells: the reconstruction error moves by at most the step
            let m = atoms_t.row(a.support.indices()[0]);
            let change = (sq_dist(&x, m).sqrt() - sq_dist(&y, m).sqrt()).abs();
            res.observe(change, norm2(&dx));
        }
        res.samples_tested += 1;
    }
    res.note = format!("worst ratio to bound {worst_ratio:.6}; bound scale {bound_scale}");
    Ok(res.finish())
}

/// `‖Mα(x) − x‖₂ ≤ max(‖x − n(x)‖₂, ‖x − μ(x)‖₂)` with `n` the nearest atom
/// and `μ` the support centroid. Samples cycle through `sigmas`.
pub fn check_reconstruction_bound(
    atoms: &Matrix,
    sigmas: &[f64],
    kprime: usize,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<CheckResult> {
    if sigmas.is_empty() {
        return Err(Error::InvalidParameter("at least one sigma is required".into()));
    }
    for &s in sigmas {
        check_sigma(s)?;
    }
    check_kprime(kprime, atoms.cols())?;
    let atoms_t = atoms_as_rows(atoms)?;
    let spread = typical_spacing(atoms);
    let mut res = CheckResult::new("reconstruction_bound", BOUND_SLACK);
    let mut violating_sigmas: Vec<f64> = Vec::new();
    for n in 0..n_samples {
        let sigma = sigmas[n % sigmas.len()];
        let x = cloud_point(&atoms_t, spread, rng);
        let local = SoftLocal::compute(&x, &atoms_t, sigma, kprime)?;
        let lhs = sq_dist(&local.reconstruct(&atoms_t), &x).sqrt();
        let d2: Vec<f64> = (0..atoms_t.rows()).map(|j| sq_dist(&x, atoms_t.row(j))).collect();
        let nn = partial_sort_knn(&d2, 1)?.indices()[0];
        let mut mu = vec![0.0; x.len()];
        for &j in local.support.indices() {
            for (c, m) in mu.iter_mut().zip(atoms_t.row(j)) {
                *c += m / local.support.len() as f64;
            }
        }
        let rhs = d2[nn].sqrt().max(sq_dist(&x, &mu).sqrt());
        let before = res.violations;
        res.observe(lhs, rhs);
        if res.violations > before && !violating_sigmas.contains(&sigma) {
            violating_sigmas.push(sigma);
        }
        res.samples_tested += 1;
    }
    if !violating_sigmas.is_empty() {
        res.note = format!("violations at sigma {violating_sigmas:?}");
    }
    Ok(res.finish())
}

/// Orthonormal basis of the span of `vs` (modified Gram–Schmidt).
fn orthonormal_basis(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vs {
        let mut w = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = w.iter().zip(b).map(|(a, c)| a * c).sum();
                w.iter_mut().zip(b).for_each(|(a, c)| *a -= p * c);
            }
        }
        let n = norm2(&w);
        if n > 1e-10 * norm2(v).max(1.0) {
            basis.push(w.into_iter().map(|a| a / n).collect());
        }
    }
    basis
}

/// Codes lie in the open simplex, and moving `x` perpendicular to the affine
/// span of its support atoms (while staying in the cell) leaves `h`
/// unchanged.
pub fn check_fibration(atoms: &Matrix, sigma: f64, kprime: usize, n_samples: usize, rng: &mut Rng) -> Result<CheckResult> {
    check_sigma(sigma)?;
    check_kprime(kprime, atoms.cols())?;
    let atoms_t = atoms_as_rows(atoms)?;
    let d = atoms.rows();
    let spread = typical_spacing(atoms);
    let mut res = CheckResult::new("fibration", BOUND_SLACK);
    let mut attempts = Attempts::new("fibration");
    let mut vacuous = 0usize;
    let mut simplex_violations = 0usize;
    while res.samples_tested < n_samples {
        attempts.next()?;
        let x = cloud_point(&atoms_t, spread, rng);
        let a = SoftLocal::compute(&x, &atoms_t, sigma, kprime)?;
        if !a.is_interior() {
            res.rejected += 1;
            continue;
        }
        let sum: f64 = a.weights.iter().sum();
        if a.weights.iter().any(|&w| !(w > 0.0)) || (sum - 1.0).abs() > BOUND_SLACK {
            simplex_violations += 1;
            res.violations += 1;
        }
        let idx = a.support.indices();
        let base = atoms_t.row(idx[0]);
        let edges: Vec<Vec<f64>> = idx[1..]
            .iter()
            .map(|&j| atoms_t.row(j).iter().zip(base).map(|(m, b)| m - b).collect())
            .collect();
        let basis = orthonormal_basis(&edges);
        if basis.len() >= d {
            vacuous += 1;
            res.samples_tested += 1;
            continue;
        }
        let mut delta = rng.normal_vec(d);
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = delta.iter().zip(b).map(|(u, v)| u * v).sum();
                delta.iter_mut().zip(b).for_each(|(u, v)| *u -= p * v);
            }
        }
        let nd = norm2(&delta);
        if nd == 0.0 {
            res.rejected += 1;
            continue;
        }
        // a move shorter than margin/2 cannot change the neighbour ranking
        let len = 0.45 * a.margin.min(spread) * rng.normal().abs().min(2.0) / 2.0;
        let y: Vec<f64> = x.iter().zip(&delta).map(|(xi, di)| xi + len * di / nd).collect();
        let b = SoftLocal::compute(&y, &atoms_t, sigma, kprime)?;
        if b.support != a.support {
            res.rejected += 1;
            continue;
        }
        let change = sq_dist(&a.reconstruct(&atoms_t), &b.reconstruct(&atoms_t)).sqrt();
        res.observe(change, 0.0);
        res.samples_tested += 1;
    }
    let mut note = Vec::new();
    if vacuous > 0 {
        note.push(format!("{vacuous} samples had a full-dimensional simplex (no perpendicular directions)"));
    }
    if simplex_violations > 0 {
        note.push(format!("{simplex_violations} codes outside the open simplex"));
    }
    res.note = note.join("; ");
    Ok(res.finish())
}

fn h_at(x: &[f64], atoms_t: &Matrix, sigma: f64, kprime: usize) -> Result<(Vec<f64>, SupportSet)> {
    let l = SoftLocal::compute(x, atoms_t, sigma, kprime)?;
    Ok((l.reconstruct(atoms_t), l.support))
}

/// Searches for facet crossings where `h` jumps by more than any Lipschitz
/// path of length `2ε` could explain (`10·K·2ε`). Passes on the first
/// witness.
pub fn check_boundary_discontinuity(
    atoms: &Matrix,
    sigma: f64,
    kprime: usize,
    n_constructions: usize,
    rng: &mut Rng,
) -> Result<CheckResult> {
    check_sigma(sigma)?;
    let k = atoms.cols();
    if kprime == 0 || kprime >= k {
        return Err(Error::InvalidParameter(format!(
            "boundary check needs 1 <= kprime < k, got kprime={kprime}, k={k}"
        )));
    }
    let eps = 1e-6;
    let atoms_t = atoms_as_rows(atoms)?;
    let spread = typical_spacing(atoms);
    let mut res = CheckResult::new("boundary_discontinuity", 0.0);
    res.existential = true;
    let mut witnesses = 0usize;
    let mut max_jump = 0.0f64;
    for _ in 0..n_constructions {
        let x = cloud_point(&atoms_t, spread, rng);
        let d2: Vec<f64> = (0..k).map(|j| sq_dist(&x, atoms_t.row(j))).collect();
        let order = rank_by_distance(&d2);
        let (inner, outer) = (order[kprime - 1], order[kprime]);
        let (a, b) = (atoms_t.row(inner), atoms_t.row(outer));
        let ab: Vec<f64> = b.iter().zip(a).map(|(p, q)| p - q).collect();
        let nab = norm2(&ab);
        if nab == 0.0 {
            res.rejected += 1;
            continue;
        }
        let u: Vec<f64> = ab.iter().map(|v| v / nab).collect();
        // project x onto the bisector of a and b
        let off: f64 = x.iter().zip(a.iter().zip(b)).zip(&u).map(|((xi, (ai, bi)), ui)| (xi - 0.5 * (ai + bi)) * ui).sum();
        let p: Vec<f64> = x.iter().zip(&u).map(|(xi, ui)| xi - off * ui).collect();
        let minus: Vec<f64> = p.iter().zip(&u).map(|(pi, ui)| pi - eps * ui).collect();
        let plus: Vec<f64> = p.iter().zip(&u).map(|(pi, ui)| pi + eps * ui).collect();
        let (h_minus, s_minus) = h_at(&minus, &atoms_t, sigma, kprime)?;
        let (h_plus, s_plus) = h_at(&plus, &atoms_t, sigma, kprime)?;
        // the crossing must swap exactly a for b
        let genuine = s_minus.contains(inner)
            && !s_minus.contains(outer)
            && s_plus.contains(outer)
            && !s_plus.contains(inner)
            && s_minus.indices().iter().filter(|j| !s_plus.contains(**j)).count() == 1;
        if !genuine {
            res.rejected += 1;
            continue;
        }
        res.samples_tested += 1;
        let d_max = diameter(&atoms_t, s_minus.indices()).max(diameter(&atoms_t, s_plus.indices()));
        let bound = 10.0 * d_max * d_max / (sigma * sigma) * 2.0 * eps;
        let jump = sq_dist(&h_minus, &h_plus).sqrt();
        max_jump = max_jump.max(jump);
        res.worst_margin = res.worst_margin.min(bound - jump);
        if jump > bound {
            witnesses += 1;
        }
    }
    res.pass = witnesses > 0;
    res.note = format!("{witnesses} witnesses; largest jump {max_jump:e}");
    Ok(res.finish())
}

/// Per in-cell sample: `J` exactly symmetric, eigenvalues in
/// `[−1e-10, D²/σ² + 1e-9]`, and central differences within `1e-5`.
pub fn check_jacobian(atoms: &Matrix, sigma: f64, kprime: usize, n_samples: usize, rng: &mut Rng) -> Result<CheckResult> {
    check_sigma(sigma)?;
    check_kprime(kprime, atoms.cols())?;
    let atoms_t = atoms_as_rows(atoms)?;
    let d = atoms.rows();
    let spread = typical_spacing(atoms);
    let mut res = CheckResult::new("jacobian", 1e-5);
    let mut attempts = Attempts::new("jacobian");
    let (mut asym, mut neg, mut big, mut fd_bad) = (0usize, 0usize, 0usize, 0usize);
    let mut worst_fd = 0.0f64;
    while res.samples_tested < n_samples {
        attempts.next()?;
        let x = cloud_point(&atoms_t, spread, rng);
        let local = SoftLocal::compute(&x, &atoms_t, sigma, kprime)?;
        if !(local.margin > FD_MARGIN) {
            res.rejected += 1;
            continue;
        }
        let jac = lcsa_jacobian(&x, atoms, sigma, kprime)?;
        let mut ok = true;
        if jac != jac.transpose() {
            asym += 1;
            ok = false;
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, jac.data())).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        let k_bound = diameter(&atoms_t, local.support.indices()).powi(2) / (sigma * sigma);
        if lo < -1e-10 {
            neg += 1;
            ok = false;
        }
        if hi > k_bound + BOUND_SLACK {
            big += 1;
            ok = false;
        }
        let mut fd_err = 0.0f64;
        for c in 0..d {
            let mut p = x.clone();
            let mut m = x.clone();
            p[c] += FD_STEP;
            m[c] -= FD_STEP;
            let (hp, _) = h_at(&p, &atoms_t, sigma, kprime)?;
            let (hm, _) = h_at(&m, &atoms_t, sigma, kprime)?;
            for r in 0..d {
                let fd = (hp[r] - hm[r]) / (2.0 * FD_STEP);
                fd_err = fd_err.max((fd - jac[(r, c)]).abs());
            }
        }
        worst_fd = worst_fd.max(fd_err);
        if fd_err >= 1e-5 {
            fd_bad += 1;
            ok = false;
        }
        res.worst_margin = res.worst_margin.min((k_bound - hi).min(lo + 1e-10)).min(1e-5 - fd_err);
        if !ok {
            res.violations += 1;
        }
        res.samples_tested += 1;
    }
    res.note = format!(
        "asymmetric {asym}; negative eigenvalue {neg}; above D^2/sigma^2 {big}; finite-difference mismatch {fd_bad} (worst {worst_fd:e})"
    );
    Ok(res.finish())
}

/// The four bandwidths of the hard-assignment limit sweep.
pub const HA_SIGMAS: [f64; 4] = [1.0, 0.1, 0.01, 0.001];

/// Max-norm gap between the soft code and the hard one-hot code.
fn ha_gap(x: &[f64], atoms_t: &Matrix, sigma: f64, kprime: usize, nn: usize) -> Result<f64> {
    let l = SoftLocal::compute(x, atoms_t, sigma, kprime)?;
    let mut gap = 0.0f64;
    let mut seen_nn = false;
    for (&j, &w) in l.support.indices().iter().zip(&l.weights) {
        let target = if j == nn {
            seen_nn = true;
            1.0
        } else {
            0.0
        };
        gap = gap.max((w - target).abs());
    }
    if !seen_nn {
        gap = gap.max(1.0);
    }
    Ok(gap)
}

/// Along the bandwidth sweep the gap to the hard code never grows, shrinks
/// strictly while it is nonzero, and ends below `1e-6`. Probes whose two
/// nearest atoms are within `1e-3` of each other in distance are rejected.
pub fn check_ha_limit(atoms: &Matrix, kprime: usize, n_samples: usize, rng: &mut Rng) -> Result<CheckResult> {
    check_kprime(kprime, atoms.cols())?;
    let atoms_t = atoms_as_rows(atoms)?;
    let k = atoms.cols();
    let spread = typical_spacing(atoms);
    let mut res = CheckResult::new("ha_limit", 1e-6);
    let mut attempts = Attempts::new("ha_limit");
    let (mut non_monotone, mut not_converged) = (0usize, 0usize);
    while res.samples_tested < n_samples {
        attempts.next()?;
        let x = cloud_point(&atoms_t, spread, rng);
        let d2: Vec<f64> = (0..k).map(|j| sq_dist(&x, atoms_t.row(j))).collect();
        let order = rank_by_distance(&d2);
        if k > 1 && !(d2[order[1]].sqrt() - d2[order[0]].sqrt() > FD_MARGIN) {
            res.rejected += 1;
            continue;
        }
        let nn = order[0];
        let mut prev = f64::INFINITY;
        let mut monotone = true;
        for &s in &HA_SIGMAS {
            let gap = ha_gap(&x, &atoms_t, s, kprime, nn)?;
            if !(gap < prev || (gap == 0.0 && prev == 0.0)) {
                monotone = false;
            }
            prev = gap;
        }
        res.worst_margin = res.worst_margin.min(1e-6 - prev);
        if !monotone {
            non_monotone += 1;
        }
        if !(prev < 1e-6) {
            not_converged += 1;
        }
        if !monotone || !(prev < 1e-6) {
            res.violations += 1;
        }
        res.samples_tested += 1;
    }
    res.note = format!("non-monotone {non_monotone}; final gap >= 1e-6 {not_converged}");
    Ok(res.finish())
}

/// Settings for [`run_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub d: usize,
    pub k: usize,
    pub kprime: usize,
    pub sigma: f64,
    pub samples: usize,
    pub seed: u64,
    /// Multiplies the Lipschitz bound; 1 for a real run.
    pub bound_scale: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            d: 8,
            k: 64,
            kprime: 8,
            sigma: 1.2,
            samples: 1000,
            seed: 0,
            bound_scale: 1.0,
        }
    }
}

/// Random dictionary with standard normal atoms.
pub fn random_atoms(d: usize, k: usize, rng: &mut Rng) -> Matrix {
    rng.normal_matrix(d, k)
}

/// Runs every check on a random Gaussian dictionary. Each check draws from
/// its own RNG stream.
pub fn run_suite(cfg: &SuiteConfig) -> Result<PropertyReport> {
    if cfg.d == 0 || cfg.k < 2 || cfg.kprime == 0 || cfg.kprime >= cfg.k {
        return Err(Error::InvalidParameter(format!(
            "suite needs d >= 1 and 1 <= kprime < k, got d={}, k={}, kprime={}",
            cfg.d, cfg.k, cfg.kprime
        )));
    }
    if cfg.samples == 0 {
        return Err(Error::InvalidParameter("samples must be at least 1".into()));
    }
    let root = Rng::new(cfg.seed);
    let atoms = random_atoms(cfg.d, cfg.k, &mut root.split(0));
    let fibre_kprime = cfg.kprime.min(cfg.d);
    let checks = vec![
        check_lipschitz(&atoms, cfg.sigma, cfg.kprime, cfg.samples, cfg.bound_scale, &mut root.split(1))?,
        check_reconstruction_bound(&atoms, &[cfg.sigma], cfg.kprime, cfg.samples, &mut root.split(2))?,
        check_fibration(&atoms, cfg.sigma, fibre_kprime, cfg.samples, &mut root.split(3))?,
        check_boundary_discontinuity(&atoms, cfg.sigma, cfg.kprime, cfg.samples, &mut root.split(4))?,
        check_jacobian(&atoms, cfg.sigma, cfg.kprime, cfg.samples, &mut root.split(5))?,
        check_ha_limit(&atoms, cfg.kprime, cfg.samples, &mut root.split(6))?,
    ];
    let config = vec![
        ("d".to_string(), cfg.d.to_string()),
        ("k".to_string(), cfg.k.to_string()),
        ("kprime".to_string(), cfg.kprime.to_string()),
        ("sigma".to_string(), cfg.sigma.to_string()),
        ("samples".to_string(), cfg.samples.to_string()),
        ("bound_scale".to_string(), cfg.bound_scale.to_string()),
        ("cell_margin_tol".to_string(), format!("{CELL_MARGIN_TOL:e}")),
    ];
    Ok(PropertyReport {
        seed: cfg.seed,
        config,
        checks,
    })
}
