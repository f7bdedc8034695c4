//! Dictionary atoms and their updates.
//!
//! Learning follows `min_M ‖X − Mα‖²_F` with `X` and `α` held constant: one
//! gradient step per mini-batch at rate `ω / (1 + i)^0.3`, where `i` counts
//! all steps taken so far by this dictionary.

use crate::coders::Codes;
use crate::error::{Error, Result};
use crate::matrix::{matmul, Matrix};
use crate::rng::UniformSource;

pub const DEFAULT_LR: f64 = 2e-3;
pub const DEFAULT_K: usize = 1024;
const STEP_DECAY: f64 = 0.3;
const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Matrix,
    pub lr: f64,
    pub step_count: u64,
    /// Maximum L2 norm of any atom, enforced after every update.
    pub norm_cap: Option<f64>,
}

impl Dictionary {
    pub fn new(atoms: Matrix, lr: f64) -> Result<Self> {
        if atoms.cols() == 0 || atoms.rows() == 0 {
            return Err(Error::EmptyDictionary);
        }
        if !atoms.is_finite() {
            return Err(Error::InvalidParameter("dictionary atoms must be finite".into()));
        }
        Ok(Dictionary {
            atoms,
            lr,
            step_count: 0,
            norm_cap: None,
        })
    }

    /// Sets an atom norm cap and projects the current atoms onto it.
    pub fn with_norm_cap(mut self, cap: f64) -> Result<Self> {
        if !(cap > 0.0) {
            return Err(Error::InvalidParameter(format!("norm cap must be positive, got {cap}")));
        }
        self.norm_cap = Some(cap);
        self.project_norm_cap();
        Ok(self)
    }

    pub fn atoms(&self) -> &Matrix {
        &self.atoms
    }

    pub fn dim(&self) -> usize {
        self.atoms.rows()
    }

    pub fn k(&self) -> usize {
        self.atoms.cols()
    }

    /// Rescales every atom whose L2 norm exceeds the cap back onto the cap.
    pub fn project_norm_cap(&mut self) {
        let Some(cap) = self.norm_cap else { return };
        for j in 0..self.k() {
            let col = self.atoms.col(j);
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            // a rescaled column can land a few ulps above the cap; leaving it
            // there keeps the projection idempotent
            if norm > cap * (1.0 + 8.0 * f64::EPSILON) {
                let s = cap / norm;
                let scaled: Vec<f64> = col.iter().map(|v| v * s).collect();
                self.atoms.set_col(j, &scaled);
            }
        }
    }

    /// Learning rate the next [`Dictionary::dl_step`] will use.
    pub fn current_lr(&self) -> f64 {
        self.lr / (2.0 + self.step_count as f64).powf(STEP_DECAY)
    }

    /// One gradient step on `‖X − Mα‖²_F` with `X` and `α` fixed.
    /// Returns the loss before the step.
    pub fn dl_step(&mut self, x: &Matrix, codes: &Codes) -> Result<f64> {
        let alpha = &codes.alpha;
        if x.rows() != self.dim() {
            return Err(Error::dims("dl_step", self.dim(), x.rows()));
        }
        if alpha.rows() != self.k() || alpha.cols() != x.cols() {
            return Err(Error::dims(
                "dl_step",
                format!("codes {}x{}", self.k(), x.cols()),
                format!("{}x{}", alpha.rows(), alpha.cols()),
            ));
        }
        let residual = x.sub(&crate::coders::decode(codes, &self.atoms)?)?;
        let loss = residual.frobenius_sq();
        // d/dM ‖X − Mα‖² = −2 (X − Mα) αᵀ, formed as (α (X − Mα)ᵀ)ᵀ so the
        // zeros of sparse codes are skipped
        let descent = matmul(alpha, &residual.transpose())?.transpose().scale(2.0);
        let lr = self.current_lr();
        self.atoms.axpy(lr, &descent)?;
        self.step_count += 1;
        self.project_norm_cap();
        Ok(loss)
    }

    /// Moves every atom that owns at least one column (by argmax of its code)
    /// to `decay · m_j + (1 − decay) · mean(owned columns)`.
    pub fn ema_step(&mut self, x: &Matrix, codes: &Codes, decay: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidParameter(format!("EMA decay must lie in [0, 1], got {decay}")));
        }
        if x.rows() != self.dim() {
            return Err(Error::dims("ema_step", self.dim(), x.rows()));
        }
        if codes.k() != self.k() || codes.n() != x.cols() {
            return Err(Error::dims(
                "ema_step",
                format!("codes {}x{}", self.k(), x.cols()),
                format!("{}x{}", codes.k(), codes.n()),
            ));
        }
        let d = self.dim();
        let mut sums = Matrix::zeros(d, self.k());
        let mut counts = vec![0usize; self.k()];
        for (n, j) in codes.argmax().into_iter().enumerate() {
            counts[j] += 1;
            for i in 0..d {
                sums[(i, j)] += x[(i, n)];
            }
        }
        for (j, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            for i in 0..d {
                let mean = sums[(i, j)] / c as f64;
                self.atoms[(i, j)] = decay * self.atoms[(i, j)] + (1.0 - decay) * mean;
            }
        }
        self.step_count += 1;
        self.project_norm_cap();
        Ok(())
    }

    /// Sidecar metadata as `key=value` lines.
    pub fn metadata(&self) -> String {
        let mut s = format!(
            "k={}\nd={}\nlr={}\nstep_count={}\n",
            self.k(),
            self.dim(),
            self.lr,
            self.step_count
        );
        match self.norm_cap {
            Some(c) => s.push_str(&format!("norm_cap={c}\n")),
            None => s.push_str("norm_cap=none\n"),
        }
        s
    }

    /// Rebuilds a dictionary from its atoms and sidecar metadata.
    pub fn from_parts(atoms: Matrix, metadata: &str) -> Result<Self> {
        let mut k = None;
        let mut d = None;
        let mut lr = None;
        let mut step_count = None;
        let mut norm_cap = None;
        for (key, value) in crate::io::parse_key_values(metadata)? {
            let bad = |e: String| Error::Format(format!("dictionary metadata '{key}': {e}"));
            match key.as_str() {
                "k" => k = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "d" => d = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "lr" => lr = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                "step_count" => step_count = Some(value.parse::<u64>().map_err(|e| bad(e.to_string()))?),
                "norm_cap" => {
                    norm_cap = Some(if value == "none" {
                        None
                    } else {
                        Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?)
                    })
                }
                _ => return Err(Error::Format(format!("unknown dictionary metadata key '{key}'"))),
            }
        }
        let missing = |what: &str| Error::Format(format!("dictionary metadata lacks '{what}'"));
        let (k, d) = (k.ok_or_else(|| missing("k"))?, d.ok_or_else(|| missing("d"))?);
        if atoms.shape() != (d, k) {
            return Err(Error::dims("Dictionary::from_parts", format!("{d}x{k}"), format!("{}x{}", atoms.rows(), atoms.cols())));
        }
        let mut dict = Dictionary::new(atoms, lr.ok_or_else(|| missing("lr"))?)?;
        dict.step_count = step_count.ok_or_else(|| missing("step_count"))?;
        dict.norm_cap = norm_cap.ok_or_else(|| missing("norm_cap"))?;
        Ok(dict)
    }
}

/// Random dictionary: entries `U(−1, 1)`, then each atom divided by
/// `‖m_j‖₁ + 1e-6`. Entries are drawn atom by atom.
pub fn init_dictionary(d: usize, k: usize, src: &mut impl UniformSource) -> Result<Dictionary> {
    if d == 0 || k == 0 {
        return Err(Error::InvalidParameter(format!("dictionary needs d, k >= 1, got d={d}, k={k}")));
    }
    let mut atoms = Matrix::zeros(d, k);
    for j in 0..k {
        let col: Vec<f64> = (0..d).map(|_| src.uniform(-1.0, 1.0)).collect();
        let l1 = col.iter().map(|v| v.abs()).sum::<f64>() + NORM_EPS;
        let scaled: Vec<f64> = col.iter().map(|v| v / l1).collect();
        atoms.set_col(j, &scaled);
    }
    Dictionary::new(atoms, DEFAULT_LR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coders::{encode_ha, encode_lcsa};
    use crate::rng::Rng;

    struct Scripted(Vec<f64>, usize);

    impl UniformSource for Scripted {
        fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
            // scripted values are already in [lo, hi)
            let v = self.0[self.1 % self.0.len()];
            assert!(v >= lo && v < hi);
            self.1 += 1;
            v
        }
    }

    #[test]
    fn init_atoms_are_l1_bounded() {
        let dict = init_dictionary(7, 40, &mut Rng::new(70)).unwrap();
        for j in 0..40 {
            let l1: f64 = dict.atoms().col(j).iter().map(|v| v.abs()).sum();
            assert!(l1 <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_dictionary(4, 9, &mut Rng::new(5)).unwrap();
        let b = init_dictionary(4, 9, &mut Rng::new(5)).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.atoms()), bits(b.atoms()));
    }

    #[test]
    fn init_with_scripted_draws() {
        let mut src = Scripted(vec![0.5, -0.25, 0.1, 0.3, -0.6, 0.0], 0);
        let dict = init_dictionary(2, 3, &mut src).unwrap();
        let expect = [
            [0.5 / 0.750001, -0.25 / 0.750001],
            [0.1 / 0.400001, 0.3 / 0.400001],
            [-0.6 / 0.600001, 0.0],
        ];
        for (j, atom) in expect.iter().enumerate() {
            for (i, v) in atom.iter().enumerate() {
                assert!((dict.atoms()[(i, j)] - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_residual_leaves_atoms() {
        let mut rng = Rng::new(71);
        let mut dict = Dictionary::new(rng.normal_matrix(3, 5), 0.1).unwrap();
        let codes = encode_ha(&rng.normal_matrix(3, 8), dict.atoms()).unwrap();
        let x = crate::coders::decode(&codes, dict.atoms()).unwrap();
        let before = dict.atoms().clone();
        let loss = dict.dl_step(&x, &codes).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(dict.atoms(), &before);
    }

    #[test]
    fn zero_lr_leaves_atoms() {
        let mut rng = Rng::new(72);
        let mut dict = Dictionary::new(rng.normal_matrix(3, 5), 0.0).unwrap();
        let x = rng.normal_matrix(3, 8);
        let codes = encode_lcsa(&x, dict.atoms(), 1.0, 2).unwrap();
        let before = dict.atoms().clone();
        dict.dl_step(&x, &codes).unwrap();
        assert_eq!(dict.atoms(), &before);
    }

    #[test]
    fn repeated_steps_descend() {
        let mut rng = Rng::new(73);
        let mut dict = Dictionary::new(rng.normal_matrix(4, 6), 0.01).unwrap();
        let x = rng.normal_matrix(4, 20);
        let codes = encode_lcsa(&x, dict.atoms(), 1.0, 3).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let loss = dict.dl_step(&x, &codes).unwrap();
            assert!(loss <= prev + 1e-9);
            prev = loss;
        }
    }

    #[test]
    fn reported_loss_matches_direct_computation() {
        let mut rng = Rng::new(74);
        let mut dict = Dictionary::new(rng.normal_matrix(4, 6), 0.01).unwrap();
        let x = rng.normal_matrix(4, 9);
        let codes = encode_lcsa(&x, dict.atoms(), 0.8, 3).unwrap();
        let mut direct = 0.0;
        for n in 0..9 {
            for i in 0..4 {
                let r: f64 = x[(i, n)] - (0..6).map(|j| dict.atoms()[(i, j)] * codes.alpha[(j, n)]).sum::<f64>();
                direct += r * r;
            }
        }
        let loss = dict.dl_step(&x, &codes).unwrap();
        assert!((loss - direct).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(75);
        let atoms = rng.normal_matrix(4, 6);
        let x = rng.normal_matrix(4, 9);
        let codes = encode_lcsa(&x, &atoms, 0.8, 3).unwrap();
        let loss = |m: &Matrix| x.sub(&matmul(m, &codes.alpha).unwrap()).unwrap().frobenius_sq();
        // recover the step direction the update applies
        let mut dict = Dictionary::new(atoms.clone(), 1.0).unwrap();
        let lr = dict.current_lr();
        dict.dl_step(&x, &codes).unwrap();
        let grad = atoms.sub(dict.atoms()).unwrap().scale(1.0 / lr);
        let h = 1e-6;
        for _ in 0..20 {
            let (i, j) = (rng.below(4), rng.below(6));
            let (mut p, mut m) = (atoms.clone(), atoms.clone());
            p[(i, j)] += h;
            m[(i, j)] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grad[(i, j)]).abs() < 1e-5);
        }
    }

    #[test]
    fn norm_cap_holds_and_is_idempotent() {
        let mut rng = Rng::new(76);
        let mut dict = Dictionary::new(rng.normal_matrix(5, 8).scale(3.0), 0.5)
            .unwrap()
            .with_norm_cap(1.0)
            .unwrap();
        let x = rng.normal_matrix(5, 30).scale(4.0);
        for _ in 0..10 {
            let codes = crate::coders::encode_omp(&x, dict.atoms(), 2).unwrap();
            dict.dl_step(&x, &codes).unwrap();
            for j in 0..8 {
                let n: f64 = dict.atoms().col(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(n <= 1.0 + 1e-12);
            }
        }
        let once = dict.atoms().clone();
        dict.project_norm_cap();
        assert_eq!(dict.atoms(), &once);
    }

    #[test]
    fn ema_frozen_and_full_replacement() {
        let mut rng = Rng::new(77);
        let atoms = rng.normal_matrix(2, 3);
        let x = rng.normal_matrix(2, 10);
        let mut alpha = Matrix::zeros(3, 10);
        for n in 0..10 {
            alpha[(0, n)] = 1.0;
        }
        let codes = Codes::dense(alpha);

        let mut frozen = Dictionary::new(atoms.clone(), 0.1).unwrap();
        frozen.ema_step(&x, &codes, 1.0).unwrap();
        assert_eq!(frozen.atoms(), &atoms);

        let mut replaced = Dictionary::new(atoms.clone(), 0.1).unwrap();
        replaced.ema_step(&x, &codes, 0.0).unwrap();
        let mean: Vec<f64> = (0..2).map(|i| x.row(i).iter().sum::<f64>() / 10.0).collect();
        assert!((replaced.atoms()[(0, 0)] - mean[0]).abs() < 1e-14);
        assert!((replaced.atoms()[(1, 0)] - mean[1]).abs() < 1e-14);
        assert_eq!(replaced.atoms().col(1), atoms.col(1));
        assert_eq!(replaced.atoms().col(2), atoms.col(2));
    }

    #[test]
    fn ema_converges_to_cluster_means() {
        let mut rng = Rng::new(78);
        let mut cols = Vec::new();
        for n in 0..100 {
            let c = if n % 2 == 0 { [-5.0, 0.0] } else { [5.0, 1.0] };
            cols.push(vec![c[0] + 0.3 * rng.normal(), c[1] + 0.3 * rng.normal()]);
        }
        let x = Matrix::from_columns(2, &cols).unwrap();
        let means: Vec<[f64; 2]> = (0..2)
            .map(|p| {
                let sel: Vec<&Vec<f64>> = cols.iter().skip(p).step_by(2).collect();
                let n = sel.len() as f64;
                [sel.iter().map(|c| c[0]).sum::<f64>() / n, sel.iter().map(|c| c[1]).sum::<f64>() / n]
            })
            .collect();
        let mut dict = Dictionary::new(Matrix::from_rows(&[vec![-1.0, 1.0], vec![0.0, 0.0]]).unwrap(), 0.1).unwrap();
        for _ in 0..100 {
            let codes = encode_ha(&x, dict.atoms()).unwrap();
            dict.ema_step(&x, &codes, 0.8).unwrap();
        }
        for (j, m) in means.iter().enumerate() {
            assert!((dict.atoms()[(0, j)] - m[0]).abs() < 1e-3);
            assert!((dict.atoms()[(1, j)] - m[1]).abs() < 1e-3);
        }
    }

    #[test]
    fn metadata_round_trip() {
        let mut rng = Rng::new(79);
        let mut dict = Dictionary::new(rng.normal_matrix(3, 4), 2e-3).unwrap().with_norm_cap(1.5).unwrap();
        dict.step_count = 17;
        let back = Dictionary::from_parts(dict.atoms().clone(), &dict.metadata()).unwrap();
        assert_eq!(back, dict);
        assert!(Dictionary::from_parts(dict.atoms().clone(), "k=4\nd=3\nlr=1\nstep_count=0\nnorm_cap=none\nbogus=1\n").is_err());
    }
}
