//! Denoising auto-encoder used as a drop-in replacement for `h`.
//!
//! `r(x) = W₂ · leaky(W₁ (x + ε) + b₁) + b₂` with `ε ~ N(0, σ'²)` in training
//! mode and `ε = 0` otherwise. Trained on `‖r(x) − x‖²_F / N`.

use crate::error::{Error, Result};
use crate::matrix::{matmul, Matrix};
use crate::rng::Rng;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_NOISE_VAR: f64 = 0.04;

#[derive(Debug, Clone, PartialEq)]
pub struct DaeEncoder {
    /// `k* × d`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `d × k*`
    pub w2: Matrix,
    pub b2: Vec<f64>,
    /// σ'²
    pub noise_var: f64,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone)]
pub struct DaeGradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl DaeEncoder {
    /// Random encoder with `N(0, 1/fan_in)` weights and zero biases.
    pub fn new(d: usize, hidden: usize, noise_var: f64, leaky_slope: f64, rng: &mut Rng) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(Error::InvalidParameter("DAE dimensions must be positive".into()));
        }
        if !(noise_var >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise_var must be non-negative, got {noise_var}")));
        }
        if !(leaky_slope > 0.0 && leaky_slope < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "leaky slope must lie in (0, 1), got {leaky_slope}"
            )));
        }
        Ok(DaeEncoder {
            w1: rng.normal_matrix(hidden, d).scale(1.0 / (d as f64).sqrt()),
            b1: vec![0.0; hidden],
            w2: rng.normal_matrix(d, hidden).scale(1.0 / (hidden as f64).sqrt()),
            b2: vec![0.0; d],
            noise_var,
            leaky_slope,
        })
    }

    pub fn with_defaults(d: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(d, DEFAULT_HIDDEN, DEFAULT_NOISE_VAR, DEFAULT_LEAKY_SLOPE, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    fn apply_step(&self, g: &DaeGradients, lr: f64) -> DaeEncoder {
        let mut out = self.clone();
        out.w1.axpy(-lr, &g.w1).expect("same shape");
        out.w2.axpy(-lr, &g.w2).expect("same shape");
        out.b1.iter_mut().zip(&g.b1).for_each(|(b, d)| *b -= lr * d);
        out.b2.iter_mut().zip(&g.b2).for_each(|(b, d)| *b -= lr * d);
        out
    }
}

struct Cache {
    input: Matrix,
    pre: Matrix,
    hidden: Matrix,
    out: Matrix,
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    for (i, bi) in b.iter().enumerate() {
        m.row_mut(i).iter_mut().for_each(|v| *v += bi);
    }
}

fn forward_with_noise(x: &Matrix, enc: &DaeEncoder, noise: Option<&Matrix>) -> Result<Cache> {
    if x.rows() != enc.input_dim() {
        return Err(Error::dims("dae_forward", enc.input_dim(), x.rows()));
    }
    let input = match noise {
        Some(e) => x.add(e)?,
        None => x.clone(),
    };
    let mut pre = matmul(&enc.w1, &input)?;
    add_bias(&mut pre, &enc.b1);
    let slope = enc.leaky_slope;
    let hidden = pre.map(|v| if v > 0.0 { v } else { slope * v });
    let mut out = matmul(&enc.w2, &hidden)?;
    add_bias(&mut out, &enc.b2);
    Ok(Cache {
        input,
        pre,
        hidden,
        out,
    })
}

fn draw_noise(x: &Matrix, enc: &DaeEncoder, rng: &mut Rng, train_mode: bool) -> Option<Matrix> {
    (train_mode && enc.noise_var > 0.0).then(|| {
        rng.normal_matrix(x.rows(), x.cols())
            .scale(enc.noise_var.sqrt())
    })
}

pub fn dae_forward(x: &Matrix, enc: &DaeEncoder, rng: &mut Rng, train_mode: bool) -> Result<Matrix> {
    let noise = draw_noise(x, enc, rng, train_mode);
    Ok(forward_with_noise(x, enc, noise.as_ref())?.out)
}

/// Reconstruction loss `‖r(x + ε) − x‖²_F / N` and its gradients for a fixed
/// noise draw (`None` means no noise).
pub fn dae_gradients(x: &Matrix, enc: &DaeEncoder, noise: Option<&Matrix>) -> Result<(f64, DaeGradients)> {
    let c = forward_with_noise(x, enc, noise)?;
    let n = x.cols().max(1) as f64;
    let diff = c.out.sub(x)?;
    let loss = diff.frobenius_sq() / n;

    let g_out = diff.scale(2.0 / n);
    let w2 = matmul(&g_out, &c.hidden.transpose())?;
    let b2 = g_out.row_sums();
    let g_hidden = matmul(&enc.w2.transpose(), &g_out)?;
    let slope = enc.leaky_slope;
    let g_pre = g_hidden.zip_with(&c.pre, "dae_gradients", |g, p| if p > 0.0 { g } else { slope * g })?;
    let w1 = matmul(&g_pre, &c.input.transpose())?;
    let b1 = g_pre.row_sums();
    Ok((loss, DaeGradients { w1, b1, w2, b2 }))
}

/// One SGD step on the reconstruction loss. Returns the updated encoder and
/// the loss before the step.
pub fn dae_train_step(x: &Matrix, enc: &DaeEncoder, lr: f64, rng: &mut Rng) -> Result<(DaeEncoder, f64)> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidParameter(format!("lr must be non-negative, got {lr}")));
    }
    let noise = draw_noise(x, enc, rng, true);
    let (loss, grads) = dae_gradients(x, enc, noise.as_ref())?;
    Ok((enc.apply_step(&grads, lr), loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_encoder(d: usize, slope: f64) -> DaeEncoder {
        // hidden = [x; -x], output = (leaky(x) - leaky(-x)) / (1 + slope) = x
        let mut w1 = Matrix::zeros(2 * d, d);
        let mut w2 = Matrix::zeros(d, 2 * d);
        for i in 0..d {
            w1[(i, i)] = 1.0;
            w1[(d + i, i)] = -1.0;
            w2[(i, i)] = 1.0 / (1.0 + slope);
            w2[(i, d + i)] = -1.0 / (1.0 + slope);
        }
        DaeEncoder {
            w1,
            b1: vec![0.0; 2 * d],
            w2,
            b2: vec![0.0; d],
            noise_var: 0.0,
            leaky_slope: slope,
        }
    }

    #[test]
    fn null_network_outputs_zero() {
        let mut rng = Rng::new(60);
        let mut enc = DaeEncoder::new(3, 5, 0.0, 0.2, &mut rng).unwrap();
        enc.w1 = Matrix::zeros(5, 3);
        enc.w2 = Matrix::zeros(3, 5);
        let out = dae_forward(&rng.normal_matrix(3, 4), &enc, &mut rng, true).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn no_noise_means_train_equals_eval() {
        let mut rng = Rng::new(61);
        let enc = DaeEncoder::new(4, 6, 0.0, 0.2, &mut rng).unwrap();
        let x = rng.normal_matrix(4, 7);
        let a = dae_forward(&x, &enc, &mut rng, true).unwrap();
        let b = dae_forward(&x, &enc, &mut rng, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(62);
        let mut enc = DaeEncoder::new(3, 5, 0.04, 0.2, &mut rng).unwrap();
        enc.b1 = rng.normal_vec(5);
        enc.b2 = rng.normal_vec(3);
        let x = rng.normal_matrix(3, 6);
        let noise = rng.normal_matrix(3, 6).scale(0.2);
        let (_, g) = dae_gradients(&x, &enc, Some(&noise)).unwrap();
        let loss = |e: &DaeEncoder| dae_gradients(&x, e, Some(&noise)).unwrap().0;
        let h = 1e-6;
        let mut worst = 0.0f64;
        for idx in 0..enc.w1.data().len() {
            let (mut p, mut m) = (enc.clone(), enc.clone());
            p.w1.data_mut()[idx] += h;
            m.w1.data_mut()[idx] -= h;
            worst = worst.max(((loss(&p) - loss(&m)) / (2.0 * h) - g.w1.data()[idx]).abs());
        }
        for idx in 0..enc.w2.data().len() {
            let (mut p, mut m) = (enc.clone(), enc.clone());
            p.w2.data_mut()[idx] += h;
            m.w2.data_mut()[idx] -= h;
            worst = worst.max(((loss(&p) - loss(&m)) / (2.0 * h) - g.w2.data()[idx]).abs());
        }
        for idx in 0..5 {
            let (mut p, mut m) = (enc.clone(), enc.clone());
            p.b1[idx] += h;
            m.b1[idx] -= h;
            worst = worst.max(((loss(&p) - loss(&m)) / (2.0 * h) - g.b1[idx]).abs());
        }
        for idx in 0..3 {
            let (mut p, mut m) = (enc.clone(), enc.clone());
            p.b2[idx] += h;
            m.b2[idx] -= h;
            worst = worst.max(((loss(&p) - loss(&m)) / (2.0 * h) - g.b2[idx]).abs());
        }
        assert!(worst < 1e-5, "worst {worst}");
    }

    #[test]
    fn small_steps_do_not_increase_loss() {
        let mut rng = Rng::new(63);
        let mut enc = DaeEncoder::new(4, 16, 0.0, 0.2, &mut rng).unwrap();
        let x = rng.normal_matrix(4, 32);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let (next, loss) = dae_train_step(&x, &enc, 1e-3, &mut rng).unwrap();
            assert!(loss <= prev + 1e-9);
            prev = loss;
            enc = next;
        }
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut rng = Rng::new(64);
        let enc = DaeEncoder::with_defaults(3, &mut rng).unwrap();
        let (next, _) = dae_train_step(&rng.normal_matrix(3, 5), &enc, 0.0, &mut rng).unwrap();
        assert_eq!(next, enc);
    }

    #[test]
    fn perfect_autoencoder_has_zero_loss() {
        let enc = identity_encoder(3, 0.2);
        let mut rng = Rng::new(65);
        let x = rng.normal_matrix(3, 10);
        let (_, loss) = dae_train_step(&x, &enc, 0.1, &mut rng).unwrap();
        assert!(loss < 1e-28);
    }
}
