//! Small fully connected layers with hand-written backward passes.

use crate::error::{Error, Result};
use crate::matrix::{matmul, Matrix};
use crate::rng::Rng;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::LeakyRelu if v <= 0.0 => LEAKY_SLOPE * v,
            _ => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::LeakyRelu if pre <= 0.0 => LEAKY_SLOPE,
            _ => 1.0,
        }
    }
}

/// `act(W x + b)` applied column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub w: Matrix,
    pub b: Vec<f64>,
    pub act: Activation,
}

/// Values saved by [`Dense::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct DenseCache {
    pub input: Matrix,
    pub pre: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl DenseGrads {
    pub fn zeros_like(layer: &Dense) -> Self {
        DenseGrads {
            w: Matrix::zeros(layer.w.rows(), layer.w.cols()),
            b: vec![0.0; layer.b.len()],
        }
    }
}

impl Dense {
    /// Weights `N(0, 1/in)`, zero bias.
    pub fn new(input: usize, output: usize, act: Activation, rng: &mut Rng) -> Self {
        Dense {
            w: rng.normal_matrix(output, input).scale(1.0 / (input as f64).sqrt()),
            b: vec![0.0; output],
            act,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, DenseCache)> {
        if x.rows() != self.input_dim() {
            return Err(Error::dims("Dense::forward", self.input_dim(), x.rows()));
        }
        let mut pre = matmul(&self.w, x)?;
        for (i, bi) in self.b.iter().enumerate() {
            pre.row_mut(i).iter_mut().for_each(|v| *v += bi);
        }
        let act = self.act;
        let out = pre.map(|v| act.apply(v));
        Ok((
            out,
            DenseCache {
                input: x.clone(),
                pre,
            },
        ))
    }

    /// Given `dL/d(output)`, returns the parameter gradients and `dL/d(input)`.
    pub fn backward(&self, cache: &DenseCache, grad_out: &Matrix) -> Result<(DenseGrads, Matrix)> {
        let act = self.act;
        let g_pre = grad_out.zip_with(&cache.pre, "Dense::backward", |g, p| g * act.derivative(p))?;
        let w = matmul(&g_pre, &cache.input.transpose())?;
        let b = g_pre.row_sums();
        let grad_in = matmul(&self.w.transpose(), &g_pre)?;
        Ok((DenseGrads { w, b }, grad_in))
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.b.iter().all(|v| v.is_finite())
    }
}

/// SGD with heavy-ball momentum: `v ← μ v + g`, `θ ← θ − lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    velocity: DenseGrads,
}

impl Momentum {
    pub fn new(layer: &Dense) -> Self {
        Momentum {
            velocity: DenseGrads::zeros_like(layer),
        }
    }

    pub fn step(&mut self, layer: &mut Dense, grads: &DenseGrads, lr: f64, mu: f64) -> Result<()> {
        let v = &mut self.velocity;
        v.w = v.w.scale(mu).add(&grads.w)?;
        for (vb, gb) in v.b.iter_mut().zip(&grads.b) {
            *vb = mu * *vb + gb;
        }
        layer.w.axpy(-lr, &v.w)?;
        for (b, vb) in layer.b.iter_mut().zip(&v.b) {
            *b -= lr * vb;
        }
        Ok(())
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// LeakyReLU on every layer except the last, which is linear.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad MLP dims {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { Activation::LeakyRelu };
                Dense::new(w[0], w[1], act, rng)
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Vec<DenseCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&cur)?;
            caches.push(cache);
            cur = out;
        }
        Ok((cur, caches))
    }

    pub fn backward(&self, caches: &[DenseCache], grad_out: &Matrix) -> Result<(Vec<DenseGrads>, Matrix)> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (pg, gi) = layer.backward(cache, &g)?;
            grads.push(pg);
            g = gi;
        }
        grads.reverse();
        Ok((grads, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_forward_values() {
        let layer = Dense {
            w: Matrix::identity(2),
            b: vec![0.0, -1.0],
            act: Activation::LeakyRelu,
        };
        let (out, _) = layer.forward(&Matrix::column_vector(&[2.0, 0.5])).unwrap();
        assert_eq!(out.data(), &[2.0, -0.1]);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = Rng::new(100);
        let mut mlp = Mlp::new(&[3, 5, 4, 2], &mut rng).unwrap();
        for l in &mut mlp.layers {
            l.b = rng.normal_vec(l.b.len());
        }
        let x = rng.normal_matrix(3, 6);
        let target = rng.normal_matrix(2, 6);
        let loss = |m: &Mlp, x: &Matrix| m.forward(x).unwrap().0.sub(&target).unwrap().frobenius_sq();
        let (out, caches) = mlp.forward(&x).unwrap();
        let (grads, gx) = mlp.backward(&caches, &out.sub(&target).unwrap().scale(2.0)).unwrap();
        let h = 1e-6;
        for (li, g) in grads.iter().enumerate() {
            for idx in 0..g.w.data().len() {
                let (mut p, mut m) = (mlp.clone(), mlp.clone());
                p.layers[li].w.data_mut()[idx] += h;
                m.layers[li].w.data_mut()[idx] -= h;
                let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
                assert!((fd - g.w.data()[idx]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
            for idx in 0..g.b.len() {
                let (mut p, mut m) = (mlp.clone(), mlp.clone());
                p.layers[li].b[idx] += h;
                m.layers[li].b[idx] -= h;
                let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
                assert!((fd - g.b[idx]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
        for idx in 0..x.data().len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[idx] += h;
            m.data_mut()[idx] -= h;
            let fd = (loss(&mlp, &p) - loss(&mlp, &m)) / (2.0 * h);
            assert!((fd - gx.data()[idx]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut layer = Dense {
            w: Matrix::zeros(1, 1),
            b: vec![0.0],
            act: Activation::Identity,
        };
        let g = DenseGrads {
            w: Matrix::filled(1, 1, 1.0),
            b: vec![1.0],
        };
        let mut opt = Momentum::new(&layer);
        opt.step(&mut layer, &g, 0.1, 0.5).unwrap();
        opt.step(&mut layer, &g, 0.1, 0.5).unwrap();
        // v = 1 then 1.5
        assert!((layer.w[(0, 0)] + 0.25).abs() < 1e-15);
        assert!((layer.b[0] + 0.25).abs() < 1e-15);
    }
}
