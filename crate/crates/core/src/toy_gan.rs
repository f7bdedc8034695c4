//! A small GAN on 2-D point clouds whose discriminator is built from
//! [`ManifoldBlock`]s.
//!
//! Each training step updates the discriminator on the hinge loss plus the
//! proximity penalty, takes one dictionary step per block, advances the
//! overfitting detector, and then updates the generator.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::coders::{CoderConfig, CoderKind};
use crate::dictionary::{init_dictionary, Dictionary};
use crate::error::{Error, Result};
use crate::io::{parse_key_values, MetricsRow};
use crate::manifold::{proximity_grad, proximity_loss, BlockForwardRecord, GradMode, ManifoldBlock, MixRule};
use crate::matrix::Matrix;
use crate::meta::MetaState;
use crate::nn::{Activation, Dense, DenseCache, DenseGrads, Mlp, Momentum};
use crate::rng::{Rng, UniformSource};

/// Standard deviation of every mode.
pub const MODE_STD: f64 = 0.05;
/// Any loss above this aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Ring8,
    Grid25,
    TwoMoons,
}

impl DatasetKind {
    pub fn n_modes(self) -> usize {
        match self {
            DatasetKind::Ring8 => 8,
            DatasetKind::Grid25 => 25,
            DatasetKind::TwoMoons => 2,
        }
    }

    /// Mode centers. For the moons these are the arc midpoints, used only
    /// for plotting.
    pub fn centers(self) -> Vec<[f64; 2]> {
        match self {
            DatasetKind::Ring8 => (0..8)
                .map(|i| {
                    let t = 2.0 * PI * i as f64 / 8.0;
                    [2.0 * t.cos(), 2.0 * t.sin()]
                })
                .collect(),
            DatasetKind::Grid25 => (0..25).map(|i| [(i / 5) as f64 - 2.0, (i % 5) as f64 - 2.0]).collect(),
            DatasetKind::TwoMoons => vec![
                [MOON_SHIFT[0], 1.0 + MOON_SHIFT[1]],
                [1.0 + MOON_SHIFT[0], -0.5 + MOON_SHIFT[1]],
            ],
        }
    }

    /// Distance from `p` to mode `m`: to the center for the Gaussian
    /// mixtures, to the arc for the moons.
    fn mode_distance(self, p: [f64; 2], m: usize, centers: &[[f64; 2]]) -> f64 {
        match self {
            DatasetKind::TwoMoons => moon_distance(p, m),
            _ => ((p[0] - centers[m][0]).powi(2) + (p[1] - centers[m][1]).powi(2)).sqrt(),
        }
    }
}

/// Shift that centers the two moons on the origin.
const MOON_SHIFT: [f64; 2] = [-0.5, -0.25];

fn moon_arc(m: usize) -> ([f64; 2], f64) {
    // (arc center, start angle); each arc spans π radians of a unit circle
    match m {
        0 => ([MOON_SHIFT[0], MOON_SHIFT[1]], 0.0),
        _ => ([1.0 + MOON_SHIFT[0], 0.5 + MOON_SHIFT[1]], PI),
    }
}

fn moon_distance(p: [f64; 2], m: usize) -> f64 {
    let (c, start) = moon_arc(m);
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    let r = (dx * dx + dy * dy).sqrt();
    let angle = dy.atan2(dx).rem_euclid(2.0 * PI);
    let rel = (angle - start).rem_euclid(2.0 * PI);
    if rel <= PI {
        (r - 1.0).abs()
    } else {
        [start, start + PI]
            .iter()
            .map(|a| ((c[0] + a.cos() - p[0]).powi(2) + (c[1] + a.sin() - p[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Ring8 => "ring8",
            DatasetKind::Grid25 => "grid25",
            DatasetKind::TwoMoons => "twomoons",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ring8" => Ok(DatasetKind::Ring8),
            "grid25" => Ok(DatasetKind::Grid25),
            "twomoons" | "two_moons" => Ok(DatasetKind::TwoMoons),
            _ => Err(Error::InvalidParameter(format!("unknown dataset '{s}'"))),
        }
    }
}

/// Draws `n` points. Gaussian mixtures pick a mode uniformly and add
/// `N(0, 0.05²)` noise per coordinate; the moons pick a moon uniformly, a
/// uniform angle along it, and add the same noise.
pub fn make_dataset(kind: DatasetKind, n: usize, rng: &mut Rng) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::InvalidParameter("dataset size must be at least 1".into()));
    }
    let centers = kind.centers();
    let mut out = Matrix::zeros(2, n);
    for col in 0..n {
        let m = rng.below(kind.n_modes());
        let base = match kind {
            DatasetKind::TwoMoons => {
                let (c, start) = moon_arc(m);
                let t = start + PI * rng.uniform(0.0, 1.0);
                [c[0] + t.cos(), c[1] + t.sin()]
            }
            _ => centers[m],
        };
        out[(0, col)] = base[0] + MODE_STD * rng.normal();
        out[(1, col)] = base[1] + MODE_STD * rng.normal();
    }
    Ok(out)
}

/// Modes holding at least `n / (4·modes)` samples within `3σ`, and the
/// fraction of samples within `3σ` of any mode.
pub fn mode_metrics(samples: &Matrix, kind: DatasetKind) -> Result<(usize, f64)> {
    if samples.rows() != 2 {
        return Err(Error::dims("mode_metrics", 2, samples.rows()));
    }
    let n = samples.cols();
    if n == 0 {
        return Err(Error::InvalidParameter("mode_metrics needs at least one sample".into()));
    }
    let centers = kind.centers();
    let radius = 3.0 * MODE_STD;
    let mut counts = vec![0usize; kind.n_modes()];
    let mut good = 0usize;
    for col in 0..n {
        let p = [samples[(0, col)], samples[(1, col)]];
        let (best, dist) = (0..kind.n_modes())
            .map(|m| (m, kind.mode_distance(p, m, &centers)))
            .fold((0, f64::INFINITY), |acc, (m, d)| if d < acc.1 { (m, d) } else { acc });
        if dist <= radius {
            counts[best] += 1;
            good += 1;
        }
    }
    let threshold = n as f64 / (4.0 * kind.n_modes() as f64);
    let covered = counts.iter().filter(|&&c| c as f64 >= threshold).count();
    Ok((covered, good as f64 / n as f64))
}

/// Unconditional hinge losses `(d_loss, g_loss)`.
pub fn hinge_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::InvalidParameter("hinge losses need nonempty batches".into()));
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let d_loss = mean(d_real, &|x| (1.0 - x).max(0.0)) + mean(d_fake, &|x| (1.0 + x).max(0.0));
    let g_loss = -mean(d_fake, &|x| x);
    Ok((d_loss, g_loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// Mixing kept, proximity penalty removed.
    GammaZero,
    /// Proximity penalty kept, mixing removed.
    BetaZero,
    /// `X_{l+1} = (1 − β) X̃_l`.
    Acm,
    /// `β` and `γ` pinned to the configured values.
    FixedBetaGamma,
    /// Dictionary updated by an EMA of assigned features.
    EmaDict,
    /// Plain discriminator without coders.
    NoManifold,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::GammaZero,
        Ablation::BetaZero,
        Ablation::Acm,
        Ablation::FixedBetaGamma,
        Ablation::EmaDict,
        Ablation::NoManifold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::GammaZero => "gamma_zero",
            Ablation::BetaZero => "beta_zero",
            Ablation::Acm => "acm",
            Ablation::FixedBetaGamma => "fixed_beta_gamma",
            Ablation::EmaDict => "ema_dict",
            Ablation::NoManifold => "no_manifold",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown ablation '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    pub n_real: usize,
    pub batch: usize,
    pub steps: usize,
    pub d_steps_per_g: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub momentum: f64,
    pub coder: CoderConfig,
    pub dict_k: usize,
    pub dict_lr: f64,
    pub dict_norm_cap: Option<f64>,
    pub dict_ema_decay: f64,
    pub beta0: f64,
    pub gamma0: f64,
    pub delta_beta: f64,
    pub delta_gamma: f64,
    pub eta: f64,
    pub r_decay: f64,
    pub fixed_beta: f64,
    pub fixed_gamma: f64,
    pub seed: u64,
    pub grad_mode: GradMode,
    pub ablation: Ablation,
    pub d_blocks: usize,
    pub d_width: usize,
    pub g_hidden: usize,
    pub noise_dim: usize,
    pub log_every: usize,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut coder = CoderConfig::with_kind(CoderKind::Lcsa);
        coder.sigma = 1.2;
        coder.kprime = 8;
        TrainConfig {
            dataset: DatasetKind::Ring8,
            n_real: 10_000,
            batch: 32,
            steps: 20_000,
            d_steps_per_g: 1,
            lr_g: 0.01,
            lr_d: 0.01,
            momentum: 0.5,
            coder,
            dict_k: 64,
            dict_lr: 0.2,
            dict_norm_cap: None,
            dict_ema_decay: 0.99,
            beta0: 0.1,
            gamma0: 0.1,
            delta_beta: 0.001,
            delta_gamma: 1.2,
            eta: 0.5,
            r_decay: 0.99,
            fixed_beta: 0.4,
            fixed_gamma: 0.48,
            seed: 0,
            grad_mode: GradMode::AnalyticJacobian,
            ablation: Ablation::Full,
            d_blocks: 4,
            d_width: 16,
            g_hidden: 64,
            noise_dim: 8,
            log_every: 1000,
            eval_samples: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch < 2 {
            return bad(format!("batch must be at least 2, got {}", self.batch));
        }
        if self.steps == 0 || self.d_steps_per_g == 0 || self.log_every == 0 {
            return bad("steps, d_steps_per_g and log_every must be positive".into());
        }
        if self.n_real == 0 || self.eval_samples == 0 {
            return bad("n_real and eval_samples must be positive".into());
        }
        if self.d_blocks == 0 || self.d_width == 0 || self.g_hidden == 0 || self.noise_dim == 0 {
            return bad("network sizes must be positive".into());
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("dict_lr", self.dict_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.dict_ema_decay) {
            return bad(format!("dict_ema_decay must lie in [0, 1], got {}", self.dict_ema_decay));
        }
        if self.ablation != Ablation::NoManifold {
            self.coder.validate(self.dict_k).map_err(|e| Error::Config(e.to_string()))?;
            if self.coder.kind == CoderKind::Dae {
                return bad("the discriminator needs a dictionary coder".into());
            }
            if self.grad_mode == GradMode::AnalyticJacobian && !self.coder.kind.is_soft() {
                return bad(format!("grad_mode analytic_jacobian needs sa or lcsa, not {}", self.coder.kind));
            }
        }
        MetaState::new(self.beta0, self.gamma0, self.delta_beta, self.delta_gamma, self.eta, self.r_decay)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.fixed_beta) || !(self.fixed_gamma >= 0.0) {
            return bad("fixed_beta must lie in [0, 1] and fixed_gamma must be non-negative".into());
        }
        Ok(())
    }

    /// `key=value` text covering every field.
    pub fn to_config_string(&self) -> String {
        let c = &self.coder;
        let cap = self.dict_norm_cap.map_or("none".to_string(), |v| v.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.to_string()),
            ("n_real", self.n_real.to_string()),
            ("batch", self.batch.to_string()),
            ("steps", self.steps.to_string()),
            ("d_steps_per_g", self.d_steps_per_g.to_string()),
            ("lr_g", self.lr_g.to_string()),
            ("lr_d", self.lr_d.to_string()),
            ("momentum", self.momentum.to_string()),
            ("coder", c.kind.to_string()),
            ("sigma", c.sigma.to_string()),
            ("kprime", c.kprime.to_string()),
            ("kappa", c.kappa.to_string()),
            ("tau", c.tau.to_string()),
            ("rho", c.rho.to_string()),
            ("coder_iters", c.iters.to_string()),
            ("coder_lr", c.lr.to_string()),
            ("dict_k", self.dict_k.to_string()),
            ("dict_lr", self.dict_lr.to_string()),
            ("dict_norm_cap", cap),
            ("dict_ema_decay", self.dict_ema_decay.to_string()),
            ("beta0", self.beta0.to_string()),
            ("gamma0", self.gamma0.to_string()),
            ("delta_beta", self.delta_beta.to_string()),
            ("delta_gamma", self.delta_gamma.to_string()),
            ("eta", self.eta.to_string()),
            ("r_decay", self.r_decay.to_string()),
            ("fixed_beta", self.fixed_beta.to_string()),
            ("fixed_gamma", self.fixed_gamma.to_string()),
            ("seed", self.seed.to_string()),
            ("grad_mode", self.grad_mode.to_string()),
            ("ablation", self.ablation.to_string()),
            ("d_blocks", self.d_blocks.to_string()),
            ("d_width", self.d_width.to_string()),
            ("g_hidden", self.g_hidden.to_string()),
            ("noise_dim", self.noise_dim.to_string()),
            ("log_every", self.log_every.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses `key=value` text on top of the defaults. Unknown keys are
    /// rejected.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (key, value) in parse_key_values(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e: T::Err| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
        }
        let named = |e: Error| Error::Config(format!("{key}: {e}"));
        match key {
            "dataset" => self.dataset = value.parse().map_err(named)?,
            "n_real" => self.n_real = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "d_steps_per_g" => self.d_steps_per_g = num(key, value)?,
            "lr_g" => self.lr_g = num(key, value)?,
            "lr_d" => self.lr_d = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "coder" => self.coder.kind = value.parse().map_err(named)?,
            "sigma" => self.coder.sigma = num(key, value)?,
            "kprime" => self.coder.kprime = num(key, value)?,
            "kappa" => self.coder.kappa = num(key, value)?,
            "tau" => self.coder.tau = num(key, value)?,
            "rho" => self.coder.rho = num(key, value)?,
            "coder_iters" => self.coder.iters = num(key, value)?,
            "coder_lr" => self.coder.lr = num(key, value)?,
            "dict_k" => self.dict_k = num(key, value)?,
            "dict_lr" => self.dict_lr = num(key, value)?,
            "dict_norm_cap" => {
                self.dict_norm_cap = if value == "none" { None } else { Some(num(key, value)?) }
            }
            "dict_ema_decay" => self.dict_ema_decay = num(key, value)?,
            "beta0" => self.beta0 = num(key, value)?,
            "gamma0" => self.gamma0 = num(key, value)?,
            "delta_beta" => self.delta_beta = num(key, value)?,
            "delta_gamma" => self.delta_gamma = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "r_decay" => self.r_decay = num(key, value)?,
            "fixed_beta" => self.fixed_beta = num(key, value)?,
            "fixed_gamma" => self.fixed_gamma = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "grad_mode" => self.grad_mode = value.parse().map_err(named)?,
            "ablation" => self.ablation = value.parse().map_err(named)?,
            "d_blocks" => self.d_blocks = num(key, value)?,
            "d_width" => self.d_width = num(key, value)?,
            "g_hidden" => self.g_hidden = num(key, value)?,
            "noise_dim" => self.noise_dim = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "eval_samples" => self.eval_samples = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }
}

/// Discriminator: a stack of blocks and a linear head producing one score
/// per column.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub blocks: Vec<ManifoldBlock>,
    pub head: Dense,
    /// When false, blocks run their layers only and coders are skipped.
    pub use_manifold: bool,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum BlockPass {
    Plain(DenseCache),
    Manifold(BlockForwardRecord),
}

#[derive(Debug, Clone)]
pub struct DiscForward {
    pub blocks: Vec<BlockPass>,
    head_cache: DenseCache,
    pub scores: Vec<f64>,
}

impl DiscForward {
    pub fn records(&self) -> Vec<&BlockForwardRecord> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                BlockPass::Manifold(r) => Some(r),
                BlockPass::Plain(_) => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscGrads {
    pub blocks: Vec<DenseGrads>,
    pub head: DenseGrads,
}

impl Discriminator {
    /// `n_blocks` LeakyReLU blocks of width `width` on 2-D input, each with
    /// its own `k`-atom dictionary.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_blocks: usize,
        width: usize,
        coder: &CoderConfig,
        k: usize,
        dict_lr: f64,
        grad_mode: GradMode,
        use_manifold: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(n_blocks);
        for l in 0..n_blocks {
            let input = if l == 0 { 2 } else { width };
            let layer = Dense::new(input, width, Activation::LeakyRelu, rng);
            let mut dict = init_dictionary(width, k, rng)?;
            dict.lr = dict_lr;
            blocks.push(ManifoldBlock::new(l, layer, coder.clone(), dict, grad_mode)?);
        }
        let head = Dense::new(width, 1, Activation::Identity, rng);
        Ok(Discriminator {
            blocks,
            head,
            use_manifold,
        })
    }

    pub fn set_mix_rule(&mut self, mix: MixRule) {
        for b in &mut self.blocks {
            b.mix = mix;
        }
    }

    pub fn forward(&self, x: &Matrix, beta: f64, rng: &mut Rng) -> Result<DiscForward> {
        let mut cur = x.clone();
        let mut passes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            if self.use_manifold {
                let rec = block.block_forward(&cur, beta, rng)?;
                cur = rec.mixed.clone();
                passes.push(BlockPass::Manifold(rec));
            } else {
                let (out, cache) = block.layer.forward(&cur).map_err(|e| e.in_block(block.index))?;
                cur = out;
                passes.push(BlockPass::Plain(cache));
            }
        }
        let (out, head_cache) = self.head.forward(&cur)?;
        Ok(DiscForward {
            blocks: passes,
            head_cache,
            scores: out.row(0).to_vec(),
        })
    }

    /// Backward pass for `dL/d(score)` per column. `prox_gamma > 0` adds the
    /// proximity penalty `proximity_loss(records, prox_gamma)` to the loss.
    /// Returns parameter gradients and `dL/d(input)`.
    pub fn backward(&self, fwd: &DiscForward, grad_scores: &[f64], beta: f64, prox_gamma: f64) -> Result<(DiscGrads, Matrix)> {
        let n = fwd.scores.len();
        if grad_scores.len() != n {
            return Err(Error::dims("Discriminator::backward", n, grad_scores.len()));
        }
        let g_out = Matrix::from_vec(1, n, grad_scores.to_vec())?;
        let (head, mut g) = self.head.backward(&fwd.head_cache, &g_out)?;
        let n_blocks = self.blocks.len();
        let mut grads = Vec::with_capacity(n_blocks);
        for (block, pass) in self.blocks.iter().zip(&fwd.blocks).rev() {
            let (pg, gi) = match pass {
                BlockPass::Plain(cache) => block.layer.backward(cache, &g)?,
                BlockPass::Manifold(rec) => {
                    let prox = if prox_gamma > 0.0 {
                        Some(proximity_grad(rec, prox_gamma, n_blocks)?)
                    } else {
                        None
                    };
                    block.backward(rec, &g, beta, prox.as_ref())?
                }
            };
            grads.push(pg);
            g = gi;
        }
        grads.reverse();
        Ok((DiscGrads { blocks: grads, head }, g))
    }
}

/// Proximity penalty of a forward pass (0 without manifold blocks).
pub fn forward_proximity(fwd: &DiscForward, gamma: f64) -> Result<f64> {
    let records: Vec<BlockForwardRecord> = fwd.records().into_iter().cloned().collect();
    if records.is_empty() {
        return Ok(0.0);
    }
    proximity_loss(&records, gamma)
}

/// Gradient of the hinge discriminator loss with respect to the scores of
/// `[real, fake]` columns.
pub fn hinge_d_grad(d_real: &[f64], d_fake: &[f64]) -> Vec<f64> {
    let (nr, nf) = (d_real.len() as f64, d_fake.len() as f64);
    d_real
        .iter()
        .map(|&v| if v < 1.0 { -1.0 / nr } else { 0.0 })
        .chain(d_fake.iter().map(|&v| if v > -1.0 { 1.0 / nf } else { 0.0 }))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub history: Vec<MetricsRow>,
    pub generator: Mlp,
    pub discriminator: Discriminator,
    pub meta: MetaState,
    /// Generator output on the fixed evaluation noise after the last step.
    pub samples: Matrix,
}

struct Optimizers {
    d: Vec<Momentum>,
    g: Vec<Momentum>,
}

fn check_loss(step: usize, what: &'static str, value: f64) -> Result<()> {
    if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { step, what, value });
    }
    Ok(())
}

/// Runs a full training job. The result depends only on `cfg`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with_observer(cfg, |_, _| {})
}

/// Like [`train`], calling `observe(step, meta)` after every step.
pub fn train_with_observer(cfg: &TrainConfig, mut observe: impl FnMut(usize, &MetaState)) -> Result<TrainOutput> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.split(0);
    let mut data_rng = root.split(1);
    let mut batch_rng = root.split(2);
    let mut eval_rng = root.split(3);
    let mut coder_rng = root.split(4);

    let real = make_dataset(cfg.dataset, cfg.n_real, &mut data_rng)?;
    let eval_noise = eval_rng.normal_matrix(cfg.noise_dim, cfg.eval_samples);

    let use_manifold = cfg.ablation != Ablation::NoManifold;
    let mut disc = Discriminator::new(
        cfg.d_blocks,
        cfg.d_width,
        &cfg.coder,
        cfg.dict_k,
        cfg.dict_lr,
        cfg.grad_mode,
        use_manifold,
        &mut init_rng,
    )?;
    if let Some(cap) = cfg.dict_norm_cap {
        for b in &mut disc.blocks {
            b.dict = b.dict.clone().with_norm_cap(cap)?;
        }
    }
    if cfg.ablation == Ablation::Acm {
        disc.set_mix_rule(MixRule::ScaleOnly);
    }
    let mut gen = Mlp::new(&[cfg.noise_dim, cfg.g_hidden, cfg.g_hidden, 2], &mut init_rng)?;
    let mut opt = Optimizers {
        d: disc
            .blocks
            .iter()
            .map(|b| Momentum::new(&b.layer))
            .chain(std::iter::once(Momentum::new(&disc.head)))
            .collect(),
        g: gen.layers.iter().map(Momentum::new).collect(),
    };

    let mut meta = MetaState::new(cfg.beta0, cfg.gamma0, cfg.delta_beta, cfg.delta_gamma, cfg.eta, cfg.r_decay)?;
    match cfg.ablation {
        Ablation::BetaZero => meta.fixed_mode(0.0, cfg.gamma0)?,
        Ablation::FixedBetaGamma => meta.fixed_mode(cfg.fixed_beta, cfg.fixed_gamma)?,
        _ => {}
    }
    let prox_enabled = use_manifold && cfg.ablation != Ablation::GammaZero;

    let b = cfg.batch;
    let mut history = Vec::new();
    for step in 0..cfg.steps {
        let beta = if use_manifold { meta.beta } else { 0.0 };
        let gamma = if prox_enabled { meta.gamma } else { 0.0 };

        let mut d_loss = 0.0;
        let mut prox = 0.0;
        let mut recon = 0.0;
        for _ in 0..cfg.d_steps_per_g {
            let idx: Vec<usize> = (0..b).map(|_| batch_rng.below(cfg.n_real)).collect();
            let real_batch = real.select_columns(&idx);
            let z = batch_rng.normal_matrix(cfg.noise_dim, b);
            let (fake, _) = gen.forward(&z)?;
            let x = Matrix::hcat(&[&real_batch, &fake])?;
            let fwd = disc.forward(&x, beta, &mut coder_rng)?;
            let (d_real, d_fake) = fwd.scores.split_at(b);
            let (hinge, _) = hinge_losses(d_real, d_fake)?;
            // the penalty is averaged over the 2b columns of the batch
            let prox_weight = gamma / (2 * b) as f64;
            prox = forward_proximity(&fwd, prox_weight)?;
            d_loss = hinge + prox;
            check_loss(step, "d_loss", d_loss)?;

            let (grads, _) = disc.backward(&fwd, &hinge_d_grad(d_real, d_fake), beta, prox_weight)?;
            for (l, g) in grads.blocks.iter().enumerate() {
                opt.d[l].step(&mut disc.blocks[l].layer, g, cfg.lr_d, cfg.momentum)?;
            }
            opt.d[cfg.d_blocks].step(&mut disc.head, &grads.head, cfg.lr_d, cfg.momentum)?;
            meta.update_r(d_real)?;

            if use_manifold {
                let records = fwd.records();
                recon = 0.0;
                for (block, rec) in disc.blocks.iter_mut().zip(&records) {
                    recon += rec.per_sample_prox.iter().map(|p| p.sqrt()).sum::<f64>() / rec.per_sample_prox.len() as f64;
                    match cfg.ablation {
                        Ablation::EmaDict => block.dict.ema_step(&rec.x_tilde, &rec.codes, cfg.dict_ema_decay)?,
                        _ => {
                            block.dict.dl_step(&rec.x_tilde, &rec.codes)?;
                        }
                    }
                }
                recon /= records.len() as f64;
            }
        }
        meta.step_beta_gamma();

        let z = batch_rng.normal_matrix(cfg.noise_dim, b);
        let (fake, g_caches) = gen.forward(&z)?;
        let fwd = disc.forward(&fake, beta, &mut coder_rng)?;
        let (_, g_loss) = hinge_losses(&fwd.scores, &fwd.scores)?;
        check_loss(step, "g_loss", g_loss)?;
        let (_, g_x) = disc.backward(&fwd, &vec![-1.0 / b as f64; b], beta, 0.0)?;
        let (g_grads, _) = gen.backward(&g_caches, &g_x)?;
        for ((layer, o), g) in gen.layers.iter_mut().zip(&mut opt.g).zip(&g_grads) {
            o.step(layer, g, cfg.lr_g, cfg.momentum)?;
        }
        if !gen.layers.iter().all(Dense::is_finite) {
            return Err(Error::Divergence {
                step,
                what: "generator weights",
                value: f64::NAN,
            });
        }
        observe(step, &meta);

        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let (samples, _) = gen.forward(&eval_noise)?;
            let (modes, hq) = mode_metrics(&samples, cfg.dataset)?;
            history.push(MetricsRow {
                step: (step + 1) as u64,
                d_loss,
                g_loss,
                prox,
                beta: meta.beta,
                gamma: if prox_enabled { meta.gamma } else { 0.0 },
                r: meta.r_stat,
                modes,
                hq,
                recon,
            });
        }
    }
    let (samples, _) = gen.forward(&eval_noise)?;
    Ok(TrainOutput {
        history,
        generator: gen,
        discriminator: disc,
        meta,
        samples,
    })
}

/// Checkpoint files for a trained model, as `(file name, bytes)` pairs:
/// generator and discriminator weights, dictionaries with sidecars, and the
/// controller state.
pub fn checkpoint_files(out: &TrainOutput) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    let mut push_matrix = |name: String, m: &Matrix| -> Result<()> {
        let mut buf = Vec::new();
        crate::io::write_matrix_to(&mut buf, m)?;
        files.push((name, buf));
        Ok(())
    };
    let bias = |b: &[f64]| Matrix::column_vector(b);
    for (l, layer) in out.generator.layers.iter().enumerate() {
        push_matrix(format!("gen_w{l}.mtx"), &layer.w)?;
        push_matrix(format!("gen_b{l}.mtx"), &bias(&layer.b))?;
    }
    for (l, block) in out.discriminator.blocks.iter().enumerate() {
        push_matrix(format!("disc_w{l}.mtx"), &block.layer.w)?;
        push_matrix(format!("disc_b{l}.mtx"), &bias(&block.layer.b))?;
        if out.discriminator.use_manifold {
            push_matrix(format!("dict{l}.mtx"), block.dict.atoms())?;
        }
    }
    push_matrix("disc_head_w.mtx".into(), &out.discriminator.head.w)?;
    push_matrix("disc_head_b.mtx".into(), &bias(&out.discriminator.head.b))?;
    if out.discriminator.use_manifold {
        for (l, block) in out.discriminator.blocks.iter().enumerate() {
            files.push((format!("dict{l}.meta"), block.dict.metadata().into_bytes()));
        }
    }
    let m = &out.meta;
    let meta_text = format!(
        "beta={}\ngamma={}\nbeta0={}\ngamma0={}\ndelta_beta={}\ndelta_gamma={}\neta={}\nr_stat={}\nema_decay={}\nfrozen={}\n",
        m.beta,
        m.gamma,
        m.beta0,
        m.gamma0,
        m.delta_beta,
        m.delta_gamma,
        m.eta,
        m.r_stat,
        m.ema_decay,
        m.is_frozen()
    );
    files.push(("meta.state".into(), meta_text.into_bytes()));
    Ok(files)
}

/// Rebuilds a dictionary from checkpoint bytes.
pub fn dictionary_from_checkpoint(atoms: &[u8], meta: &str) -> Result<Dictionary> {
    Dictionary::from_parts(crate::io::read_matrix_from(atoms)?, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config(ablation: Ablation) -> TrainConfig {
        TrainConfig {
            n_real: 500,
            batch: 16,
            steps: 30,
            log_every: 10,
            eval_samples: 200,
            d_width: 8,
            d_blocks: 2,
            dict_k: 16,
            g_hidden: 16,
            ablation,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ring_means_match_centers() {
        let mut rng = Rng::new(1);
        let x = make_dataset(DatasetKind::Ring8, 100_000, &mut rng).unwrap();
        let centers = DatasetKind::Ring8.centers();
        let mut sums = [[0.0f64; 3]; 8];
        for n in 0..x.cols() {
            let p = [x[(0, n)], x[(1, n)]];
            let m = (0..8)
                .min_by(|&a, &b| {
                    let da = (p[0] - centers[a][0]).hypot(p[1] - centers[a][1]);
                    let db = (p[0] - centers[b][0]).hypot(p[1] - centers[b][1]);
                    da.total_cmp(&db)
                })
                .unwrap();
            sums[m][0] += p[0];
            sums[m][1] += p[1];
            sums[m][2] += 1.0;
        }
        for (s, c) in sums.iter().zip(&centers) {
            assert!((s[0] / s[2] - c[0]).abs() < 0.01);
            assert!((s[1] / s[2] - c[1]).abs() < 0.01);
        }
    }

    #[test]
    fn datasets_are_deterministic_and_sized() {
        for kind in [DatasetKind::Ring8, DatasetKind::Grid25, DatasetKind::TwoMoons] {
            let a = make_dataset(kind, 50, &mut Rng::new(3)).unwrap();
            let b = make_dataset(kind, 50, &mut Rng::new(3)).unwrap();
            assert_eq!(a, b);
            let one = make_dataset(kind, 1, &mut Rng::new(4)).unwrap();
            assert_eq!(one.shape(), (2, 1));
            assert!(one.is_finite());
        }
        assert!(make_dataset(DatasetKind::Ring8, 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn real_data_covers_all_modes() {
        // mass of a 2-D isotropic Gaussian within 3σ is 1 − e^{−4.5}
        let mass = 1.0 - (-4.5f64).exp();
        for kind in [DatasetKind::Ring8, DatasetKind::Grid25] {
            let x = make_dataset(kind, 50_000, &mut Rng::new(5)).unwrap();
            let (modes, hq) = mode_metrics(&x, kind).unwrap();
            assert_eq!(modes, kind.n_modes());
            assert!((hq - mass).abs() < 0.003, "{kind}: {hq}");
        }
        let x = make_dataset(DatasetKind::TwoMoons, 20_000, &mut Rng::new(6)).unwrap();
        let (modes, hq) = mode_metrics(&x, DatasetKind::TwoMoons).unwrap();
        assert_eq!(modes, 2);
        assert!(hq > 0.98);
    }

    #[test]
    fn collapsed_samples_cover_one_mode() {
        let c = DatasetKind::Ring8.centers()[3];
        let x = Matrix::from_columns(2, &vec![vec![c[0], c[1]]; 100]).unwrap();
        assert_eq!(mode_metrics(&x, DatasetKind::Ring8).unwrap(), (1, 1.0));
        let far = Matrix::from_columns(2, &[vec![10.0, 10.0]]).unwrap();
        assert_eq!(mode_metrics(&far, DatasetKind::Ring8).unwrap(), (0, 0.0));
    }

    #[test]
    fn threshold_edge() {
        // 8 modes, n = 64: a mode needs 2 samples
        let centers = DatasetKind::Ring8.centers();
        let mut cols = vec![vec![centers[0][0], centers[0][1]]; 2];
        cols.push(vec![centers[1][0], centers[1][1]]);
        cols.extend(std::iter::repeat_n(vec![9.0, 9.0], 61));
        let x = Matrix::from_columns(2, &cols).unwrap();
        let (modes, hq) = mode_metrics(&x, DatasetKind::Ring8).unwrap();
        assert_eq!(modes, 1);
        assert!((hq - 3.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn hinge_values() {
        assert_eq!(hinge_losses(&[1.0, 3.0], &[-1.0, -2.0]).unwrap().0, 0.0);
        assert_eq!(hinge_losses(&[0.0], &[0.0]).unwrap(), (2.0, -0.0));
        assert!(hinge_losses(&[], &[1.0]).is_err());
        let (d, g) = hinge_losses(&[0.5, -1.0], &[0.2, 0.4]).unwrap();
        assert!((d - (0.25 + 1.0 + 1.3)).abs() < 1e-15);
        assert!((g + 0.3).abs() < 1e-15);
    }

    #[test]
    fn hinge_gradient_matches_finite_differences() {
        let real = [0.3, 1.5, -0.2];
        let fake = [0.1, -1.4];
        let g = hinge_d_grad(&real, &fake);
        let h = 1e-7;
        for i in 0..5 {
            let mut all: Vec<f64> = real.iter().chain(&fake).copied().collect();
            all[i] += h;
            let up = hinge_losses(&all[..3], &all[3..]).unwrap().0;
            all[i] -= 2.0 * h;
            let down = hinge_losses(&all[..3], &all[3..]).unwrap().0;
            assert!(((up - down) / (2.0 * h) - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let cfg = micro_config(Ablation::Full);
        let disc = Discriminator::new(2, 8, &cfg.coder, 16, 2e-3, GradMode::AnalyticJacobian, true, &mut rng).unwrap();
        let gen = Mlp::new(&[4, 8, 2], &mut rng).unwrap();
        let z = rng.normal_matrix(4, 6);
        let beta = 0.3;
        let g_loss = |g: &Mlp| {
            let (fake, _) = g.forward(&z).unwrap();
            let f = disc.forward(&fake, beta, &mut Rng::new(0)).unwrap();
            hinge_losses(&f.scores, &f.scores).unwrap().1
        };
        let (fake, caches) = gen.forward(&z).unwrap();
        let fwd = disc.forward(&fake, beta, &mut Rng::new(0)).unwrap();
        let interior = fwd.records().iter().all(|r| r.boundary.iter().all(|b| !b));
        assert!(interior);
        let (_, gx) = disc.backward(&fwd, &[-1.0 / 6.0; 6], beta, 0.0).unwrap();
        let (grads, _) = gen.backward(&caches, &gx).unwrap();
        let h = 1e-6;
        for (l, gl) in grads.iter().enumerate() {
            for idx in 0..gl.w.data().len() {
                let (mut p, mut m) = (gen.clone(), gen.clone());
                p.layers[l].w.data_mut()[idx] += h;
                m.layers[l].w.data_mut()[idx] -= h;
                let fd = (g_loss(&p) - g_loss(&m)) / (2.0 * h);
                assert!((fd - gl.w.data()[idx]).abs() < 1e-5, "layer {l} idx {idx}: {fd} vs {}", gl.w.data()[idx]);
            }
        }
    }

    #[test]
    fn config_round_trip_and_rejections() {
        let cfg = TrainConfig {
            lr_d: 0.1 + 0.2,
            dict_norm_cap: Some(1.0),
            ablation: Ablation::EmaDict,
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_config_str(&cfg.to_config_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::from_config_str("bogus=1\n").is_err());
        assert!(TrainConfig::from_config_str("batch=1\n").is_err());
        assert!(TrainConfig::from_config_str("coder=omp\n").is_err());
        let ok = TrainConfig::from_config_str("# comment\ncoder=omp\ngrad_mode=straight_through\n").unwrap();
        assert_eq!(ok.coder.kind, CoderKind::Omp);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = micro_config(Ablation::Full);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(crate::io::metrics_csv(&a.history), crate::io::metrics_csv(&b.history));
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.history.len(), 3);
    }

    #[test]
    fn no_manifold_has_no_prox() {
        let out = train(&micro_config(Ablation::NoManifold)).unwrap();
        assert!(out.history.iter().all(|r| r.prox == 0.0 && r.recon == 0.0));
    }

    #[test]
    fn gamma_zero_has_no_prox_but_mixes() {
        let out = train(&micro_config(Ablation::GammaZero)).unwrap();
        assert!(out.history.iter().all(|r| r.prox == 0.0));
        assert!(out.history.iter().all(|r| r.beta > 0.0));
    }

    #[test]
    fn fixed_and_beta_zero_arms_keep_beta() {
        let out = train(&micro_config(Ablation::FixedBetaGamma)).unwrap();
        assert!(out.history.iter().all(|r| r.beta == 0.4 && r.gamma == 0.48));
        let out = train(&micro_config(Ablation::BetaZero)).unwrap();
        assert!(out.history.iter().all(|r| r.beta == 0.0));
    }

    #[test]
    fn every_arm_runs() {
        for arm in Ablation::ALL {
            let out = train(&micro_config(arm)).unwrap();
            assert!(out.history.iter().all(|r| r.modes <= 8));
        }
    }

    #[test]
    fn beta_moves_by_single_steps() {
        let cfg = micro_config(Ablation::Full);
        let mut betas = vec![cfg.beta0];
        train_with_observer(&cfg, |_, m| {
            betas.push(m.beta);
            assert_eq!(m.gamma, m.gamma0 + m.delta_gamma * m.beta);
        })
        .unwrap();
        for w in betas.windows(2) {
            let d = (w[1] - w[0]).abs();
            assert!(d == 0.0 || (d - cfg.delta_beta).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = micro_config(Ablation::NoManifold);
        cfg.lr_d = 1e4;
        cfg.lr_g = 1e4;
        cfg.steps = 200;
        assert!(matches!(train(&cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn checkpoints_restore_dictionaries() {
        let out = train(&micro_config(Ablation::Full)).unwrap();
        let files = checkpoint_files(&out).unwrap();
        let get = |n: &str| files.iter().find(|(f, _)| f == n).unwrap().1.clone();
        let dict = dictionary_from_checkpoint(&get("dict1.mtx"), std::str::from_utf8(&get("dict1.meta")).unwrap()).unwrap();
        assert_eq!(&dict, &out.discriminator.blocks[1].dict);
    }
}
