//! Stochastic-gradient fitting of `(θ, φ)` by the reparameterized ELBO.

use std::ops::Range;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dense::spectral_radius;
use crate::error::{Error, Result};
use crate::model::GenerativeParams;
use crate::posterior::{GaussianPosterior, PosteriorKind, Recognition, DEFAULT_ALPHA};

pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;
/// Doublings of α tried before a factorization is given up.
const MAX_JITTER_RETRIES: usize = 20;
const EVAL_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub kind: PosteriorKind,
    pub hidden_width: usize,
    /// Affine layers per network.
    pub layers: usize,
    /// Monte-Carlo samples per gradient estimate.
    pub samples: usize,
    pub window: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_patience: usize,
    pub decay_factor: f64,
    pub alpha: f64,
    pub seed: u64,
    pub learn_theta: bool,
    pub learn_phi: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            kind: PosteriorKind::Vildsmult,
            hidden_width: 64,
            layers: 5,
            samples: 1,
            window: 100,
            batches_per_epoch: 100,
            epochs: 500,
            base_lr: 1.0,
            decay_patience: 20,
            decay_factor: 10.0,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            learn_theta: true,
            learn_phi: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidParams("at least one sample per estimate is required".into()));
        }
        if self.window == 0 || self.window > len {
            return Err(Error::InvalidWindow(format!(
                "window length {} must be in 1..={len}",
                self.window
            )));
        }
        if !(self.alpha > 0.0) || !(self.decay_factor > 0.0) || !(self.base_lr > 0.0) {
            return Err(Error::InvalidParams("alpha, learning rate and decay factor must be positive".into()));
        }
        Ok(())
    }
}

/// Per-coordinate Adadelta accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    pub rho: f64,
    pub eps: f64,
    pub sq_grad: Vec<f64>,
    pub sq_update: Vec<f64>,
}

impl AdadeltaState {
    pub fn new(len: usize) -> Self {
        Self { rho: ADADELTA_RHO, eps: ADADELTA_EPS, sq_grad: vec![0.0; len], sq_update: vec![0.0; len] }
    }

    /// One ascent step: `params += lr_scale · Δ`, with
    /// `Δ = sqrt(E[Δ²] + ε) / sqrt(E[g²] + ε) · g`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr_scale: f64) -> Result<()> {
        if params.len() != self.sq_grad.len() || grads.len() != self.sq_grad.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.sq_grad.len(),
                params.len(),
                grads.len()
            )));
        }
        let (rho, eps) = (self.rho, self.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.sq_grad[i] = rho * self.sq_grad[i] + (1.0 - rho) * g * g;
            let delta = ((self.sq_update[i] + eps).sqrt() / (self.sq_grad[i] + eps).sqrt()) * g;
            self.sq_update[i] = rho * self.sq_update[i] + (1.0 - rho) * delta * delta;
            params[i] += lr_scale * delta;
        }
        Ok(())
    }
}

/// Divides the rate by `factor` once `patience` epochs pass without a new best.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    best: Option<f64>,
    stale: usize,
}

impl LrSchedule {
    pub fn new(base: f64, patience: usize, factor: f64) -> Self {
        Self { lr: base, patience, factor, best: None, stale: 0 }
    }

    /// Records one epoch's objective and returns the rate in effect afterwards.
    pub fn observe(&mut self, value: f64) -> f64 {
        match self.best {
            Some(b) if value <= b => {
                self.stale += 1;
                if self.patience > 0 && self.stale >= self.patience {
                    self.lr /= self.factor;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(value);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Uniformly placed contiguous windows `[s, s + window_len)`.
pub fn make_windows<R: Rng>(len: usize, window_len: usize, per_epoch: usize, rng: &mut R) -> Result<Vec<Range<usize>>> {
    if window_len == 0 || window_len > len {
        return Err(Error::InvalidWindow(format!("window length {window_len} must be in 1..={len}")));
    }
    let max_start = len - window_len;
    Ok((0..per_epoch)
        .map(|_| {
            let s = rng.random_range(0..=max_start);
            s..s + window_len
        })
        .collect())
}

/// A Monte-Carlo ELBO value with gradients in the free coordinates of θ
/// ([`GenerativeParams::free_params`]) and φ ([`Recognition::params`]).
#[derive(Debug, Clone)]
pub struct ElboEstimate {
    pub value: f64,
    pub grad_theta: Vec<f64>,
    pub grad_phi: Vec<f64>,
}

pub fn standard_normal_draws<R: Rng>(rng: &mut R, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// `scale · (H(q) + (1/L) Σ_l log p_θ(x, μ + R⁻ᵀ ε_l))` and its gradients, for
/// the given noise draws. The entropy is always the closed form.
pub fn elbo_with_noise(
    theta: &GenerativeParams,
    phi: &Recognition,
    x: &[Vec<f64>],
    eps: &[Vec<f64>],
    scale: f64,
) -> Result<ElboEstimate> {
    let post = phi.build(x, true)?;
    let weight = scale / eps.len() as f64;
    let mut cot = post.zero_cotangent();
    let mut value = 0.0;
    let mut grad_theta = vec![0.0; theta.num_free()];
    for e in eps {
        let z = post.sample(e)?;
        let joint = theta.eval(x, &z, true)?;
        value += joint.value;
        for (g, v) in grad_theta.iter_mut().zip(joint.grad_theta.unwrap()) {
            *g += weight * v;
        }
        let gz: Vec<f64> = joint.grad_z.iter().map(|g| g * weight).collect();
        post.accumulate_sample(&mut cot, e, &gz)?;
    }
    post.accumulate_entropy(&mut cot, scale);
    let grad_phi = post.backward(phi, &cot)?;
    Ok(ElboEstimate { value: scale * (post.entropy() + value / eps.len() as f64), grad_theta, grad_phi })
}

/// [`elbo_with_noise`] with `samples` fresh standard-normal draws.
pub fn elbo_estimate<R: Rng>(
    theta: &GenerativeParams,
    phi: &Recognition,
    x: &[Vec<f64>],
    samples: usize,
    rng: &mut R,
    scale: f64,
) -> Result<ElboEstimate> {
    let eps = standard_normal_draws(rng, samples.max(1), x.len() * phi.latent_dim());
    elbo_with_noise(theta, phi, x, &eps, scale)
}

/// Per-draw ELBO values `H(q) + log p_θ(x, z_l)` for an already built posterior.
pub fn elbo_terms(theta: &GenerativeParams, post: &GaussianPosterior, x: &[Vec<f64>], eps: &[Vec<f64>]) -> Result<Vec<f64>> {
    let h = post.entropy();
    eps.iter()
        .map(|e| Ok(h + theta.log_joint(x, &post.sample(e)?)?))
        .collect()
}

/// Builds the posterior, doubling α until the precision factorizes.
/// Returns the posterior and the number of failed attempts.
pub fn build_with_jitter(phi: &Recognition, x: &[Vec<f64>], record: bool) -> Result<(GaussianPosterior, Recognition, usize)> {
    let mut trial = phi.clone();
    for failures in 0..=MAX_JITTER_RETRIES {
        match trial.build(x, record) {
            Ok(post) => return Ok((post, trial, failures)),
            Err(Error::NotPositiveDefinite { .. }) if failures < MAX_JITTER_RETRIES => {
                trial.set_alpha(trial.alpha() * 2.0);
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

/// Single-sample full-series ELBO with the given noise seed.
pub fn evaluate_elbo(theta: &GenerativeParams, phi: &Recognition, x: &[Vec<f64>], seed: u64) -> Result<f64> {
    let (post, _, _) = build_with_jitter(phi, x, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal_draws(&mut rng, 1, x.len() * phi.latent_dim());
    Ok(elbo_terms(theta, &post, x, &eps)?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: GenerativeParams,
    pub phi: Recognition,
    /// Full-series ELBO after each epoch.
    pub elbo: Vec<f64>,
    pub wall_seconds: Vec<f64>,
    pub lr_scale: Vec<f64>,
    /// Factorization failures (each retried with doubled α) per epoch.
    pub cholesky_failures: Vec<usize>,
    pub spectral_radius: Vec<f64>,
}

fn dynamics_radius(theta: &GenerativeParams, phi: &Recognition) -> f64 {
    match (theta.family, phi) {
        (crate::model::Family::Nonlin, Recognition::Vildsmult(p)) => spectral_radius(&p.prior_a),
        (crate::model::Family::Nonlin, _) => f64::NAN,
        _ => spectral_radius(&theta.a),
    }
}

/// Seed of the fixed noise used for the per-epoch full-series ELBO.
pub fn eval_seed(config: &FitConfig) -> u64 {
    config.seed ^ EVAL_SEED_SALT
}

/// Runs the training loop: each epoch takes `batches_per_epoch` Adadelta
/// steps on random windows (scaled by `T / window`), then records the
/// full-series ELBO under a fixed noise seed and updates the decay schedule.
pub fn fit(
    config: &FitConfig,
    x: &[Vec<f64>],
    theta_init: GenerativeParams,
    phi_init: Recognition,
) -> Result<FitResult> {
    fit_with_progress(config, x, theta_init, phi_init, |_, _| {})
}

pub fn fit_with_progress<F: FnMut(usize, f64)>(
    config: &FitConfig,
    x: &[Vec<f64>],
    theta_init: GenerativeParams,
    phi_init: Recognition,
    mut progress: F,
) -> Result<FitResult> {
    let len = x.len();
    config.validate(len)?;
    theta_init.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = theta_init;
    let mut phi = phi_init;
    let mut theta_free = theta.free_params();
    let mut phi_free = phi.params();
    let mut opt_theta = AdadeltaState::new(theta_free.len());
    let mut opt_phi = AdadeltaState::new(phi_free.len());
    let mut schedule = LrSchedule::new(config.base_lr, config.decay_patience, config.decay_factor);
    let scale = len as f64 / config.window as f64;
    let mut result = FitResult {
        theta: theta.clone(),
        phi: phi.clone(),
        elbo: vec![],
        wall_seconds: vec![],
        lr_scale: vec![],
        cholesky_failures: vec![],
        spectral_radius: vec![],
    };
    let mut last_good = None;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut failures = 0;
        let lr = schedule.lr;
        for window in make_windows(len, config.window, config.batches_per_epoch, &mut rng)? {
            let xw = &x[window];
            let (_, trial, fails) = build_with_jitter(&phi, xw, false)?;
            failures += fails;
            let est = elbo_estimate(&theta, &trial, xw, config.samples, &mut rng, scale)?;
            if !est.value.is_finite()
                || est.grad_phi.iter().chain(&est.grad_theta).any(|g| !g.is_finite())
            {
                failures += 1;
                continue;
            }
            if config.learn_phi {
                opt_phi.step(&mut phi_free, &est.grad_phi, lr)?;
                phi.set_params(&phi_free)?;
            }
            if config.learn_theta && !theta_free.is_empty() {
                opt_theta.step(&mut theta_free, &est.grad_theta, lr)?;
                theta = theta.with_free_params(&theta_free)?;
            }
        }
        let elbo = evaluate_elbo(&theta, &phi, x, eval_seed(config))
            .ok()
            .filter(|v| v.is_finite())
            .ok_or(Error::NonFiniteElbo { epoch, last_good })?;
        last_good = Some(epoch);
        let lr_after = schedule.observe(elbo);
        result.elbo.push(elbo);
        result.wall_seconds.push(start.elapsed().as_secs_f64());
        result.lr_scale.push(lr_after);
        result.cholesky_failures.push(failures);
        result.spectral_radius.push(dynamics_radius(&theta, &phi));
        progress(epoch, elbo);
    }
    result.theta = theta;
    result.phi = phi;
    Ok(result)
}
