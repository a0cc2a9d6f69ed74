//! Gaussian approximate posteriors `q_φ(z | x) = N(μ, (R Rᵀ)⁻¹)` with block
//! tri-diagonal precision, in three parameterizations:
//!
//! * [`PosteriorKind::Mf`]: independent across time; per-time precision
//!   blocks `L_t L_tᵀ + αI` from a network.
//! * [`PosteriorKind::Vildsblk`]: networks emit the diagonal precision blocks
//!   `D_t` from `x_t` and the sub-diagonal blocks from `(x_t, x_{t-1})`; `αI`
//!   is added to the assembled precision.
//! * [`PosteriorKind::Vildsmult`]: product of a per-time Gaussian factor
//!   `N(M_t, C_t)` and an LDS-shaped prior with learnable `(A, Q)`. The
//!   precision is `(I−𝐀)ᵀ 𝐐⁻¹ (I−𝐀) + 𝐂⁻¹` and the mean is
//!   `R⁻ᵀ(R⁻¹(𝐂⁻¹ M))`.
//!
//! Building a posterior with `record = true` keeps a tape of network traces so
//! that [`GaussianPosterior::backward`] can return gradients for every entry
//! of φ.

use serde::{Deserialize, Serialize};

use crate::btd::{self, LowerBlockBiDiag, MarginalMoments, Side, SymBlockTriDiag};
use crate::dense::{
    cholesky_lower, mat_from_rows, mat_to_rows, pack_lower, packed_len, serde_rows, sym, tril,
    unpack_lower, unpack_sym, unpack_sym_vjp, Mat, Vector,
};
use crate::error::{Error, Result};
use crate::nn::{Mlp, NetLayout, Trace};

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorKind {
    Mf,
    Vildsblk,
    Vildsmult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldParams {
    /// `x_t → μ_t`
    pub net_mu: Mlp,
    /// `x_t →` packed lower factor `L_t` of the precision block `L_t L_tᵀ + αI`.
    pub net_prec: Mlp,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VildsBlkParams {
    /// `x_t → μ_t`
    pub net_mu: Mlp,
    /// `x_t →` packed symmetric `D_t`.
    pub net_d: Mlp,
    /// `(x_t, x_{t-1}) →` row-major `B_{t-1}` (block `(t, t-1)`).
    pub net_b: Mlp,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VildsMultParams {
    /// `x_t → M_t`
    pub net_m: Mlp,
    /// `x_t →` packed lower factor `L_t` of `𝐂⁻¹_t = L_t L_tᵀ + αI`.
    pub net_c: Mlp,
    #[serde(with = "serde_rows")]
    pub prior_a: Mat,
    #[serde(with = "serde_rows")]
    pub prior_q: Mat,
    pub alpha: f64,
}

/// The variational parameters φ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Recognition {
    Mf(MeanFieldParams),
    Vildsblk(VildsBlkParams),
    Vildsmult(VildsMultParams),
}

/// Network shapes for [`Recognition::init`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub hidden: usize,
    /// Number of affine layers.
    pub layers: usize,
}

enum Tape {
    Mf { mu: Vec<Trace>, prec: Vec<Trace>, factors: Vec<Mat> },
    Blk { mu: Vec<Trace>, d: Vec<Trace>, b: Vec<Trace> },
    Mult {
        m: Vec<Trace>,
        c: Vec<Trace>,
        factors: Vec<Mat>,
        cinv: Vec<Mat>,
        means: Vec<Vector>,
        qi: Mat,
    },
}

/// One built posterior on a specific series.
pub struct GaussianPosterior {
    pub kind: Option<PosteriorKind>,
    /// Flat `nT` mean.
    pub mu: Vec<f64>,
    pub precision: SymBlockTriDiag,
    /// `precision = R Rᵀ`
    pub factor: LowerBlockBiDiag,
    tape: Option<Tape>,
}

/// Cotangents of a posterior's mean and Cholesky factor.
#[derive(Debug, Clone)]
pub struct PosteriorCotangent {
    pub mu: Vec<f64>,
    pub factor: LowerBlockBiDiag,
}

/// Scale of the final-layer weights of networks that emit precision entries,
/// relative to He initialization.
const PRECISION_OUTPUT_SCALE: f64 = 0.1;

fn shrink_output(net: &mut Mlp) {
    for w in &mut net.layers.last_mut().unwrap().weight {
        *w *= PRECISION_OUTPUT_SCALE;
    }
}

fn identity_bias(net: &mut Mlp, n: usize) {
    shrink_output(net);
    // packed lower layout: diagonal entry i sits at i(i+1)/2 + i
    let bias = &mut net.layers.last_mut().unwrap().bias;
    for i in 0..n {
        bias[i * (i + 1) / 2 + i] = 1.0;
    }
}

fn traces(net: &Mlp, x: &[Vec<f64>]) -> Result<Vec<Trace>> {
    x.iter().map(|xt| net.forward_trace(xt)).collect()
}

fn prior_precision(a: &Mat, qi: &Mat, len: usize) -> SymBlockTriDiag {
    let ata = a.transpose() * qi * a;
    let diag = (0..len)
        .map(|t| if t + 1 < len { qi + &ata } else { qi.clone() })
        .collect();
    let lower = vec![-(qi * a); len.saturating_sub(1)];
    SymBlockTriDiag { diag, lower }
}

fn spd_inverse(q: &Mat) -> Result<(Mat, Mat)> {
    let lq = cholesky_lower(q)
        .ok_or_else(|| Error::InvalidParams("prior Q is not positive definite".into()))?;
    let n = q.nrows();
    let linv = lq.solve_lower_triangular(&Mat::identity(n, n)).unwrap();
    Ok((lq, linv.transpose() * linv))
}

impl Recognition {
    /// Fresh parameters. Network weights are He-initialized from `seed`; the
    /// networks emitting precision entries get shrunken final weights and
    /// identity final biases so every kind begins near a unit-precision
    /// posterior. The VILDSmult prior starts
    /// at `A = 0.9 I`, `Q = I`.
    pub fn init(kind: PosteriorKind, obs_dim: usize, latent_dim: usize, shape: NetShape, alpha: f64, seed: u64) -> Result<Self> {
        let (m, n) = (obs_dim, latent_dim);
        let stack = |input, output| NetLayout::stack(input, shape.hidden, shape.layers, output);
        let net = |input, output, k: u64| -> Result<Mlp> {
            Ok(Mlp::init(stack(input, output)?, seed.wrapping_mul(31).wrapping_add(k)))
        };
        Ok(match kind {
            PosteriorKind::Mf => {
                let mut net_prec = net(m, packed_len(n), 1)?;
                identity_bias(&mut net_prec, n);
                Recognition::Mf(MeanFieldParams { net_mu: net(m, n, 0)?, net_prec, alpha })
            }
            PosteriorKind::Vildsblk => {
                let mut net_d = net(m, packed_len(n), 1)?;
                identity_bias(&mut net_d, n);
                Recognition::Vildsblk(VildsBlkParams {
                    net_mu: net(m, n, 0)?,
                    net_d,
                    net_b: {
                        let mut b = net(2 * m, n * n, 2)?;
                        shrink_output(&mut b);
                        b
                    },
                    alpha,
                })
            }
            PosteriorKind::Vildsmult => {
                let mut net_c = net(m, packed_len(n), 1)?;
                identity_bias(&mut net_c, n);
                Recognition::Vildsmult(VildsMultParams {
                    net_m: net(m, n, 0)?,
                    net_c,
                    prior_a: Mat::identity(n, n) * 0.9,
                    prior_q: Mat::identity(n, n),
                    alpha,
                })
            }
        })
    }

    /// [`Recognition::init`] followed by [`Mlp::activate_on`] for every network
    /// on the inputs it will see in `x` (at most 2000 evenly spaced time points).
    pub fn init_on_data(kind: PosteriorKind, x: &[Vec<f64>], latent_dim: usize, shape: NetShape, alpha: f64, seed: u64) -> Result<Self> {
        let obs_dim = x.first().map(Vec::len).ok_or_else(|| Error::InvalidParams("empty series".into()))?;
        let mut phi = Self::init(kind, obs_dim, latent_dim, shape, alpha, seed)?;
        let stride = x.len().div_ceil(2000).max(1);
        let singles: Vec<Vec<f64>> = x.iter().step_by(stride).cloned().collect();
        let pairs: Vec<Vec<f64>> = (1..x.len())
            .step_by(stride)
            .map(|t| {
                let mut v = x[t].clone();
                v.extend_from_slice(&x[t - 1]);
                v
            })
            .collect();
        match &mut phi {
            Recognition::Mf(p) => {
                p.net_mu.activate_on(&singles)?;
                p.net_prec.activate_on(&singles)?;
            }
            Recognition::Vildsblk(p) => {
                p.net_mu.activate_on(&singles)?;
                p.net_d.activate_on(&singles)?;
                p.net_b.activate_on(&pairs)?;
            }
            Recognition::Vildsmult(p) => {
                p.net_m.activate_on(&singles)?;
                p.net_c.activate_on(&singles)?;
            }
        }
        Ok(phi)
    }

    pub fn kind(&self) -> PosteriorKind {
        match self {
            Recognition::Mf(_) => PosteriorKind::Mf,
            Recognition::Vildsblk(_) => PosteriorKind::Vildsblk,
            Recognition::Vildsmult(_) => PosteriorKind::Vildsmult,
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            Recognition::Mf(p) => p.alpha,
            Recognition::Vildsblk(p) => p.alpha,
            Recognition::Vildsmult(p) => p.alpha,
        }
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        match self {
            Recognition::Mf(p) => p.alpha = alpha,
            Recognition::Vildsblk(p) => p.alpha = alpha,
            Recognition::Vildsmult(p) => p.alpha = alpha,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Recognition::Mf(p) => p.net_mu.layout.output(),
            Recognition::Vildsblk(p) => p.net_mu.layout.output(),
            Recognition::Vildsmult(p) => p.net_m.layout.output(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Recognition::Mf(p) => p.net_mu.layout.input(),
            Recognition::Vildsblk(p) => p.net_mu.layout.input(),
            Recognition::Vildsmult(p) => p.net_m.layout.input(),
        }
    }

    fn nets(&self) -> Vec<&Mlp> {
        match self {
            Recognition::Mf(p) => vec![&p.net_mu, &p.net_prec],
            Recognition::Vildsblk(p) => vec![&p.net_mu, &p.net_d, &p.net_b],
            Recognition::Vildsmult(p) => vec![&p.net_m, &p.net_c],
        }
    }

    pub fn num_params(&self) -> usize {
        let nets: usize = self.nets().iter().map(|m| m.num_params()).sum();
        match self {
            Recognition::Vildsmult(_) => {
                let n = self.latent_dim();
                nets + n * n + packed_len(n)
            }
            _ => nets,
        }
    }

    /// Flattened φ: the networks in declaration order, then for VILDSmult the
    /// prior `A` (row-major) and the packed Cholesky factor of `Q` with log
    /// diagonal. `α` is a fixed hyperparameter and is not included.
    pub fn params(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.nets().iter().flat_map(|m| m.params()).collect();
        if let Recognition::Vildsmult(p) = self {
            out.extend(mat_to_rows(&p.prior_a));
            let mut lq = cholesky_lower(&p.prior_q).expect("prior Q must be positive definite");
            for i in 0..lq.nrows() {
                lq[(i, i)] = lq[(i, i)].ln();
            }
            out.extend(pack_lower(&lq));
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} variational parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let n = self.latent_dim();
        let mut k = 0;
        let mut take = |net: &mut Mlp| -> Result<()> {
            let len = net.num_params();
            net.set_params(&flat[k..k + len])?;
            k += len;
            Ok(())
        };
        match self {
            Recognition::Mf(p) => {
                take(&mut p.net_mu)?;
                take(&mut p.net_prec)?;
            }
            Recognition::Vildsblk(p) => {
                take(&mut p.net_mu)?;
                take(&mut p.net_d)?;
                take(&mut p.net_b)?;
            }
            Recognition::Vildsmult(p) => {
                take(&mut p.net_m)?;
                take(&mut p.net_c)?;
                let rest = &flat[flat.len() - n * n - packed_len(n)..];
                p.prior_a = mat_from_rows(&rest[..n * n], n, n);
                let mut lq = unpack_lower(&rest[n * n..], n);
                for i in 0..n {
                    lq[(i, i)] = lq[(i, i)].exp();
                }
                p.prior_q = &lq * lq.transpose();
            }
        }
        Ok(())
    }

    pub fn with_params(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_params(flat)?;
        Ok(out)
    }

    /// Builds `q(z | x)` on the series `x`. With `record`, keeps what the
    /// backward pass needs.
    pub fn build(&self, x: &[Vec<f64>], record: bool) -> Result<GaussianPosterior> {
        let len = x.len();
        if len == 0 {
            return Err(Error::InvalidParams("empty series".into()));
        }
        let n = self.latent_dim();
        if let Some(row) = x.iter().find(|r| r.len() != self.obs_dim()) {
            return Err(Error::DimensionMismatch { expected: self.obs_dim(), got: row.len() });
        }
        match self {
            Recognition::Mf(p) => {
                let mu_tr = traces(&p.net_mu, x)?;
                let prec_tr = traces(&p.net_prec, x)?;
                let factors: Vec<Mat> =
                    prec_tr.iter().map(|tr| unpack_lower(tr.output(), n)).collect();
                let diag = factors
                    .iter()
                    .map(|l| l * l.transpose() + Mat::identity(n, n) * p.alpha)
                    .collect();
                let precision = SymBlockTriDiag { diag, lower: vec![Mat::zeros(n, n); len - 1] };
                let mu = mu_tr.iter().flat_map(|tr| tr.output().to_vec()).collect();
                let tape = record.then_some(Tape::Mf { mu: mu_tr, prec: prec_tr, factors });
                GaussianPosterior::assemble(PosteriorKind::Mf, mu, precision, tape)
            }
            Recognition::Vildsblk(p) => {
                let mu_tr = traces(&p.net_mu, x)?;
                let d_tr = traces(&p.net_d, x)?;
                let b_tr: Vec<Trace> = (1..len)
                    .map(|t| {
                        let mut input = x[t].clone();
                        input.extend_from_slice(&x[t - 1]);
                        p.net_b.forward_trace(&input)
                    })
                    .collect::<Result<_>>()?;
                let diag = d_tr.iter().map(|tr| unpack_sym(tr.output(), n)).collect();
                let lower = b_tr.iter().map(|tr| mat_from_rows(tr.output(), n, n)).collect();
                let precision = SymBlockTriDiag { diag, lower }.with_added_diagonal(p.alpha);
                let mu = mu_tr.iter().flat_map(|tr| tr.output().to_vec()).collect();
                let tape = record.then_some(Tape::Blk { mu: mu_tr, d: d_tr, b: b_tr });
                GaussianPosterior::assemble(PosteriorKind::Vildsblk, mu, precision, tape)
            }
            Recognition::Vildsmult(p) => {
                let m_tr = traces(&p.net_m, x)?;
                let c_tr = traces(&p.net_c, x)?;
                let (_, qi) = spd_inverse(&p.prior_q)?;
                let factors: Vec<Mat> = c_tr.iter().map(|tr| unpack_lower(tr.output(), n)).collect();
                let cinv: Vec<Mat> = factors
                    .iter()
                    .map(|l| l * l.transpose() + Mat::identity(n, n) * p.alpha)
                    .collect();
                let mut precision = prior_precision(&p.prior_a, &qi, len);
                for (d, c) in precision.diag.iter_mut().zip(&cinv) {
                    *d += c;
                }
                let means: Vec<Vector> =
                    m_tr.iter().map(|tr| Vector::from_column_slice(tr.output())).collect();
                let rhs: Vec<f64> = cinv
                    .iter()
                    .zip(&means)
                    .flat_map(|(c, m)| (c * m).iter().copied().collect::<Vec<_>>())
                    .collect();
                let factor = btd::cholesky(&precision)?;
                let mu = btd::solve(&factor, &btd::solve(&factor, &rhs, Side::Lower)?, Side::Upper)?;
                let tape = record.then_some(Tape::Mult { m: m_tr, c: c_tr, factors, cinv, means, qi });
                Ok(GaussianPosterior {
                    kind: Some(PosteriorKind::Vildsmult),
                    mu,
                    precision,
                    factor,
                    tape,
                })
            }
        }
    }
}

impl GaussianPosterior {
    fn assemble(kind: PosteriorKind, mu: Vec<f64>, precision: SymBlockTriDiag, tape: Option<Tape>) -> Result<Self> {
        let factor = btd::cholesky(&precision)?;
        Ok(Self { kind: Some(kind), mu, precision, factor, tape })
    }

    /// A posterior given directly by its mean and precision (no tape).
    pub fn from_moments(mu: Vec<f64>, precision: SymBlockTriDiag) -> Result<Self> {
        if mu.len() != precision.dim() {
            return Err(Error::DimensionMismatch { expected: precision.dim(), got: mu.len() });
        }
        let factor = btd::cholesky(&precision)?;
        Ok(Self { kind: None, mu, precision, factor, tape: None })
    }

    pub fn latent_dim(&self) -> usize {
        self.precision.block_size()
    }

    pub fn len(&self) -> usize {
        self.precision.num_blocks()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    /// `z = μ + R⁻ᵀ ε`
    pub fn sample(&self, eps: &[f64]) -> Result<Vec<f64>> {
        btd::sample(&self.mu, &self.factor, eps)
    }

    /// `(nT/2)(1 + log 2π) + ½ log det Σ`
    pub fn entropy(&self) -> f64 {
        let dim = self.precision.dim() as f64;
        0.5 * dim * (1.0 + (2.0 * std::f64::consts::PI).ln())
            + 0.5 * btd::logdet_sigma(&self.factor)
    }

    pub fn marginals(&self) -> Result<MarginalMoments> {
        btd::marginals(&self.mu, &self.factor)
    }

    pub fn zero_cotangent(&self) -> PosteriorCotangent {
        PosteriorCotangent {
            mu: vec![0.0; self.mu.len()],
            factor: LowerBlockBiDiag::zeros(self.len(), self.latent_dim()),
        }
    }

    /// Adds the contribution of `⟨grad_z, z⟩` for `z = μ + R⁻ᵀ ε`.
    pub fn accumulate_sample(&self, cot: &mut PosteriorCotangent, eps: &[f64], grad_z: &[f64]) -> Result<()> {
        let n = self.latent_dim();
        // d(R⁻ᵀε) = −R⁻ᵀ dRᵀ u  ⇒  R̄ = −u wᵀ with u = R⁻ᵀε, w = R⁻¹ g
        let u = btd::solve(&self.factor, eps, Side::Upper)?;
        let w = btd::solve(&self.factor, grad_z, Side::Lower)?;
        let blk = |v: &[f64], t: usize| Vector::from_column_slice(&v[t * n..(t + 1) * n]);
        for t in 0..self.len() {
            cot.factor.diag[t] -= tril(&(blk(&u, t) * blk(&w, t).transpose()));
            if t + 1 < self.len() {
                cot.factor.lower[t] -= blk(&u, t + 1) * blk(&w, t).transpose();
            }
        }
        for (a, g) in cot.mu.iter_mut().zip(grad_z) {
            *a += g;
        }
        Ok(())
    }

    /// Adds `weight · ∂H/∂R`, where `H = const − Σ log R_ii`.
    pub fn accumulate_entropy(&self, cot: &mut PosteriorCotangent, weight: f64) {
        for (bar, r) in cot.factor.diag.iter_mut().zip(&self.factor.diag) {
            for i in 0..r.nrows() {
                bar[(i, i)] -= weight / r[(i, i)];
            }
        }
    }

    /// Gradient with respect to the flattened φ (see [`Recognition::params`]).
    pub fn backward(&self, phi: &Recognition, cot: &PosteriorCotangent) -> Result<Vec<f64>> {
        let tape = self.tape.as_ref().ok_or(Error::TapeMissing)?;
        let n = self.latent_dim();
        let len = self.len();
        let mut pbar = btd::cholesky_vjp(&self.precision, &self.factor, &cot.factor);
        let mut grad = vec![0.0; phi.num_params()];
        let blk = |v: &[f64], t: usize| Vector::from_column_slice(&v[t * n..(t + 1) * n]);
        match (phi, tape) {
            (Recognition::Mf(p), Tape::Mf { mu, prec, factors }) => {
                let (g_mu, g_prec) = grad.split_at_mut(p.net_mu.num_params());
                for t in 0..len {
                    p.net_mu.backward_into(&mu[t], &cot.mu[t * n..(t + 1) * n], g_mu)?;
                    let lbar = tril(&(&pbar.diag[t] * &factors[t] * 2.0));
                    p.net_prec.backward_into(&prec[t], &pack_lower(&lbar), g_prec)?;
                }
            }
            (Recognition::Vildsblk(p), Tape::Blk { mu, d, b }) => {
                let (g_mu, rest) = grad.split_at_mut(p.net_mu.num_params());
                let (g_d, g_b) = rest.split_at_mut(p.net_d.num_params());
                for t in 0..len {
                    p.net_mu.backward_into(&mu[t], &cot.mu[t * n..(t + 1) * n], g_mu)?;
                    p.net_d.backward_into(&d[t], &unpack_sym_vjp(&pbar.diag[t]), g_d)?;
                    if t > 0 {
                        p.net_b.backward_into(&b[t - 1], &mat_to_rows(&pbar.lower[t - 1]), g_b)?;
                    }
                }
            }
            (Recognition::Vildsmult(p), Tape::Mult { m, c, factors, cinv, means, qi }) => {
                // μ = P⁻¹ c with c_t = 𝐂⁻¹_t M_t
                let cbar = btd::solve(
                    &self.factor,
                    &btd::solve(&self.factor, &cot.mu, Side::Lower)?,
                    Side::Upper,
                )?;
                for t in 0..len {
                    pbar.diag[t] -= sym(&(blk(&cbar, t) * blk(&self.mu, t).transpose()));
                    if t + 1 < len {
                        pbar.lower[t] -= blk(&cbar, t + 1) * blk(&self.mu, t).transpose()
                            + blk(&self.mu, t + 1) * blk(&cbar, t).transpose();
                    }
                }
                let (g_m, rest) = grad.split_at_mut(p.net_m.num_params());
                let (g_c, g_prior) = rest.split_at_mut(p.net_c.num_params());
                for t in 0..len {
                    let cb = blk(&cbar, t);
                    let m_bar = &cinv[t] * &cb;
                    p.net_m.backward_into(&m[t], m_bar.as_slice(), g_m)?;
                    let cinv_bar = &pbar.diag[t] + sym(&(&cb * means[t].transpose()));
                    let lbar = tril(&(cinv_bar * &factors[t] * 2.0));
                    p.net_c.backward_into(&c[t], &pack_lower(&lbar), g_c)?;
                }
                let a = &p.prior_a;
                let mut a_bar = Mat::zeros(n, n);
                let mut qi_bar = Mat::zeros(n, n);
                for t in 0..len {
                    qi_bar += &pbar.diag[t];
                    if t + 1 < len {
                        a_bar += qi * a * &pbar.diag[t] * 2.0;
                        qi_bar += a * &pbar.diag[t] * a.transpose();
                        a_bar -= qi * &pbar.lower[t];
                        qi_bar -= &pbar.lower[t] * a.transpose();
                    }
                }
                let q_bar = -(qi * sym(&qi_bar) * qi);
                let lq = cholesky_lower(&p.prior_q).unwrap();
                let mut lq_bar = tril(&(q_bar * &lq * 2.0));
                for i in 0..n {
                    lq_bar[(i, i)] *= lq[(i, i)];
                }
                g_prior[..n * n].copy_from_slice(&mat_to_rows(&a_bar));
                g_prior[n * n..].copy_from_slice(&pack_lower(&lq_bar));
            }
            _ => {
                return Err(Error::ShapeMismatch(
                    "parameters do not match the posterior's kind".into(),
                ))
            }
        }
        Ok(grad)
    }

    /// Gradient of `⟨grad_z, z(ε)⟩ + grad_entropy · H(q)` with respect to φ.
    pub fn posterior_backward(&self, phi: &Recognition, grad_z: &[f64], grad_entropy: f64, eps: &[f64]) -> Result<Vec<f64>> {
        if self.tape.is_none() {
            return Err(Error::TapeMissing);
        }
        let mut cot = self.zero_cotangent();
        self.accumulate_sample(&mut cot, eps, grad_z)?;
        self.accumulate_entropy(&mut cot, grad_entropy);
        self.backward(phi, &cot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const SHAPE: NetShape = NetShape { hidden: 4, layers: 2 };

    fn series(len: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| (0..m).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    }

    /// A net whose output is `bias` regardless of input.
    fn constant(net: &Mlp, bias: &[f64]) -> Mlp {
        let mut out = Mlp::zeros(net.layout.clone());
        out.layers.last_mut().unwrap().bias.copy_from_slice(bias);
        out
    }

    fn dense_cov(post: &GaussianPosterior) -> Mat {
        btd::materialize(&post.precision, 100).unwrap().try_inverse().unwrap()
    }

    #[test]
    fn meanfield_unit_precision() {
        let mut phi = Recognition::init(PosteriorKind::Mf, 3, 2, SHAPE, 1.0, 0).unwrap();
        if let Recognition::Mf(p) = &mut phi {
            p.net_prec = constant(&p.net_prec, &[0.0; 3]);
        }
        let post = phi.build(&series(5, 3, 1), false).unwrap();
        for r in &post.factor.diag {
            assert!((r - Mat::identity(2, 2)).abs().max() < 1e-15);
        }
        let expected = 5.0 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        assert!((post.entropy() - expected).abs() < 1e-12);
    }

    #[test]
    fn meanfield_single_step_matches_dense() {
        let phi = Recognition::init(PosteriorKind::Mf, 3, 2, SHAPE, 0.1, 4).unwrap();
        let x = series(1, 3, 2);
        let post = phi.build(&x, false).unwrap();
        let mm = post.marginals().unwrap();
        let cov = post.precision.diag[0].clone().try_inverse().unwrap();
        assert!((&mm.var[0] - &cov).abs().max() < 1e-12);
        if let Recognition::Mf(p) = &phi {
            assert_eq!(post.mu, p.net_mu.forward(&x[0]).unwrap());
        }
    }

    #[test]
    fn meanfield_cross_blocks_vanish() {
        let phi = Recognition::init(PosteriorKind::Mf, 3, 2, SHAPE, 0.1, 9).unwrap();
        let post = phi.build(&series(4, 3, 3), false).unwrap();
        for c in post.marginals().unwrap().cross {
            assert_eq!(c.abs().max(), 0.0);
        }
    }

    #[test]
    fn blk_zero_nets_give_standard_normal() {
        let mut phi = Recognition::init(PosteriorKind::Vildsblk, 2, 2, SHAPE, 1.0, 0).unwrap();
        if let Recognition::Vildsblk(p) = &mut phi {
            p.net_mu = Mlp::zeros(p.net_mu.layout.clone());
            p.net_d = Mlp::zeros(p.net_d.layout.clone());
            p.net_b = Mlp::zeros(p.net_b.layout.clone());
        }
        let post = phi.build(&series(3, 2, 0), false).unwrap();
        assert!(post.mu.iter().all(|&v| v == 0.0));
        let eps: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        assert_eq!(post.sample(&eps).unwrap(), eps);
    }

    #[test]
    fn blk_constant_series_is_homogeneous() {
        let phi = Recognition::init(PosteriorKind::Vildsblk, 2, 2, SHAPE, 0.1, 5).unwrap();
        let x = vec![vec![0.3, -1.2]; 5];
        let post = phi.build(&x, false).unwrap();
        for t in 1..5 {
            assert_eq!(post.precision.diag[t], post.precision.diag[0]);
        }
        for t in 1..4 {
            assert_eq!(post.precision.lower[t], post.precision.lower[0]);
        }
    }

    #[test]
    fn blk_single_step_skips_pair_network() {
        let phi = Recognition::init(PosteriorKind::Vildsblk, 2, 2, SHAPE, 0.1, 5).unwrap();
        let post = phi.build(&series(1, 2, 0), false).unwrap();
        assert!(post.precision.lower.is_empty());
    }

    fn mult_with(alpha: f64, m_bar: &[f64]) -> Recognition {
        let mut phi = Recognition::init(PosteriorKind::Vildsmult, 2, 2, SHAPE, alpha, 0).unwrap();
        if let Recognition::Vildsmult(p) = &mut phi {
            p.net_m = constant(&p.net_m, m_bar);
            p.net_c = constant(&p.net_c, &[0.0; 3]);
            p.prior_a = Mat::zeros(2, 2);
        }
        phi
    }

    #[test]
    fn mult_product_of_isotropic_gaussians() {
        let post = mult_with(1.0, &[1.0, -3.0]).build(&series(4, 2, 0), false).unwrap();
        for t in 0..4 {
            assert!((post.mu[2 * t] - 0.5).abs() < 1e-12);
            assert!((post.mu[2 * t + 1] + 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn mult_limits() {
        let weak = mult_with(1e-9, &[1.0, -3.0]).build(&series(4, 2, 0), false).unwrap();
        assert!(weak.mu.iter().all(|v| v.abs() < 1e-8));
        let mut strong = mult_with(1e6, &[1.0, -3.0]);
        if let Recognition::Vildsmult(p) = &mut strong {
            p.prior_a = Mat::identity(2, 2) * 0.9;
        }
        let strong = strong.build(&series(4, 2, 0), false).unwrap();
        for t in 0..4 {
            assert!((strong.mu[2 * t] - 1.0).abs() < 1e-3);
            assert!((strong.mu[2 * t + 1] + 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn mult_matches_dense_product_of_gaussians() {
        let mut phi = Recognition::init(PosteriorKind::Vildsmult, 3, 2, SHAPE, 0.1, 11).unwrap();
        if let Recognition::Vildsmult(p) = &mut phi {
            p.prior_a = mat_from_rows(&[0.8, 0.2, -0.3, 0.7], 2, 2);
            p.prior_q = mat_from_rows(&[0.5, 0.1, 0.1, 0.3], 2, 2);
        }
        let x = series(4, 3, 6);
        let post = phi.build(&x, false).unwrap();
        let Recognition::Vildsmult(p) = &phi else { unreachable!() };
        // 𝐃⁻¹ = (I−𝐀)ᵀ 𝐐⁻¹ (I−𝐀) on the full 8×8 matrices
        let (n, len) = (2, 4);
        let mut shift = Mat::identity(n * len, n * len);
        for t in 1..len {
            shift.view_mut((t * n, (t - 1) * n), (n, n)).copy_from(&(-&p.prior_a));
        }
        let qi_big = {
            let qi = p.prior_q.clone().try_inverse().unwrap();
            let mut m = Mat::zeros(n * len, n * len);
            for t in 0..len {
                m.view_mut((t * n, t * n), (n, n)).copy_from(&qi);
            }
            m
        };
        let d_inv = shift.transpose() * qi_big * &shift;
        let mut c_inv = Mat::zeros(n * len, n * len);
        let mut m_all = Vector::zeros(n * len);
        for t in 0..len {
            let l = unpack_lower(&p.net_c.forward(&x[t]).unwrap(), n);
            c_inv
                .view_mut((t * n, t * n), (n, n))
                .copy_from(&(&l * l.transpose() + Mat::identity(n, n) * 0.1));
            m_all.rows_mut(t * n, n).copy_from_slice(&p.net_m.forward(&x[t]).unwrap());
        }
        let sigma = (d_inv + &c_inv).try_inverse().unwrap();
        let mu = &sigma * &c_inv * m_all;
        for i in 0..n * len {
            assert!((post.mu[i] - mu[i]).abs() < 1e-8);
        }
        assert!((dense_cov(&post) - sigma).abs().max() < 1e-8);
    }

    #[test]
    fn entropy_matches_dense_for_every_kind() {
        for kind in [PosteriorKind::Mf, PosteriorKind::Vildsblk, PosteriorKind::Vildsmult] {
            let phi = Recognition::init(kind, 3, 2, SHAPE, 0.5, 2).unwrap();
            let post = phi.build(&series(4, 3, 8), false).unwrap();
            let cov = dense_cov(&post);
            let logdet = cov.clone().cholesky().unwrap().l().diagonal().map(f64::ln).sum() * 2.0;
            let dense = 4.0 * (1.0 + (2.0 * std::f64::consts::PI).ln()) + 0.5 * logdet;
            assert!((post.entropy() - dense).abs() < 1e-9, "{kind:?}");
        }
    }

    #[test]
    fn scalar_entropy_gradient() {
        // precision p = b² + α with b the final bias of the precision net
        let alpha = 0.1;
        let b = (4.0f64 - alpha).sqrt();
        let mut phi = Recognition::init(PosteriorKind::Mf, 1, 1, SHAPE, alpha, 0).unwrap();
        if let Recognition::Mf(p) = &mut phi {
            p.net_prec = constant(&p.net_prec, &[b]);
        }
        let post = phi.build(&[vec![0.7]], true).unwrap();
        let expected = 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()) + 0.5 * 0.25f64.ln();
        assert!((post.entropy() - expected).abs() < 1e-12);
        let grad = post.posterior_backward(&phi, &[0.0], 1.0, &[0.3]).unwrap();
        let dh_dp = grad.last().unwrap() / (2.0 * b);
        assert!((dh_dp + 0.125).abs() < 1e-12);
    }

    #[test]
    fn zero_cotangents_give_zero_gradient() {
        for kind in [PosteriorKind::Mf, PosteriorKind::Vildsblk, PosteriorKind::Vildsmult] {
            let phi = Recognition::init(kind, 3, 2, SHAPE, 0.1, 1).unwrap();
            let post = phi.build(&series(3, 3, 1), true).unwrap();
            let grad = post.posterior_backward(&phi, &[0.0; 6], 0.0, &[1.0; 6]).unwrap();
            assert!(grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn meanfield_is_blk_without_coupling() {
        let mf = Recognition::init(PosteriorKind::Mf, 3, 2, SHAPE, 0.1, 3).unwrap();
        let x = series(4, 3, 4);
        let mf_post = mf.build(&x, false).unwrap();
        let Recognition::Mf(p) = &mf else { unreachable!() };
        // D_t = L_t L_tᵀ, packed symmetric, from a net that reads off x_t exactly
        let mut blk = Recognition::init(PosteriorKind::Vildsblk, 3, 2, SHAPE, 0.1, 3).unwrap();
        let Recognition::Vildsblk(b) = &mut blk else { unreachable!() };
        b.net_mu = p.net_mu.clone();
        b.net_b = Mlp::zeros(b.net_b.layout.clone());
        let blk_post = {
            let diag: Vec<Mat> = x
                .iter()
                .map(|xt| {
                    let l = unpack_lower(&p.net_prec.forward(xt).unwrap(), 2);
                    &l * l.transpose()
                })
                .collect();
            let b_post = blk.build(&x, false).unwrap();
            assert!(b_post.precision.lower.iter().all(|m| m.abs().max() == 0.0));
            let prec = SymBlockTriDiag { diag, lower: b_post.precision.lower.clone() }.with_added_diagonal(0.1);
            GaussianPosterior::from_moments(b_post.mu, prec).unwrap()
        };
        let (a, b) = (mf_post.marginals().unwrap(), blk_post.marginals().unwrap());
        for t in 0..4 {
            assert!((&a.var[t] - &b.var[t]).abs().max() < 1e-9);
            assert!((&a.means[t] - &b.means[t]).abs().max() < 1e-9);
        }
    }

    #[test]
    fn backward_needs_tape() {
        let phi = Recognition::init(PosteriorKind::Vildsblk, 2, 2, SHAPE, 0.1, 1).unwrap();
        let post = phi.build(&series(3, 2, 1), false).unwrap();
        assert!(matches!(post.posterior_backward(&phi, &[0.0; 6], 1.0, &[0.0; 6]), Err(Error::TapeMissing)));
    }

    #[test]
    fn params_round_trip() {
        for kind in [PosteriorKind::Mf, PosteriorKind::Vildsblk, PosteriorKind::Vildsmult] {
            let phi = Recognition::init(kind, 3, 2, SHAPE, 0.1, 1).unwrap();
            let v = phi.params();
            assert_eq!(v.len(), phi.num_params());
            let back = phi.with_params(&v).unwrap().params();
            for (a, b) in v.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
