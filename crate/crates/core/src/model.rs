//! Generative model families `p_θ(x, z)`: simulation, joint log-density and
//! its gradients with respect to the latents and the parameters.
//!
//! All three families share linear-Gaussian scaffolding:
//!
//! * `z_1 ~ N(z1_mean, z1_cov)`
//! * `z_t = f(z_{t-1}) + e_t`, `e_t ~ N(0, Q)`, with `f(z) = A z` for the
//!   linear families and `f(z) = a z + amp·cos(freq·z)` for [`Family::Nonlin`]
//! * Gaussian observations `x_t ~ N(C z_t, diag(obs_var))` (LDS, Nonlin) or
//!   Poisson counts `x_{k,t} ~ Poisson(exp(C z_t + d)_k)` (PLDS)

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dense::{
    cholesky_lower, mat_from_rows, mat_to_rows, pack_lower, packed_len, serde_rows, tril,
    unpack_lower, Mat, Vector,
};
use crate::error::{Error, Result};

/// Steps discarded before recording a nonlinear trajectory started at zero.
pub const NONLIN_BURN_IN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Linear dynamics, linear-Gaussian observations.
    Lds,
    /// Linear dynamics, Poisson observations with exponential link.
    Plds,
    /// One-dimensional nonlinear dynamics with linear-Gaussian observations.
    Nonlin,
}

/// Extra terms of the nonlinear transition `a z + amp·cos(freq·z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineDrift {
    pub amp: f64,
    pub freq: f64,
}

impl Default for CosineDrift {
    fn default() -> Self {
        Self { amp: 5.0, freq: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeParams {
    pub family: Family,
    /// Dynamics matrix (n×n). For `Nonlin` this is the linear coefficient `a`.
    #[serde(with = "serde_rows")]
    pub a: Mat,
    /// Innovation covariance (n×n, SPD).
    #[serde(with = "serde_rows")]
    pub q: Mat,
    pub z1_mean: Vec<f64>,
    #[serde(with = "serde_rows")]
    pub z1_cov: Mat,
    /// Loading matrix (m×n).
    #[serde(with = "serde_rows")]
    pub c: Mat,
    /// Log-rate bias, PLDS only.
    #[serde(default)]
    pub d: Vec<f64>,
    /// Observation noise variances, Gaussian families only.
    #[serde(default)]
    pub obs_var: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<CosineDrift>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `T` rows of `m` observations.
    pub x: Vec<Vec<f64>>,
    /// `T` rows of `n` latents, when simulated.
    #[serde(default)]
    pub z_true: Option<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>) -> Self {
        Self { x, z_true: None }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }
}

/// Value and gradients of `log p_θ(x, z)`.
#[derive(Debug, Clone)]
pub struct JointEval {
    pub value: f64,
    pub grad_z: Vec<f64>,
    /// Gradient in the unconstrained θ coordinates, when requested.
    pub grad_theta: Option<Vec<f64>>,
}

/// `0.95 U diag(R(θ_1), R(θ_2), ..) Uᵀ` for a random orthonormal basis `U`
/// and planar rotations by `θ_k ∈ [0.05, 0.3]` per step, so latents circle
/// slowly (an odd leftover direction just decays).
fn random_slow_rotation(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let g = Mat::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let u = g.qr().q();
    let mut r = Mat::identity(n, n);
    for k in 0..n / 2 {
        let theta = 0.05 + 0.25 * rand::Rng::random::<f64>(rng);
        let (sin, cos) = theta.sin_cos();
        let i = 2 * k;
        r[(i, i)] = cos;
        r[(i, i + 1)] = -sin;
        r[(i + 1, i)] = sin;
        r[(i + 1, i + 1)] = cos;
    }
    &u * r * u.transpose() * 0.95
}

fn log_det_spd(l: &Mat) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

impl GenerativeParams {
    /// Random LDS: slowly rotating dynamics with radius 0.95, `Q = 0.1 I`,
    /// standard-normal loadings and unit-half observation noise.
    pub fn lds_random(n: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_slow_rotation(&mut rng, n);
        let c = Mat::from_fn(m, n, |_, _| StandardNormal.sample(&mut rng));
        Self {
            family: Family::Lds,
            a,
            q: Mat::identity(n, n) * 0.1,
            z1_mean: vec![0.0; n],
            z1_cov: Mat::identity(n, n),
            c,
            d: vec![],
            obs_var: vec![0.5; m],
            drift: None,
        }
    }

    /// Random PLDS with baseline rates between 0.5 and 3 counts per bin.
    pub fn plds_random(n: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_slow_rotation(&mut rng, n);
        let c = Mat::from_fn(m, n, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            0.5 * g
        });
        let d = (0..m)
            .map(|_| {
                let u: f64 = rand::Rng::random(&mut rng);
                (0.5f64).ln() + u * (6.0f64).ln()
            })
            .collect();
        Self {
            family: Family::Plds,
            a,
            q: Mat::identity(n, n) * 0.1,
            z1_mean: vec![0.0; n],
            z1_cov: Mat::identity(n, n),
            c,
            d,
            obs_var: vec![],
            drift: None,
        }
    }

    /// `z_t = −½ z_{t−1} + 5 cos(½ z_{t−1}) + ½ ε_t`, `x_t = ½ z_t + ½ η_t`.
    ///
    /// The initial-state density used by the joint is `N(0, 10)`, wide enough to
    /// cover the stationary spread of the chain.
    pub fn nonlin_default() -> Self {
        Self {
            family: Family::Nonlin,
            a: Mat::from_element(1, 1, -0.5),
            q: Mat::from_element(1, 1, 0.25),
            z1_mean: vec![0.0],
            z1_cov: Mat::from_element(1, 1, 10.0),
            c: Mat::from_element(1, 1, 0.5),
            d: vec![],
            obs_var: vec![0.25],
            drift: Some(CosineDrift::default()),
        }
    }

    /// Starting point for learning θ from data alone. Loadings come from the
    /// top `n` principal directions of the observations (of `log(x + ½)` for
    /// counts), dynamics start at `A = 0.9 I` with unit stationary variance.
    /// The nonlinear family has no learnable θ and returns its defaults.
    pub fn init_from_data(family: Family, x: &[Vec<f64>], n: usize) -> Result<Self> {
        if family == Family::Nonlin {
            return Ok(Self::nonlin_default());
        }
        let len = x.len();
        let m = x.first().map_or(0, |r| r.len());
        if len < 2 || m == 0 || n == 0 {
            return Err(Error::InvalidParams("need at least two observations and n, m > 0".into()));
        }
        if let Some(r) = x.iter().find(|r| r.len() != m) {
            return Err(Error::DimensionMismatch { expected: m, got: r.len() });
        }
        let plds = family == Family::Plds;
        let y = Mat::from_fn(len, m, |t, j| if plds { (x[t][j] + 0.5).ln() } else { x[t][j] });
        let mean = y.row_mean();
        let centered = Mat::from_fn(len, m, |t, j| y[(t, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (len - 1) as f64;
        let eig = cov.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let residual = if m > n {
            order[n..].iter().map(|&i| eig.eigenvalues[i].max(0.0)).sum::<f64>() / (m - n) as f64
        } else {
            0.1 * cov.diagonal().mean()
        };
        let residual = residual.max(1e-3);
        let mut c = Mat::zeros(m, n);
        for (k, &i) in order.iter().take(n).enumerate() {
            let scale = (eig.eigenvalues[i] - if plds { 0.0 } else { residual }).max(1e-3).sqrt();
            c.set_column(k, &(eig.eigenvectors.column(i) * scale));
        }
        let (d, obs_var) = if plds {
            let d = (0..m)
                .map(|j| (x.iter().map(|r| r[j]).sum::<f64>() / len as f64 + 1e-2).ln())
                .collect();
            (d, vec![])
        } else {
            (vec![], vec![residual; m])
        };
        let out = Self {
            family,
            a: Mat::identity(n, n) * 0.9,
            q: Mat::identity(n, n) * 0.19,
            z1_mean: vec![0.0; n],
            z1_cov: Mat::identity(n, n),
            c,
            d,
            obs_var,
            drift: None,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn latent_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.latent_dim();
        let m = self.obs_dim();
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if n == 0 || m == 0 {
            return bad("latent and observation dimensions must be positive".into());
        }
        if self.a.shape() != (n, n) || self.q.shape() != (n, n) || self.z1_cov.shape() != (n, n) {
            return bad(format!("A, Q and z1_cov must be {n}x{n}"));
        }
        if self.c.ncols() != n || self.z1_mean.len() != n {
            return bad(format!("C must have {n} columns and z1_mean length {n}"));
        }
        for (name, s) in [("Q", &self.q), ("z1_cov", &self.z1_cov)] {
            if (s - s.transpose()).amax() > 1e-10 * s.amax().max(1.0) {
                return bad(format!("{name} is not symmetric"));
            }
            if cholesky_lower(s).is_none() {
                return bad(format!("{name} is not positive definite"));
            }
        }
        match self.family {
            Family::Plds => {
                if self.d.len() != m {
                    return bad(format!("d must have length {m}"));
                }
            }
            Family::Lds | Family::Nonlin => {
                if self.obs_var.len() != m || self.obs_var.iter().any(|&v| !(v > 0.0)) {
                    return bad(format!("obs_var must be {m} positive values"));
                }
            }
        }
        if self.family == Family::Nonlin {
            if n != 1 || m != 1 {
                return bad("the nonlinear family is one-dimensional".into());
            }
            if self.drift.is_none() {
                return bad("the nonlinear family needs drift constants".into());
            }
        }
        Ok(())
    }

    /// Transition mean and its derivative, one-dimensional nonlinear case.
    fn drift_1d(&self, z: f64) -> (f64, f64) {
        let CosineDrift { amp, freq } = self.drift.unwrap_or_default();
        let a = self.a[(0, 0)];
        (a * z + amp * (freq * z).cos(), a - amp * freq * (freq * z).sin())
    }

    /// Draws a dataset by ancestral sampling. Deterministic given `seed`.
    pub fn simulate(&self, len: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        if len == 0 {
            return Err(Error::InvalidParams("series length must be positive".into()));
        }
        let n = self.latent_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = |rng: &mut ChaCha8Rng, k: usize| -> Vector {
            Vector::from_fn(k, |_, _| StandardNormal.sample(rng))
        };
        let lq = cholesky_lower(&self.q).unwrap();
        let mut zs: Vec<Vector> = Vec::with_capacity(len);
        match self.family {
            Family::Nonlin => {
                let mut z = 0.0;
                for step in 0..NONLIN_BURN_IN + len {
                    if step > 0 {
                        z = self.drift_1d(z).0 + lq[(0, 0)] * normal(&mut rng, 1)[0];
                    }
                    if step >= NONLIN_BURN_IN {
                        zs.push(Vector::from_element(1, z));
                    }
                }
            }
            Family::Lds | Family::Plds => {
                let l1 = cholesky_lower(&self.z1_cov).unwrap();
                let mut z = Vector::from_column_slice(&self.z1_mean) + &l1 * normal(&mut rng, n);
                zs.push(z.clone());
                for _ in 1..len {
                    z = &self.a * &z + &lq * normal(&mut rng, n);
                    zs.push(z.clone());
                }
            }
        }
        let m = self.obs_dim();
        let mut x = Vec::with_capacity(len);
        for z in &zs {
            let mean = &self.c * z;
            let row: Vec<f64> = match self.family {
                Family::Plds => (0..m)
                    .map(|k| {
                        let rate = (mean[k] + self.d[k]).exp();
                        if rate > 0.0 {
                            Poisson::new(rate).unwrap().sample(&mut rng)
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                Family::Lds | Family::Nonlin => {
                    let eta = normal(&mut rng, m);
                    (0..m).map(|k| mean[k] + self.obs_var[k].sqrt() * eta[k]).collect()
                }
            };
            x.push(row);
        }
        let z_true = zs.iter().map(|z| z.iter().copied().collect()).collect();
        Ok(Dataset { x, z_true: Some(z_true) })
    }

    /// Number of learnable coordinates (zero for the nonlinear family).
    pub fn num_free(&self) -> usize {
        let n = self.latent_dim();
        let m = self.obs_dim();
        match self.family {
            Family::Lds => n * n + packed_len(n) + m * n + m,
            Family::Plds => n * n + packed_len(n) + m * n + m,
            Family::Nonlin => 0,
        }
    }

    /// Unconstrained coordinates: `A` (row-major), the lower Cholesky factor
    /// of `Q` packed row-wise with log diagonal, `C` (row-major), then `d`
    /// (PLDS) or `log obs_var` (LDS). Empty for the nonlinear family.
    pub fn free_params(&self) -> Vec<f64> {
        if self.family == Family::Nonlin {
            return vec![];
        }
        let mut out = mat_to_rows(&self.a);
        let mut lq = cholesky_lower(&self.q).expect("Q must be positive definite");
        for i in 0..lq.nrows() {
            lq[(i, i)] = lq[(i, i)].ln();
        }
        out.extend(pack_lower(&lq));
        out.extend(mat_to_rows(&self.c));
        match self.family {
            Family::Plds => out.extend(&self.d),
            _ => out.extend(self.obs_var.iter().map(|v| v.ln())),
        }
        out
    }

    pub fn with_free_params(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.num_free() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} model parameters, got {}",
                self.num_free(),
                v.len()
            )));
        }
        let mut out = self.clone();
        if self.family == Family::Nonlin {
            return Ok(out);
        }
        let n = self.latent_dim();
        let m = self.obs_dim();
        let mut k = 0;
        out.a = mat_from_rows(&v[k..k + n * n], n, n);
        k += n * n;
        let mut lq = unpack_lower(&v[k..k + packed_len(n)], n);
        for i in 0..n {
            lq[(i, i)] = lq[(i, i)].exp();
        }
        out.q = &lq * lq.transpose();
        k += packed_len(n);
        out.c = mat_from_rows(&v[k..k + m * n], m, n);
        k += m * n;
        match self.family {
            Family::Plds => out.d = v[k..k + m].to_vec(),
            _ => out.obs_var = v[k..k + m].iter().map(|x| x.exp()).collect(),
        }
        Ok(out)
    }

    fn check_shapes(&self, x: &[Vec<f64>], z: &[f64]) -> Result<()> {
        let n = self.latent_dim();
        let m = self.obs_dim();
        if x.is_empty() {
            return Err(Error::InvalidParams("empty series".into()));
        }
        if z.len() != n * x.len() {
            return Err(Error::DimensionMismatch { expected: n * x.len(), got: z.len() });
        }
        if let Some(row) = x.iter().find(|r| r.len() != m) {
            return Err(Error::DimensionMismatch { expected: m, got: row.len() });
        }
        if self.family == Family::Plds {
            for (t, row) in x.iter().enumerate() {
                if let Some(k) = row.iter().position(|&v| v < 0.0) {
                    return Err(Error::NegativeCount { t, k, value: row[k] });
                }
            }
        }
        Ok(())
    }

    pub fn log_joint(&self, x: &[Vec<f64>], z: &[f64]) -> Result<f64> {
        Ok(self.eval(x, z, false)?.value)
    }

    pub fn log_joint_grad_z(&self, x: &[Vec<f64>], z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(x, z, false)?.grad_z)
    }

    pub fn log_joint_grad_theta(&self, x: &[Vec<f64>], z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(x, z, true)?.grad_theta.unwrap())
    }

    /// `log p_θ(x, z)` with its gradients in one pass.
    pub fn eval(&self, x: &[Vec<f64>], z: &[f64], want_theta: bool) -> Result<JointEval> {
        self.check_shapes(x, z)?;
        let n = self.latent_dim();
        let m = self.obs_dim();
        let len = x.len();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let zt = |t: usize| Vector::from_column_slice(&z[t * n..(t + 1) * n]);
        let mut value = 0.0;
        let mut grad_z = vec![0.0; z.len()];
        let add_gz = |g: &mut Vec<f64>, t: usize, v: &Vector| {
            for i in 0..n {
                g[t * n + i] += v[i];
            }
        };

        // initial state
        let l1 = cholesky_lower(&self.z1_cov)
            .ok_or_else(|| Error::InvalidParams("z1_cov is not positive definite".into()))?;
        let r1 = zt(0) - Vector::from_column_slice(&self.z1_mean);
        let w1 = l1.solve_lower_triangular(&r1).unwrap();
        value += -0.5 * w1.norm_squared() - 0.5 * (n as f64 * ln2pi + log_det_spd(&l1));
        let g1 = -l1.tr_solve_lower_triangular(&w1).unwrap();
        add_gz(&mut grad_z, 0, &g1);

        // transitions
        let lq = cholesky_lower(&self.q)
            .ok_or_else(|| Error::InvalidParams("Q is not positive definite".into()))?;
        let q_logdet = log_det_spd(&lq);
        let mut a_bar = Mat::zeros(n, n);
        let mut scatter = Mat::zeros(n, n);
        for t in 1..len {
            let prev = zt(t - 1);
            let (pred, jac) = match self.family {
                Family::Nonlin => {
                    let (f, df) = self.drift_1d(prev[0]);
                    (Vector::from_element(1, f), Mat::from_element(1, 1, df))
                }
                _ => (&self.a * &prev, self.a.clone()),
            };
            let e = zt(t) - pred;
            let w = lq.solve_lower_triangular(&e).unwrap();
            value += -0.5 * w.norm_squared() - 0.5 * (n as f64 * ln2pi + q_logdet);
            let qe = lq.tr_solve_lower_triangular(&w).unwrap();
            add_gz(&mut grad_z, t, &(-&qe));
            add_gz(&mut grad_z, t - 1, &jac.tr_mul(&qe));
            if want_theta {
                a_bar += &qe * prev.transpose();
                scatter += &e * e.transpose();
            }
        }

        // observations
        let mut c_bar = Mat::zeros(m, n);
        let mut tail_bar = vec![0.0; m];
        for (t, row) in x.iter().enumerate() {
            let zv = zt(t);
            let mean = &self.c * &zv;
            let resid = match self.family {
                Family::Plds => {
                    let mut s = Vector::zeros(m);
                    for k in 0..m {
                        let r = mean[k] + self.d[k];
                        let rate = r.exp();
                        value += row[k] * r - rate - libm::lgamma(row[k] + 1.0);
                        s[k] = row[k] - rate;
                        tail_bar[k] += s[k];
                    }
                    s
                }
                Family::Lds | Family::Nonlin => {
                    let mut s = Vector::zeros(m);
                    for k in 0..m {
                        let v = self.obs_var[k];
                        let res = row[k] - mean[k];
                        value += -0.5 * res * res / v - 0.5 * (ln2pi + v.ln());
                        s[k] = res / v;
                        tail_bar[k] += 0.5 * res * res / v - 0.5;
                    }
                    s
                }
            };
            add_gz(&mut grad_z, t, &self.c.tr_mul(&resid));
            if want_theta {
                c_bar += &resid * zv.transpose();
            }
        }

        let grad_theta = if want_theta && self.family != Family::Nonlin {
            let qi = lq
                .tr_solve_lower_triangular(&lq.solve_lower_triangular(&Mat::identity(n, n)).unwrap())
                .unwrap();
            let q_bar = (&qi * &scatter * &qi) * 0.5 - &qi * (0.5 * (len - 1) as f64);
            let mut lq_bar = tril(&((&q_bar + q_bar.transpose()) * &lq));
            for i in 0..n {
                lq_bar[(i, i)] *= lq[(i, i)];
            }
            let mut g = mat_to_rows(&a_bar);
            g.extend(pack_lower(&lq_bar));
            g.extend(mat_to_rows(&c_bar));
            g.extend(tail_bar);
            Some(g)
        } else if want_theta {
            Some(vec![])
        } else {
            None
        };
        Ok(JointEval { value, grad_z, grad_theta })
    }
}

/// `log Poisson(x; λ)` including the `−log x!` term.
pub fn poisson_log_pmf(x: f64, rate: f64) -> f64 {
    x * rate.ln() - rate - libm::lgamma(x + 1.0)
}
