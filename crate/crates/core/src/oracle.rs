//! Exact reference computations for linear-Gaussian models and a
//! finite-difference gradient checker.

use crate::btd::DEFAULT_DENSE_CAP;
use crate::dense::{cholesky_lower, Mat, Vector};
use crate::error::{Error, Result};
use crate::model::{Family, GenerativeParams};

/// Exact smoothing moments and log evidence of an LDS.
#[derive(Debug, Clone)]
pub struct ExactMoments {
    pub means: Vec<Vector>,
    pub var: Vec<Mat>,
    /// cov(z_t, z_{t+1})
    pub cross: Vec<Mat>,
    pub log_evidence: f64,
}

/// Forward-pass output of the Kalman filter.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub pred_means: Vec<Vector>,
    pub pred_var: Vec<Mat>,
    pub means: Vec<Vector>,
    pub var: Vec<Mat>,
    pub log_evidence: f64,
}

fn require_lds(theta: &GenerativeParams) -> Result<()> {
    if theta.family != Family::Lds {
        return Err(Error::IncompatibleOracle(format!(
            "exact moments exist only for the lds family, not {:?}",
            theta.family
        )));
    }
    theta.validate()
}

fn spd_inv(a: &Mat) -> Result<Mat> {
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::InvalidParams("matrix is not positive definite".into()))
}

/// `log N(v; 0, S)`
fn gaussian_logpdf(v: &Vector, s: &Mat) -> Result<f64> {
    let l = cholesky_lower(s)
        .ok_or_else(|| Error::InvalidParams("covariance is not positive definite".into()))?;
    let w = l.solve_lower_triangular(v).unwrap();
    let logdet: f64 = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok(-0.5 * (w.norm_squared() + logdet + v.len() as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Kalman filter with Joseph-form covariance updates; the log evidence is
/// accumulated from the one-step predictive densities.
pub fn kalman_filter(theta: &GenerativeParams, x: &[Vec<f64>]) -> Result<FilterOutput> {
    require_lds(theta)?;
    let n = theta.latent_dim();
    let m = theta.obs_dim();
    if let Some(row) = x.iter().find(|r| r.len() != m) {
        return Err(Error::DimensionMismatch { expected: m, got: row.len() });
    }
    let r = Mat::from_diagonal(&Vector::from_column_slice(&theta.obs_var));
    let c = &theta.c;
    let eye = Mat::identity(n, n);
    let mut out = FilterOutput {
        pred_means: vec![],
        pred_var: vec![],
        means: vec![],
        var: vec![],
        log_evidence: 0.0,
    };
    let mut m_pred = Vector::from_column_slice(&theta.z1_mean);
    let mut p_pred = theta.z1_cov.clone();
    for (t, row) in x.iter().enumerate() {
        if t > 0 {
            let (mf, pf) = (out.means.last().unwrap(), out.var.last().unwrap());
            m_pred = &theta.a * mf;
            p_pred = &theta.a * pf * theta.a.transpose() + &theta.q;
        }
        let s = c * &p_pred * c.transpose() + &r;
        let s_inv = spd_inv(&s)?;
        let gain = &p_pred * c.transpose() * s_inv;
        let innov = Vector::from_column_slice(row) - c * &m_pred;
        out.log_evidence += gaussian_logpdf(&innov, &s)?;
        let m_f = &m_pred + &gain * &innov;
        let ikc = &eye - &gain * c;
        let p_f = &ikc * &p_pred * ikc.transpose() + &gain * &r * gain.transpose();
        out.pred_means.push(m_pred.clone());
        out.pred_var.push(p_pred.clone());
        out.means.push(m_f);
        out.var.push((&p_f + p_f.transpose()) * 0.5);
    }
    Ok(out)
}

/// Forward filter followed by the Rauch–Tung–Striebel backward pass.
pub fn kalman_smoother(theta: &GenerativeParams, x: &[Vec<f64>]) -> Result<ExactMoments> {
    let f = kalman_filter(theta, x)?;
    let len = x.len();
    let n = theta.latent_dim();
    let mut means = f.means.clone();
    let mut var = f.var.clone();
    let mut cross = vec![Mat::zeros(n, n); len.saturating_sub(1)];
    for t in (0..len.saturating_sub(1)).rev() {
        let gain = &f.var[t] * theta.a.transpose() * spd_inv(&f.pred_var[t + 1])?;
        means[t] = &f.means[t] + &gain * (&means[t + 1] - &f.pred_means[t + 1]);
        let v = &f.var[t] + &gain * (&var[t + 1] - &f.pred_var[t + 1]) * gain.transpose();
        var[t] = (&v + v.transpose()) * 0.5;
        cross[t] = &gain * &var[t + 1];
    }
    Ok(ExactMoments { means, var, cross, log_evidence: f.log_evidence })
}

/// Dense posterior of an LDS: materializes the `nT×nT` precision and the
/// `mT×mT` marginal covariance of `x`. Both sizes are capped at
/// [`DEFAULT_DENSE_CAP`].
pub fn dense_gaussian_posterior(theta: &GenerativeParams, x: &[Vec<f64>]) -> Result<ExactMoments> {
    let (post, _) = dense_posterior_precision(theta, x)?;
    Ok(post)
}

/// As [`dense_gaussian_posterior`], also returning the dense posterior precision.
pub fn dense_posterior_precision(theta: &GenerativeParams, x: &[Vec<f64>]) -> Result<(ExactMoments, Mat)> {
    require_lds(theta)?;
    let n = theta.latent_dim();
    let m = theta.obs_dim();
    let len = x.len();
    let dim = n * len;
    for size in [dim, m * len] {
        if size > DEFAULT_DENSE_CAP {
            return Err(Error::CapExceeded { size, cap: DEFAULT_DENSE_CAP });
        }
    }
    if let Some(row) = x.iter().find(|r| r.len() != m) {
        return Err(Error::DimensionMismatch { expected: m, got: row.len() });
    }
    // prior: z = (I − 𝐀)⁻¹ (w), w_1 ~ N(z1_mean, z1_cov), w_t ~ N(0, Q)
    let mut shift = Mat::identity(dim, dim);
    for t in 1..len {
        shift
            .view_mut((t * n, (t - 1) * n), (n, n))
            .copy_from(&(-&theta.a));
    }
    let mut w_prec = Mat::zeros(dim, dim);
    let v1i = spd_inv(&theta.z1_cov)?;
    let qi = spd_inv(&theta.q)?;
    for t in 0..len {
        let b = if t == 0 { &v1i } else { &qi };
        w_prec.view_mut((t * n, t * n), (n, n)).copy_from(b);
    }
    let prior_prec = shift.transpose() * &w_prec * &shift;
    let mut w_mean = Vector::zeros(dim);
    w_mean.rows_mut(0, n).copy_from(&Vector::from_column_slice(&theta.z1_mean));
    let prior_mean = shift
        .clone()
        .lu()
        .solve(&w_mean)
        .ok_or_else(|| Error::InvalidParams("singular dynamics operator".into()))?;

    let mut big_c = Mat::zeros(m * len, dim);
    for t in 0..len {
        big_c.view_mut((t * m, t * n), (m, n)).copy_from(&theta.c);
    }
    let r_diag = Vector::from_iterator(m * len, (0..len).flat_map(|_| theta.obs_var.iter().copied()));
    let r_inv = Mat::from_diagonal(&r_diag.map(|v| 1.0 / v));
    let xs = Vector::from_iterator(m * len, x.iter().flatten().copied());

    let post_prec = &prior_prec + big_c.transpose() * &r_inv * &big_c;
    let h = &prior_prec * &prior_mean + big_c.transpose() * &r_inv * &xs;
    let sigma = spd_inv(&post_prec)?;
    let mu = &sigma * h;

    let prior_cov = spd_inv(&prior_prec)?;
    let x_cov = &big_c * prior_cov * big_c.transpose() + Mat::from_diagonal(&r_diag);
    let log_evidence = gaussian_logpdf(&(xs - &big_c * &prior_mean), &x_cov)?;

    let means = (0..len).map(|t| mu.rows(t * n, n).into_owned()).collect();
    let var = (0..len)
        .map(|t| sigma.view((t * n, t * n), (n, n)).into_owned())
        .collect();
    let cross = (1..len)
        .map(|t| sigma.view(((t - 1) * n, t * n), (n, n)).into_owned())
        .collect();
    Ok((ExactMoments { means, var, cross, log_evidence }, post_prec))
}

/// Central differences `(f(p + h eᵢ) − f(p − h eᵢ)) / 2h`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, point: &[f64], h: f64) -> Vec<f64> {
    let mut p = point.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − b| / max(|a|, |b|)` over entries, skipping entries where
/// both are below `floor` in magnitude.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| {
            let scale = a.abs().max(b.abs());
            if scale < floor {
                0.0
            } else {
                (a - b).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Agreement of fitted posterior means with reference means after an affine
/// least-squares alignment (latent spaces are identified only up to an
/// invertible map).
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub aligned: Vec<Vec<f64>>,
    pub r2: Vec<f64>,
    pub rmse: Vec<f64>,
}

pub fn align_means(fitted: &[Vec<f64>], target: &[Vec<f64>]) -> Result<Alignment> {
    let len = fitted.len();
    if len != target.len() || len == 0 {
        return Err(Error::DimensionMismatch { expected: target.len(), got: len });
    }
    let k = fitted[0].len();
    let n = target[0].len();
    let design = Mat::from_fn(len, k + 1, |t, j| if j < k { fitted[t][j] } else { 1.0 });
    let y = Mat::from_fn(len, n, |t, j| target[t][j]);
    let svd = design.clone().svd(true, true);
    let coef = svd
        .solve(&y, 1e-12)
        .map_err(|e| Error::InvalidParams(format!("alignment failed: {e}")))?;
    let pred = design * coef;
    let mut r2 = Vec::with_capacity(n);
    let mut rmse = Vec::with_capacity(n);
    for j in 0..n {
        let mean = y.column(j).mean();
        let ss_tot: f64 = y.column(j).iter().map(|v| (v - mean).powi(2)).sum();
        let ss_res: f64 = (0..len).map(|t| (y[(t, j)] - pred[(t, j)]).powi(2)).sum();
        r2.push(if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res == 0.0 { 1.0 } else { 0.0 });
        rmse.push((ss_res / len as f64).sqrt());
    }
    let aligned = (0..len).map(|t| pred.row(t).iter().copied().collect()).collect();
    Ok(Alignment { aligned, r2, rmse })
}
