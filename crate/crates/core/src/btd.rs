//! Kernels for symmetric block tri-diagonal matrices and their lower block
//! bi-diagonal Cholesky factors.
//!
//! Every routine here walks the blocks once (forward or backward), so cost and
//! memory are linear in the number of time blocks `T` for a fixed block size `n`.
//! Vectors of length `nT` are stored flat, block `t` occupying `[t*n, (t+1)*n)`.

use crate::dense::{
    cholesky_lower, cholesky_vjp_block, right_solve_lower, right_solve_lower_tr, solve_lower,
    solve_lower_tr, solve_lower_tr_vec, solve_lower_vec, sym, tril, Mat, Vector,
};
use crate::error::{Error, Result};

/// Default upper bound on `nT` for dense materialization.
pub const DEFAULT_DENSE_CAP: usize = 2000;

/// Symmetric block tri-diagonal matrix.
///
/// `diag[t]` is the block at `(t, t)`; `lower[t]` is the block at `(t+1, t)`,
/// whose transpose sits at `(t, t+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymBlockTriDiag {
    pub diag: Vec<Mat>,
    pub lower: Vec<Mat>,
}

/// Lower block bi-diagonal matrix: lower-triangular diagonal blocks and one
/// band of general sub-diagonal blocks (`lower[t]` at `(t+1, t)`).
///
/// Produced by [`cholesky`]; the same shape also carries cotangents.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerBlockBiDiag {
    pub diag: Vec<Mat>,
    pub lower: Vec<Mat>,
}

/// Per-time marginals of a Gaussian with block tri-diagonal precision.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalMoments {
    pub means: Vec<Vector>,
    /// Σ_tt
    pub var: Vec<Mat>,
    /// cov(z_t, z_{t+1})
    pub cross: Vec<Mat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `R⁻¹ v`
    Lower,
    /// `R⁻ᵀ v`
    Upper,
}

fn check_band(diag: &[Mat], lower: &[Mat]) -> Result<usize> {
    let t = diag.len();
    if t == 0 {
        return Err(Error::ShapeMismatch("at least one block is required".into()));
    }
    let n = diag[0].nrows();
    if lower.len() != t - 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} diagonal blocks need {} lower blocks, got {}",
            t,
            t - 1,
            lower.len()
        )));
    }
    if diag.iter().chain(lower).any(|b| b.nrows() != n || b.ncols() != n) {
        return Err(Error::ShapeMismatch(format!("all blocks must be {n}x{n}")));
    }
    Ok(n)
}

fn block(v: &[f64], n: usize, t: usize) -> Vector {
    Vector::from_column_slice(&v[t * n..(t + 1) * n])
}

fn check_len(v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch { expected, got: v.len() });
    }
    Ok(())
}

impl SymBlockTriDiag {
    /// Builds the matrix, symmetrizing the diagonal blocks.
    pub fn new(diag: Vec<Mat>, lower: Vec<Mat>) -> Result<Self> {
        check_band(&diag, &lower)?;
        let diag = diag.iter().map(sym).collect();
        Ok(Self { diag, lower })
    }

    pub fn identity(num_blocks: usize, n: usize) -> Self {
        Self::zeros(num_blocks, n).with_added_diagonal(1.0)
    }

    pub fn zeros(num_blocks: usize, n: usize) -> Self {
        Self {
            diag: vec![Mat::zeros(n, n); num_blocks],
            lower: vec![Mat::zeros(n, n); num_blocks.saturating_sub(1)],
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn block_size(&self) -> usize {
        self.diag[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.num_blocks() * self.block_size()
    }

    /// `self + alpha * I`
    pub fn with_added_diagonal(mut self, alpha: f64) -> Self {
        for d in &mut self.diag {
            for i in 0..d.nrows() {
                d[(i, i)] += alpha;
            }
        }
        self
    }

    /// Blockwise `self + scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &SymBlockTriDiag) {
        for (a, b) in self.diag.iter_mut().zip(&other.diag) {
            *a += b * scale;
        }
        for (a, b) in self.lower.iter_mut().zip(&other.lower) {
            *a += b * scale;
        }
    }

    /// `H v`
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.block_size();
        let t_len = self.num_blocks();
        check_len(v, n * t_len)?;
        let mut out = vec![0.0; v.len()];
        for t in 0..t_len {
            let mut y = &self.diag[t] * block(v, n, t);
            if t > 0 {
                y += &self.lower[t - 1] * block(v, n, t - 1);
            }
            if t + 1 < t_len {
                y += self.lower[t].tr_mul(&block(v, n, t + 1));
            }
            out[t * n..(t + 1) * n].copy_from_slice(y.as_slice());
        }
        Ok(out)
    }

    /// Extracts the band of a dense symmetric matrix.
    pub fn from_dense(m: &Mat, n: usize) -> Result<Self> {
        if m.nrows() != m.ncols() || n == 0 || !m.nrows().is_multiple_of(n) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} is not a square multiple of block size {n}",
                m.nrows(),
                m.ncols()
            )));
        }
        let t_len = m.nrows() / n;
        let diag = (0..t_len)
            .map(|t| m.view((t * n, t * n), (n, n)).into_owned())
            .collect();
        let lower = (1..t_len)
            .map(|t| m.view((t * n, (t - 1) * n), (n, n)).into_owned())
            .collect();
        Ok(Self { diag, lower })
    }
}

impl LowerBlockBiDiag {
    /// Validates a factor: lower-triangular diagonal blocks with strictly
    /// positive diagonal entries.
    pub fn new(diag: Vec<Mat>, lower: Vec<Mat>) -> Result<Self> {
        check_band(&diag, &lower)?;
        for (t, d) in diag.iter().enumerate() {
            for i in 0..d.nrows() {
                if !(d[(i, i)] > 0.0) {
                    return Err(Error::NotPositiveDefinite { block: t });
                }
                for j in (i + 1)..d.ncols() {
                    if d[(i, j)] != 0.0 {
                        return Err(Error::ShapeMismatch(format!(
                            "diagonal block {t} is not lower triangular"
                        )));
                    }
                }
            }
        }
        Ok(Self { diag, lower })
    }

    pub fn identity(num_blocks: usize, n: usize) -> Self {
        Self {
            diag: vec![Mat::identity(n, n); num_blocks],
            lower: vec![Mat::zeros(n, n); num_blocks.saturating_sub(1)],
        }
    }

    /// All-zero blocks; used as a cotangent accumulator.
    pub fn zeros(num_blocks: usize, n: usize) -> Self {
        Self {
            diag: vec![Mat::zeros(n, n); num_blocks],
            lower: vec![Mat::zeros(n, n); num_blocks.saturating_sub(1)],
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn block_size(&self) -> usize {
        self.diag[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.num_blocks() * self.block_size()
    }

    /// `R v`
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.block_size();
        check_len(v, self.dim())?;
        let mut out = vec![0.0; v.len()];
        for t in 0..self.num_blocks() {
            let mut y = &self.diag[t] * block(v, n, t);
            if t > 0 {
                y += &self.lower[t - 1] * block(v, n, t - 1);
            }
            out[t * n..(t + 1) * n].copy_from_slice(y.as_slice());
        }
        Ok(out)
    }

    /// `R Rᵀ` as a block tri-diagonal matrix.
    pub fn gram(&self) -> SymBlockTriDiag {
        let t_len = self.num_blocks();
        let mut diag = Vec::with_capacity(t_len);
        let mut lower = Vec::with_capacity(t_len.saturating_sub(1));
        for t in 0..t_len {
            let mut d = &self.diag[t] * self.diag[t].transpose();
            if t > 0 {
                let l = &self.lower[t - 1];
                d += l * l.transpose();
                lower.push(l * self.diag[t - 1].transpose());
            }
            diag.push(d);
        }
        SymBlockTriDiag { diag, lower }
    }

    /// Dense `nT×nT` copy, for tests and small problems.
    pub fn materialize(&self, cap: usize) -> Result<Mat> {
        let n = self.block_size();
        let dim = self.dim();
        if dim > cap {
            return Err(Error::CapExceeded { size: dim, cap });
        }
        let mut m = Mat::zeros(dim, dim);
        for t in 0..self.num_blocks() {
            m.view_mut((t * n, t * n), (n, n)).copy_from(&self.diag[t]);
            if t > 0 {
                m.view_mut((t * n, (t - 1) * n), (n, n))
                    .copy_from(&self.lower[t - 1]);
            }
        }
        Ok(m)
    }

    /// Sum of log diagonal entries, i.e. `log det R`.
    pub fn log_det(&self) -> f64 {
        self.diag
            .iter()
            .flat_map(|d| (0..d.nrows()).map(move |i| d[(i, i)].ln()))
            .sum()
    }
}

/// Block Cholesky factorization `H = R Rᵀ`.
///
/// `R_00 = chol(D_0)`, then for each following block
/// `L_t = B_{t-1} R_{t-1}⁻ᵀ` and `R_tt = chol(D_t − L_t L_tᵀ)`.
pub fn cholesky(h: &SymBlockTriDiag) -> Result<LowerBlockBiDiag> {
    let t_len = h.num_blocks();
    let mut diag: Vec<Mat> = Vec::with_capacity(t_len);
    let mut lower = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len {
        let schur = if t == 0 {
            h.diag[0].clone()
        } else {
            let l = right_solve_lower_tr(&h.lower[t - 1], &diag[t - 1]);
            let s = &h.diag[t] - &l * l.transpose();
            lower.push(l);
            s
        };
        let r = cholesky_lower(&schur).ok_or(Error::NotPositiveDefinite { block: t })?;
        diag.push(r);
    }
    Ok(LowerBlockBiDiag { diag, lower })
}

/// `R⁻¹ v` (forward substitution) or `R⁻ᵀ v` (backward substitution).
pub fn solve(r: &LowerBlockBiDiag, v: &[f64], side: Side) -> Result<Vec<f64>> {
    let n = r.block_size();
    let t_len = r.num_blocks();
    check_len(v, r.dim())?;
    let mut out = vec![0.0; v.len()];
    match side {
        Side::Lower => {
            let mut prev: Option<Vector> = None;
            for t in 0..t_len {
                let mut rhs = block(v, n, t);
                if let Some(p) = &prev {
                    rhs -= &r.lower[t - 1] * p;
                }
                let y = solve_lower_vec(&r.diag[t], &rhs);
                out[t * n..(t + 1) * n].copy_from_slice(y.as_slice());
                prev = Some(y);
            }
        }
        Side::Upper => {
            let mut next: Option<Vector> = None;
            for t in (0..t_len).rev() {
                let mut rhs = block(v, n, t);
                if let Some(x) = &next {
                    rhs -= r.lower[t].tr_mul(x);
                }
                let y = solve_lower_tr_vec(&r.diag[t], &rhs);
                out[t * n..(t + 1) * n].copy_from_slice(y.as_slice());
                next = Some(y);
            }
        }
    }
    Ok(out)
}

/// Draw from `N(mu, (R Rᵀ)⁻¹)` given standard-normal `eps`: `mu + R⁻ᵀ eps`.
pub fn sample(mu: &[f64], r: &LowerBlockBiDiag, eps: &[f64]) -> Result<Vec<f64>> {
    check_len(mu, r.dim())?;
    let mut z = solve(r, eps, Side::Upper)?;
    for (zi, mi) in z.iter_mut().zip(mu) {
        *zi += mi;
    }
    Ok(z)
}

/// `log det Σ` for `Σ = (R Rᵀ)⁻¹`, summing over all `nT` diagonal entries of `R`.
pub fn logdet_sigma(r: &LowerBlockBiDiag) -> f64 {
    -2.0 * r.log_det()
}

/// Diagonal and first off-diagonal blocks of `Σ = (R Rᵀ)⁻¹`.
///
/// Backward recursion from `Σ_TT = R_TT⁻ᵀ R_TT⁻¹`, using `Rᵀ Σ = R⁻¹`:
/// `Σ_{t,t+1} = −R_tt⁻ᵀ L_{t+1}ᵀ Σ_{t+1,t+1}` and
/// `Σ_tt = R_tt⁻ᵀ (R_tt⁻¹ − L_{t+1}ᵀ Σ_{t+1,t})`.
pub fn marginals(mu: &[f64], r: &LowerBlockBiDiag) -> Result<MarginalMoments> {
    let n = r.block_size();
    let t_len = r.num_blocks();
    check_len(mu, r.dim())?;
    let eye = Mat::identity(n, n);
    let mut var = vec![Mat::zeros(n, n); t_len];
    let mut cross = vec![Mat::zeros(n, n); t_len - 1];
    let inv_last = solve_lower(&r.diag[t_len - 1], &eye);
    var[t_len - 1] = sym(&solve_lower_tr(&r.diag[t_len - 1], &inv_last));
    for t in (0..t_len - 1).rev() {
        let rtt = &r.diag[t];
        let lt = &r.lower[t];
        let c = -solve_lower_tr(rtt, &(lt.transpose() * &var[t + 1]));
        let rinv = solve_lower(rtt, &eye);
        let v = solve_lower_tr(rtt, &(rinv - lt.transpose() * c.transpose()));
        var[t] = sym(&v);
        cross[t] = c;
    }
    let means = (0..t_len).map(|t| block(mu, n, t)).collect();
    Ok(MarginalMoments { means, var, cross })
}

/// Reverse-mode rule for [`cholesky`].
///
/// Given `R = cholesky(H)` and a cotangent `r_bar` of `R` (only the lower
/// triangles of its diagonal blocks are read), returns the cotangent of `H`:
/// symmetric diagonal blocks `D̄_t` with `df = Σ ⟨D̄_t, dD_t⟩` for symmetric
/// `dD_t`, and lower blocks `B̄_t` with `df = Σ ⟨B̄_t, dB_t⟩`.
pub fn cholesky_vjp(
    h: &SymBlockTriDiag,
    r: &LowerBlockBiDiag,
    r_bar: &LowerBlockBiDiag,
) -> SymBlockTriDiag {
    let t_len = h.num_blocks();
    let mut rd_bar: Vec<Mat> = r_bar.diag.iter().map(tril).collect();
    let mut l_bar = r_bar.lower.clone();
    let mut d_bar = vec![Mat::zeros(0, 0); t_len];
    let mut b_bar = vec![Mat::zeros(0, 0); t_len.saturating_sub(1)];
    for t in (1..t_len).rev() {
        let s_bar = cholesky_vjp_block(&r.diag[t], &rd_bar[t]);
        let l = &r.lower[t - 1];
        l_bar[t - 1] -= &s_bar * l * 2.0;
        let r_prev = &r.diag[t - 1];
        b_bar[t - 1] = right_solve_lower(&l_bar[t - 1], r_prev);
        let m = solve_lower_tr(r_prev, &(l_bar[t - 1].transpose() * l));
        rd_bar[t - 1] -= tril(&m);
        d_bar[t] = s_bar;
    }
    d_bar[0] = cholesky_vjp_block(&r.diag[0], &rd_bar[0]);
    SymBlockTriDiag { diag: d_bar, lower: b_bar }
}

/// Dense `nT×nT` matrix with the given band and zeros elsewhere.
pub fn materialize(h: &SymBlockTriDiag, cap: usize) -> Result<Mat> {
    let n = h.block_size();
    let dim = h.dim();
    if dim > cap {
        return Err(Error::CapExceeded { size: dim, cap });
    }
    let mut m = Mat::zeros(dim, dim);
    for t in 0..h.num_blocks() {
        m.view_mut((t * n, t * n), (n, n)).copy_from(&h.diag[t]);
        if t > 0 {
            let b = &h.lower[t - 1];
            m.view_mut((t * n, (t - 1) * n), (n, n)).copy_from(b);
            m.view_mut(((t - 1) * n, t * n), (n, n))
                .copy_from(&b.transpose());
        }
    }
    Ok(m)
}
