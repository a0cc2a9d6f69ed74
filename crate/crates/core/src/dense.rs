//! Small dense helpers for the n×n blocks. Blocks are tiny (n ≤ 4 in practice),
//! so everything here is written for clarity over speed.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Lower Cholesky factor, or `None` when a pivot is not strictly positive.
pub fn cholesky_lower(a: &Mat) -> Option<Mat> {
    let n = a.nrows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Mat, b: &Mat) -> Mat {
    l.solve_lower_triangular(b)
        .expect("triangular factor has a zero pivot")
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_tr(l: &Mat, b: &Mat) -> Mat {
    l.tr_solve_lower_triangular(b)
        .expect("triangular factor has a zero pivot")
}

pub fn solve_lower_vec(l: &Mat, b: &Vector) -> Vector {
    l.solve_lower_triangular(b)
        .expect("triangular factor has a zero pivot")
}

pub fn solve_lower_tr_vec(l: &Mat, b: &Vector) -> Vector {
    l.tr_solve_lower_triangular(b)
        .expect("triangular factor has a zero pivot")
}

/// `X L⁻¹` for lower-triangular `L`.
pub fn right_solve_lower(x: &Mat, l: &Mat) -> Mat {
    // X L⁻¹ = (L⁻ᵀ Xᵀ)ᵀ
    solve_lower_tr(l, &x.transpose()).transpose()
}

/// `X L⁻ᵀ` for lower-triangular `L`.
pub fn right_solve_lower_tr(x: &Mat, l: &Mat) -> Mat {
    solve_lower(l, &x.transpose()).transpose()
}

pub fn sym(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

pub fn tril(a: &Mat) -> Mat {
    let mut out = a.clone();
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            out[(i, j)] = 0.0;
        }
    }
    out
}

/// Number of entries in the packed lower triangle of an n×n matrix.
pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Fills the lower triangle row-wise from `v`; the strict upper triangle is zero.
pub fn unpack_lower(v: &[f64], n: usize) -> Mat {
    debug_assert_eq!(v.len(), packed_len(n));
    let mut out = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            out[(i, j)] = v[k];
            k += 1;
        }
    }
    out
}

pub fn pack_lower(a: &Mat) -> Vec<f64> {
    let n = a.nrows();
    let mut out = Vec::with_capacity(packed_len(n));
    for i in 0..n {
        for j in 0..=i {
            out.push(a[(i, j)]);
        }
    }
    out
}

/// Symmetric matrix whose lower triangle is `v` (row-wise packing).
pub fn unpack_sym(v: &[f64], n: usize) -> Mat {
    let l = unpack_lower(v, n);
    let mut out = l.clone();
    for i in 0..n {
        for j in 0..i {
            out[(j, i)] = l[(i, j)];
        }
    }
    out
}

/// Cotangent of the packed values given the symmetric-direction cotangent of
/// `unpack_sym(v)`. Off-diagonal entries appear twice.
pub fn unpack_sym_vjp(g: &Mat) -> Vec<f64> {
    let n = g.nrows();
    let mut out = Vec::with_capacity(packed_len(n));
    for i in 0..n {
        for j in 0..=i {
            if i == j {
                out.push(g[(i, i)]);
            } else {
                out.push(g[(i, j)] + g[(j, i)]);
            }
        }
    }
    out
}

/// Row-major flattening.
pub fn mat_from_rows(v: &[f64], rows: usize, cols: usize) -> Mat {
    Mat::from_row_slice(rows, cols, v)
}

pub fn mat_to_rows(a: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}

/// Reverse-mode rule for the Cholesky factorization of one block.
///
/// Given `l = chol(a)` and the cotangent of `l` (only its lower triangle is
/// read), returns the symmetric cotangent of `a`.
pub fn cholesky_vjp_block(l: &Mat, l_bar: &Mat) -> Mat {
    let mut p = l.transpose() * tril(l_bar);
    // Φ: keep the lower triangle, halve the diagonal
    for i in 0..p.nrows() {
        for j in (i + 1)..p.ncols() {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    let y = solve_lower_tr(l, &p);
    let x = right_solve_lower(&y, l);
    sym(&x)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Serde adapter storing a matrix as a list of rows.
pub mod serde_rows {
    use super::Mat;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows: Vec<Vec<f64>> = Deserialize::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("matrix rows must be non-empty and of equal length"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Mat::from_row_slice(rows.len(), ncols, &flat))
    }
}
