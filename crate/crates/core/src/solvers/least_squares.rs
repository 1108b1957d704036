//! Pseudoinverse, minimum-norm least squares and the quadratic form that
//! every per-layer fusion problem reduces to.

use crate::error::{Error, Result};
use crate::solvers::DenseMatrix;

/// Relative singular-value cutoff used when callers have no better idea.
pub const DEFAULT_PINV_TOL: f64 = 1e-10;

/// Moore–Penrose pseudoinverse. Singular values below `tol · σ_max` are
/// treated as zero.
pub fn pseudoinverse(m: &DenseMatrix, tol: f64) -> Result<DenseMatrix> {
    if !m.is_finite() {
        return Err(Error::InvalidMatrix("pseudoinverse of non-finite matrix".into()));
    }
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 || m.max_abs() == 0.0 {
        return Ok(DenseMatrix::zeros(cols, rows));
    }
    let svd = m.to_faer().thin_svd().map_err(|e| Error::InvalidMatrix(format!("svd failed: {e:?}")))?;
    let (u, sigma, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let cutoff = tol * sigma_max;

    // m⁺ = V Σ⁺ Uᵀ, accumulated one singular triplet at a time.
    let mut out = DenseMatrix::zeros(cols, rows);
    for (i, &s) in sigma.iter().enumerate() {
        if s <= cutoff {
            continue;
        }
        let inv = 1.0 / s;
        for r in 0..cols {
            let vr = v[(r, i)] * inv;
            if vr == 0.0 {
                continue;
            }
            let row = out.row_mut(r);
            for (c, o) in row.iter_mut().enumerate() {
                *o += vr * u[(c, i)];
            }
        }
    }
    Ok(out)
}

/// Singular values in descending order.
pub fn singular_values(m: &DenseMatrix) -> Vec<f64> {
    if m.rows() == 0 || m.cols() == 0 {
        return Vec::new();
    }
    if !m.is_finite() {
        return vec![f64::NAN; m.rows().min(m.cols())];
    }
    let mut s = m.to_faer().singular_values().unwrap_or_else(|_| vec![f64::NAN; m.rows().min(m.cols())]);
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Number of singular values above `tol · σ_max`.
pub fn numerical_rank(m: &DenseMatrix, tol: f64) -> usize {
    let s = singular_values(m);
    let Some(&max) = s.first() else { return 0 };
    if max == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > tol * max).count()
}

/// `σ_max / σ_min`; infinite for singular input.
pub fn condition_number(m: &DenseMatrix) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

fn check_symmetric(gram: &DenseMatrix) -> Result<()> {
    let (k, k2) = gram.shape();
    if k != k2 {
        return Err(Error::ShapeError(format!("Gram matrix must be square, got {k}x{k2}")));
    }
    let scale = gram.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..k {
        for j in (i + 1)..k {
            if (gram.get(i, j) - gram.get(j, i)).abs() > 1e-10 * scale {
                return Err(Error::InvalidMatrix(format!(
                    "Gram matrix not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Minimum-Frobenius-norm minimizer of `‖Δ·gram − cross‖`, i.e.
/// `Δ = cross · gram⁺`.
pub fn solve_min_norm_ls(gram: &DenseMatrix, cross: &DenseMatrix) -> Result<DenseMatrix> {
    check_symmetric(gram)?;
    if cross.cols() != gram.rows() {
        return Err(Error::ShapeError(format!(
            "cross is {}x{} but Gram is {}x{}",
            cross.rows(),
            cross.cols(),
            gram.rows(),
            gram.cols()
        )));
    }
    let pinv = pseudoinverse(gram, DEFAULT_PINV_TOL)?;
    cross.matmul(&pinv)
}

/// Upper-triangular `R` with `Rᵀ·R = X·Xᵀ`, from a QR factorization of `Xᵀ`.
/// Carries the same information as the Gram matrix without squaring the
/// condition number of `X`.
pub fn gram_factor(x: &DenseMatrix) -> Result<DenseMatrix> {
    if !x.is_finite() {
        return Err(Error::InvalidMatrix("Gram factor of non-finite matrix".into()));
    }
    if x.cols() == 0 {
        return Ok(DenseMatrix::zeros(0, x.rows()));
    }
    Ok(DenseMatrix::from_faer(x.transpose().to_faer().qr().R()))
}

/// Minimum-Frobenius-norm `Δ` minimizing `Σᵢ ‖(targetᵢ − Δ)·Rᵢᵀ‖²_F`, where
/// `Rᵢ` are Gram factors. Equals `Σ targetᵢGᵢ · (Σ Gᵢ)⁺` with `Gᵢ = RᵢᵀRᵢ`,
/// computed by a pseudoinverse of the stacked factors.
pub fn solve_min_norm_factored(factors: &[DenseMatrix], targets: &[DenseMatrix]) -> Result<DenseMatrix> {
    let (Some(f0), Some(t0)) = (factors.first(), targets.first()) else {
        return Err(Error::ShapeError("no factors to solve with".into()));
    };
    let (d, k) = t0.shape();
    if factors.len() != targets.len() {
        return Err(Error::ShapeError(format!(
            "{} factors but {} targets",
            factors.len(),
            targets.len()
        )));
    }
    let mut stacked = Vec::new();
    let mut rhs = Vec::new();
    let mut rows = 0;
    for (r, t) in factors.iter().zip(targets) {
        if r.cols() != k || t.shape() != (d, k) || f0.cols() != k {
            return Err(Error::ShapeError(format!(
                "factor {:?} and target {:?} for a {d}x{k} layer",
                r.shape(),
                t.shape()
            )));
        }
        stacked.extend_from_slice(r.values());
        rhs.extend_from_slice(r.matmul_t(t)?.values());
        rows += r.rows();
    }
    let m = DenseMatrix::new(rows, k, stacked)?;
    let rhs = DenseMatrix::new(rows, d, rhs)?;
    Ok(pseudoinverse(&m, DEFAULT_PINV_TOL)?.matmul(&rhs)?.transpose())
}

/// `f(Δ) = tr(Δ G Δᵀ) − 2 tr(Δ Cᵀ) + constant`.
///
/// With `G = Σ XᵢXᵢᵀ`, `C = Σ ΔWᵢXᵢXᵢᵀ` and
/// `constant = Σ tr(ΔWᵢ XᵢXᵢᵀ ΔWᵢᵀ)` this is exactly
/// `Σ ‖ΔWᵢXᵢ − ΔXᵢ‖²_F`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    gram: DenseMatrix,
    cross: DenseMatrix,
    constant: f64,
}

impl QuadraticObjective {
    pub fn new(gram: DenseMatrix, cross: DenseMatrix, constant: f64) -> Result<Self> {
        check_symmetric(&gram)?;
        if cross.cols() != gram.rows() {
            return Err(Error::ShapeError(format!(
                "cross is {}x{} but Gram is {}x{}",
                cross.rows(),
                cross.cols(),
                gram.rows(),
                gram.cols()
            )));
        }
        let max_diag = (0..gram.rows()).fold(0.0f64, |m, i| m.max(gram.get(i, i)));
        if gram.rows() > 0 {
            let eig = gram
                .to_faer()
                .self_adjoint_eigenvalues(faer::Side::Lower)
                .map_err(|e| Error::InvalidMatrix(format!("eigenvalues failed: {e:?}")))?;
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            if min < -1e-8 * max_diag.max(f64::MIN_POSITIVE) {
                return Err(Error::InvalidMatrix(format!(
                    "Gram matrix is not positive semidefinite (eigenvalue {min:e})"
                )));
            }
        }
        Ok(Self { gram, cross, constant })
    }

    pub fn gram(&self) -> &DenseMatrix {
        &self.gram
    }

    pub fn cross(&self) -> &DenseMatrix {
        &self.cross
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn value(&self, delta: &DenseMatrix) -> f64 {
        let dg = delta.mul_unchecked(&self.gram);
        let quad = dg.dot(delta).expect("shape checked by caller");
        let lin = delta.dot(&self.cross).expect("shape checked by caller");
        quad - 2.0 * lin + self.constant
    }

    pub fn gradient(&self, delta: &DenseMatrix) -> DenseMatrix {
        let mut g = delta.mul_unchecked(&self.gram);
        g.axpy(-1.0, &self.cross).expect("shape checked by caller");
        g.scale_in_place(2.0);
        g
    }

    /// Closed-form minimum-norm minimizer.
    pub fn minimizer(&self) -> Result<DenseMatrix> {
        solve_min_norm_ls(&self.gram, &self.cross)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Gauss–Jordan inverse with partial pivoting; independent of the SVD path.
    fn gauss_jordan_inverse(m: &DenseMatrix) -> DenseMatrix {
        let n = m.rows();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                let mut row = m.row(r).to_vec();
                row.extend((0..n).map(|c| if c == r { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, pivot);
            let p = a[col][col];
            for v in a[col].iter_mut() {
                *v /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = a[r][col];
                    let pivot_row = a[col].clone();
                    for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        let values = a.into_iter().flat_map(|row| row[n..].to_vec()).collect();
        DenseMatrix::new(n, n, values).unwrap()
    }

    #[test]
    fn factored_solve_matches_gram_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<DenseMatrix> = [3, 9].iter().map(|&n| DenseMatrix::random_normal(5, n, 1.0, &mut rng)).collect();
        let ts: Vec<DenseMatrix> = (0..2).map(|_| DenseMatrix::random_normal(4, 5, 1.0, &mut rng)).collect();
        let mut gram = DenseMatrix::zeros(5, 5);
        let mut cross = DenseMatrix::zeros(4, 5);
        for (x, t) in xs.iter().zip(&ts) {
            let g = x.matmul_t(x).unwrap();
            cross.axpy(1.0, &t.matmul(&g).unwrap()).unwrap();
            gram.axpy(1.0, &g).unwrap();
            let r = gram_factor(x).unwrap();
            assert!(r.t_matmul(&r).unwrap().max_abs_diff(&g).unwrap() < 1e-12);
        }
        let factors: Vec<_> = xs.iter().map(|x| gram_factor(x).unwrap()).collect();
        let a = solve_min_norm_factored(&factors, &ts).unwrap();
        let b = solve_min_norm_ls(&gram, &cross).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
        assert!(gram_factor(&DenseMatrix::zeros(5, 0)).unwrap().rows() == 0);
        assert!(solve_min_norm_factored(&[], &[]).is_err());
    }

    #[test]
    fn factored_solve_keeps_ill_conditioned_directions() {
        // Column scales spanning 1e-6 give a Gram condition number near 1e12,
        // past the cutoff of the Gram route but well inside the factored one.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = DenseMatrix::random_normal(4, 40, 1.0, &mut rng);
        for (r, s) in [1.0, 1e-2, 1e-4, 1e-6].iter().enumerate() {
            x.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let t = DenseMatrix::random_normal(3, 4, 1.0, &mut rng);
        let d = solve_min_norm_factored(&[gram_factor(&x).unwrap()], std::slice::from_ref(&t)).unwrap();
        assert!(d.max_abs_diff(&t).unwrap() < 1e-6);
    }

    #[test]
    fn identity_and_zero() {
        let i3 = DenseMatrix::identity(3);
        assert!(pseudoinverse(&i3, DEFAULT_PINV_TOL).unwrap().max_abs_diff(&i3).unwrap() < 1e-14);
        let z = pseudoinverse(&DenseMatrix::zeros(2, 3), DEFAULT_PINV_TOL).unwrap();
        assert_eq!(z, DenseMatrix::zeros(3, 2));
    }

    #[test]
    fn full_rank_matches_gauss_jordan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = DenseMatrix::random_normal(4, 4, 1.0, &mut rng);
        let pinv = pseudoinverse(&m, DEFAULT_PINV_TOL).unwrap();
        let inv = gauss_jordan_inverse(&m);
        assert!(pinv.max_abs_diff(&inv).unwrap() < 1e-8);
        let prod = m.matmul(&pinv).unwrap();
        assert!(prod.max_abs_diff(&DenseMatrix::identity(4)).unwrap() < 1e-8);
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = DenseMatrix::identity(2);
        m.values_mut()[1] = f64::INFINITY;
        assert!(matches!(pseudoinverse(&m, 1e-10), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn min_norm_identity_and_degenerate() {
        let c = DenseMatrix::from_rows(&[&[1.0, -2.0, 0.5], &[3.0, 0.0, 4.0]]);
        let d = solve_min_norm_ls(&DenseMatrix::identity(3), &c).unwrap();
        assert!(d.max_abs_diff(&c).unwrap() < 1e-14);
        let d0 = solve_min_norm_ls(&DenseMatrix::zeros(3, 3), &DenseMatrix::zeros(2, 3)).unwrap();
        assert_eq!(d0, DenseMatrix::zeros(2, 3));
        assert!(matches!(
            solve_min_norm_ls(&DenseMatrix::identity(2), &c),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn min_norm_matches_gradient_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DenseMatrix::random_normal(3, 6, 1.0, &mut rng);
        let mut gram = x.matmul_t(&x).unwrap().scaled(1.0 / 6.0);
        gram.axpy(0.5, &DenseMatrix::identity(3)).unwrap();
        let cross = DenseMatrix::random_normal(2, 3, 1.0, &mut rng);
        let delta = solve_min_norm_ls(&gram, &cross).unwrap();

        // Plain gradient descent on ‖ΔG − C‖², gradient 2(ΔG − C)G.
        let step = 0.5 / singular_values(&gram)[0].powi(2);
        let mut gd = DenseMatrix::zeros(2, 3);
        for _ in 0..10_000 {
            let r = gd.matmul(&gram).unwrap().sub(&cross).unwrap();
            let g = r.matmul(&gram).unwrap();
            gd.axpy(-2.0 * step, &g).unwrap();
        }
        assert!(delta.max_abs_diff(&gd).unwrap() < 1e-4, "{delta:?} vs {gd:?}");
    }

    #[test]
    fn quadratic_rejects_indefinite() {
        let g = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]);
        assert!(QuadraticObjective::new(g, DenseMatrix::zeros(1, 2), 0.0).is_err());
    }

    #[test]
    fn rank_and_condition() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert_eq!(numerical_rank(&m, 1e-8), 1);
        assert!(condition_number(&m) > 1e12);
        assert_eq!(numerical_rank(&DenseMatrix::zeros(3, 3), 1e-8), 0);
    }
}
