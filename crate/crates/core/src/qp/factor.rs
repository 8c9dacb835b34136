use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a factor is treated as singular.
const PIVOT_TOL: f64 = 1e-13;

/// Upper-triangular `R` with `RᵀR = P`.
#[derive(Debug, Clone)]
pub struct CostFactor {
    r: DMatrix<f64>,
}

impl CostFactor {
    /// Cholesky factor of an explicitly formed cost matrix.
    pub fn from_matrix(p: &DMatrix<f64>) -> Result<Self> {
        if !p.is_square() {
            return Err(Error::dim("cost matrix", "square", format!("{}x{}", p.nrows(), p.ncols())));
        }
        let chol = Cholesky::new(p.clone()).ok_or_else(|| {
            Error::NotPositiveDefinite("Cholesky factorization of the cost matrix failed".into())
        })?;
        Self::checked(chol.l().transpose())
    }

    /// Factor of `P = LᵀL` from the square root `L` (at least `d` rows), via QR.
    pub fn from_root(l: &DMatrix<f64>) -> Result<Self> {
        if l.nrows() < l.ncols() {
            return Err(Error::NotPositiveDefinite(format!(
                "cost root has {} rows for {} variables",
                l.nrows(),
                l.ncols()
            )));
        }
        Self::checked(l.clone().qr().r())
    }

    fn checked(r: DMatrix<f64>) -> Result<Self> {
        let diag = r.diagonal().map(f64::abs);
        let max = diag.max();
        let min = diag.min();
        if !(max > 0.0) || !(min > PIVOT_TOL * max) || !min.is_finite() {
            return Err(Error::NotPositiveDefinite(format!(
                "cost factor pivot ratio {:.3e} below {PIVOT_TOL:e}",
                if max > 0.0 { min / max } else { 0.0 }
            )));
        }
        Ok(Self { r })
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn upper(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// `RᵀR`.
    pub fn matrix(&self) -> DMatrix<f64> {
        self.r.tr_mul(&self.r)
    }

    /// `R^{-T} b`.
    pub fn solve_rt(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.r
            .tr_solve_upper_triangular(b)
            .expect("factor diagonal checked at construction")
    }

    /// `R^{-1} b`.
    pub fn solve_r(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.r
            .solve_upper_triangular(b)
            .expect("factor diagonal checked at construction")
    }

    pub fn solve_rt_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.r
            .tr_solve_upper_triangular(b)
            .expect("factor diagonal checked at construction")
    }

    pub fn solve_r_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.r
            .solve_upper_triangular(b)
            .expect("factor diagonal checked at construction")
    }

    /// `½ gᵀPg`.
    pub fn half_quad(&self, g: &DVector<f64>) -> f64 {
        0.5 * (&self.r * g).norm_squared()
    }
}
