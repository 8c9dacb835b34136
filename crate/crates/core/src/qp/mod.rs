//! Dense strictly convex quadratic programs
//!
//! ```text
//!     minimize     1/2 gᵀ P g + qᵀ g
//!     subject to   Aeq g  = beq
//!                  Ain g <= bin
//! ```
//!
//! solved with the Goldfarb–Idnani dual active-set method. Solutions carry the
//! active set and the multipliers, which [`QpStructure::affine_law`] turns into
//! the local affine dependence of the optimizer on a parameter entering the
//! linear cost and the equality right-hand side.
//!
//! The cost enters only through a triangular factor ([`CostFactor`]), so a
//! structure whose `P`, `Aeq`, `Ain`, `bin` stay fixed while `q` and `beq`
//! change (a multiparametric QP) is prepared once and re-solved cheaply.

mod active_set;
mod factor;
mod kkt;
mod sensitivity;

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_dim, ensure_len, Error, Result};
use crate::linalg::is_symmetric;

pub use factor::CostFactor;
pub use kkt::{kkt_residuals, KktResiduals};
pub use sensitivity::AffineLaw;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Absolute primal feasibility tolerance, scaled by `1 + |b_i|`.
    pub feas_tol: f64,
    /// Slack below which an inequality is reported active.
    pub active_tol: f64,
    /// Relative multiplier threshold separating strongly from weakly active constraints.
    pub mult_tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            feas_tol: 1e-9,
            active_tol: 1e-8,
            mult_tol: 1e-9,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub aeq: DMatrix<f64>,
    pub beq: DVector<f64>,
    pub ain: DMatrix<f64>,
    pub bin: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        aeq: DMatrix<f64>,
        beq: DVector<f64>,
        ain: DMatrix<f64>,
        bin: DVector<f64>,
    ) -> Result<Self> {
        let d = q.len();
        ensure_dim("P", (d, d), p.shape())?;
        ensure_dim("Aeq", (beq.len(), d), aeq.shape())?;
        ensure_dim("Ain", (bin.len(), d), ain.shape())?;
        if !is_symmetric(&p, 1e-12) {
            return Err(Error::InvalidArgument("cost matrix is not symmetric".into()));
        }
        Ok(Self {
            p,
            q,
            aeq,
            beq,
            ain,
            bin,
        })
    }

    /// Unconstrained problem.
    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        let d = q.len();
        Self::new(p, q, DMatrix::zeros(0, d), DVector::zeros(0), DMatrix::zeros(0, d), DVector::zeros(0))
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, g: &DVector<f64>) -> f64 {
        0.5 * g.dot(&(&self.p * g)) + self.q.dot(g)
    }

    /// Plain-text dump for offline inspection: one `name rows cols` line per
    /// matrix followed by its rows.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        let q = DMatrix::from_column_slice(self.q.len(), 1, self.q.as_slice());
        let beq = DMatrix::from_column_slice(self.beq.len(), 1, self.beq.as_slice());
        let bin = DMatrix::from_column_slice(self.bin.len(), 1, self.bin.as_slice());
        for (name, m) in [
            ("P", &self.p),
            ("q", &q),
            ("Aeq", &self.aeq),
            ("beq", &beq),
            ("Ain", &self.ain),
            ("bin", &bin),
        ] {
            writeln!(out, "{name} {} {}", m.nrows(), m.ncols())?;
            for row in m.row_iter() {
                let fields: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                writeln!(out, "{}", fields.join(" "))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub g_star: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    /// One entry per inequality, zero for those outside the working set.
    pub ineq_multipliers: DVector<f64>,
    /// Inequalities whose slack is at most `active_tol`.
    pub active_set: Vec<usize>,
    /// Inequalities held as equalities by the solver at termination.
    pub working_set: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
}

/// A prepared problem: factored cost and fixed constraint matrices. Only the
/// linear cost and the equality right-hand side vary between solves.
#[derive(Debug, Clone)]
pub struct QpStructure {
    factor: CostFactor,
    aeq: DMatrix<f64>,
    ain: DMatrix<f64>,
    bin: DVector<f64>,
    /// `R^{-T} Aeqᵀ`
    yeq: DMatrix<f64>,
    /// `R^{-T} Ainᵀ`
    yin: DMatrix<f64>,
}

impl QpStructure {
    pub fn new(factor: CostFactor, aeq: DMatrix<f64>, ain: DMatrix<f64>, bin: DVector<f64>) -> Result<Self> {
        let d = factor.dim();
        ensure_dim("Aeq", (aeq.nrows(), d), aeq.shape())?;
        ensure_dim("Ain", (bin.len(), d), ain.shape())?;
        let yeq = factor.solve_rt(&aeq.transpose());
        let yin = factor.solve_rt(&ain.transpose());
        Ok(Self {
            factor,
            aeq,
            ain,
            bin,
            yeq,
            yin,
        })
    }

    pub fn from_problem(qp: &QpProblem) -> Result<Self> {
        Self::new(CostFactor::from_matrix(&qp.p)?, qp.aeq.clone(), qp.ain.clone(), qp.bin.clone())
    }

    pub fn dim(&self) -> usize {
        self.factor.dim()
    }

    pub fn n_eq(&self) -> usize {
        self.aeq.nrows()
    }

    pub fn n_in(&self) -> usize {
        self.ain.nrows()
    }

    pub fn factor(&self) -> &CostFactor {
        &self.factor
    }

    pub fn ain(&self) -> &DMatrix<f64> {
        &self.ain
    }

    pub fn bin(&self) -> &DVector<f64> {
        &self.bin
    }

    pub fn aeq(&self) -> &DMatrix<f64> {
        &self.aeq
    }

    pub fn objective(&self, q: &DVector<f64>, g: &DVector<f64>) -> f64 {
        self.factor.half_quad(g) + q.dot(g)
    }

    fn check_rhs(&self, q: &DVector<f64>, beq: &DVector<f64>) -> Result<()> {
        ensure_len("linear cost", self.dim(), q.len())?;
        ensure_len("equality rhs", self.n_eq(), beq.len())
    }
}

/// Solves `qp` from scratch with default settings and feasibility tolerance `tol`.
pub fn solve(qp: &QpProblem, tol: f64) -> Result<QpSolution> {
    let settings = QpSettings {
        feas_tol: tol,
        ..QpSettings::default()
    };
    QpStructure::from_problem(qp)?.solve(&qp.q, &qp.beq, None, &settings)
}

/// Local affine law `g*(θ) = Ã θ + h̃` of the problem whose linear cost is
/// `q = q₀ + G θ` and equality right-hand side `beq = b₀ + Beq θ`; `qp` is the
/// instance at `theta` and `sol` its solution.
pub fn affine_law(
    qp: &QpProblem,
    param_cost: &DMatrix<f64>,
    param_eq: &DMatrix<f64>,
    theta: &DVector<f64>,
    sol: &QpSolution,
) -> Result<AffineLaw> {
    let structure = QpStructure::from_problem(qp)?;
    let q0 = &qp.q - param_cost * theta;
    let b0 = &qp.beq - param_eq * theta;
    structure.affine_law(sol, &q0, param_cost, &b0, param_eq, &QpSettings::default())
}
