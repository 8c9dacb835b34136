use nalgebra::{DMatrix, DVector};

use super::active_set::Row;
use super::{QpSettings, QpSolution, QpStructure};
use crate::error::{ensure_dim, ensure_len, Error, Result};

/// `g*(θ) = Ã θ + h̃`, valid on the critical region of `region_active_set`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLaw {
    pub a_tilde: DMatrix<f64>,
    pub h_tilde: DVector<f64>,
    /// Inequalities treated as equalities when differentiating.
    pub region_active_set: Vec<usize>,
    /// Set when weakly active or linearly dependent constraints had to be dropped.
    pub degenerate: bool,
}

impl AffineLaw {
    pub fn eval(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.a_tilde * theta + &self.h_tilde
    }
}

impl QpStructure {
    /// Differentiates the KKT system at `sol` for the parametric problem with
    /// linear cost `q0 + G θ` and equality right-hand side `b0 + Beq θ`.
    /// Only strongly active inequalities (multiplier above `mult_tol`) are kept.
    pub fn affine_law(
        &self,
        sol: &QpSolution,
        q0: &DVector<f64>,
        g_param: &DMatrix<f64>,
        b0: &DVector<f64>,
        beq_param: &DMatrix<f64>,
        settings: &QpSettings,
    ) -> Result<AffineLaw> {
        let k = g_param.ncols();
        ensure_dim("parametric cost", (self.dim(), k), g_param.shape())?;
        ensure_dim("parametric equality", (self.n_eq(), k), beq_param.shape())?;
        ensure_len("linear cost", self.dim(), q0.len())?;
        ensure_len("equality rhs", self.n_eq(), b0.len())?;

        let lam_scale = sol.ineq_multipliers.iter().fold(1.0_f64, |a, &b| a.max(b.abs()));
        let threshold = settings.mult_tol * lam_scale;
        let mut strong: Vec<usize> = sol
            .active_set
            .iter()
            .chain(&sol.working_set)
            .cloned()
            .filter(|&i| sol.ineq_multipliers[i] > threshold)
            .collect();
        strong.sort_unstable();
        strong.dedup();
        let mut degenerate = sol.active_set.iter().any(|i| !strong.contains(i));

        // Largest multipliers first, so dependence trimming drops the weakest.
        strong.sort_by(|&a, &b| {
            sol.ineq_multipliers[b]
                .partial_cmp(&sol.ineq_multipliers[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut rows: Vec<Row> = (0..self.n_eq()).map(Row::Eq).collect();
        let probe_u = DMatrix::zeros(self.dim(), 1);
        for &i in &strong {
            rows.push(Row::In(i));
            let b = DMatrix::zeros(rows.len(), 1);
            match self.kkt_solve(&rows, &probe_u, &b) {
                Ok(_) => {}
                Err(Error::Singular(_)) => {
                    rows.pop();
                    degenerate = true;
                }
                Err(e) => return Err(e),
            }
        }

        let n_rows = rows.len();
        let mut b_theta = DMatrix::zeros(n_rows, k);
        b_theta.rows_mut(0, self.n_eq()).copy_from(beq_param);
        let u_theta = self.factor.solve_rt(g_param);
        let (a_tilde, _) = self.kkt_solve(&rows, &u_theta, &b_theta)?;

        let b_const = self.row_rhs(&rows, b0);
        let u_const = self.factor.solve_rt_vec(q0);
        let (h, _) = self.kkt_solve(
            &rows,
            &DMatrix::from_column_slice(u_const.len(), 1, u_const.as_slice()),
            &DMatrix::from_column_slice(n_rows, 1, b_const.as_slice()),
        )?;

        let mut region_active_set: Vec<usize> = rows
            .iter()
            .filter_map(|r| match r {
                Row::In(i) => Some(*i),
                Row::Eq(_) => None,
            })
            .collect();
        region_active_set.sort_unstable();
        Ok(AffineLaw {
            a_tilde,
            h_tilde: h.column(0).into_owned(),
            region_active_set,
            degenerate,
        })
    }
}
