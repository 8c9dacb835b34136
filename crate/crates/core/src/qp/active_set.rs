use nalgebra::{DMatrix, DVector};

use super::{QpSettings, QpSolution, QpStructure};
use crate::error::{Error, Result};

/// Relative diagonal threshold for linear independence of working-set normals.
const LICQ_TOL: f64 = 1e-10;
/// A new constraint is dependent on the working set when its projected normal
/// shrinks below this fraction of its length.
const DEP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Row {
    Eq(usize),
    In(usize),
}

/// Thin QR of the working-set normals in the `R^{-T}`-transformed space.
struct WorkingQr {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl WorkingQr {
    fn new(y: DMatrix<f64>) -> Result<Self> {
        let (d, w) = y.shape();
        if w > d {
            return Err(Error::Singular(format!("{w} working constraints in dimension {d}")));
        }
        let scale = y.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
        let qr = y.qr();
        let r = qr.r();
        if r.diagonal().iter().any(|v| !(v.abs() > LICQ_TOL * scale)) {
            return Err(Error::Singular("working-set constraints are linearly dependent".into()));
        }
        Ok(Self { q: qr.q(), r })
    }

    /// Least-squares coefficients and residual of `w` against the working columns.
    fn project(&self, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let qtw = self.q.tr_mul(w);
        let coef = self
            .r
            .solve_upper_triangular(&qtw)
            .expect("diagonal checked in WorkingQr::new");
        let resid = w - &self.q * qtw;
        (coef, resid)
    }
}

impl QpStructure {
    fn column(&self, row: Row) -> DVector<f64> {
        match row {
            Row::Eq(i) => self.yeq.column(i).into_owned(),
            Row::In(i) => self.yin.column(i).into_owned(),
        }
    }

    fn working_matrix(&self, rows: &[Row]) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.dim(), rows.len());
        for (j, &row) in rows.iter().enumerate() {
            y.set_column(j, &self.column(row));
        }
        y
    }

    pub(super) fn row_rhs(&self, rows: &[Row], beq: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            rows.len(),
            rows.iter().map(|&row| match row {
                Row::Eq(i) => beq[i],
                Row::In(i) => self.bin[i],
            }),
        )
    }

    /// Solves `P g + c + N λ = 0`, `Nᵀ g = b` where `N` holds the normals of
    /// `rows`, given `u = R^{-T} c`. Columns of `u` and `b` are independent
    /// right-hand sides.
    pub(super) fn kkt_solve(
        &self,
        rows: &[Row],
        u: &DMatrix<f64>,
        b: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if rows.is_empty() {
            return Ok((-self.factor.solve_r(u), DMatrix::zeros(0, u.ncols())));
        }
        let y = self.working_matrix(rows);
        let wqr = WorkingQr::new(y.clone())?;
        let t = wqr
            .r
            .tr_solve_upper_triangular(b)
            .expect("diagonal checked in WorkingQr::new");
        let rhs = -t - wqr.q.tr_mul(u);
        let lam = wqr
            .r
            .solve_upper_triangular(&rhs)
            .expect("diagonal checked in WorkingQr::new");
        let g = -self.factor.solve_r(&(u + &y * &lam));
        Ok((g, lam))
    }

    fn kkt_solve_vec(
        &self,
        rows: &[Row],
        u: &DVector<f64>,
        beq: &DVector<f64>,
    ) -> Result<(DVector<f64>, Vec<f64>)> {
        let u = DMatrix::from_column_slice(u.len(), 1, u.as_slice());
        let b = self.row_rhs(rows, beq);
        let b = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        let (g, lam) = self.kkt_solve(rows, &u, &b)?;
        Ok((g.column(0).into_owned(), lam.iter().cloned().collect()))
    }

    fn most_violated(&self, g: &DVector<f64>, working: &[Row], settings: &QpSettings) -> Option<usize> {
        let slack_violation = &self.ain * g - &self.bin;
        let mut best: Option<(usize, f64)> = None;
        for (i, &s) in slack_violation.iter().enumerate() {
            if s <= settings.feas_tol * (1.0 + self.bin[i].abs()) || working.contains(&Row::In(i)) {
                continue;
            }
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Dual active-set solve for linear cost `q` and equality right-hand side
    /// `beq`. `warm` is a guess of the optimal working set (inequality indices),
    /// typically the previous solve's; it is used only when it is dual feasible.
    pub fn solve(
        &self,
        q: &DVector<f64>,
        beq: &DVector<f64>,
        warm: Option<&[usize]>,
        settings: &QpSettings,
    ) -> Result<QpSolution> {
        self.check_rhs(q, beq)?;
        let u = self.factor.solve_rt_vec(q);
        let mut working: Vec<Row> = (0..self.n_eq()).map(Row::Eq).collect();
        let (mut g, mut lam) = self.kkt_solve_vec(&working, &u, beq).map_err(|e| match e {
            Error::Singular(_) => Error::Infeasible("equality constraints are linearly dependent".into()),
            other => other,
        })?;

        if let Some(guess) = warm.filter(|w| !w.is_empty()) {
            let mut rows = working.clone();
            for &i in guess {
                if i < self.n_in() && !rows.contains(&Row::In(i)) {
                    rows.push(Row::In(i));
                }
            }
            if let Ok((gw, lw)) = self.kkt_solve_vec(&rows, &u, beq) {
                let scale = lw.iter().fold(1.0_f64, |a, &b| a.max(b.abs()));
                let dual_ok = rows
                    .iter()
                    .zip(&lw)
                    .all(|(r, &l)| matches!(r, Row::Eq(_)) || l >= -settings.mult_tol * scale);
                if dual_ok {
                    lam = rows
                        .iter()
                        .zip(lw)
                        .map(|(r, l)| if let Row::In(_) = r { l.max(0.0) } else { l })
                        .collect();
                    working = rows;
                    g = gw;
                }
            }
        }

        let mut iterations = 0;
        while let Some(p) = self.most_violated(&g, &working, settings) {
            let wp = self.yin.column(p).into_owned();
            let ap = self.ain.row(p).transpose();
            let mut tp = 0.0;
            loop {
                iterations += 1;
                if iterations > settings.max_iter {
                    return Err(Error::IterationLimit(settings.max_iter));
                }
                let (r, resid) = if working.is_empty() {
                    (DVector::zeros(0), wp.clone())
                } else {
                    WorkingQr::new(self.working_matrix(&working))?.project(&wp)
                };
                let mut block: Option<(usize, f64)> = None;
                for (j, row) in working.iter().enumerate() {
                    if let Row::In(_) = row {
                        if r[j] > 0.0 {
                            let ratio = lam[j] / r[j];
                            if block.is_none_or(|(_, t)| ratio < t) {
                                block = Some((j, ratio));
                            }
                        }
                    }
                }
                let zz = resid.norm_squared();
                if resid.norm() <= DEP_TOL * wp.norm() {
                    // Normal of p lies in the span of the working set: dual step only.
                    let Some((j, t1)) = block else {
                        return Err(Error::Infeasible(format!(
                            "inequality {p} cannot be satisfied together with the working set"
                        )));
                    };
                    for (l, rj) in lam.iter_mut().zip(r.iter()) {
                        *l -= t1 * rj;
                    }
                    tp += t1;
                    working.remove(j);
                    lam.remove(j);
                    continue;
                }
                let z = -self.factor.solve_r_vec(&resid);
                let violation = ap.dot(&g) - self.bin[p];
                let t2 = (violation / zz).max(0.0);
                let (t, full) = match block {
                    Some((_, t1)) if t1 < t2 => (t1, false),
                    _ => (t2, true),
                };
                g.axpy(t, &z, 1.0);
                for (l, rj) in lam.iter_mut().zip(r.iter()) {
                    *l -= t * rj;
                }
                tp += t;
                if full {
                    working.push(Row::In(p));
                    lam.push(tp);
                    break;
                }
                let (j, _) = block.expect("partial step implies a blocking constraint");
                working.remove(j);
                lam.remove(j);
            }
        }

        // Re-solve on the final working set to shed accumulated rounding.
        if let Ok((gr, lr)) = self.kkt_solve_vec(&working, &u, beq) {
            g = gr;
            lam = lr;
        }

        let mut eq_multipliers = DVector::zeros(self.n_eq());
        let mut ineq_multipliers = DVector::zeros(self.n_in());
        let mut working_set = Vec::new();
        for (row, &l) in working.iter().zip(&lam) {
            match *row {
                Row::Eq(i) => eq_multipliers[i] = l,
                Row::In(i) => {
                    ineq_multipliers[i] = l.max(0.0);
                    working_set.push(i);
                }
            }
        }
        working_set.sort_unstable();
        let slack = &self.bin - &self.ain * &g;
        let active_set = slack
            .iter()
            .enumerate()
            .filter(|(_, &s)| s <= settings.active_tol)
            .map(|(i, _)| i)
            .collect();
        Ok(QpSolution {
            objective: self.objective(q, &g),
            g_star: g,
            eq_multipliers,
            ineq_multipliers,
            active_set,
            working_set,
            iterations,
        })
    }
}
