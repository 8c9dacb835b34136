//! Independent KKT certification working on the explicit problem data.

use super::{QpProblem, QpSolution};

/// Scaled KKT residuals; every field is dimensionless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        [
            self.stationarity,
            self.primal_eq,
            self.primal_ineq,
            self.dual,
            self.complementarity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn satisfied(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

pub fn kkt_residuals(qp: &QpProblem, sol: &QpSolution) -> KktResiduals {
    let g = &sol.g_star;
    let pg = &qp.p * g;
    let grad = &pg
        + &qp.q
        + qp.aeq.tr_mul(&sol.eq_multipliers)
        + qp.ain.tr_mul(&sol.ineq_multipliers);
    let stat_scale = 1.0 + pg.amax().max(qp.q.amax());

    let eq_res = if qp.beq.is_empty() {
        0.0
    } else {
        (&qp.aeq * g - &qp.beq).amax() / (1.0 + qp.beq.amax())
    };

    let slack = &qp.bin - &qp.ain * g;
    let mut ineq_res: f64 = 0.0;
    let mut comp: f64 = 0.0;
    let lam_scale = 1.0 + sol.ineq_multipliers.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    for i in 0..slack.len() {
        let bscale = 1.0 + qp.bin[i].abs();
        ineq_res = ineq_res.max((-slack[i]).max(0.0) / bscale);
        comp = comp.max((sol.ineq_multipliers[i] * slack[i]).abs() / (lam_scale * bscale));
    }
    let dual = sol
        .ineq_multipliers
        .iter()
        .fold(0.0_f64, |a, &l| a.max((-l).max(0.0)))
        / lam_scale;

    KktResiduals {
        stationarity: grad.amax() / stat_scale,
        primal_eq: eq_res,
        primal_ineq: ineq_res,
        dual,
        complementarity: comp,
    }
}
