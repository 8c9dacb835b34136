//! The DeePC program in condensed multiparametric form.
//!
//! With `θ = col(z, u_p)`, where `z` is either the raw window of past outputs
//! or its filtered estimate, one controller iteration solves
//!
//! ```text
//!     min_g   ½ gᵀ P g + (G θ + q(r))ᵀ g + θᵀ H θ + ½ rᵀ Q r
//!     s.t.    Up g = Beq θ,   Ain g <= bin
//! ```
//!
//! with `P = YfᵀQYf + UfᵀRUf + λy YpᵀYp + λg I`, `q(r) = -YfᵀQ r`,
//! `G = [-λy Ypᵀ 0]`, `Beq = [0 I]` and `Ain = col(Uf, -Uf, Yf, -Yf)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_len, Error, Result};
use crate::hankel::DataBlocks;
use crate::linalg::{block_diag_repeat, psd_sqrt, vstack, vstack_vec};
use crate::qp::{AffineLaw, CostFactor, QpProblem, QpSettings, QpSolution, QpStructure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeePCConfig {
    pub np: usize,
    pub nf: usize,
    /// Inputs applied per solve minus one.
    pub nc: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub lambda_y: f64,
    pub lambda_g: f64,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub y_min: DVector<f64>,
    pub y_max: DVector<f64>,
}

impl DeePCConfig {
    /// Identity weights and symmetric bounds `±bound` on every channel.
    pub fn with_defaults(m: usize, p: usize, np: usize, nf: usize, bound: f64) -> Self {
        Self {
            np,
            nf,
            nc: 0,
            q: DMatrix::identity(p, p),
            r: DMatrix::identity(m, m),
            lambda_y: 1.0,
            lambda_g: 1.0,
            u_min: DVector::from_element(m, -bound),
            u_max: DVector::from_element(m, bound),
            y_min: DVector::from_element(p, -bound),
            y_max: DVector::from_element(p, bound),
        }
    }

    pub fn m(&self) -> usize {
        self.r.nrows()
    }

    pub fn p(&self) -> usize {
        self.q.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, p) = (self.m(), self.p());
        if self.np == 0 || self.nf == 0 {
            return Err(Error::InvalidArgument("horizons must be at least 1".into()));
        }
        if self.nc >= self.nf {
            return Err(Error::InvalidArgument(format!(
                "Nc = {} must be below Nf = {}",
                self.nc, self.nf
            )));
        }
        ensure_dim("Q", (p, p), self.q.shape())?;
        ensure_dim("R", (m, m), self.r.shape())?;
        ensure_len("u_min", m, self.u_min.len())?;
        ensure_len("u_max", m, self.u_max.len())?;
        ensure_len("y_min", p, self.y_min.len())?;
        ensure_len("y_max", p, self.y_max.len())?;
        if !crate::linalg::is_psd(&self.q, 1e-12) {
            return Err(Error::InvalidArgument("output weight Q must be symmetric PSD".into()));
        }
        if !crate::linalg::is_symmetric(&self.r, 1e-12) || nalgebra::Cholesky::new(self.r.clone()).is_none() {
            return Err(Error::InvalidArgument("input weight R must be symmetric PD".into()));
        }
        if !(self.lambda_y >= 0.0 && self.lambda_g >= 0.0) {
            return Err(Error::InvalidArgument("regularization weights must be non-negative".into()));
        }
        let ordered = |lo: &DVector<f64>, hi: &DVector<f64>| lo.iter().zip(hi.iter()).all(|(a, b)| a <= b);
        if !ordered(&self.u_min, &self.u_max) || !ordered(&self.y_min, &self.y_max) {
            return Err(Error::InvalidArgument("lower bounds must not exceed upper bounds".into()));
        }
        Ok(())
    }
}

/// θ-independent data of the condensed program, assembled once per data set
/// and configuration.
#[derive(Debug, Clone)]
pub struct ParametricQp {
    /// Formed cost matrix `P` (the solver works from its factor).
    pub p: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub beq: DMatrix<f64>,
    pub aeq: DMatrix<f64>,
    pub ain: DMatrix<f64>,
    pub bin: DVector<f64>,
    /// `-Yfᵀ Q_blk`, so that `q(r) = ref_map * r`.
    ref_map: DMatrix<f64>,
    q_blk: DMatrix<f64>,
    structure: QpStructure,
    m: usize,
    p_out: usize,
    np: usize,
    nf: usize,
}

pub fn assemble_parametric_qp(data: &DataBlocks, cfg: &DeePCConfig) -> Result<ParametricQp> {
    cfg.validate()?;
    let (m, p, np, nf) = (data.m, data.p, data.np, data.nf);
    if (cfg.m(), cfg.p(), cfg.np, cfg.nf) != (m, p, np, nf) {
        return Err(Error::dim(
            "data blocks vs controller",
            format!("m={} p={} Np={} Nf={}", cfg.m(), cfg.p(), cfg.np, cfg.nf),
            format!("m={m} p={p} Np={np} Nf={nf}"),
        ));
    }
    let d = data.cols();
    let q_blk = block_diag_repeat(&cfg.q, nf);
    let r_blk = block_diag_repeat(&cfg.r, nf);

    let q_root = block_diag_repeat(&psd_sqrt(&cfg.q)?, nf);
    let r_chol = nalgebra::Cholesky::new(cfg.r.clone())
        .ok_or_else(|| Error::InvalidArgument("input weight R must be PD".into()))?;
    let r_root = block_diag_repeat(&r_chol.l().transpose(), nf);
    let root = vstack(&[
        &(q_root * &data.yf),
        &(r_root * &data.uf),
        &(&data.yp * cfg.lambda_y.sqrt()),
        &(DMatrix::identity(d, d) * cfg.lambda_g.sqrt()),
    ]);
    let factor = CostFactor::from_root(&root).map_err(|e| {
        Error::NotPositiveDefinite(format!(
            "DeePC cost matrix is not positive definite ({e}); use lambda_g > 0 or more data"
        ))
    })?;

    let mut p_mat = data.yf.tr_mul(&(&q_blk * &data.yf))
        + data.uf.tr_mul(&(&r_blk * &data.uf))
        + data.yp.tr_mul(&data.yp) * cfg.lambda_y
        + DMatrix::identity(d, d) * cfg.lambda_g;
    crate::linalg::symmetrize(&mut p_mat);

    let dim_theta = p * np + m * np;
    let mut g = DMatrix::zeros(d, dim_theta);
    g.columns_mut(0, p * np).copy_from(&(data.yp.transpose() * -cfg.lambda_y));
    let mut h = DMatrix::zeros(dim_theta, dim_theta);
    for i in 0..p * np {
        h[(i, i)] = cfg.lambda_y / 2.0;
    }
    let mut beq = DMatrix::zeros(m * np, dim_theta);
    beq.columns_mut(p * np, m * np).copy_from(&DMatrix::identity(m * np, m * np));

    let ain = vstack(&[&data.uf, &(-&data.uf), &data.yf, &(-&data.yf)]);
    let bin = bounds_vector(cfg, nf, 1.0);
    let structure = QpStructure::new(factor, data.up.clone(), ain.clone(), bin.clone())?;

    Ok(ParametricQp {
        p: p_mat,
        g,
        h,
        beq,
        aeq: data.up.clone(),
        ain,
        bin,
        ref_map: -(data.yf.transpose() * &q_blk),
        q_blk,
        structure,
        m,
        p_out: p,
        np,
        nf,
    })
}

/// `col(1 u_max, -1 u_min, 1 y_max, -1 y_min)` with the output box widened
/// about its center by `y_widen`.
fn bounds_vector(cfg: &DeePCConfig, nf: usize, y_widen: f64) -> DVector<f64> {
    let center = (&cfg.y_max + &cfg.y_min) / 2.0;
    let half = (&cfg.y_max - &cfg.y_min) / 2.0 * y_widen;
    let y_max = &center + &half;
    let y_min = &center - &half;
    let rep = |v: &DVector<f64>, sign: f64| {
        DVector::from_iterator(v.len() * nf, (0..nf).flat_map(|_| v.iter().map(move |x| sign * x)))
    };
    vstack_vec(&[
        &rep(&cfg.u_max, 1.0),
        &rep(&cfg.u_min, -1.0),
        &rep(&y_max, 1.0),
        &rep(&y_min, -1.0),
    ])
}

impl ParametricQp {
    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn dim_theta(&self) -> usize {
        self.g.ncols()
    }

    pub fn structure(&self) -> &QpStructure {
        &self.structure
    }

    /// `q_k = -Yfᵀ Q_blk r`.
    pub fn linear_term(&self, r_window: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_len("reference window", self.p_out * self.nf, r_window.len())?;
        Ok(&self.ref_map * r_window)
    }

    pub fn theta(&self, z: &DVector<f64>, u_p: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_len("output window", self.p_out * self.np, z.len())?;
        ensure_len("input window", self.m * self.np, u_p.len())?;
        Ok(vstack_vec(&[z, u_p]))
    }

    /// Explicit QP instance at `θ` and reference window `r`.
    pub fn instance(&self, theta: &DVector<f64>, r_window: &DVector<f64>) -> Result<QpProblem> {
        let q = &self.g * theta + self.linear_term(r_window)?;
        QpProblem::new(
            self.p.clone(),
            q,
            self.aeq.clone(),
            &self.beq * theta,
            self.ain.clone(),
            self.bin.clone(),
        )
    }

    /// Constant terms `θᵀHθ + ½ rᵀ Q_blk r` of the objective.
    pub fn constant_terms(&self, theta: &DVector<f64>, r_window: &DVector<f64>) -> f64 {
        theta.dot(&(&self.h * theta)) + 0.5 * r_window.dot(&(&self.q_blk * r_window))
    }

    pub fn solve(
        &self,
        theta: &DVector<f64>,
        r_window: &DVector<f64>,
        warm: Option<&[usize]>,
        settings: &QpSettings,
    ) -> Result<QpSolution> {
        ensure_len("theta", self.dim_theta(), theta.len())?;
        let q = &self.g * theta + self.linear_term(r_window)?;
        self.structure.solve(&q, &(&self.beq * theta), warm, settings)
    }

    /// Optimizer sensitivity at a solution obtained for `r_window`.
    pub fn affine_law(&self, sol: &QpSolution, r_window: &DVector<f64>, settings: &QpSettings) -> Result<AffineLaw> {
        let q0 = self.linear_term(r_window)?;
        let b0 = DVector::zeros(self.aeq.nrows());
        self.structure.affine_law(sol, &q0, &self.g, &b0, &self.beq, settings)
    }

    /// Same program with the output box widened about its center by `factor`.
    pub fn with_widened_output_bounds(&self, cfg: &DeePCConfig, factor: f64) -> Result<Self> {
        let bin = bounds_vector(cfg, self.nf, factor);
        let structure = QpStructure::new(
            self.structure.factor().clone(),
            self.aeq.clone(),
            self.ain.clone(),
            bin.clone(),
        )?;
        Ok(Self {
            bin,
            structure,
            ..self.clone()
        })
    }
}

/// `col(Yp without its first block row, first block row of Yf)`: maps `g` to
/// the output window shifted by one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    pub m: DMatrix<f64>,
}

pub fn prediction_map(data: &DataBlocks) -> PredictionMap {
    let (p, np) = (data.p, data.np);
    let shifted = data.yp.rows(p, p * (np - 1)).into_owned();
    let newest = data.yf.rows(0, p).into_owned();
    PredictionMap {
        m: vstack(&[&shifted, &newest]),
    }
}

/// Result of one receding-horizon solve.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// First `Nc + 1` inputs of `Uf g*`.
    pub u_applied: Vec<DVector<f64>>,
    pub g_star: DVector<f64>,
    /// `Yf g*`.
    pub y_pred: DVector<f64>,
    pub solution: QpSolution,
    /// Objective including the constant terms.
    pub objective: f64,
    /// Set when the output bounds had to be widened to regain feasibility.
    pub relaxed: bool,
}

/// Widening applied to the output box when the nominal program is infeasible.
pub const OUTPUT_RELAX_FACTOR: f64 = 10.0;

fn step_with_theta(
    pqp: &ParametricQp,
    data: &DataBlocks,
    cfg: &DeePCConfig,
    theta: &DVector<f64>,
    r_window: &DVector<f64>,
    warm: Option<&[usize]>,
    settings: &QpSettings,
) -> Result<(StepOutcome, Option<ParametricQp>)> {
    let (solution, relaxed) = match pqp.solve(theta, r_window, warm, settings) {
        Ok(sol) => (sol, None),
        Err(Error::Infeasible(msg)) => {
            log::warn!("DeePC program infeasible ({msg}); widening output bounds {OUTPUT_RELAX_FACTOR}x");
            let wide = pqp.with_widened_output_bounds(cfg, OUTPUT_RELAX_FACTOR)?;
            let sol = wide.solve(theta, r_window, None, settings)?;
            (sol, Some(wide))
        }
        Err(e) => return Err(e),
    };
    let g_star = solution.g_star.clone();
    let uf = &data.uf * &g_star;
    let m = data.m;
    let u_applied = (0..=cfg.nc).map(|i| uf.rows(i * m, m).into_owned()).collect();
    let objective = solution.objective + pqp.constant_terms(theta, r_window);
    Ok((
        StepOutcome {
            u_applied,
            y_pred: &data.yf * &g_star,
            g_star,
            solution,
            objective,
            relaxed: relaxed.is_some(),
        },
        relaxed,
    ))
}

/// Standard DeePC: the raw measured window `y_p` fills the output slot of θ.
pub fn deepc_step_standard(
    pqp: &ParametricQp,
    data: &DataBlocks,
    cfg: &DeePCConfig,
    r_window: &DVector<f64>,
    u_p: &DVector<f64>,
    y_p: &DVector<f64>,
    warm: Option<&[usize]>,
) -> Result<StepOutcome> {
    let theta = pqp.theta(y_p, u_p)?;
    step_with_theta(pqp, data, cfg, &theta, r_window, warm, &QpSettings::default()).map(|(o, _)| o)
}

/// EKF variant: the filtered window estimate fills the output slot, and the
/// local affine law of the optimizer is returned for the filter.
pub fn deepc_step_ekf(
    pqp: &ParametricQp,
    data: &DataBlocks,
    cfg: &DeePCConfig,
    r_window: &DVector<f64>,
    u_p: &DVector<f64>,
    z_hat: &DVector<f64>,
    warm: Option<&[usize]>,
) -> Result<(StepOutcome, AffineLaw)> {
    let settings = QpSettings::default();
    let theta = pqp.theta(z_hat, u_p)?;
    let (outcome, relaxed) = step_with_theta(pqp, data, cfg, &theta, r_window, warm, &settings)?;
    let law = relaxed
        .as_ref()
        .unwrap_or(pqp)
        .affine_law(&outcome.solution, r_window, &settings)?;
    Ok((outcome, law))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hankel::split_past_future;
    use crate::lti_sim::{generate_pe_input, simulate, LtiModel, NoiseSpec};

    fn benchmark_data(t: usize, np: usize, nf: usize, noise: f64, seed: u64) -> DataBlocks {
        let model = LtiModel::benchmark();
        let u = generate_pe_input(1, t, np + nf + 2, 1.0, seed).unwrap();
        let spec = NoiseSpec::new(noise, noise, seed + 1).unwrap();
        let traj = simulate(&model, &DVector::zeros(2), &u, &spec).unwrap();
        split_past_future(&traj.inputs, &traj.outputs, np, nf).unwrap()
    }

    #[test]
    fn cost_matrix_specializes() {
        let data = benchmark_data(40, 3, 5, 0.1, 3);
        let mut cfg = DeePCConfig::with_defaults(1, 1, 3, 5, 1e3);
        cfg.lambda_y = 0.0;
        cfg.lambda_g = 0.0;
        // P = YfᵀYf + UfᵀUf is singular here (d > rank), so only the formula is checked.
        let expect = data.yf.tr_mul(&data.yf) + data.uf.tr_mul(&data.uf);
        assert!(matches!(assemble_parametric_qp(&data, &cfg), Err(Error::NotPositiveDefinite(_))));
        cfg.lambda_g = 1e-6;
        let pqp = assemble_parametric_qp(&data, &cfg).unwrap();
        let diff = &pqp.p - expect - DMatrix::identity(pqp.dim(), pqp.dim()) * 1e-6;
        assert!(diff.amax() < 1e-9);
    }

    #[test]
    fn bounds_layout() {
        let mut cfg = DeePCConfig::with_defaults(1, 1, 3, 5, 1.0);
        cfg.y_min[0] = -10.0;
        cfg.y_max[0] = 10.0;
        let b = bounds_vector(&cfg, 5, 1.0);
        let expect: Vec<f64> = [1.0; 5].iter().chain(&[1.0; 5]).chain(&[10.0; 5]).chain(&[10.0; 5]).cloned().collect();
        assert_eq!(b.as_slice(), expect.as_slice());
        let wide = bounds_vector(&cfg, 5, 10.0);
        assert_eq!(wide[10], 100.0);
        assert_eq!(wide[0], 1.0);
    }

    #[test]
    fn benchmark_scale_dimensions() {
        let data = benchmark_data(100, 3, 5, 0.5, 1);
        let cfg = DeePCConfig::with_defaults(1, 1, 3, 5, 1e3);
        let pqp = assemble_parametric_qp(&data, &cfg).unwrap();
        assert_eq!(pqp.dim(), 93);
        assert_eq!(pqp.dim_theta(), 6);
        assert_eq!(pqp.ain.shape(), (20, 93));
        assert_eq!(pqp.beq.columns(3, 3), DMatrix::identity(3, 3));
        assert!(pqp.beq.columns(0, 3).iter().all(|&x| x == 0.0));
        assert!((pqp.g.columns(0, 3) + data.yp.transpose()).amax() < 1e-12);
        assert!(crate::linalg::is_symmetric(&pqp.p, 0.0));
    }

    #[test]
    fn origin_is_optimal_for_zero_reference() {
        let data = benchmark_data(60, 3, 5, 0.0, 2);
        let cfg = DeePCConfig::with_defaults(1, 1, 3, 5, 1e3);
        let pqp = assemble_parametric_qp(&data, &cfg).unwrap();
        let zero3 = DVector::zeros(3);
        let out = deepc_step_standard(&pqp, &data, &cfg, &DVector::zeros(5), &zero3, &zero3, None).unwrap();
        assert!(out.u_applied[0].amax() < 1e-12);
        assert!(out.g_star.amax() < 1e-12);
    }

    #[test]
    fn input_bound_clips_first_move() {
        let data = benchmark_data(60, 3, 5, 0.0, 2);
        let mut cfg = DeePCConfig::with_defaults(1, 1, 3, 5, 1e3);
        cfg.u_max[0] = 0.5;
        cfg.lambda_g = 1e-3;
        let pqp = assemble_parametric_qp(&data, &cfg).unwrap();
        let zero3 = DVector::zeros(3);
        let r = DVector::from_element(5, 100.0);
        let out = deepc_step_standard(&pqp, &data, &cfg, &r, &zero3, &zero3, None).unwrap();
        assert!((out.u_applied[0][0] - 0.5).abs() < 1e-8, "{}", out.u_applied[0][0]);
        assert!(!out.solution.active_set.is_empty());
    }

    #[test]
    fn ekf_step_matches_standard_on_same_theta() {
        let data = benchmark_data(60, 3, 5, 0.2, 5);
        let mut cfg = DeePCConfig::with_defaults(1, 1, 3, 5, 1e3);
        cfg.lambda_y = 10.0;
        cfg.lambda_g = 0.5;
        let pqp = assemble_parametric_qp(&data, &cfg).unwrap();
        let yp = DVector::from_column_slice(&[0.3, -0.2, 1.1]);
        let up = DVector::from_column_slice(&[0.1, 0.4, -0.5]);
        let r = DVector::from_fn(5, |i, _| (i as f64 * 0.3).sin() * 5.0);
        let a = deepc_step_standard(&pqp, &data, &cfg, &r, &up, &yp, None).unwrap();
        let (b, law) = deepc_step_ekf(&pqp, &data, &cfg, &r, &up, &yp, None).unwrap();
        assert_eq!(a.g_star, b.g_star);
        let theta = pqp.theta(&yp, &up).unwrap();
        assert!((law.eval(&theta) - &b.g_star).amax() < 1e-9 * (1.0 + b.g_star.amax()));
        // Shift consistency: newest entry of M g equals first block of Yf g.
        let map = prediction_map(&data);
        let shifted = &map.m * &b.g_star;
        assert!((shifted[2] - b.y_pred[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_y_decouples_output_window() {
        let data = benchmark_data(60, 3, 5, 0.2, 6);
        let mut cfg = DeePCConfig::with_defaults(1, 1, 3, 5, 1e3);
        cfg.lambda_y = 0.0;
        let pqp = assemble_parametric_qp(&data, &cfg).unwrap();
        let up = DVector::from_column_slice(&[0.1, 0.4, -0.5]);
        let r = DVector::from_element(5, 1.0);
        let (a, law) =
            deepc_step_ekf(&pqp, &data, &cfg, &r, &up, &DVector::from_element(3, 2.0), None).unwrap();
        let (b, _) =
            deepc_step_ekf(&pqp, &data, &cfg, &r, &up, &DVector::from_element(3, -7.0), None).unwrap();
        assert!((&a.g_star - &b.g_star).amax() < 1e-12);
        assert!(law.a_tilde.columns(0, 3).amax() < 1e-12);
    }

    #[test]
    fn large_lambda_g_shrinks_everything() {
        let data = benchmark_data(60, 3, 5, 0.2, 7);
        let mut cfg = DeePCConfig::with_defaults(1, 1, 3, 5, 1e3);
        let up = DVector::from_column_slice(&[0.1, 0.4, -0.5]);
        let yp = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let r = DVector::from_element(5, 5.0);
        let mut last = f64::INFINITY;
        for lg in [1.0, 1e2, 1e4, 1e6, 1e8] {
            cfg.lambda_g = lg;
            let pqp = assemble_parametric_qp(&data, &cfg).unwrap();
            let out = deepc_step_standard(&pqp, &data, &cfg, &r, &(&up * 0.0), &yp, None).unwrap();
            let norm = out.g_star.norm();
            assert!(norm <= last + 1e-12);
            last = norm;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn prediction_map_layout() {
        let data = benchmark_data(30, 3, 5, 0.0, 8);
        let map = prediction_map(&data);
        assert_eq!(map.m.shape(), (3, data.cols()));
        assert_eq!(map.m.row(0), data.yp.row(1));
        assert_eq!(map.m.row(1), data.yp.row(2));
        assert_eq!(map.m.row(2), data.yf.row(0));
        let d1 = benchmark_data(30, 1, 5, 0.0, 8);
        assert_eq!(prediction_map(&d1).m, d1.yf.rows(0, 1).into_owned());
    }

    #[test]
    fn infeasible_outputs_fall_back_to_widened_box() {
        let data = benchmark_data(60, 3, 5, 0.0, 9);
        let mut cfg = DeePCConfig::with_defaults(1, 1, 3, 5, 1e3);
        cfg.lambda_g = 1e-6;
        // With zero input no free response stays within [4.9, 5.1] for five
        // steps, while the widened box [4, 6] admits one.
        cfg.u_min[0] = 0.0;
        cfg.u_max[0] = 0.0;
        cfg.y_min[0] = 4.9;
        cfg.y_max[0] = 5.1;
        let pqp = assemble_parametric_qp(&data, &cfg).unwrap();
        let yp = DVector::from_column_slice(&[5.0, 5.0, 5.0]);
        let up = DVector::zeros(3);
        let r = DVector::from_element(5, 5.0);
        let out = deepc_step_standard(&pqp, &data, &cfg, &r, &up, &yp, None).unwrap();
        assert!(out.relaxed);
        let y = &out.y_pred;
        assert!(y.iter().all(|&v| (4.0 - 1e-6..=6.0 + 1e-6).contains(&v)), "{y}");
        assert!(out.u_applied[0].amax() < 1e-9);

        cfg.y_min[0] = 4.99;
        cfg.y_max[0] = 5.01;
        let pqp = assemble_parametric_qp(&data, &cfg).unwrap();
        let err = deepc_step_standard(&pqp, &data, &cfg, &r, &up, &yp, None).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }
}
