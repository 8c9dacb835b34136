//! Single closed-loop runs of every controller variant.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use super::config::{ExperimentConfig, Variant};
use crate::deepc::{
    assemble_parametric_qp, deepc_step_ekf, deepc_step_standard, prediction_map, DeePCConfig, ParametricQp,
    PredictionMap, OUTPUT_RELAX_FACTOR,
};
use crate::ekf::{DataDrivenEkf, EkfNoise, FilterDiagnostics};
use crate::error::{ensure_len, Error, Result};
use crate::hankel::{average_data_blocks, split_past_future, DataBlocks};
use crate::linalg::{block_diag_repeat, stack_samples, vstack, vstack_vec};
use crate::lti_sim::{collect_dataset, generate_pe_input, model_structure_matrices, InitialState, LtiModel, Plant, Trajectory};
use crate::qp::{CostFactor, QpSettings, QpStructure};
use crate::seeds::{derive_seed, stream_rng, Purpose};

/// Offline data of one repetition: the first collected trajectory alone and
/// the average over all of them. Both share one excitation sequence.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub single: DataBlocks,
    pub averaged: DataBlocks,
}

impl PreparedData {
    pub fn for_variant(&self, variant: Variant) -> Option<&DataBlocks> {
        match variant {
            Variant::Standard => Some(&self.single),
            Variant::Averaged | Variant::AveragedEkf => Some(&self.averaged),
            Variant::MpcOracle => None,
        }
    }
}

/// The `n_datasets` raw data trajectories of one run, all driven by the same
/// excitation.
pub fn generate_dataset(cfg: &ExperimentConfig, model: &LtiModel, run_seed: u64) -> Result<Vec<Trajectory>> {
    let order = cfg.controller.np + cfg.controller.nf + model.n();
    let input = generate_pe_input(
        model.m(),
        cfg.t,
        order,
        cfg.pe_amplitude,
        derive_seed(run_seed, Purpose::PeInput, 0),
    )?;
    let noise = cfg.noise.spec(derive_seed(run_seed, Purpose::DatasetNoise, 0))?;
    let x0 = InitialState::Gaussian {
        variance: cfg.data_x0_variance,
    };
    collect_dataset(model, cfg.n_datasets, &input, &x0, &noise)
}

/// Splits every trajectory with the configured horizons and averages them.
pub fn prepare_from_trajectories(trajectories: &[Trajectory], np: usize, nf: usize) -> Result<PreparedData> {
    let blocks = trajectories
        .iter()
        .map(|t| split_past_future(&t.inputs, &t.outputs, np, nf))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData {
        averaged: average_data_blocks(&blocks)?,
        single: blocks.into_iter().next().expect("at least one dataset"),
    })
}

/// Collects `n_datasets` trajectories under the data noise of `cfg`.
pub fn prepare_data(cfg: &ExperimentConfig, model: &LtiModel, run_seed: u64) -> Result<PreparedData> {
    let trajectories = generate_dataset(cfg, model, run_seed)?;
    prepare_from_trajectories(&trajectories, cfg.controller.np, cfg.controller.nf)
}

/// Outcome of one closed-loop run. Trajectories cover the controlled steps
/// only; the excitation phase is kept separately.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub variant: Variant,
    pub seed: u64,
    pub lambda_y: f64,
    pub lambda_g: f64,
    pub cost: f64,
    pub warmup_inputs: Vec<Vec<f64>>,
    pub warmup_outputs: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub references: Vec<Vec<f64>>,
    /// Filtered window after each update (EKF variant only).
    pub estimates: Vec<Vec<f64>>,
    pub diagnostics: Vec<FilterDiagnostics>,
    /// Solves that needed the widened output box.
    pub relaxed_steps: usize,
    /// Steps where a degenerate optimizer law was replaced by the previous one.
    pub law_fallbacks: usize,
}

/// `Σ ‖y_k - r_k‖²_Q + ‖u_k‖²_R`.
pub fn closed_loop_cost(
    inputs: &[Vec<f64>],
    outputs: &[Vec<f64>],
    references: &[Vec<f64>],
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> f64 {
    let mut cost = 0.0;
    for ((u, y), rf) in inputs.iter().zip(outputs).zip(references) {
        let e = DVector::from_iterator(y.len(), y.iter().zip(rf).map(|(a, b)| a - b));
        let u = DVector::from_column_slice(u);
        cost += e.dot(&(q * &e)) + u.dot(&(r * &u));
    }
    cost
}

impl ExperimentResult {
    /// Cost recomputed from the stored trajectories.
    pub fn recompute_cost(&self, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
        closed_loop_cost(&self.inputs, &self.outputs, &self.references, q, r)
    }

    /// One row per step: `k,phase,u_*,y_*,r_*` plus filter columns when present.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let m = self.inputs.first().or(self.warmup_inputs.first()).map_or(0, Vec::len);
        let p = self.outputs.first().or(self.warmup_outputs.first()).map_or(0, Vec::len);
        let mut header = vec!["k".to_string(), "phase".to_string()];
        header.extend((0..m).map(|i| format!("u_{i}")));
        header.extend((0..p).map(|i| format!("y_{i}")));
        header.extend((0..p).map(|i| format!("r_{i}")));
        let filtered = !self.diagnostics.is_empty();
        if filtered {
            header.extend(["innovation_norm", "gain_norm", "trace_p"].map(String::from));
        }
        writeln!(out, "{}", header.join(","))?;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>();
        let w = self.warmup_inputs.len();
        for (k, (u, y)) in self.warmup_inputs.iter().zip(&self.warmup_outputs).enumerate() {
            let mut row = vec![k.to_string(), "warmup".into()];
            row.extend(fmt(u));
            row.extend(fmt(y));
            row.extend(std::iter::repeat_n(String::new(), p));
            if filtered {
                row.extend(std::iter::repeat_n(String::new(), 3));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        for (j, ((u, y), r)) in self.inputs.iter().zip(&self.outputs).zip(&self.references).enumerate() {
            let mut row = vec![(w + j).to_string(), "control".into()];
            row.extend(fmt(u));
            row.extend(fmt(y));
            row.extend(fmt(r));
            if let Some(d) = self.diagnostics.get(j) {
                row.extend(fmt(&[d.innovation_norm, d.gain_norm, d.trace_p]));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Finite-horizon tracking MPC with the exact model and state.
#[derive(Debug, Clone)]
pub struct MpcOracle {
    cfg: DeePCConfig,
    /// `col(C, CA, ..., CA^{Nf-1})`.
    obs: DMatrix<f64>,
    /// Lower block-Toeplitz map from `u_f` to `y_f`.
    toeplitz: DMatrix<f64>,
    q_blk: DMatrix<f64>,
    factor: CostFactor,
    ain: DMatrix<f64>,
}

impl MpcOracle {
    pub fn new(model: &LtiModel, cfg: &DeePCConfig) -> Result<Self> {
        cfg.validate()?;
        if (cfg.m(), cfg.p()) != (model.m(), model.p()) {
            return Err(Error::dim(
                "oracle weights vs model",
                format!("m={} p={}", model.m(), model.p()),
                format!("m={} p={}", cfg.m(), cfg.p()),
            ));
        }
        let nf = cfg.nf;
        let m = model.m();
        // Past-window matrices of a depth-Nf window are the prediction from x_k.
        let s = model_structure_matrices(model, nf, 1)?;
        let toeplitz = s.toeplitz_past.columns(0, m * nf).into_owned();
        let q_blk = block_diag_repeat(&cfg.q, nf);
        let r_blk = block_diag_repeat(&cfg.r, nf);
        let mut p = toeplitz.tr_mul(&(&q_blk * &toeplitz)) + r_blk;
        crate::linalg::symmetrize(&mut p);
        let factor = CostFactor::from_matrix(&p)?;
        let eye = DMatrix::identity(m * nf, m * nf);
        let ain = vstack(&[&eye, &(-&eye), &toeplitz, &(-&toeplitz)]);
        Ok(Self {
            cfg: cfg.clone(),
            obs: s.obs_past,
            toeplitz,
            q_blk,
            factor,
            ain,
        })
    }

    fn bounds(&self, free: &DVector<f64>, widen: f64) -> DVector<f64> {
        let nf = self.cfg.nf;
        let rep = |v: &DVector<f64>| DVector::from_iterator(v.len() * nf, (0..nf).flat_map(|_| v.iter().cloned()));
        let center = (&self.cfg.y_max + &self.cfg.y_min) / 2.0;
        let half = (&self.cfg.y_max - &self.cfg.y_min) / 2.0 * widen;
        vstack_vec(&[
            &rep(&self.cfg.u_max),
            &(-rep(&self.cfg.u_min)),
            &(rep(&(&center + &half)) - free),
            &(free - rep(&(&center - &half))),
        ])
    }

    /// Optimal input sequence over the horizon and whether the output box had
    /// to be widened.
    pub fn plan(&self, x: &DVector<f64>, r_window: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
        ensure_len("state", self.obs.ncols(), x.len())?;
        ensure_len("reference window", self.obs.nrows(), r_window.len())?;
        let free = &self.obs * x;
        let q = self.toeplitz.tr_mul(&(&self.q_blk * (&free - r_window)));
        let beq = DVector::zeros(0);
        let settings = QpSettings::default();
        let solve = |widen: f64| -> Result<DVector<f64>> {
            let aeq = DMatrix::zeros(0, self.toeplitz.ncols());
            let structure = QpStructure::new(self.factor.clone(), aeq, self.ain.clone(), self.bounds(&free, widen))?;
            Ok(structure.solve(&q, &beq, None, &settings)?.g_star)
        };
        match solve(1.0) {
            Ok(u) => Ok((u, false)),
            Err(Error::Infeasible(msg)) => {
                log::warn!("oracle MPC infeasible ({msg}); widening output bounds {OUTPUT_RELAX_FACTOR}x");
                Ok((solve(OUTPUT_RELAX_FACTOR)?, true))
            }
            Err(e) => Err(e),
        }
    }
}

/// First input of the oracle MPC at state `x`.
pub fn mpc_oracle(
    model: &LtiModel,
    cfg: &DeePCConfig,
    x: &DVector<f64>,
    r_window: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (u, _) = MpcOracle::new(model, cfg)?.plan(x, r_window)?;
    Ok(u.rows(0, model.m()).into_owned())
}

enum Controller {
    Oracle(MpcOracle),
    DeePC {
        pqp: ParametricQp,
        data: DataBlocks,
        map: PredictionMap,
        ekf_noise: Option<EkfNoise>,
    },
}

fn window(hist: &[DVector<f64>], len: usize) -> DVector<f64> {
    stack_samples(&hist[hist.len() - len..])
}

/// Runs one closed loop of `variant`: `Np` excitation steps, then `Nsim`
/// controlled steps. `data` is required by the data-driven variants.
pub fn run_closed_loop(
    cfg: &ExperimentConfig,
    model: &LtiModel,
    variant: Variant,
    data: Option<&PreparedData>,
    lambda: (f64, f64),
    run_seed: u64,
) -> Result<ExperimentResult> {
    let mut dcfg = cfg.build_controller(model)?;
    dcfg.lambda_y = lambda.0;
    dcfg.lambda_g = lambda.1;
    let (np, nf, m, p) = (dcfg.np, dcfg.nf, model.m(), model.p());

    let mut controller = match variant {
        Variant::MpcOracle => Controller::Oracle(MpcOracle::new(model, &dcfg)?),
        v => {
            let data = data
                .and_then(|d| d.for_variant(v))
                .ok_or_else(|| Error::InvalidArgument(format!("variant {v} needs offline data")))?
                .clone();
            let ekf_noise = if v.uses_ekf() {
                if np < 2 {
                    return Err(Error::InvalidArgument("the EKF variant requires Np >= 2".into()));
                }
                Some(EkfNoise::scaled(p, np, cfg.ekf.q, cfg.ekf_r())?)
            } else {
                None
            };
            Controller::DeePC {
                pqp: assemble_parametric_qp(&data, &dcfg)?,
                map: prediction_map(&data),
                data,
                ekf_noise,
            }
        }
    };

    let online = cfg.online_levels().spec(derive_seed(run_seed, Purpose::PlantNoise, 0))?;
    let mut plant = Plant::new(model, cfg.x0(model.n())?, &online)?;
    let mut u_hist: Vec<DVector<f64>> = Vec::with_capacity(np + cfg.nsim);
    let mut y_hist: Vec<DVector<f64>> = Vec::with_capacity(np + cfg.nsim);
    let mut warm_rng = stream_rng(derive_seed(run_seed, Purpose::Warmup, 0), 0);
    let a = cfg.warmup_amplitude;
    for _ in 0..np {
        let u = if a > 0.0 {
            DVector::from_fn(m, |_, _| warm_rng.gen_range(-a..=a))
        } else {
            DVector::zeros(m)
        };
        y_hist.push(plant.apply(&u)?);
        u_hist.push(u);
    }

    let mut filter = match &controller {
        Controller::DeePC {
            ekf_noise: Some(noise), ..
        } => Some(DataDrivenEkf::new(&window(&y_hist, np), p, cfg.ekf.p0, noise.clone())?),
        _ => None,
    };

    let mut result = ExperimentResult {
        variant,
        seed: run_seed,
        lambda_y: lambda.0,
        lambda_g: lambda.1,
        cost: 0.0,
        warmup_inputs: u_hist.iter().map(|v| v.as_slice().to_vec()).collect(),
        warmup_outputs: y_hist.iter().map(|v| v.as_slice().to_vec()).collect(),
        inputs: Vec::with_capacity(cfg.nsim),
        outputs: Vec::with_capacity(cfg.nsim),
        references: Vec::with_capacity(cfg.nsim),
        estimates: Vec::new(),
        diagnostics: Vec::new(),
        relaxed_steps: 0,
        law_fallbacks: 0,
    };

    let mut pending: VecDeque<DVector<f64>> = VecDeque::new();
    let mut warm: Option<Vec<usize>> = None;
    for j in 1..=cfg.nsim {
        let r_window = cfg.reference.window(j, nf, p);
        let u_p = window(&u_hist, np);
        if pending.is_empty() {
            match &mut controller {
                Controller::Oracle(oracle) => {
                    let (plan, relaxed) = oracle.plan(plant.state(), &r_window)?;
                    result.relaxed_steps += usize::from(relaxed);
                    pending.extend((0..=dcfg.nc).map(|i| plan.rows(i * m, m).into_owned()));
                }
                Controller::DeePC { pqp, data, map, .. } => {
                    let outcome = match filter.as_mut() {
                        Some(f) => {
                            let (outcome, law) =
                                deepc_step_ekf(pqp, data, &dcfg, &r_window, &u_p, f.estimate(), warm.as_deref())?;
                            result.law_fallbacks += usize::from(f.set_law(map, &law)?);
                            outcome
                        }
                        None => {
                            let y_p = window(&y_hist, np);
                            deepc_step_standard(pqp, data, &dcfg, &r_window, &u_p, &y_p, warm.as_deref())?
                        }
                    };
                    result.relaxed_steps += usize::from(outcome.relaxed);
                    warm = if outcome.relaxed {
                        None
                    } else {
                        Some(outcome.solution.working_set.clone())
                    };
                    pending.extend(outcome.u_applied);
                }
            }
        }
        let u = pending.pop_front().expect("controller produced an input");
        let y = plant.apply(&u)?;
        if let Some(f) = filter.as_mut() {
            result.diagnostics.push(f.step(&u_p, &y)?);
            result.estimates.push(f.estimate().as_slice().to_vec());
        }
        result.inputs.push(u.as_slice().to_vec());
        result.outputs.push(y.as_slice().to_vec());
        result.references.push(cfg.reference.sample(j, p).as_slice().to_vec());
        u_hist.push(u);
        y_hist.push(y);
    }
    result.cost = result.recompute_cost(&dcfg.q, &dcfg.r);
    Ok(result)
}
