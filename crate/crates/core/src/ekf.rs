//! Extended Kalman filter on the window of past outputs.
//!
//! The state is `z_k = col(y_{k-Np+1}, ..., y_k)`. Its dynamics are implicit in
//! the DeePC program: composing the prediction map `M` with the local affine
//! law of the optimizer gives
//!
//! ```text
//!     z_{k+1} = A_k z_k + B_k u_p + h_k,     y = C z,   C = [0 ... 0 I_p]
//! ```
//!
//! with `A_k = M Ã_k`, `B_k = M B̃_k`, `h_k = M h̃_k`. The matrices change with
//! the critical region of the current solve, hence "extended".

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::deepc::PredictionMap;
use crate::error::{ensure_dim, ensure_len, Error, Result};
use crate::linalg::symmetrize;
use crate::qp::AffineLaw;

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub z_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfNoise {
    pub qk: DMatrix<f64>,
    pub rk: DMatrix<f64>,
}

impl EkfNoise {
    /// `Qk = q I_{pNp}`, `Rk = r I_p`.
    pub fn scaled(p: usize, np: usize, q: f64, r: f64) -> Result<Self> {
        let noise = Self {
            qk: DMatrix::identity(p * np, p * np) * q,
            rk: DMatrix::identity(p, p) * r,
        };
        noise.validate()?;
        Ok(noise)
    }

    pub fn validate(&self) -> Result<()> {
        if !crate::linalg::is_psd(&self.qk, 1e-12) {
            return Err(Error::InvalidArgument("EKF process covariance must be symmetric PSD".into()));
        }
        if !crate::linalg::is_symmetric(&self.rk, 1e-12) || Cholesky::new(self.rk.clone()).is_none() {
            return Err(Error::InvalidArgument("EKF measurement covariance must be symmetric PD".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DVector<f64>,
    pub c_sel: DMatrix<f64>,
}

impl ImplicitDynamics {
    /// Composes the prediction map with a law whose parameter is `col(z, u_p)`.
    pub fn from_law(map: &PredictionMap, law: &AffineLaw, p: usize) -> Result<Self> {
        let nz = map.m.nrows();
        if law.a_tilde.nrows() != map.m.ncols() || law.a_tilde.ncols() < nz {
            return Err(Error::dim(
                "affine law vs prediction map",
                format!("{} rows, >= {} cols", map.m.ncols(), nz),
                format!("{}x{}", law.a_tilde.nrows(), law.a_tilde.ncols()),
            ));
        }
        let nu = law.a_tilde.ncols() - nz;
        Ok(Self {
            a: &map.m * law.a_tilde.columns(0, nz),
            b: &map.m * law.a_tilde.columns(nz, nu),
            h: &map.m * &law.h_tilde,
            c_sel: output_selector(p, nz / p),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
}

/// `[0 ... 0 I_p]` picking the newest output from the window.
pub fn output_selector(p: usize, np: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(p, p * np);
    c.view_mut((0, p * (np - 1)), (p, p)).fill_with_identity();
    c
}

/// Filter diagnostics recorded after each update.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FilterDiagnostics {
    pub innovation_norm: f64,
    pub gain_norm: f64,
    pub trace_p: f64,
    pub min_eig_p: f64,
    /// `max |P - Pᵀ|` before symmetrization.
    pub asymmetry_p: f64,
}

pub fn ekf_init(y_window: &DVector<f64>, p0_scale: f64) -> Result<EkfState> {
    if !(p0_scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("P0 scale must be >= 0, got {p0_scale}")));
    }
    let n = y_window.len();
    Ok(EkfState {
        z_hat: y_window.clone(),
        p: DMatrix::identity(n, n) * p0_scale,
        k: 0,
    })
}

pub fn ekf_predict(
    state: &EkfState,
    dynamics: &ImplicitDynamics,
    u_p: &DVector<f64>,
    noise: &EkfNoise,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let nz = dynamics.state_dim();
    ensure_len("filter state", nz, state.z_hat.len())?;
    ensure_len("input window", dynamics.b.ncols(), u_p.len())?;
    ensure_dim("Qk", (nz, nz), noise.qk.shape())?;
    let z_pred = &dynamics.a * &state.z_hat + &dynamics.b * u_p + &dynamics.h;
    let mut p_pred = &dynamics.a * &state.p * dynamics.a.transpose() + &noise.qk;
    symmetrize(&mut p_pred);
    Ok((z_pred, p_pred))
}

pub fn ekf_update(
    z_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    y_meas: &DVector<f64>,
    dynamics: &ImplicitDynamics,
    noise: &EkfNoise,
) -> Result<(EkfState, FilterDiagnostics)> {
    let c = &dynamics.c_sel;
    let nz = c.ncols();
    ensure_len("predicted state", nz, z_pred.len())?;
    ensure_len("measurement", c.nrows(), y_meas.len())?;
    ensure_dim("Rk", (c.nrows(), c.nrows()), noise.rk.shape())?;
    let mut s = c * p_pred * c.transpose() + &noise.rk;
    symmetrize(&mut s);
    let chol = Cholesky::new(s).ok_or_else(|| Error::Singular("innovation covariance".into()))?;
    // K = P Cᵀ S^{-1}, via S Kᵀ = C P.
    let gain = chol.solve(&(c * p_pred)).transpose();
    let innovation = y_meas - c * z_pred;
    let z_hat = z_pred + &gain * &innovation;
    let i_kc = DMatrix::identity(nz, nz) - &gain * c;
    let mut p = &i_kc * p_pred * i_kc.transpose() + &gain * &noise.rk * gain.transpose();
    let asymmetry_p = (&p - p.transpose()).amax();
    symmetrize(&mut p);
    let diag = FilterDiagnostics {
        innovation_norm: innovation.norm(),
        gain_norm: gain.norm(),
        trace_p: p.trace(),
        min_eig_p: crate::linalg::min_eigenvalue(&p),
        asymmetry_p,
    };
    Ok((EkfState { z_hat, p, k: 0 }, diag))
}

/// Filter driven by a closed loop: keeps the last usable dynamics so a step
/// with a degenerate optimizer law can fall back to them.
#[derive(Debug, Clone)]
pub struct DataDrivenEkf {
    pub state: EkfState,
    pub noise: EkfNoise,
    last_dynamics: Option<ImplicitDynamics>,
    p: usize,
}

impl DataDrivenEkf {
    pub fn new(y_window: &DVector<f64>, p: usize, p0_scale: f64, noise: EkfNoise) -> Result<Self> {
        noise.validate()?;
        ensure_dim("Qk", (y_window.len(), y_window.len()), noise.qk.shape())?;
        Ok(Self {
            state: ekf_init(y_window, p0_scale)?,
            noise,
            last_dynamics: None,
            p,
        })
    }

    pub fn estimate(&self) -> &DVector<f64> {
        &self.state.z_hat
    }

    /// Adopts the law from the latest solve unless it is flagged degenerate
    /// and earlier dynamics exist. Returns whether the fallback was used.
    pub fn set_law(&mut self, map: &PredictionMap, law: &AffineLaw) -> Result<bool> {
        if law.degenerate && self.last_dynamics.is_some() {
            return Ok(true);
        }
        self.last_dynamics = Some(ImplicitDynamics::from_law(map, law, self.p)?);
        Ok(false)
    }

    /// One predict/update cycle using the input window the law was expanded at.
    pub fn step(&mut self, u_p: &DVector<f64>, y_meas: &DVector<f64>) -> Result<FilterDiagnostics> {
        let dynamics = self
            .last_dynamics
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("EKF step before any law was set".into()))?;
        let (z_pred, p_pred) = ekf_predict(&self.state, dynamics, u_p, &self.noise)?;
        let (mut next, diag) = ekf_update(&z_pred, &p_pred, y_meas, dynamics, &self.noise)?;
        next.k = self.state.k + 1;
        self.state = next;
        Ok(diag)
    }
}
