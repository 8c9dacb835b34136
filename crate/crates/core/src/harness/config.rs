//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::deepc::DeePCConfig;
use crate::error::{Error, Result};
use crate::linalg::matrix_from_rows;
use crate::lti_sim::{LtiModel, NoiseSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "averaged")]
    Averaged,
    #[serde(rename = "averaged+ekf")]
    AveragedEkf,
    #[serde(rename = "mpc-oracle")]
    MpcOracle,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Standard,
        Variant::Averaged,
        Variant::AveragedEkf,
        Variant::MpcOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Averaged => "averaged",
            Variant::AveragedEkf => "averaged+ekf",
            Variant::MpcOracle => "mpc-oracle",
        }
    }

    pub fn uses_ekf(self) -> bool {
        self == Variant::AveragedEkf
    }

    pub fn is_data_driven(self) -> bool {
        self != Variant::MpcOracle
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{s}', expected one of standard, averaged, averaged+ekf, mpc-oracle"
                ))
            })
    }
}

/// State-space model given row by row. Missing `d`, `e`, `f` default to zero
/// feedthrough and identity noise gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<Vec<f64>>>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            a: vec![vec![0.8, 1.0], vec![0.0, 0.8]],
            b: vec![vec![0.0], vec![1.0]],
            c: vec![vec![1.0, 1.0]],
            d: None,
            e: None,
            f: None,
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<LtiModel> {
        let a = matrix_from_rows(&self.a)?;
        let b = matrix_from_rows(&self.b)?;
        let c = matrix_from_rows(&self.c)?;
        let d = match &self.d {
            Some(d) => matrix_from_rows(d)?,
            None => DMatrix::zeros(c.nrows(), b.ncols()),
        };
        let e = match &self.e {
            Some(e) => matrix_from_rows(e)?,
            None => DMatrix::identity(a.nrows(), a.nrows()),
        };
        let f = match &self.f {
            Some(f) => matrix_from_rows(f)?,
            None => DMatrix::identity(c.nrows(), c.nrows()),
        };
        LtiModel::with_noise_gains(a, b, c, d, e, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevels {
    pub sigma_w2: f64,
    pub sigma_v2: f64,
}

impl NoiseLevels {
    pub fn spec(&self, seed: u64) -> Result<NoiseSpec> {
        NoiseSpec::new(self.sigma_w2, self.sigma_v2, seed)
    }
}

impl Default for NoiseLevels {
    fn default() -> Self {
        Self {
            sigma_w2: 0.5,
            sigma_v2: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSpec {
    pub np: usize,
    pub nf: usize,
    pub nc: usize,
    /// Output weight, identity when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    /// Input weight, identity when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<f64>>>,
    pub lambda_y: f64,
    pub lambda_g: f64,
    /// Symmetric box used for every channel without an explicit bound.
    pub bound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_min: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_max: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_min: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_max: Option<Vec<f64>>,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        Self {
            np: 3,
            nf: 5,
            nc: 0,
            q: None,
            r: None,
            lambda_y: 1e6,
            lambda_g: 100.0,
            bound: 1e3,
            u_min: None,
            u_max: None,
            y_min: None,
            y_max: None,
        }
    }
}

impl ControllerSpec {
    pub fn build(&self, m: usize, p: usize) -> Result<DeePCConfig> {
        let mut cfg = DeePCConfig::with_defaults(m, p, self.np, self.nf, self.bound);
        cfg.nc = self.nc;
        cfg.lambda_y = self.lambda_y;
        cfg.lambda_g = self.lambda_g;
        if let Some(q) = &self.q {
            cfg.q = matrix_from_rows(q)?;
        }
        if let Some(r) = &self.r {
            cfg.r = matrix_from_rows(r)?;
        }
        let set = |target: &mut DVector<f64>, src: &Option<Vec<f64>>| {
            if let Some(v) = src {
                *target = DVector::from_column_slice(v);
            }
        };
        set(&mut cfg.u_min, &self.u_min);
        set(&mut cfg.u_max, &self.u_max);
        set(&mut cfg.y_min, &self.y_min);
        set(&mut cfg.y_max, &self.y_max);
        cfg.validate().map_err(|e| Error::Config(format!("controller: {e}")))?;
        Ok(cfg)
    }
}

/// Reference family. Samples are indexed by the controlled step `k = 1, 2, ...`
/// and repeated on every output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Reference {
    Sine {
        amplitude: f64,
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
    Constant {
        value: f64,
    },
    Zero,
}

impl Default for Reference {
    fn default() -> Self {
        Reference::Sine {
            amplitude: 5.0,
            omega: 0.3,
            phase: 0.0,
        }
    }
}

impl Reference {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            Reference::Sine {
                amplitude,
                omega,
                phase,
            } => amplitude * (omega * k as f64 + phase).sin(),
            Reference::Constant { value } => value,
            Reference::Zero => 0.0,
        }
    }

    pub fn sample(&self, k: usize, p: usize) -> DVector<f64> {
        DVector::from_element(p, self.at(k))
    }

    /// `col(r_k, ..., r_{k+len-1})`.
    pub fn window(&self, k: usize, len: usize, p: usize) -> DVector<f64> {
        DVector::from_iterator(len * p, (k..k + len).flat_map(|j| std::iter::repeat_n(self.at(j), p)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfSpec {
    /// `Qk = q I`.
    pub q: f64,
    /// `Rk = r I`; defaults to the online measurement variance, or 0.1 when that is zero.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    /// `P0 = p0 I`.
    pub p0: f64,
}

impl Default for EkfSpec {
    fn default() -> Self {
        Self {
            q: 0.1,
            r: None,
            p0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningSpec {
    pub lambda_y: Vec<f64>,
    pub lambda_g: Vec<f64>,
    /// Repetitions averaged per grid point while tuning; 0 means the
    /// experiment's repetition count.
    pub repetitions: usize,
}

impl Default for TuningSpec {
    fn default() -> Self {
        Self {
            lambda_y: vec![1e2, 1e4, 1e6],
            lambda_g: vec![0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1e3, 3e3, 1e4],
            repetitions: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    SigmaV2,
    SigmaW2,
    Np,
    N,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::SigmaV2 => "sigma_v2",
            SweepParameter::SigmaW2 => "sigma_w2",
            SweepParameter::Np => "np",
            SweepParameter::N => "n",
        }
    }
}

impl FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma_v2" => Ok(SweepParameter::SigmaV2),
            "sigma_w2" => Ok(SweepParameter::SigmaW2),
            "np" => Ok(SweepParameter::Np),
            "n" => Ok(SweepParameter::N),
            _ => Err(Error::Config(format!(
                "unknown sweep parameter '{s}', expected sigma_v2, sigma_w2, np or n"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    #[serde(default = "default_sweep_variants")]
    pub variants: Vec<Variant>,
    /// Re-tune the regularization at every grid point.
    #[serde(default = "default_true")]
    pub retune: bool,
}

fn default_sweep_variants() -> Vec<Variant> {
    vec![Variant::Standard, Variant::AveragedEkf]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: Variant,
    pub repetitions: usize,
    /// Length of every data trajectory.
    pub t: usize,
    /// Number of trajectories averaged by the averaged variants.
    pub n_datasets: usize,
    pub nsim: usize,
    /// Amplitude of the uniform excitation used for data collection.
    pub pe_amplitude: f64,
    /// Amplitude of the excitation applied during the first `Np` closed-loop steps.
    pub warmup_amplitude: f64,
    /// Closed-loop initial state, zero when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Per-component variance of the random initial state of each data experiment.
    pub data_x0_variance: f64,
    pub model: ModelSpec,
    /// Noise during data collection.
    pub noise: NoiseLevels,
    /// Noise during the closed-loop run; same as `noise` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub online_noise: Option<NoiseLevels>,
    pub controller: ControllerSpec,
    pub reference: Reference,
    pub ekf: EkfSpec,
    pub tuning: TuningSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::AveragedEkf,
            repetitions: 100,
            t: 100,
            n_datasets: 40,
            nsim: 100,
            pe_amplitude: 1.0,
            warmup_amplitude: 1.0,
            x0: None,
            data_x0_variance: 0.0,
            model: ModelSpec::default(),
            noise: NoiseLevels::default(),
            online_noise: None,
            controller: ControllerSpec::default(),
            reference: Reference::default(),
            ekf: EkfSpec::default(),
            tuning: TuningSpec::default(),
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn online_levels(&self) -> NoiseLevels {
        self.online_noise.unwrap_or(self.noise)
    }

    pub fn build_model(&self) -> Result<LtiModel> {
        self.model.build().map_err(|e| Error::Config(format!("model: {e}")))
    }

    pub fn build_controller(&self, model: &LtiModel) -> Result<DeePCConfig> {
        self.controller.build(model.m(), model.p())
    }

    pub fn x0(&self, n: usize) -> Result<DVector<f64>> {
        match &self.x0 {
            Some(x) if x.len() == n => Ok(DVector::from_column_slice(x)),
            Some(x) => Err(Error::Config(format!("x0 has {} entries, model has {n} states", x.len()))),
            None => Ok(DVector::zeros(n)),
        }
    }

    /// `(m+1)(Np+Nf+n) + 1`: shortest data length whose input can be
    /// persistently exciting of order `Np + Nf + n`.
    pub fn min_data_length(&self, model: &LtiModel) -> usize {
        (model.m() + 1) * (self.controller.np + self.controller.nf + model.n()) + 1
    }

    pub fn ekf_r(&self) -> f64 {
        self.ekf.r.unwrap_or_else(|| {
            let v = self.online_levels().sigma_v2;
            if v > 0.0 {
                v
            } else {
                0.1
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.build_model()?;
        self.build_controller(&model)?;
        self.x0(model.n())?;
        let cfg_err = |msg: String| Err(Error::Config(msg));
        let need = self.min_data_length(&model);
        if self.t < need {
            return cfg_err(format!(
                "T = {} is below (m+1)(Np+Nf+n)+1 = {need}",
                self.t
            ));
        }
        if self.nsim < self.controller.np {
            return cfg_err(format!("Nsim = {} must be at least Np = {}", self.nsim, self.controller.np));
        }
        if self.n_datasets == 0 {
            return cfg_err("n_datasets must be at least 1".into());
        }
        if self.repetitions == 0 {
            return cfg_err("repetitions must be at least 1".into());
        }
        if !(self.pe_amplitude > 0.0) {
            return cfg_err("pe_amplitude must be positive".into());
        }
        if !(self.warmup_amplitude >= 0.0) {
            return cfg_err("warmup_amplitude must be non-negative".into());
        }
        if !(self.data_x0_variance >= 0.0) {
            return cfg_err("data_x0_variance must be non-negative".into());
        }
        self.noise.spec(0).map_err(|e| Error::Config(format!("noise: {e}")))?;
        self.online_levels()
            .spec(0)
            .map_err(|e| Error::Config(format!("online_noise: {e}")))?;
        let needs_ekf = self.variant.uses_ekf()
            || self
                .sweep
                .as_ref()
                .is_some_and(|s| s.variants.iter().any(|v| v.uses_ekf()));
        if needs_ekf {
            if self.controller.np < 2 {
                return cfg_err("the EKF variant requires Np >= 2".into());
            }
            if !(self.ekf.q >= 0.0 && self.ekf.p0 >= 0.0 && self.ekf_r() > 0.0) {
                return cfg_err("EKF covariances must be non-negative with r > 0".into());
            }
        }
        if self.tuning.lambda_y.is_empty() || self.tuning.lambda_g.is_empty() {
            return cfg_err("tuning grids must be nonempty".into());
        }
        if self
            .tuning
            .lambda_y
            .iter()
            .chain(&self.tuning.lambda_g)
            .any(|l| !(*l >= 0.0))
        {
            return cfg_err("tuning grids must be non-negative".into());
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() || s.variants.is_empty() {
                return cfg_err("sweep needs at least one value and one variant".into());
            }
            for &v in &s.values {
                self.with_parameter(s.parameter, v)?;
            }
        }
        Ok(())
    }

    /// Copy with one sweep parameter set. Integer parameters must be whole.
    pub fn with_parameter(&self, parameter: SweepParameter, value: f64) -> Result<Self> {
        let mut cfg = self.clone();
        let whole = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{} must be a positive integer, got {v}", parameter.name())))
            }
        };
        match parameter {
            SweepParameter::SigmaV2 => {
                cfg.noise.sigma_v2 = value;
                if let Some(o) = cfg.online_noise.as_mut() {
                    o.sigma_v2 = value;
                }
            }
            SweepParameter::SigmaW2 => {
                cfg.noise.sigma_w2 = value;
                if let Some(o) = cfg.online_noise.as_mut() {
                    o.sigma_w2 = value;
                }
            }
            SweepParameter::Np => cfg.controller.np = whole(value)?,
            SweepParameter::N => cfg.n_datasets = whole(value)?,
        }
        cfg.sweep = None;
        cfg.validate()?;
        Ok(cfg)
    }
}
