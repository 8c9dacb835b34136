//! Stochastic discrete-time LTI plants.
//!
//! ```text
//!     x_{k+1} = A x_k + B u_k + E w_k
//!     y_k     = C x_k + D u_k + F v_k
//! ```
//!
//! with `w_k ~ N(0, sigma_w2 I_n)` and `v_k ~ N(0, sigma_v2 I_p)`. The output
//! at time `k` is read from the state before the update.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_len, Error, Result};
use crate::hankel::{build_block_hankel, is_persistently_exciting};
use crate::linalg::DEFAULT_RANK_TOL;
use crate::seeds::{derive_seed, stream_rng, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Process-noise gain (n x n).
    pub e: DMatrix<f64>,
    /// Measurement-noise gain (p x p).
    pub f: DMatrix<f64>,
}

impl LtiModel {
    /// Model with identity noise gains.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let p = c.nrows();
        Self::with_noise_gains(a, b, c, d, DMatrix::identity(n, n), DMatrix::identity(p, p))
    }

    pub fn with_noise_gains(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
        f: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        let p = c.nrows();
        if n == 0 || m == 0 || p == 0 {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive, got n={n}, m={m}, p={p}"
            )));
        }
        ensure_dim("A", (n, n), a.shape())?;
        ensure_dim("B", (n, m), b.shape())?;
        ensure_dim("C", (p, n), c.shape())?;
        ensure_dim("D", (p, m), d.shape())?;
        ensure_dim("E", (n, n), e.shape())?;
        ensure_dim("F", (p, p), f.shape())?;
        Ok(Self { a, b, c, d, e, f })
    }

    /// The two-state benchmark plant: `A = [[0.8, 1], [0, 0.8]]`, `B = [0; 1]`,
    /// `C = [1 1]`, no feedthrough.
    pub fn benchmark() -> Self {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[0.8, 1.0, 0.0, 0.8]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DMatrix::zeros(1, 1),
        )
        .expect("benchmark model is consistent")
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// Rank test on the controllability matrix `[B AB ... A^{n-1}B]`.
    pub fn is_controllable(&self) -> bool {
        let (n, m) = (self.n(), self.m());
        let mut ctrb = DMatrix::zeros(n, n * m);
        let mut blk = self.b.clone();
        for i in 0..n {
            ctrb.view_mut((0, i * m), (n, m)).copy_from(&blk);
            blk = &self.a * blk;
        }
        crate::linalg::numerical_rank(&ctrb, DEFAULT_RANK_TOL) == n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_w2: f64,
    pub sigma_v2: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma_w2: f64, sigma_v2: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            sigma_w2,
            sigma_v2,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn noiseless(seed: u64) -> Self {
        Self {
            sigma_w2: 0.0,
            sigma_v2: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_w2 >= 0.0 && self.sigma_v2 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise variances must be non-negative, got sigma_w2={}, sigma_v2={}",
                self.sigma_w2, self.sigma_v2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub states: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn new(inputs: Vec<DVector<f64>>, outputs: Vec<DVector<f64>>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != outputs.len() {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs equal, nonzero input/output lengths (got {} and {})",
                inputs.len(),
                outputs.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            states: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Writes `k,u_0..u_{m-1},y_0..y_{p-1}` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let m = self.inputs[0].len();
        let p = self.outputs[0].len();
        let mut header = vec!["k".to_string()];
        header.extend((0..m).map(|i| format!("u_{i}")));
        header.extend((0..p).map(|i| format!("y_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for (k, (u, y)) in self.inputs.iter().zip(&self.outputs).enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(u.iter().map(|v| v.to_string()));
            row.extend(y.iter().map(|v| v.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty trajectory file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"k") {
            return Err(Error::Parse(format!("unexpected trajectory header `{header}`")));
        }
        let m = cols.iter().filter(|c| c.starts_with("u_")).count();
        let p = cols.iter().filter(|c| c.starts_with("y_")).count();
        if m == 0 || p == 0 || m + p + 1 != cols.len() {
            return Err(Error::Parse(format!("unexpected trajectory header `{header}`")));
        }
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
            if vals.len() != cols.len() {
                return Err(Error::Parse(format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 2,
                    cols.len(),
                    vals.len()
                )));
            }
            inputs.push(DVector::from_column_slice(&vals[1..1 + m]));
            outputs.push(DVector::from_column_slice(&vals[1 + m..]));
        }
        Trajectory::new(inputs, outputs)
    }
}

/// One noisy transition. Returns `(x_next, y)` where `y` uses the pre-update state.
pub fn step(
    model: &LtiModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    ensure_len("state", model.n(), x.len())?;
    ensure_len("input", model.m(), u.len())?;
    ensure_len("process noise", model.n(), w.len())?;
    ensure_len("measurement noise", model.p(), v.len())?;
    let x_next = &model.a * x + &model.b * u + w;
    let y = &model.c * x + &model.d * u + v;
    Ok((x_next, y))
}

/// Gaussian noise source scaled by the model's noise gains.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    sigma_w: f64,
    sigma_v: f64,
}

impl NoiseSource {
    pub fn new(spec: &NoiseSpec) -> Self {
        Self {
            rng: stream_rng(spec.seed, 0),
            sigma_w: spec.sigma_w2.sqrt(),
            sigma_v: spec.sigma_v2.sqrt(),
        }
    }

    /// Draws `(E w, F v)`. Samples are always consumed, even at zero variance,
    /// so changing a variance never shifts the other stream.
    pub fn draw(&mut self, model: &LtiModel) -> (DVector<f64>, DVector<f64>) {
        let w = DVector::from_fn(model.n(), |_, _| self.rng.sample::<f64, _>(StandardNormal));
        let v = DVector::from_fn(model.p(), |_, _| self.rng.sample::<f64, _>(StandardNormal));
        (&model.e * w * self.sigma_w, &model.f * v * self.sigma_v)
    }
}

/// Plant with internal state, driven one input at a time.
#[derive(Debug, Clone)]
pub struct Plant<'a> {
    model: &'a LtiModel,
    x: DVector<f64>,
    noise: NoiseSource,
}

impl<'a> Plant<'a> {
    pub fn new(model: &'a LtiModel, x0: DVector<f64>, noise: &NoiseSpec) -> Result<Self> {
        ensure_len("initial state", model.n(), x0.len())?;
        noise.validate()?;
        Ok(Self {
            model,
            x: x0,
            noise: NoiseSource::new(noise),
        })
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    /// Applies `u`, returns the measured output for this time step and advances the state.
    pub fn apply(&mut self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let (w, v) = self.noise.draw(self.model);
        let (x_next, y) = step(self.model, &self.x, u, &w, &v)?;
        self.x = x_next;
        Ok(y)
    }
}

pub fn simulate(
    model: &LtiModel,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
    noise: &NoiseSpec,
) -> Result<Trajectory> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("input sequence is empty".into()));
    }
    let mut plant = Plant::new(model, x0.clone(), noise)?;
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut states = Vec::with_capacity(inputs.len());
    for u in inputs {
        states.push(plant.state().clone());
        outputs.push(plant.apply(u)?);
    }
    Ok(Trajectory {
        inputs: inputs.to_vec(),
        outputs,
        states: Some(states),
    })
}

const PE_MAX_ATTEMPTS: u64 = 32;

/// I.i.d. uniform input on `[-amplitude, amplitude]^m`, validated to be
/// persistently exciting of the requested order.
pub fn generate_pe_input(
    m: usize,
    len: usize,
    order: usize,
    amplitude: f64,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if m == 0 || order == 0 {
        return Err(Error::InvalidArgument("input dimension and order must be positive".into()));
    }
    if !(amplitude > 0.0) {
        return Err(Error::InvalidArgument(format!("amplitude must be positive, got {amplitude}")));
    }
    let needed = (m + 1) * order - 1;
    if len < needed {
        return Err(Error::NotPersistentlyExciting(format!(
            "length {len} is below (m+1)*order-1 = {needed} for m={m}, order={order}"
        )));
    }
    for attempt in 0..PE_MAX_ATTEMPTS {
        let mut rng = stream_rng(seed, attempt);
        let seq: Vec<DVector<f64>> = (0..len)
            .map(|_| DVector::from_fn(m, |_, _| rng.gen_range(-amplitude..=amplitude)))
            .collect();
        let h = build_block_hankel(&seq, order)?;
        if is_persistently_exciting(&h, DEFAULT_RANK_TOL) {
            return Ok(seq);
        }
    }
    Err(Error::NotPersistentlyExciting(format!(
        "no exciting draw of order {order} found in {PE_MAX_ATTEMPTS} attempts"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialState {
    Fixed(Vec<f64>),
    /// Zero-mean Gaussian with the given per-component variance.
    Gaussian { variance: f64 },
}

impl InitialState {
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        match self {
            InitialState::Fixed(x) => {
                ensure_len("initial state", n, x.len())?;
                Ok(DVector::from_column_slice(x))
            }
            InitialState::Gaussian { variance } => {
                if !(*variance >= 0.0) {
                    return Err(Error::InvalidArgument("initial-state variance must be >= 0".into()));
                }
                let s = variance.sqrt();
                Ok(DVector::from_fn(n, |_, _| s * rng.sample::<f64, _>(StandardNormal)))
            }
        }
    }
}

/// `count` experiments on the shared input `input`, each with its own noise
/// realization and initial state. All streams derive from `noise.seed`.
pub fn collect_dataset(
    model: &LtiModel,
    count: usize,
    input: &[DVector<f64>],
    x0: &InitialState,
    noise: &NoiseSpec,
) -> Result<Vec<Trajectory>> {
    if count == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one experiment".into()));
    }
    (0..count)
        .map(|i| {
            let mut x0_rng = stream_rng(derive_seed(noise.seed, Purpose::InitialState, i as u64), 0);
            let x0 = x0.sample(model.n(), &mut x0_rng)?;
            let spec = NoiseSpec {
                seed: derive_seed(noise.seed, Purpose::DatasetNoise, i as u64),
                ..*noise
            };
            simulate(model, &x0, input, &spec)
        })
        .collect()
}

/// Extended observability and block-Toeplitz matrices relating a data window
/// to its initial state and the stacked input window `col(u_p, u_f)`.
#[derive(Debug, Clone)]
pub struct StructureMatrices {
    /// `col(C, CA, ..., CA^{Np-1})`.
    pub obs_past: DMatrix<f64>,
    /// `col(CA^{Np}, ..., CA^{Np+Nf-1})`.
    pub obs_future: DMatrix<f64>,
    /// `p*Np x m*(Np+Nf)`.
    pub toeplitz_past: DMatrix<f64>,
    /// `p*Nf x m*(Np+Nf)`.
    pub toeplitz_future: DMatrix<f64>,
}

pub fn model_structure_matrices(model: &LtiModel, np: usize, nf: usize) -> Result<StructureMatrices> {
    if np == 0 || nf == 0 {
        return Err(Error::InvalidArgument("horizons must be positive".into()));
    }
    let (n, m, p) = (model.n(), model.m(), model.p());
    let total = np + nf;
    // Markov parameters: markov[0] = D, markov[j] = C A^{j-1} B.
    let mut markov = Vec::with_capacity(total);
    markov.push(model.d.clone());
    let mut apow_b = model.b.clone();
    for _ in 1..total {
        markov.push(&model.c * &apow_b);
        apow_b = &model.a * apow_b;
    }
    let mut obs = DMatrix::zeros(p * total, n);
    let mut c_apow = model.c.clone();
    for i in 0..total {
        obs.view_mut((i * p, 0), (p, n)).copy_from(&c_apow);
        c_apow *= &model.a;
    }
    let mut toeplitz = DMatrix::zeros(p * total, m * total);
    for i in 0..total {
        for j in 0..=i {
            toeplitz
                .view_mut((i * p, j * m), (p, m))
                .copy_from(&markov[i - j]);
        }
    }
    Ok(StructureMatrices {
        obs_past: obs.rows(0, p * np).into_owned(),
        obs_future: obs.rows(p * np, p * nf).into_owned(),
        toeplitz_past: toeplitz.rows(0, p * np).into_owned(),
        toeplitz_future: toeplitz.rows(p * np, p * nf).into_owned(),
    })
}
