//! Time stepping of the truncated stochastic vorticity equation
//! `dw = νΔw dt + B(Kw, w) dt + Q dW` and its energy diagnostics.

use std::f64::consts::FRAC_1_SQRT_2;
use std::io::{Read, Write};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mode, ModeSet};
use crate::rng::StreamKey;
use crate::spectral::{SpectralGrid, VorticityField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub mode: Mode,
    pub q: f64,
}

/// Additive noise `Q dW = Σ_n q_n f_{k_n} dW_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseModel {
    entries: Vec<NoiseEntry>,
}

impl NoiseModel {
    /// Modes must be distinct, nonzero and form a symmetric set; amplitudes positive.
    pub fn new(entries: Vec<NoiseEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyModeSet);
        }
        for (i, e) in entries.iter().enumerate() {
            if e.mode.is_origin() {
                return Err(Error::OriginMode);
            }
            if !(e.q > 0.0 && e.q.is_finite()) {
                return Err(Error::Config(format!("modes[{i}].q must be positive, got {}", e.q)));
            }
        }
        let set = ModeSet::from_iter_unchecked(entries.iter().map(|e| e.mode));
        if set.len() != entries.len() {
            return Err(Error::Config("noise modes must be distinct".into()));
        }
        if !set.is_symmetric() {
            return Err(Error::Config("noise modes must form a symmetric set".into()));
        }
        Ok(Self { entries })
    }

    /// Same amplitude on every mode of `set`.
    pub fn uniform(set: &ModeSet, q: f64) -> Result<Self> {
        Self::new(set.iter().map(|&mode| NoiseEntry { mode, q }).collect())
    }

    /// No forcing (`m = 0`).
    pub fn none() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[NoiseEntry] {
        &self.entries
    }

    pub fn m(&self) -> usize {
        self.entries.len()
    }

    /// Energy injection rate `E₀ = Σ q_n²`.
    pub fn e0(&self) -> f64 {
        self.entries.iter().map(|e| e.q * e.q).sum()
    }

    pub fn modes(&self) -> ModeSet {
        ModeSet::from_iter_unchecked(self.entries.iter().map(|e| e.mode))
    }

    pub fn check_grid(&self, grid: &SpectralGrid) -> Result<()> {
        for e in &self.entries {
            if !grid.contains(&e.mode) {
                return Err(Error::ModeOutsideTruncation {
                    mode: e.mode,
                    trunc: grid.trunc(),
                });
            }
        }
        Ok(())
    }

    /// Real coordinate kicked by each noise channel.
    pub fn real_indices(&self, grid: &SpectralGrid) -> Vec<usize> {
        self.entries
            .iter()
            .map(|e| grid.real_index(&e.mode).expect("noise mode outside grid"))
            .collect()
    }

    /// `Q` as a dense `dim × m` matrix in real coordinates.
    pub fn q_matrix(&self, grid: &SpectralGrid) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(grid.dim(), self.m());
        for (n, (r, e)) in self.real_indices(grid).into_iter().zip(&self.entries).enumerate() {
            q[(r, n)] = e.q;
        }
        q
    }

    /// `w += Q dW` in place.
    pub fn add_to(&self, w: &mut VorticityField, dw: &[f64]) {
        let grid = w.grid().clone();
        let coeffs = w.coeffs_mut();
        for (e, x) in self.entries.iter().zip(dw) {
            let r = grid.real_index(&e.mode).expect("noise mode outside grid");
            let a = e.q * x * FRAC_1_SQRT_2;
            if r % 2 == 0 {
                coeffs[r / 2] += Complex64::new(0.0, -a);
            } else {
                coeffs[r / 2] += Complex64::new(a, 0.0);
            }
        }
    }

    pub fn apply(&self, grid: &Arc<SpectralGrid>, dw: &[f64]) -> VorticityField {
        let mut w = VorticityField::zeros(grid.clone());
        self.add_to(&mut w, dw);
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Scheme {
    /// `w' = e^{νΔdt}(w + dt·B(Kw,w) + Q ΔW)`.
    #[default]
    ExpEulerMaruyama,
    /// Classical RK4 on `νΔw + B(Kw,w)`; noise must be absent.
    DeterministicRK4,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub nu: f64,
    pub dt: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub seed: u64,
    /// Drift nonlinearity on; off gives the Ornstein-Uhlenbeck limit.
    #[serde(default = "default_true")]
    pub nonlinear: bool,
}

impl IntegratorConfig {
    pub fn new(nu: f64, dt: f64, seed: u64) -> Self {
        Self {
            nu,
            dt,
            scheme: Scheme::ExpEulerMaruyama,
            seed,
            nonlinear: true,
        }
    }

    pub fn validate(&self, noise: &NoiseModel) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::Config(format!("nu must be nonnegative, got {}", self.nu)));
        }
        if self.scheme == Scheme::DeterministicRK4 && noise.m() > 0 {
            return Err(Error::Config("DeterministicRK4 requires an empty noise model".into()));
        }
        if self.nu == 0.0 && !(self.scheme == Scheme::DeterministicRK4 && noise.e0() == 0.0) {
            return Err(Error::Config(
                "nu = 0 is only allowed with DeterministicRK4 and no noise".into(),
            ));
        }
        Ok(())
    }
}

/// Grid, configuration and noise bundled with the per-mode decay factors.
#[derive(Debug, Clone)]
pub struct Model {
    grid: Arc<SpectralGrid>,
    cfg: IntegratorConfig,
    noise: NoiseModel,
    decay: Vec<f64>,
}

impl Model {
    pub fn new(grid: Arc<SpectralGrid>, cfg: IntegratorConfig, noise: NoiseModel) -> Result<Self> {
        cfg.validate(&noise)?;
        noise.check_grid(&grid)?;
        let decay = grid
            .modes()
            .iter()
            .map(|k| (-cfg.nu * k.norm_sq() as f64 * cfg.dt).exp())
            .collect();
        Ok(Self {
            grid,
            cfg,
            noise,
            decay,
        })
    }

    /// Same model with a different step size.
    pub fn with_dt(&self, dt: f64) -> Result<Self> {
        let mut cfg = self.cfg;
        cfg.dt = dt;
        Self::new(self.grid.clone(), cfg, self.noise.clone())
    }

    pub fn grid(&self) -> &Arc<SpectralGrid> {
        &self.grid
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn dt(&self) -> f64 {
        self.cfg.dt
    }

    pub fn nu(&self) -> f64 {
        self.cfg.nu
    }

    /// `e^{-ν|k|²dt}` per real coordinate.
    pub fn decay_real(&self) -> Vec<f64> {
        (0..self.grid.dim()).map(|r| self.decay[r / 2]).collect()
    }

    pub fn steps_for(&self, t: f64) -> usize {
        if t <= 0.0 {
            0
        } else {
            // tolerate representation error in T/dt
            let x = t / self.cfg.dt;
            let r = x.round();
            if (x - r).abs() < 1e-9 * r.max(1.0) {
                r as usize
            } else {
                x.ceil() as usize
            }
        }
    }

    pub fn stream(&self, replica: u64) -> StreamKey {
        StreamKey::new(self.cfg.seed, replica)
    }

    pub fn increments(&self, replica: u64, step: usize) -> Vec<f64> {
        self.stream(replica).increments(step as u64, self.noise.m(), self.cfg.dt)
    }

    /// Applies `e^{νΔdt}`.
    pub fn apply_decay(&self, w: &mut VorticityField) {
        for (c, d) in w.coeffs_mut().iter_mut().zip(&self.decay) {
            *c *= *d;
        }
    }

    /// `νΔw + B(Kw, w)`.
    pub fn drift(&self, w: &VorticityField) -> VorticityField {
        let lin = w.map_diag(|k2| -self.cfg.nu * k2);
        if self.cfg.nonlinear {
            lin.axpy(1.0, &w.nonlinearity_fft())
        } else {
            lin
        }
    }

    /// One step from `w` with increment `dw`; `index` labels errors.
    pub fn step_at(&self, index: usize, w: &VorticityField, dw: &[f64]) -> Result<VorticityField> {
        if !w.is_finite() {
            return Err(Error::NonFinite { step: index });
        }
        let out = match self.cfg.scheme {
            Scheme::ExpEulerMaruyama => {
                if dw.len() != self.noise.m() {
                    return Err(Error::LengthMismatch {
                        expected: self.noise.m(),
                        got: dw.len(),
                    });
                }
                let mut y = if self.cfg.nonlinear {
                    w.axpy(self.cfg.dt, &w.nonlinearity_fft())
                } else {
                    w.clone()
                };
                self.noise.add_to(&mut y, dw);
                self.apply_decay(&mut y);
                y
            }
            Scheme::DeterministicRK4 => {
                let h = self.cfg.dt;
                let k1 = self.drift(w);
                let k2 = self.drift(&w.axpy(h / 2.0, &k1));
                let k3 = self.drift(&w.axpy(h / 2.0, &k2));
                let k4 = self.drift(&w.axpy(h, &k3));
                w.axpy(h / 6.0, &k1)
                    .axpy(h / 3.0, &k2)
                    .axpy(h / 3.0, &k3)
                    .axpy(h / 6.0, &k4)
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { step: index + 1 });
        }
        Ok(out)
    }

    pub fn step(&self, w: &VorticityField, dw: &[f64]) -> Result<VorticityField> {
        self.step_at(0, w, dw)
    }

    /// Runs `steps` steps of replica `replica`, calling `observe(i, w_i, ΔW_i)` before each
    /// step and `observe(steps, w_steps, &[])` at the end. Nothing is stored.
    pub fn run<F>(&self, w0: &VorticityField, steps: usize, replica: u64, mut observe: F) -> Result<VorticityField>
    where
        F: FnMut(usize, &VorticityField, &[f64]),
    {
        let key = self.stream(replica);
        let mut w = w0.clone();
        for i in 0..steps {
            let dw = match self.cfg.scheme {
                Scheme::ExpEulerMaruyama => key.increments(i as u64, self.noise.m(), self.cfg.dt),
                Scheme::DeterministicRK4 => Vec::new(),
            };
            observe(i, &w, &dw);
            w = self.step_at(i, &w, &dw)?;
        }
        observe(steps, &w, &[]);
        Ok(w)
    }

    /// Full record of replica 0 up to time `t`.
    pub fn simulate(&self, w0: &VorticityField, t: f64) -> Result<TrajectoryRecord> {
        self.simulate_replica(w0, self.steps_for(t), 0)
    }

    pub fn simulate_replica(&self, w0: &VorticityField, steps: usize, replica: u64) -> Result<TrajectoryRecord> {
        let mut states = Vec::with_capacity(steps + 1);
        let mut increments = Vec::with_capacity(steps);
        self.run(w0, steps, replica, |i, w, dw| {
            states.push(w.clone());
            if i < steps {
                increments.push(dw.to_vec());
            }
        })?;
        Ok(TrajectoryRecord {
            model: self.clone(),
            replica,
            states,
            increments,
        })
    }

    /// Integrates along prescribed increments.
    pub fn simulate_with_increments(&self, w0: &VorticityField, increments: Vec<Vec<f64>>) -> Result<TrajectoryRecord> {
        let mut states = Vec::with_capacity(increments.len() + 1);
        states.push(w0.clone());
        for (i, dw) in increments.iter().enumerate() {
            let next = self.step_at(i, &states[i], dw)?;
            states.push(next);
        }
        Ok(TrajectoryRecord {
            model: self.clone(),
            replica: 0,
            states,
            increments,
        })
    }

    /// Norm samples of replica `replica` without storing states.
    pub fn energy_path(&self, w0: &VorticityField, steps: usize, replica: u64) -> Result<EnergyPath> {
        let mut path = EnergyPath::with_capacity(self.cfg.dt, self.cfg.nu, self.noise.e0(), steps + 1);
        self.run(w0, steps, replica, |i, w, dw| {
            path.push(w);
            if i < steps && !dw.is_empty() {
                path.push_increment(w, &self.noise, dw);
            }
        })?;
        Ok(path)
    }
}

/// Time grid, states and increments of one trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub model: Model,
    pub replica: u64,
    pub states: Vec<VorticityField>,
    pub increments: Vec<Vec<f64>>,
}

impl TrajectoryRecord {
    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    pub fn dt(&self) -> f64 {
        self.model.dt()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|i| i as f64 * self.dt()).collect()
    }

    pub fn grid(&self) -> &Arc<SpectralGrid> {
        self.model.grid()
    }

    /// Re-integrates from `w₀` along the stored increments.
    pub fn replay(&self) -> Result<TrajectoryRecord> {
        self.model
            .simulate_with_increments(&self.states[0], self.increments.clone())
    }

    /// Bit-exact equality of states and increments.
    pub fn same_path(&self, other: &Self) -> bool {
        self.increments == other.increments
            && self.states.len() == other.states.len()
            && self
                .states
                .iter()
                .zip(&other.states)
                .all(|(a, b)| a.coeffs() == b.coeffs())
    }

    pub fn energy_path(&self) -> EnergyPath {
        let m = &self.model;
        let mut path = EnergyPath::with_capacity(m.dt(), m.nu(), m.noise().e0(), self.states.len());
        for w in &self.states {
            path.push(w);
        }
        path.martingale = self
            .states
            .iter()
            .zip(&self.increments)
            .map(|(w, dw)| w.inner(&m.noise().apply(m.grid(), dw)))
            .collect();
        path
    }

    /// CSV rows `t,energy,enstrophy,h1sq` with fixed formatting.
    pub fn write_diagnostics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "{DIAGNOSTICS_HEADER}")?;
        for (i, w) in self.states.iter().enumerate() {
            writeln!(out, "{}", diagnostics_row(i as f64 * self.dt(), w))?;
        }
        Ok(())
    }
}

pub const DIAGNOSTICS_HEADER: &str = "t,energy,enstrophy,h1sq";

/// One diagnostics CSV row for the state at time `t`.
pub fn diagnostics_row(t: f64, w: &VorticityField) -> String {
    format!(
        "{:.6},{:.12e},{:.12e},{:.12e}",
        t,
        w.energy(),
        w.enstrophy(),
        w.sobolev_norm(1.0).powi(2)
    )
}

/// Per-step samples of `‖w_i‖²`, `‖w_i‖₁²` and `⟨w_i, QΔW_i⟩`.
#[derive(Debug, Clone)]
pub struct EnergyPath {
    pub dt: f64,
    pub nu: f64,
    pub e0: f64,
    pub norm_sq: Vec<f64>,
    pub h1_sq: Vec<f64>,
    pub martingale: Vec<f64>,
}

impl EnergyPath {
    pub fn with_capacity(dt: f64, nu: f64, e0: f64, n: usize) -> Self {
        Self {
            dt,
            nu,
            e0,
            norm_sq: Vec::with_capacity(n),
            h1_sq: Vec::with_capacity(n),
            martingale: Vec::new(),
        }
    }

    /// Records the state `w_i`.
    pub fn push(&mut self, w: &VorticityField) {
        self.norm_sq.push(w.enstrophy());
        self.h1_sq.push(w.sobolev_norm(1.0).powi(2));
    }

    /// Records `⟨w_i, QΔW_i⟩` for the step leaving `w_i`.
    pub fn push_increment(&mut self, w: &VorticityField, noise: &NoiseModel, dw: &[f64]) {
        self.martingale.push(w.inner(&noise.apply(w.grid(), dw)));
    }

    pub fn steps(&self) -> usize {
        self.norm_sq.len().saturating_sub(1)
    }

    /// Time average of `2ν‖w‖₁²` over steps `from..steps`.
    pub fn mean_dissipation(&self, from: usize) -> f64 {
        let n = self.steps();
        let s: f64 = self.h1_sq[from..n].iter().sum();
        2.0 * self.nu * s / (n - from) as f64
    }
}

/// Residuals of `‖w_{i+1}‖² − ‖w_i‖² + 2ν‖w_i‖₁²dt = 2⟨w_i, QΔW_i⟩ + E₀dt`.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyBalance {
    pub dt: f64,
    pub steps: usize,
    pub max_abs_step_residual: f64,
    pub mean_step_residual: f64,
    /// `|Σ_i r_i| / T`.
    pub cumulative_residual_per_time: f64,
    pub mean_dissipation: f64,
    pub e0: f64,
}

pub fn energy_balance_report(path: &EnergyPath) -> EnergyBalance {
    let n = path.steps();
    let mut max_abs: f64 = 0.0;
    let mut sum = 0.0;
    for i in 0..n {
        let mart = path.martingale.get(i).copied().unwrap_or(0.0);
        let r = path.norm_sq[i + 1] - path.norm_sq[i] + 2.0 * path.nu * path.h1_sq[i] * path.dt
            - 2.0 * mart
            - path.e0 * path.dt;
        max_abs = max_abs.max(r.abs());
        sum += r;
    }
    let t = n as f64 * path.dt;
    EnergyBalance {
        dt: path.dt,
        steps: n,
        max_abs_step_residual: max_abs,
        mean_step_residual: if n > 0 { sum / n as f64 } else { 0.0 },
        cumulative_residual_per_time: if n > 0 { sum.abs() / t } else { 0.0 },
        mean_dissipation: if n > 0 { path.mean_dissipation(0) } else { 0.0 },
        e0: path.e0,
    }
}

/// Energy balance at `dt, dt/2, …` on one Brownian path sampled at the finest level.
pub fn energy_balance_refinement(model: &Model, w0: &VorticityField, t: f64, levels: usize) -> Result<Vec<EnergyBalance>> {
    let finest = model.with_dt(model.dt() / (1usize << (levels - 1)) as f64)?;
    let steps = finest.steps_for(t);
    let fine: Vec<Vec<f64>> = (0..steps).map(|i| finest.increments(0, i)).collect();
    let mut out = Vec::with_capacity(levels);
    for level in 0..levels {
        let factor = 1usize << (levels - 1 - level);
        let m = model.with_dt(model.dt() / (1usize << level) as f64)?;
        let incs = coarsen(&fine, factor);
        let rec = m.simulate_with_increments(w0, incs)?;
        out.push(energy_balance_report(&rec.energy_path()));
    }
    Ok(out)
}

/// Sums consecutive blocks of `factor` increments.
pub fn coarsen(fine: &[Vec<f64>], factor: usize) -> Vec<Vec<f64>> {
    fine.chunks(factor)
        .filter(|c| c.len() == factor)
        .map(|c| {
            let mut s = vec![0.0; c[0].len()];
            for dw in c {
                for (a, b) in s.iter_mut().zip(dw) {
                    *a += b;
                }
            }
            s
        })
        .collect()
}

/// `ln((1/n) Σ exp(x_i))` and the effective sample size of the weights.
pub fn log_mean_exp(xs: &[f64]) -> (f64, f64) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return (max, 0.0);
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for x in xs {
        let e = (x - max).exp();
        s1 += e;
        s2 += e * e;
    }
    (max + (s1 / xs.len() as f64).ln(), s1 * s1 / s2)
}

#[derive(Debug, Clone, Serialize)]
pub enum ProbeStatus {
    Bounded,
    Growing,
    ThresholdExceeded,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentProbe {
    pub eta: f64,
    pub times: Vec<f64>,
    /// `ln E exp(η‖w_t‖²)`.
    pub log_moment_state: Vec<f64>,
    /// `ln E exp(η sup_{t ≥ s}(‖w_t‖² + ν∫_s^t‖w‖₁² − E₀(t − s)))`.
    pub log_moment_sup: Vec<f64>,
    pub min_ess: f64,
    pub slope: f64,
    pub slope_se: f64,
    pub status: ProbeStatus,
}

/// Minimum effective sample size accepted by the moment probe.
pub const PROBE_MIN_ESS: f64 = 10.0;

/// Exponential-moment probe over an ensemble of energy paths.
///
/// Probe times are every `stride` steps from `burn_in`. The sup functional is
/// taken over the remaining horizon of each path. A trend in the state moment
/// is judged against a bootstrap over replicas.
pub fn apriori_moment_probe(paths: &[EnergyPath], eta: f64, burn_in: usize, stride: usize) -> Result<MomentProbe> {
    if paths.len() < 100 {
        return Err(Error::Config(format!(
            "moment probe needs at least 100 trajectories, got {}",
            paths.len()
        )));
    }
    let n = paths.iter().map(|p| p.steps()).min().unwrap();
    let (dt, nu, e0) = (paths[0].dt, paths[0].nu, paths[0].e0);
    let probe: Vec<usize> = (burn_in..=n).step_by(stride.max(1)).collect();
    if probe.len() < 3 {
        return Err(Error::Config("moment probe needs at least three probe times".into()));
    }
    // sup functional per path and probe time, by a backward sweep
    let sup_vals: Vec<Vec<f64>> = paths
        .iter()
        .map(|p| {
            // G(t) = ‖w_t‖² + ν Σ_{i<t}‖w_i‖₁²dt − E₀t; sup_{t≥s} G(t) − (G(s) − ‖w_s‖²)
            let mut g = Vec::with_capacity(n + 1);
            let mut acc = 0.0;
            for t in 0..=n {
                g.push(p.norm_sq[t] + acc - e0 * t as f64 * dt);
                if t < n {
                    acc += nu * p.h1_sq[t] * dt;
                }
            }
            let mut suffix = vec![f64::NEG_INFINITY; n + 2];
            for t in (0..=n).rev() {
                suffix[t] = suffix[t + 1].max(g[t]);
            }
            probe
                .iter()
                .map(|&s| suffix[s] - (g[s] - p.norm_sq[s]))
                .collect()
        })
        .collect();
    let mut min_ess = f64::INFINITY;
    let mut state = Vec::with_capacity(probe.len());
    let mut sup = Vec::with_capacity(probe.len());
    for (j, &s) in probe.iter().enumerate() {
        let xs: Vec<f64> = paths.iter().map(|p| eta * p.norm_sq[s]).collect();
        let ys: Vec<f64> = sup_vals.iter().map(|v| eta * v[j]).collect();
        let (a, ea) = log_mean_exp(&xs);
        let (b, eb) = log_mean_exp(&ys);
        min_ess = min_ess.min(ea).min(eb);
        state.push(a);
        sup.push(b);
    }
    let times: Vec<f64> = probe.iter().map(|&s| s as f64 * dt).collect();
    if !(min_ess >= PROBE_MIN_ESS) || state.iter().chain(&sup).any(|x| !x.is_finite()) {
        return Ok(MomentProbe {
            eta,
            times,
            log_moment_state: Vec::new(),
            log_moment_sup: Vec::new(),
            min_ess,
            slope: f64::NAN,
            slope_se: f64::NAN,
            status: ProbeStatus::ThresholdExceeded,
        });
    }
    let slope = ls_slope(&times, &state);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let boots: Vec<f64> = (0..200)
        .map(|_| {
            let idx: Vec<usize> = (0..paths.len()).map(|_| rng.random_range(0..paths.len())).collect();
            let ys: Vec<f64> = probe
                .iter()
                .map(|&s| log_mean_exp(&idx.iter().map(|&i| eta * paths[i].norm_sq[s]).collect::<Vec<_>>()).0)
                .collect();
            ls_slope(&times, &ys)
        })
        .collect();
    let mean = boots.iter().sum::<f64>() / boots.len() as f64;
    let se = (boots.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (boots.len() - 1) as f64).sqrt();
    let status = if slope.abs() <= 3.0 * se {
        ProbeStatus::Bounded
    } else {
        ProbeStatus::Growing
    };
    Ok(MomentProbe {
        eta,
        times,
        log_moment_state: state,
        log_moment_sup: sup,
        min_ess,
        slope,
        slope_se: se,
        status,
    })
}

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Closed-form `ln E exp(η‖w_i‖²)` for the linear scheme (nonlinearity off).
///
/// Each real coordinate is Gaussian with mean `a^i w0` and variance
/// `a²q²dt(1 − a^{2i})/(1 − a²)`, `a = e^{−ν|k|²dt}`. Returns `None` past the
/// integrability threshold.
pub fn ou_log_moment(model: &Model, w0: &VorticityField, steps: usize, eta: f64) -> Option<f64> {
    let grid = model.grid();
    let decay = model.decay_real();
    let mut var = vec![0.0; grid.dim()];
    for (r, e) in model.noise().real_indices(grid).into_iter().zip(model.noise().entries()) {
        let a2 = decay[r] * decay[r];
        var[r] += a2 * e.q * e.q * model.dt() * (1.0 - a2.powi(steps as i32)) / (1.0 - a2);
    }
    let x0 = w0.to_real();
    let mut total = 0.0;
    for r in 0..grid.dim() {
        let mu = decay[r].powi(steps as i32) * x0[r];
        let d = 1.0 - 2.0 * eta * var[r];
        if d <= 0.0 {
            return None;
        }
        total += eta * mu * mu / d - 0.5 * d.ln();
    }
    Some(total)
}

/// Stationary `E‖w‖²` of the continuous OU limit, `Σ q_n²/(2ν|k_n|²)`.
pub fn ou_stationary_enstrophy(noise: &NoiseModel, nu: f64) -> f64 {
    noise
        .entries()
        .iter()
        .map(|e| e.q * e.q / (2.0 * nu * e.mode.norm_sq() as f64))
        .sum()
}

const MAGIC: &[u8; 4] = b"SNST";
const VERSION: u32 = 1;

/// Little-endian binary layout:
/// `magic "SNST" | version u32 | N u32 | dim u32 | m u32 | steps u64 | dt f64 | nu f64 |
/// seed u64 | replica u64 | scheme u8 | nonlinear u8 | m × (k1 i32, k2 i32, q f64) |
/// (steps+1) × dim f64 states as (re, im) per half-plane mode | steps × m f64 increments`.
pub fn write_trajectory<W: Write>(rec: &TrajectoryRecord, out: W) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    let m = &rec.model;
    let grid = m.grid();
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(grid.trunc() as u32)?;
    out.write_u32::<LittleEndian>(grid.dim() as u32)?;
    out.write_u32::<LittleEndian>(m.noise().m() as u32)?;
    out.write_u64::<LittleEndian>(rec.steps() as u64)?;
    out.write_f64::<LittleEndian>(m.dt())?;
    out.write_f64::<LittleEndian>(m.nu())?;
    out.write_u64::<LittleEndian>(m.config().seed)?;
    out.write_u64::<LittleEndian>(rec.replica)?;
    out.write_u8(match m.config().scheme {
        Scheme::ExpEulerMaruyama => 0,
        Scheme::DeterministicRK4 => 1,
    })?;
    out.write_u8(m.config().nonlinear as u8)?;
    for e in m.noise().entries() {
        out.write_i32::<LittleEndian>(e.mode.k1 as i32)?;
        out.write_i32::<LittleEndian>(e.mode.k2 as i32)?;
        out.write_f64::<LittleEndian>(e.q)?;
    }
    for w in &rec.states {
        for c in w.coeffs() {
            out.write_f64::<LittleEndian>(c.re)?;
            out.write_f64::<LittleEndian>(c.im)?;
        }
    }
    for dw in &rec.increments {
        for x in dw {
            out.write_f64::<LittleEndian>(*x)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectory<R: Read>(input: R) -> Result<TrajectoryRecord> {
    let mut input = std::io::BufReader::new(input);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a trajectory file".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported trajectory version {version}")));
    }
    let trunc = input.read_u32::<LittleEndian>()? as usize;
    let dim = input.read_u32::<LittleEndian>()? as usize;
    let m = input.read_u32::<LittleEndian>()? as usize;
    let steps = input.read_u64::<LittleEndian>()? as usize;
    let dt = input.read_f64::<LittleEndian>()?;
    let nu = input.read_f64::<LittleEndian>()?;
    let seed = input.read_u64::<LittleEndian>()?;
    let replica = input.read_u64::<LittleEndian>()?;
    let scheme = match input.read_u8()? {
        0 => Scheme::ExpEulerMaruyama,
        1 => Scheme::DeterministicRK4,
        s => return Err(Error::Format(format!("unknown scheme tag {s}"))),
    };
    let nonlinear = input.read_u8()? != 0;
    let mut entries = Vec::with_capacity(m);
    for _ in 0..m {
        let k1 = input.read_i32::<LittleEndian>()? as i64;
        let k2 = input.read_i32::<LittleEndian>()? as i64;
        let q = input.read_f64::<LittleEndian>()?;
        entries.push(NoiseEntry {
            mode: Mode::new(k1, k2),
            q,
        });
    }
    let grid = SpectralGrid::new(trunc)?;
    if grid.dim() != dim {
        return Err(Error::Format(format!("dimension {dim} does not match N = {trunc}")));
    }
    let noise = if m == 0 { NoiseModel::none() } else { NoiseModel::new(entries)? };
    let cfg = IntegratorConfig {
        nu,
        dt,
        scheme,
        seed,
        nonlinear,
    };
    let model = Model::new(grid.clone(), cfg, noise)?;
    let mut states = Vec::with_capacity(steps + 1);
    let mut buf = vec![0.0; dim];
    for _ in 0..=steps {
        input.read_f64_into::<LittleEndian>(&mut buf)?;
        let coeffs = buf.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
        states.push(VorticityField::from_coeffs(grid.clone(), coeffs)?);
    }
    let mut increments = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut dw = vec![0.0; m];
        input.read_f64_into::<LittleEndian>(&mut dw)?;
        increments.push(dw);
    }
    Ok(TrajectoryRecord {
        model,
        replica,
        states,
        increments,
    })
}
