//! Control constructions on the tangent dynamics.
//!
//! A control path `v` steers the residual `ρ_{i+1} = L_i ρ_i − E Q v_i dt`,
//! `ρ_0 = ξ`, so that `J_{0,N}ξ = A_{0,N}v + ρ_N` at every horizon.
//!
//! * Elliptic: every low mode is forced; an adapted control shrinks the low
//!   part of `ρ` at unit speed `1/2` and lets the dissipation handle the rest.
//! * Hypoelliptic: on each unit interval the control lives on the first half,
//!   `v_n = A_n* (β + M_n)⁻¹ Ĵ_n ρ_n`, and `ρ_{n+1} = J̌_n β (β + M_n)⁻¹ Ĵ_n ρ_n`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{ls_slope, Model, TrajectoryRecord};
use crate::spectral::{symmetrized_matrix, VorticityField};
use crate::tangent::{ControlPath, LinearizedFlow, TangentVector};

/// `ρ_{i+1} = L_i ρ_i − E Q v_i dt` over the whole flow; returns `ρ_s, …, ρ_t`.
pub fn residual_path(flow: &LinearizedFlow<'_>, v: &ControlPath, xi: &TangentVector) -> Result<Vec<TangentVector>> {
    if v.len() != flow.len() {
        return Err(Error::LengthMismatch {
            expected: flow.len(),
            got: v.len(),
        });
    }
    if xi.len() != flow.dim() {
        return Err(Error::LengthMismatch {
            expected: flow.dim(),
            got: xi.len(),
        });
    }
    let mut out = Vec::with_capacity(v.len() + 1);
    out.push(xi.clone());
    for (k, vi) in v.iter().enumerate() {
        let i = flow.start() + k;
        let next = flow.step_matrix(i) * &out[k] - flow.eq() * vi * flow.dt();
        out.push(next);
    }
    Ok(out)
}

/// Max deviation between the integrated residual and a reference path
/// sampled every `stride` steps.
pub fn residual_ode_check(
    flow: &LinearizedFlow<'_>,
    v: &ControlPath,
    xi: &TangentVector,
    reference: &[TangentVector],
    stride: usize,
) -> Result<f64> {
    let path = residual_path(flow, v, xi)?;
    let mut worst: f64 = 0.0;
    for (j, r) in reference.iter().enumerate() {
        let idx = j * stride;
        let p = path.get(idx).ok_or(Error::LengthMismatch {
            expected: path.len(),
            got: idx + 1,
        })?;
        worst = worst.max((p - r).norm());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct EllipticRun {
    pub cut: usize,
    pub times: Vec<f64>,
    /// `‖π_ℓ ζ_i‖`.
    pub low_norms: Vec<f64>,
    #[serde(skip)]
    pub zeta: Vec<TangentVector>,
    #[serde(skip)]
    pub control: ControlPath,
    /// `max_i ‖ρ_i − ζ_i‖` with `ρ` from the residual recursion.
    pub residual_deviation: f64,
}

/// Adapted control shrinking the low part of `ζ` at speed `1/2`.
///
/// Low modes are `0 < max(|k1|,|k2|) ≤ cut`; each must be forced.
pub fn elliptic_control_run(flow: &LinearizedFlow<'_>, xi: &TangentVector, cut: usize) -> Result<EllipticRun> {
    let rec = flow.record();
    let grid = rec.grid();
    let noise = rec.model.noise();
    let mask = grid.low_mask(cut);
    let channels = noise.real_indices(grid);
    // low real coordinate → (channel, q)
    let mut chan_of = vec![None; flow.dim()];
    for (n, &r) in channels.iter().enumerate() {
        chan_of[r] = Some((n, noise.entries()[n].q));
    }
    for r in 0..flow.dim() {
        if mask[r] && chan_of[r].is_none() {
            return Err(Error::Config(format!(
                "low mode {} (cut {cut}) is not forced",
                grid.real_mode(r)
            )));
        }
    }
    let dt = flow.dt();
    let decay = flow.decay();
    let low_norm = |z: &TangentVector| {
        z.iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(x, _)| x * x)
            .sum::<f64>()
            .sqrt()
    };
    let mut zeta = Vec::with_capacity(flow.len() + 1);
    let mut control = Vec::with_capacity(flow.len());
    zeta.push(xi.clone());
    for k in 0..flow.len() {
        let i = flow.start() + k;
        let z = &zeta[k];
        let lz = flow.step_matrix(i) * z;
        let nl = low_norm(z);
        let shrink = if nl > 0.0 { (nl - dt / 2.0).max(0.0) / nl } else { 0.0 };
        let mut next = lz.clone();
        let mut v = DVector::zeros(flow.m());
        for r in 0..flow.dim() {
            if !mask[r] {
                continue;
            }
            let target = shrink * z[r];
            next[r] = target;
            // E Q v dt = π_ℓ L z − ζ^ℓ_{next}
            let (n, q) = chan_of[r].unwrap();
            v[n] = (lz[r] - target) / (decay[r] * q * dt);
        }
        zeta.push(next);
        control.push(v);
    }
    let rho = residual_path(flow, &control, xi)?;
    let residual_deviation = rho
        .iter()
        .zip(&zeta)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    Ok(EllipticRun {
        cut,
        times: (0..=flow.len()).map(|k| (flow.start() + k) as f64 * dt).collect(),
        low_norms: zeta.iter().map(low_norm).collect(),
        zeta,
        control,
        residual_deviation,
    })
}

/// Itô sum `Σ_i v_i · ΔW_i` of a control path against the stored increments from step `start`.
pub fn ito_sum(rec: &TrajectoryRecord, start: usize, v: &ControlPath) -> f64 {
    v.iter()
        .enumerate()
        .map(|(k, vi)| vi.iter().zip(&rec.increments[start + k]).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Step layout of one control interval.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Schedule {
    /// Steps per interval.
    pub interval: usize,
    /// Steps carrying the control (the first half).
    pub active: usize,
}

impl Schedule {
    /// Unit-length intervals with an active first half.
    pub fn for_model(model: &Model, length: f64) -> Result<Self> {
        let k = model.steps_for(length);
        if k < 2 || k % 2 != 0 || ((k as f64) * model.dt() - length).abs() > 1e-9 * length {
            return Err(Error::Config(format!(
                "interval length {length} must be an even multiple of dt = {}",
                model.dt()
            )));
        }
        Ok(Self {
            interval: k,
            active: k / 2,
        })
    }
}

/// Operators of one interval `[a, b]` with midpoint `mid`, shared by every `β`.
pub struct IntervalOperators<'a> {
    pub flow: LinearizedFlow<'a>,
    pub a: usize,
    pub mid: usize,
    pub b: usize,
    /// Columns `J_{i+1,mid} E Q`, `i ∈ [a, mid)`.
    pub g: DMatrix<f64>,
    /// `M_n = G Gᵀ dt`.
    pub malliavin: DMatrix<f64>,
}

/// Result of one hypoelliptic interval.
#[derive(Debug, Clone)]
pub struct HypoStep {
    pub beta: f64,
    /// `(β + M)⁻¹ Ĵρ`.
    pub x: TangentVector,
    /// Control over the whole interval, zero on the idle half.
    pub control: ControlPath,
    pub rho_next: TangentVector,
    /// `‖J_{a,b}ρ − J̌ A v − ρ_next‖`.
    pub identity_residual: f64,
    pub chol: Cholesky<f64, Dyn>,
    pub jhat_rho: TangentVector,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OperatorBounds {
    /// `‖β M̃⁻¹‖`.
    pub beta_inverse: f64,
    /// `‖A* M̃^{-1/2}‖`.
    pub adjoint_half_inverse: f64,
    pub min_eig: f64,
    pub max_eig: f64,
}

impl<'a> IntervalOperators<'a> {
    pub fn new(rec: &'a TrajectoryRecord, a: usize, sched: Schedule) -> Result<Self> {
        let b = a + sched.interval;
        let mid = a + sched.active;
        let flow = LinearizedFlow::new(rec, a, b)?;
        let g = flow.a_matrix_between(a, mid)?;
        let mut malliavin = &g * g.transpose() * flow.dt();
        let n = malliavin.nrows();
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (malliavin[(i, j)] + malliavin[(j, i)]);
                malliavin[(i, j)] = v;
                malliavin[(j, i)] = v;
            }
        }
        Ok(Self {
            flow,
            a,
            mid,
            b,
            g,
            malliavin,
        })
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    pub fn shifted(&self, beta: f64) -> DMatrix<f64> {
        let mut m = self.malliavin.clone();
        for i in 0..self.dim() {
            m[(i, i)] += beta;
        }
        m
    }

    /// `v = A*x` on the active half, `ρ_next = J̌(βx)`.
    pub fn solve(&self, rho: &TangentVector, beta: f64) -> Result<HypoStep> {
        if !(beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        let chol = Cholesky::new(self.shifted(beta))
            .ok_or_else(|| Error::Numeric(format!("Cholesky of beta + M failed (beta = {beta:e})")))?;
        let jhat_rho = self.flow.jacobian_between(self.a, self.mid, rho)?;
        let x = chol.solve(&jhat_rho);
        let m = self.flow.m();
        let mut control = vec![DVector::zeros(m); self.b - self.a];
        let gx = self.g.tr_mul(&x);
        for (k, v) in control.iter_mut().take(self.mid - self.a).enumerate() {
            v.copy_from(&gx.rows(k * m, m));
        }
        let rho_next = self.flow.jacobian_between(self.mid, self.b, &(&x * beta))?;
        let direct = self.flow.jacobian_apply(rho)?;
        let av = self.flow.a_apply(&control)?;
        let identity_residual = (direct - av - &rho_next).norm();
        Ok(HypoStep {
            beta,
            x,
            control,
            rho_next,
            identity_residual,
            chol,
            jhat_rho,
        })
    }

    /// Operator norms from the eigendecomposition of `M`.
    pub fn operator_bounds(&self, beta: f64) -> OperatorBounds {
        let eig = SymmetricEigen::new(self.malliavin.clone());
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lam = |l: f64| l.max(0.0);
        OperatorBounds {
            beta_inverse: eig.eigenvalues.iter().map(|&l| beta / (beta + lam(l))).fold(0.0, f64::max),
            adjoint_half_inverse: eig
                .eigenvalues
                .iter()
                .map(|&l| (lam(l) / (beta + lam(l))).sqrt())
                .fold(0.0, f64::max),
            min_eig: min,
            max_eig: max,
        }
    }
}

pub fn hypo_interval(rec: &TrajectoryRecord, n: usize, rho: &TangentVector, beta: f64, sched: Schedule) -> Result<HypoStep> {
    IntervalOperators::new(rec, n * sched.interval, sched)?.solve(rho, beta)
}

/// Skorokhod terms of one hypoelliptic interval.
#[derive(Debug, Clone, Serialize)]
pub struct SkorokhodTerms {
    /// `Σ_i v_i · ΔW_i`.
    pub ito: f64,
    /// `Σ_i Σ_j ∂v_i^j/∂ΔW_i^j dt`.
    pub correction: f64,
    /// `Σ_{i,j} bound_{ij} √dt`, dominating `|correction|`.
    pub bound: f64,
    /// `(|∂v_i^j/∂ΔW_i^j| √dt, bound_{ij})` per active step and channel.
    pub entries: Vec<(f64, f64)>,
}

impl SkorokhodTerms {
    pub fn skorokhod(&self) -> f64 {
        self.ito - self.correction
    }
}

/// Flop estimate of [`skorokhod_terms`].
pub fn skorokhod_cost(dim: usize, m: usize, active: usize) -> f64 {
    let (d, m, k) = (dim as f64, m as f64, active as f64);
    m * k * k * (d * d * m * k + d * d * d)
}

/// Default flop budget for the trace correction.
pub const SKOROKHOD_BUDGET: f64 = 5e10;

/// Discrete Skorokhod correction and its almost-sure bound.
///
/// `ρ_n` does not depend on the increments of interval `n`, so only `A_n`,
/// `Ĵ_n` and `M_n` are differentiated:
/// `Dv = (DA)*x + A*M̃⁻¹(DĴρ − (DA A* + A DA*)x)`.
pub fn skorokhod_terms(ops: &IntervalOperators<'_>, step: &HypoStep, rho: &TangentVector, budget: f64) -> Result<SkorokhodTerms> {
    let flow = &ops.flow;
    let (dim, m, kh) = (flow.dim(), flow.m(), ops.mid - ops.a);
    let cost = skorokhod_cost(dim, m, kh);
    if cost > budget {
        return Err(Error::Budget(format!(
            "Skorokhod correction needs ~{cost:.2e} flops (dim {dim}, {kh} active steps), budget {budget:.2e}"
        )));
    }
    let rec = flow.record();
    let grid = rec.grid();
    let dt = flow.dt();
    let beta = step.beta;
    let x = &step.x;
    let rho_norm = rho.norm();
    let jhat = flow.jacobian_matrix_between(ops.a, ops.mid)?;
    let jhat_norm = spectral_norm(&jhat);
    let nonlinear = rec.model.config().nonlinear;
    let decay = flow.decay();
    let gtx = ops.g.tr_mul(x);
    let mut correction = 0.0;
    let mut bound = 0.0;
    let mut entries = Vec::with_capacity(kh * m);
    for r in ops.a..ops.mid {
        for j in 0..m {
            // forward sweep of G, Ĵρ, Ĵ and their derivatives in ΔW_r^j
            let mut g_part = DMatrix::<f64>::zeros(dim, 0);
            let mut dg = DMatrix::<f64>::zeros(dim, 0);
            let mut z = rho.clone();
            let mut dz = DVector::zeros(dim);
            let mut jh = DMatrix::<f64>::identity(dim, dim);
            let mut djh = DMatrix::<f64>::zeros(dim, dim);
            let mut gresp = DVector::zeros(dim);
            for i in ops.a..ops.mid {
                let l = flow.step_matrix(i);
                if i == r + 1 {
                    gresp = flow.eq().column(j).into_owned();
                }
                let dl = if i > r && nonlinear {
                    let f = VorticityField::from_real(grid.clone(), gresp.as_slice())?;
                    let mut bm = symmetrized_matrix(&f) * dt;
                    for (row, d) in decay.iter().enumerate() {
                        bm.row_mut(row).scale_mut(*d);
                    }
                    Some(bm)
                } else {
                    None
                };
                if let Some(dl) = &dl {
                    dg = dl * &g_part + l * &dg;
                    dz = dl * &z + l * &dz;
                    djh = dl * &jh + l * &djh;
                } else {
                    dg = l * &dg;
                    dz = l * &dz;
                    djh = l * &djh;
                }
                g_part = l * &g_part;
                z = l * &z;
                jh = l * &jh;
                if i > r {
                    gresp = l * &gresp;
                }
                // append the kick of step i
                let cols = g_part.ncols();
                g_part = g_part.insert_columns(cols, m, 0.0);
                g_part.columns_mut(cols, m).copy_from(flow.eq());
                dg = dg.insert_columns(cols, m, 0.0);
            }
            let dmx = (&dg * &gtx + &ops.g * dg.tr_mul(x)) * dt;
            let dx = step.chol.solve(&(&dz - dmx));
            let k = r - ops.a;
            let dv = dg.columns(k * m, m).tr_mul(x) + ops.g.columns(k * m, m).tr_mul(&dx);
            let value = dv[j];
            correction += value * dt;
            let bij = 3.0 / beta * spectral_norm(&dg) * dt.sqrt() * jhat_norm * rho_norm
                + beta.powf(-0.5) * spectral_norm(&djh) * rho_norm;
            bound += bij * dt.sqrt();
            entries.push((value.abs() * dt.sqrt(), bij));
        }
    }
    Ok(SkorokhodTerms {
        ito: ito_sum(rec, ops.a, &step.control),
        correction,
        bound,
        entries,
    })
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct HypoConfig {
    pub betas: Vec<f64>,
    pub intervals: usize,
    pub interval_length: f64,
    pub replicas: usize,
    /// Evaluate the Skorokhod correction and bound (small grids only).
    pub skorokhod: bool,
    pub budget: f64,
    /// Check operator-norm bounds and β-monotonicity on every interval.
    pub verify: bool,
}

impl Default for HypoConfig {
    fn default() -> Self {
        Self {
            betas: vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8],
            intervals: 8,
            interval_length: 1.0,
            replicas: 200,
            skorokhod: false,
            budget: SKOROKHOD_BUDGET,
            verify: false,
        }
    }
}

/// One replica under one `β`.
#[derive(Debug, Clone, Serialize)]
pub struct BetaTrack {
    pub beta: f64,
    pub rho_norms: Vec<f64>,
    /// `‖J_{0,n}ξ − A_{0,n}v_{0,n} − ρ_n‖`.
    pub telescope: Vec<f64>,
    pub ito: Vec<f64>,
    pub correction: Vec<f64>,
    pub bound: Vec<f64>,
    /// Every `|Dv| √dt ≤ bound` entry held.
    pub entrywise_bound_ok: bool,
    pub max_identity_residual: f64,
    #[serde(skip)]
    pub rho: Vec<TangentVector>,
}

#[derive(Debug, Clone)]
pub struct ReplicaRun {
    pub tracks: Vec<BetaTrack>,
    /// `w` at integer times.
    pub states: Vec<TangentVector>,
    /// `J_{0,n}ξ` at integer times.
    pub jacobian: Vec<TangentVector>,
    pub bounds_ok: bool,
}

/// Runs the hypoelliptic construction on one replica for every `β` on the same noise.
pub fn hypo_replica(model: &Model, w0: &VorticityField, xi: &TangentVector, cfg: &HypoConfig, replica: u64) -> Result<ReplicaRun> {
    let sched = Schedule::for_model(model, cfg.interval_length)?;
    let rec = model.simulate_replica(w0, cfg.intervals * sched.interval, replica)?;
    let dim = rec.grid().dim();
    if xi.len() != dim {
        return Err(Error::LengthMismatch { expected: dim, got: xi.len() });
    }
    let mut tracks: Vec<BetaTrack> = cfg
        .betas
        .iter()
        .map(|&beta| BetaTrack {
            beta,
            rho_norms: vec![xi.norm()],
            telescope: vec![0.0],
            ito: Vec::new(),
            correction: Vec::new(),
            bound: Vec::new(),
            entrywise_bound_ok: true,
            max_identity_residual: 0.0,
            rho: vec![xi.clone()],
        })
        .collect();
    let mut jx = xi.clone();
    let mut av: Vec<TangentVector> = vec![DVector::zeros(dim); cfg.betas.len()];
    let mut states = vec![rec.states[0].to_real()];
    let mut jacobian = vec![jx.clone()];
    let mut bounds_ok = true;
    for n in 0..cfg.intervals {
        let ops = IntervalOperators::new(&rec, n * sched.interval, sched)?;
        jx = ops.flow.jacobian_apply(&jx)?;
        for (t, track) in tracks.iter_mut().enumerate() {
            let rho = track.rho.last().unwrap().clone();
            let step = ops.solve(&rho, track.beta)?;
            av[t] = ops.flow.jacobian_apply(&av[t])? + ops.flow.a_apply(&step.control)?;
            track.max_identity_residual = track.max_identity_residual.max(step.identity_residual);
            track.telescope.push((&jx - &av[t] - &step.rho_next).norm());
            if cfg.skorokhod {
                let sk = skorokhod_terms(&ops, &step, &rho, cfg.budget)?;
                track.entrywise_bound_ok &= sk.entries.iter().all(|(v, b)| *v <= b * (1.0 + 1e-9) + 1e-14);
                track.ito.push(sk.ito);
                track.correction.push(sk.correction);
                track.bound.push(sk.bound);
            } else {
                track.ito.push(ito_sum(&rec, ops.a, &step.control));
            }
            if cfg.verify {
                let ob = ops.operator_bounds(track.beta);
                bounds_ok &= ob.beta_inverse <= 1.0 + 1e-12 && ob.adjoint_half_inverse <= 1.0 + 1e-12;
                bounds_ok &= ob.min_eig >= -1e-10 * ob.max_eig.max(1e-300);
            }
            let rn = step.rho_next.norm();
            track.rho_norms.push(rn);
            track.rho.push(step.rho_next);
        }
        if cfg.verify {
            bounds_ok &= beta_monotone(&ops, xi, &cfg.betas)?;
        }
        states.push(rec.states[(n + 1) * sched.interval].to_real());
        jacobian.push(jx.clone());
    }
    for t in tracks.iter_mut() {
        t.rho.clear();
    }
    Ok(ReplicaRun {
        tracks,
        states,
        jacobian,
        bounds_ok,
    })
}

/// `‖β(β + M)⁻¹Ĵρ‖` is nondecreasing in `β` for a fixed input.
pub fn beta_monotone(ops: &IntervalOperators<'_>, rho: &TangentVector, betas: &[f64]) -> Result<bool> {
    let mut sorted = betas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut prev = 0.0;
    for beta in sorted {
        let step = ops.solve(rho, beta)?;
        let val = (&step.x * beta).norm();
        if val < prev * (1.0 - 1e-9) {
            return Ok(false);
        }
        prev = val;
    }
    Ok(true)
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaSummary {
    pub beta: f64,
    pub mean_rho: Vec<f64>,
    pub p95_rho: Vec<f64>,
    pub mean_rho_sq: Vec<f64>,
    pub max_telescope: Vec<f64>,
    pub mean_ito: Vec<f64>,
    pub mean_correction: Vec<f64>,
    pub mean_bound: Vec<f64>,
    /// `exp(slope)` of `ln E‖ρ_n‖` per unit time.
    pub decay_factor: f64,
    pub bound_ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypoReport {
    pub replicas: usize,
    pub intervals: usize,
    pub summaries: Vec<BetaSummary>,
    pub best_beta: f64,
    pub best_factor: f64,
    /// Some `β` gives a decay factor below one.
    pub decaying: bool,
    pub max_telescope: f64,
    pub operator_bounds_ok: bool,
}

/// Ensemble over replicas `0..replicas`, in parallel, reduced in replica order.
pub fn hypo_run(model: &Model, w0: &VorticityField, xi: &TangentVector, cfg: &HypoConfig) -> Result<HypoReport> {
    let runs: Vec<ReplicaRun> = (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|r| hypo_replica(model, w0, xi, cfg, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&runs, cfg))
}

pub fn summarize(runs: &[ReplicaRun], cfg: &HypoConfig) -> HypoReport {
    let n_int = cfg.intervals;
    let mut summaries = Vec::new();
    for (t, &beta) in cfg.betas.iter().enumerate() {
        let col = |f: &dyn Fn(&BetaTrack) -> &Vec<f64>, len: usize| -> Vec<Vec<f64>> {
            (0..len).map(|n| runs.iter().map(|r| f(&r.tracks[t]).get(n).copied().unwrap_or(0.0)).collect()).collect()
        };
        let rho = col(&|b| &b.rho_norms, n_int + 1);
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let mean_rho: Vec<f64> = rho.iter().map(mean).collect();
        let p95_rho = rho.iter().map(|v| quantile(v, 0.95)).collect();
        let mean_rho_sq = rho.iter().map(|v| mean(&v.iter().map(|x| x * x).collect())).collect();
        let max_telescope = col(&|b| &b.telescope, n_int + 1)
            .iter()
            .map(|v| v.iter().copied().fold(0.0, f64::max))
            .collect();
        let mean_ito = col(&|b| &b.ito, n_int).iter().map(mean).collect();
        let mean_correction = col(&|b| &b.correction, n_int).iter().map(mean).collect();
        let mean_bound = col(&|b| &b.bound, n_int).iter().map(mean).collect();
        let decay_factor = decay_factor(&mean_rho, cfg.interval_length);
        summaries.push(BetaSummary {
            beta,
            mean_rho,
            p95_rho,
            mean_rho_sq,
            max_telescope,
            mean_ito,
            mean_correction,
            mean_bound,
            decay_factor,
            bound_ok: runs.iter().all(|r| r.tracks[t].entrywise_bound_ok),
        });
    }
    let best = summaries
        .iter()
        .min_by(|a, b| a.decay_factor.partial_cmp(&b.decay_factor).unwrap_or(std::cmp::Ordering::Equal))
        .map(|s| (s.beta, s.decay_factor))
        .unwrap_or((f64::NAN, f64::NAN));
    let max_telescope = summaries
        .iter()
        .flat_map(|s| s.max_telescope.iter().copied())
        .fold(0.0, f64::max);
    HypoReport {
        replicas: runs.len(),
        intervals: n_int,
        summaries,
        best_beta: best.0,
        best_factor: best.1,
        decaying: best.1 < 1.0,
        max_telescope,
        operator_bounds_ok: runs.iter().all(|r| r.bounds_ok),
    }
}

/// `exp` of the least-squares slope of `ln y_n` against time `n·length`.
pub fn decay_factor(y: &[f64], length: f64) -> f64 {
    let pts: Vec<(f64, f64)> = y
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(n, v)| (n as f64 * length, v.ln()))
        .collect();
    if pts.len() < 2 {
        return if y.len() > 1 { 0.0 } else { f64::NAN };
    }
    let (x, l): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    ls_slope(&x, &l).exp()
}

pub fn quantile(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((s.len() - 1) as f64 * p).round() as usize;
    s[idx]
}

/// Bounded cylinder test functions of the four lowest real coordinates.
#[derive(Debug, Clone, Copy, Serialize)]
pub enum TestFunction {
    Constant(f64),
    /// `sin(a · x_{0..4})`.
    Sine([f64; 4]),
}

impl TestFunction {
    pub fn sup_norm(&self) -> f64 {
        match self {
            TestFunction::Constant(c) => c.abs(),
            TestFunction::Sine(_) => 1.0,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            TestFunction::Constant(_) => 0.0,
            TestFunction::Sine(a) => a.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    pub fn value(&self, x: &TangentVector) -> f64 {
        match self {
            TestFunction::Constant(c) => *c,
            TestFunction::Sine(a) => (0..4).map(|i| a[i] * x[i]).sum::<f64>().sin(),
        }
    }

    pub fn gradient(&self, x: &TangentVector) -> TangentVector {
        let mut g = DVector::zeros(x.len());
        if let TestFunction::Sine(a) = self {
            let c = (0..4).map(|i| a[i] * x[i]).sum::<f64>().cos();
            for i in 0..4 {
                g[i] = a[i] * c;
            }
        }
        g
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientBoundRow {
    pub n: usize,
    /// `E ∇φ(w_n) · J_{0,n}ξ`.
    pub pathwise: f64,
    pub pathwise_se: f64,
    /// Common-random-number central difference of `P_nφ`.
    pub finite_difference: f64,
    pub finite_difference_se: f64,
    /// `‖φ‖_∞ E|Σ v dW|` (Itô part of the integral).
    pub integral_term: f64,
    /// `‖∇φ‖_∞ E‖ρ_n‖`.
    pub residual_term: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientBoundReport {
    pub beta: f64,
    pub phi: TestFunction,
    pub rows: Vec<GradientBoundRow>,
    pub mean_rho: Vec<f64>,
    /// `−slope` of `ln E‖ρ_n‖`.
    pub delta: f64,
    /// Bootstrap 95% interval for `δ`.
    pub delta_ci: (f64, f64),
    pub delta_positive: bool,
    /// Any row whose standard errors exceed the magnitude of the estimate.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientConfig {
    pub beta: f64,
    pub intervals: usize,
    pub interval_length: f64,
    pub replicas: usize,
    pub fd_eps: f64,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            beta: 1e-4,
            intervals: 6,
            interval_length: 1.0,
            replicas: 200,
            fd_eps: 1e-4,
            bootstrap: 1000,
            seed: 0,
        }
    }
}

/// Monte-Carlo estimate of both terms of the gradient decomposition at integer times.
pub fn gradient_bound_estimate(
    model: &Model,
    w0: &VorticityField,
    xi: &TangentVector,
    phi: TestFunction,
    cfg: &GradientConfig,
) -> Result<GradientBoundReport> {
    let hcfg = HypoConfig {
        betas: vec![cfg.beta],
        intervals: cfg.intervals,
        interval_length: cfg.interval_length,
        replicas: cfg.replicas,
        skorokhod: false,
        budget: SKOROKHOD_BUDGET,
        verify: false,
    };
    let sched = Schedule::for_model(model, cfg.interval_length)?;
    let grid = model.grid().clone();
    let x0 = w0.to_real();
    let plus = VorticityField::from_real(grid.clone(), (&x0 + xi * cfg.fd_eps).as_slice())?;
    let minus = VorticityField::from_real(grid.clone(), (&x0 - xi * cfg.fd_eps).as_slice())?;
    let per: Vec<(ReplicaRun, Vec<f64>)> = (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<(ReplicaRun, Vec<f64>)> {
            let run = hypo_replica(model, w0, xi, &hcfg, r)?;
            let steps = cfg.intervals * sched.interval;
            let p = model.simulate_replica(&plus, steps, r)?;
            let m = model.simulate_replica(&minus, steps, r)?;
            let fd = (0..=cfg.intervals)
                .map(|n| {
                    let i = n * sched.interval;
                    (phi.value(&p.states[i].to_real()) - phi.value(&m.states[i].to_real())) / (2.0 * cfg.fd_eps)
                })
                .collect();
            Ok((run, fd))
        })
        .collect::<Result<Vec<_>>>()?;
    let nrep = per.len() as f64;
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0);
        (mean, (var / v.len() as f64).sqrt())
    };
    let mut rows = Vec::new();
    let mut degenerate = false;
    for n in 0..=cfg.intervals {
        let path: Vec<f64> = per
            .iter()
            .map(|(run, _)| phi.gradient(&run.states[n]).dot(&run.jacobian[n]))
            .collect();
        let fd: Vec<f64> = per.iter().map(|(_, fd)| fd[n]).collect();
        let integral: Vec<f64> = per
            .iter()
            .map(|(run, _)| run.tracks[0].ito[..n].iter().sum::<f64>().abs())
            .collect();
        let rho: f64 = per.iter().map(|(run, _)| run.tracks[0].rho_norms[n]).sum::<f64>() / nrep;
        let (pm, ps) = stats(&path);
        let (fm, fs) = stats(&fd);
        if ps > pm.abs().max(1e-12) && fs > fm.abs().max(1e-12) {
            degenerate = true;
        }
        rows.push(GradientBoundRow {
            n,
            pathwise: pm,
            pathwise_se: ps,
            finite_difference: fm,
            finite_difference_se: fs,
            integral_term: phi.sup_norm() * stats(&integral).0,
            residual_term: phi.lipschitz() * rho,
        });
    }
    let rho_table: Vec<Vec<f64>> = per.iter().map(|(run, _)| run.tracks[0].rho_norms.clone()).collect();
    let mean_rho = column_means(&rho_table);
    let delta = -decay_factor(&mean_rho, cfg.interval_length).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb007);
    let mut boots: Vec<f64> = (0..cfg.bootstrap)
        .map(|_| {
            let sample: Vec<Vec<f64>> = (0..rho_table.len())
                .map(|_| rho_table[rng.random_range(0..rho_table.len())].clone())
                .collect();
            -decay_factor(&column_means(&sample), cfg.interval_length).ln()
        })
        .collect();
    boots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ci = (quantile(&boots, 0.025), quantile(&boots, 0.975));
    Ok(GradientBoundReport {
        beta: cfg.beta,
        phi,
        rows,
        mean_rho,
        delta,
        delta_ci: ci,
        delta_positive: ci.0 > 0.0,
        degenerate,
    })
}

fn column_means(table: &[Vec<f64>]) -> Vec<f64> {
    let len = table[0].len();
    (0..len)
        .map(|n| table.iter().map(|r| r[n]).sum::<f64>() / table.len() as f64)
        .collect()
}
