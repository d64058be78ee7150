//! Pseudo-metrics, exact coupling distances and asymptotic strong Feller probes.
//!
//! `‖μ₁ − μ₂‖_d = inf_{μ ∈ C(μ₁,μ₂)} ∫ d(x,y) μ(dx,dy)` is solved exactly as a
//! transportation problem by the MODI (u-v) simplex on a spanning-tree basis.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::Model;
use crate::rng::StreamKey;
use crate::spectral::VorticityField;

/// Default cap on support sizes handed to the exact solver.
pub const DEFAULT_SUPPORT_CAP: usize = 2000;

/// Relative tolerance for equal total mass.
const MASS_TOL: f64 = 1e-9;

type MetricFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum PseudoMetric {
    /// `min(1, ‖x − y‖ / ε)` in the Euclidean norm.
    Scaled { eps: f64 },
    /// `1{x ≠ y}`; the coupling distance is total variation.
    Discrete,
    Custom { name: String, f: Arc<MetricFn> },
}

impl fmt::Debug for PseudoMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PseudoMetric::Scaled { eps } => write!(f, "Scaled({eps})"),
            PseudoMetric::Discrete => write!(f, "Discrete"),
            PseudoMetric::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl PseudoMetric {
    pub fn scaled(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("metric scale must be positive, got {eps}")));
        }
        Ok(PseudoMetric::Scaled { eps })
    }

    pub fn custom(name: &str, f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        PseudoMetric::Custom {
            name: name.to_string(),
            f: Arc::new(f),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            PseudoMetric::Scaled { eps } => (euclid(x, y) / eps).min(1.0),
            PseudoMetric::Discrete => {
                if x == y {
                    0.0
                } else {
                    1.0
                }
            }
            PseudoMetric::Custom { f, .. } => f(x, y),
        }
    }

    /// Decreasing scales give an increasing family.
    pub fn scaled_family(eps: &[f64]) -> Result<Vec<Self>> {
        eps.iter().map(|&e| Self::scaled(e)).collect()
    }
}

pub fn euclid(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Finitely supported nonnegative measure.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Any positive total mass is accepted; see [`EmpiricalMeasure::probability`].
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("measure has empty support".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::LengthMismatch {
                expected: points.len(),
                got: weights.len(),
            });
        }
        let dim = points[0].len();
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::LengthMismatch { expected: dim, got: p.len() });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("measure weights must be finite and nonnegative".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("measure has zero mass".into()));
        }
        Ok(Self { points, weights })
    }

    /// Weights must sum to one.
    pub fn probability(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let mu = Self::new(points, weights)?;
        if (mu.mass() - 1.0).abs() > MASS_TOL {
            return Err(Error::UnequalMass(mu.mass(), 1.0));
        }
        Ok(mu)
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len().max(1);
        Self::new(points, vec![1.0 / n as f64; n])
    }

    pub fn dirac(point: Vec<f64>) -> Self {
        Self {
            points: vec![point],
            weights: vec![1.0],
        }
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn normalized(&self) -> Self {
        let m = self.mass();
        Self {
            points: self.points.clone(),
            weights: self.weights.iter().map(|w| w / m).collect(),
        }
    }

    /// `n` distinct atoms drawn without replacement, reweighted uniformly.
    pub fn subsample<R: Rng>(&self, rng: &mut R, n: usize) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mass = self.mass();
        let idx = sample(rng, self.len(), n);
        Self {
            points: idx.iter().map(|i| self.points[i].clone()).collect(),
            weights: vec![mass / n as f64; n],
        }
    }
}

/// Optimal transportation plan with its dual potentials.
#[derive(Debug, Clone, Serialize)]
pub struct TransportPlan {
    pub cost: f64,
    /// Basic cells `(row, col, mass)`, degenerate zeros included.
    pub flows: Vec<(usize, usize, f64)>,
    pub row_potentials: Vec<f64>,
    pub col_potentials: Vec<f64>,
    pub pivots: usize,
}

impl TransportPlan {
    /// `Σ a_i u_i + Σ b_j v_j`.
    pub fn dual_value(&self, supply: &[f64], demand: &[f64]) -> f64 {
        supply.iter().zip(&self.row_potentials).map(|(a, u)| a * u).sum::<f64>()
            + demand.iter().zip(&self.col_potentials).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn dense(&self, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, cols);
        for &(i, j, x) in &self.flows {
            m[(i, j)] += x;
        }
        m
    }
}

fn check_masses(supply: &[f64], demand: &[f64]) -> Result<()> {
    if supply.is_empty() || demand.is_empty() {
        return Err(Error::Config("transport problem with empty side".into()));
    }
    if supply.iter().chain(demand).any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::Config("transport masses must be finite and nonnegative".into()));
    }
    let (sa, sb) = (supply.iter().sum::<f64>(), demand.iter().sum::<f64>());
    if (sa - sb).abs() > MASS_TOL * sa.max(sb).max(1e-300) {
        return Err(Error::UnequalMass(sa, sb));
    }
    Ok(())
}

/// Exact balanced transportation problem `min Σ c_ij x_ij`.
///
/// Northwest-corner start, Dantzig pricing, Bland's rule after a run of
/// degenerate pivots.
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &DMatrix<f64>) -> Result<TransportPlan> {
    check_masses(supply, demand)?;
    let (n, m) = (supply.len(), demand.len());
    if cost.nrows() != n || cost.ncols() != m {
        return Err(Error::LengthMismatch {
            expected: n * m,
            got: cost.len(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite transport cost".into()));
    }
    let scale = cost.iter().fold(0.0f64, |a, c| a.max(c.abs())).max(1e-300);
    let tol = 1e-12 * scale;

    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(n + m - 1);
    let mut flow: Vec<f64> = Vec::with_capacity(n + m - 1);
    {
        let mut a = supply.to_vec();
        let mut b = demand.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let x = a[i].min(b[j]).max(0.0);
            basis.push((i, j));
            flow.push(x);
            a[i] -= x;
            b[j] -= x;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if j == m - 1 || (i < n - 1 && a[i] <= b[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
    }
    let mut in_basis = vec![false; n * m];
    for &(i, j) in &basis {
        in_basis[i * m + j] = true;
    }

    let nodes = n + m;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut pivots = 0usize;
    let mut degenerate_run = 0usize;
    let max_pivots = 50 * (n * m + nodes) + 1000;
    loop {
        // tree adjacency: rows are 0..n, columns n..n+m
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
        for (e, &(i, j)) in basis.iter().enumerate() {
            adj[i].push((n + j, e));
            adj[n + j].push((i, e));
        }
        let mut known = vec![false; nodes];
        let mut stack = vec![0usize];
        known[0] = true;
        u[0] = 0.0;
        while let Some(node) = stack.pop() {
            for &(other, e) in &adj[node] {
                if known[other] {
                    continue;
                }
                let (i, j) = basis[e];
                if node < n {
                    v[j] = cost[(i, j)] - u[i];
                } else {
                    u[i] = cost[(i, j)] - v[j];
                }
                known[other] = true;
                stack.push(other);
            }
        }
        if known.iter().any(|k| !k) {
            return Err(Error::Numeric("transport basis is not a spanning tree".into()));
        }

        let bland = degenerate_run > nodes;
        let mut enter: Option<(usize, usize, f64)> = None;
        'price: for i in 0..n {
            for j in 0..m {
                if in_basis[i * m + j] {
                    continue;
                }
                let rc = cost[(i, j)] - u[i] - v[j];
                if rc < -tol {
                    if bland {
                        enter = Some((i, j, rc));
                        break 'price;
                    }
                    if enter.is_none_or(|(_, _, best)| rc < best) {
                        enter = Some((i, j, rc));
                    }
                }
            }
        }
        let Some((ei, ej, _)) = enter else { break };
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::Numeric(format!("transport simplex exceeded {max_pivots} pivots")));
        }

        // tree path from row ei to column ej
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; nodes];
        let mut seen = vec![false; nodes];
        let mut queue = std::collections::VecDeque::from([ei]);
        seen[ei] = true;
        while let Some(node) = queue.pop_front() {
            if node == n + ej {
                break;
            }
            for &(other, e) in &adj[node] {
                if !seen[other] {
                    seen[other] = true;
                    parent[other] = Some((node, e));
                    queue.push_back(other);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = n + ej;
        while node != ei {
            let (prev, e) = parent[node].expect("tree is connected");
            path.push(e);
            node = prev;
        }
        // path runs column → row; its first edge loses mass, then signs alternate
        let mut leave = None;
        let mut theta = f64::INFINITY;
        for (k, &e) in path.iter().enumerate() {
            if k % 2 == 0 {
                let better = flow[e] < theta
                    || (bland && flow[e] == theta && leave.is_some_and(|l: usize| {
                        let (li, lj) = basis[l];
                        let (bi, bj) = basis[e];
                        bi * m + bj < li * m + lj
                    }));
                if better {
                    theta = flow[e];
                    leave = Some(e);
                }
            }
        }
        let leave = leave.expect("cycle has a decreasing edge");
        for (k, &e) in path.iter().enumerate() {
            if k % 2 == 0 {
                flow[e] = (flow[e] - theta).max(0.0);
            } else {
                flow[e] += theta;
            }
        }
        degenerate_run = if theta <= 0.0 { degenerate_run + 1 } else { 0 };
        let (li, lj) = basis[leave];
        in_basis[li * m + lj] = false;
        in_basis[ei * m + ej] = true;
        basis[leave] = (ei, ej);
        flow[leave] = theta;
    }
    let cost_value = basis.iter().zip(&flow).map(|(&(i, j), x)| cost[(i, j)] * x).sum();
    Ok(TransportPlan {
        cost: cost_value,
        flows: basis.iter().zip(&flow).map(|(&(i, j), &x)| (i, j, x)).collect(),
        row_potentials: u,
        col_potentials: v,
        pivots,
    })
}

/// Minimum over every basic feasible solution, by enumerating spanning trees
/// of the bipartite cell graph. Only for `rows · cols ≤ 20`.
pub fn brute_force_transport(supply: &[f64], demand: &[f64], cost: &DMatrix<f64>) -> Result<f64> {
    check_masses(supply, demand)?;
    let (n, m) = (supply.len(), demand.len());
    if n * m > 20 {
        return Err(Error::Config(format!("vertex enumeration limited to 20 cells, got {}", n * m)));
    }
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let k = n + m - 1;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1u32 << cells.len()) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let chosen: Vec<(usize, usize)> = (0..cells.len()).filter(|b| mask >> b & 1 == 1).map(|b| cells[b]).collect();
        if let Some(x) = tree_flows(supply, demand, &chosen) {
            if x.iter().all(|&f| f >= -1e-12) {
                let c: f64 = chosen.iter().zip(&x).map(|(&(i, j), f)| cost[(i, j)] * f).sum();
                best = best.min(c);
            }
        }
    }
    Ok(best)
}

/// Flows on a spanning tree of cells by leaf elimination; `None` if not a tree.
fn tree_flows(supply: &[f64], demand: &[f64], cells: &[(usize, usize)]) -> Option<Vec<f64>> {
    let n = supply.len();
    let nodes = n + demand.len();
    let mut rest: Vec<f64> = supply.iter().chain(demand).copied().collect();
    let mut deg = vec![0usize; nodes];
    for &(i, j) in cells {
        deg[i] += 1;
        deg[n + j] += 1;
    }
    let mut done = vec![false; cells.len()];
    let mut x = vec![0.0; cells.len()];
    for _ in 0..cells.len() {
        let (e, leaf) = cells.iter().enumerate().filter(|(e, _)| !done[*e]).find_map(|(e, &(i, j))| {
            if deg[i] == 1 {
                Some((e, i))
            } else if deg[n + j] == 1 {
                Some((e, n + j))
            } else {
                None
            }
        })?;
        let (i, j) = cells[e];
        let other = if leaf == i { n + j } else { i };
        x[e] = rest[leaf];
        rest[other] -= rest[leaf];
        rest[leaf] = 0.0;
        deg[i] -= 1;
        deg[n + j] -= 1;
        done[e] = true;
    }
    // a forest with a cycle leaves edges unpeeled; a disconnected one leaves isolated nodes
    if deg.iter().any(|&d| d != 0) {
        return None;
    }
    Some(x)
}

pub fn cost_matrix(mu1: &EmpiricalMeasure, mu2: &EmpiricalMeasure, d: &PseudoMetric) -> DMatrix<f64> {
    DMatrix::from_fn(mu1.len(), mu2.len(), |i, j| d.eval(&mu1.points[i], &mu2.points[j]))
}

fn check_pair(mu1: &EmpiricalMeasure, mu2: &EmpiricalMeasure, cap: usize) -> Result<()> {
    if mu1.dim() != mu2.dim() {
        return Err(Error::LengthMismatch {
            expected: mu1.dim(),
            got: mu2.dim(),
        });
    }
    for mu in [mu1, mu2] {
        if mu.len() > cap {
            return Err(Error::SupportCap { size: mu.len(), cap });
        }
    }
    Ok(())
}

/// Optimal coupling under `d`; supports above `cap` are rejected.
pub fn optimal_coupling(mu1: &EmpiricalMeasure, mu2: &EmpiricalMeasure, d: &PseudoMetric, cap: usize) -> Result<TransportPlan> {
    check_pair(mu1, mu2, cap)?;
    solve_transport(&mu1.weights, &mu2.weights, &cost_matrix(mu1, mu2, d))
}

pub fn coupling_distance(mu1: &EmpiricalMeasure, mu2: &EmpiricalMeasure, d: &PseudoMetric) -> Result<f64> {
    Ok(optimal_coupling(mu1, mu2, d, DEFAULT_SUPPORT_CAP)?.cost)
}

/// Lower bound on the coupling distance from `d`-Lipschitz test functions.
#[derive(Debug, Clone, Serialize)]
pub struct DualityCertificate {
    pub primal: f64,
    /// `max_φ ∫φ dμ₁ − ∫φ dμ₂` over the sampled family.
    pub best: f64,
    pub functions: usize,
    /// Every sampled function is 1-Lipschitz for `d` on the joint support.
    pub lipschitz: bool,
}

/// The family holds the c-transform of the optimal column potentials,
/// `φ(z) = min_j d(z, y_j) − v_j`, distance functions `d(·, z)` and random
/// minima of shifted cones.
pub fn duality_certificate(
    mu1: &EmpiricalMeasure,
    mu2: &EmpiricalMeasure,
    d: &PseudoMetric,
    plan: &TransportPlan,
    random_functions: usize,
    seed: u64,
) -> DualityCertificate {
    let pts: Vec<&Vec<f64>> = mu1.points.iter().chain(&mu2.points).collect();
    let n1 = mu1.len();
    let dmat = DMatrix::from_fn(pts.len(), pts.len(), |a, b| d.eval(pts[a], pts[b]));
    let mut family: Vec<Vec<f64>> = Vec::new();
    family.push(
        (0..pts.len())
            .map(|a| (0..mu2.len()).map(|j| dmat[(a, n1 + j)] - plan.col_potentials[j]).fold(f64::INFINITY, f64::min))
            .collect(),
    );
    for z in 0..pts.len() {
        family.push((0..pts.len()).map(|a| dmat[(a, z)]).collect());
        family.push((0..pts.len()).map(|a| -dmat[(a, z)]).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random_functions {
        let centres: Vec<(usize, f64)> = (0..3).map(|_| (rng.random_range(0..pts.len()), rng.random::<f64>())).collect();
        family.push(
            (0..pts.len())
                .map(|a| centres.iter().map(|&(z, h)| dmat[(a, z)] + h).fold(f64::INFINITY, f64::min))
                .collect(),
        );
    }
    let mut lipschitz = true;
    let mut best = f64::NEG_INFINITY;
    for phi in &family {
        for a in 0..pts.len() {
            for b in 0..pts.len() {
                lipschitz &= phi[a] - phi[b] <= dmat[(a, b)] + 1e-12;
            }
        }
        let val = (0..n1).map(|i| mu1.weights[i] * phi[i]).sum::<f64>()
            - (0..mu2.len()).map(|j| mu2.weights[j] * phi[n1 + j]).sum::<f64>();
        best = best.max(val);
    }
    DualityCertificate {
        primal: plan.cost,
        best,
        functions: family.len(),
        lipschitz,
    }
}

/// `½ Σ |w₁(x) − w₂(x)|` with atoms identified by exact equality.
pub fn discrete_tv(mu1: &EmpiricalMeasure, mu2: &EmpiricalMeasure) -> f64 {
    let key = |p: &Vec<f64>| p.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    let mut acc: HashMap<Vec<u64>, f64> = HashMap::new();
    for (p, w) in mu1.points.iter().zip(&mu1.weights) {
        *acc.entry(key(p)).or_default() += w;
    }
    for (p, w) in mu2.points.iter().zip(&mu2.weights) {
        *acc.entry(key(p)).or_default() -= w;
    }
    0.5 * acc.values().map(|v| v.abs()).sum::<f64>()
}

#[derive(Debug, Clone, Serialize)]
pub struct TvLimit {
    pub distances: Vec<f64>,
    pub tv: f64,
    /// The family is pointwise nondecreasing on every pair of support points.
    pub increasing_family: bool,
    /// The distances are nondecreasing within solver tolerance.
    pub nondecreasing: bool,
    /// `tv − last distance`.
    pub gap: f64,
}

/// Coupling distances along an increasing family, next to the discrete TV.
pub fn tv_limit_estimate(mu1: &EmpiricalMeasure, mu2: &EmpiricalMeasure, family: &[PseudoMetric]) -> Result<TvLimit> {
    let pts: Vec<&Vec<f64>> = mu1.points.iter().chain(&mu2.points).take(200).collect();
    let mut increasing_family = true;
    for w in family.windows(2) {
        for a in &pts {
            for b in &pts {
                increasing_family &= w[0].eval(a, b) <= w[1].eval(a, b) + 1e-15;
            }
        }
    }
    let distances = family
        .iter()
        .map(|d| coupling_distance(mu1, mu2, d))
        .collect::<Result<Vec<_>>>()?;
    let nondecreasing = distances.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    let tv = discrete_tv(&mu1.normalized(), &mu2.normalized()) * mu1.mass();
    Ok(TvLimit {
        gap: tv - distances.last().copied().unwrap_or(0.0),
        distances,
        tv,
        increasing_family,
        nondecreasing,
    })
}

/// Built-in systems for the asymptotic strong Feller probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ToySystem {
    /// `dx = −x dt + dW`, `dy = −y dt`.
    Sde1,
    /// `dx = (x − x³) dt + dW`, `dy = −y dt`.
    Sde2,
    /// `dû(k) = −(1+|k|²)û dt + e^{−|k|³} dβ_k`, `|k| ≤ 16`, complex.
    OuChain,
}

impl FromStr for ToySystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sde1" => Ok(ToySystem::Sde1),
            "sde2" => Ok(ToySystem::Sde2),
            "ou-chain" | "ouchain" | "ou_chain" => Ok(ToySystem::OuChain),
            other => Err(Error::Config(format!("unknown system id '{other}' (expected sde1, sde2, ou-chain)"))),
        }
    }
}

/// Largest wavenumber kept in the OU chain.
pub const OU_CUTOFF: i32 = 16;

/// `(rate, noise)` per real coordinate of the OU chain, ordered
/// `Re û(0), Im û(0), Re û(1), Im û(1), Re û(−1), …`.
pub fn ou_coefficients() -> (Vec<f64>, Vec<f64>) {
    let mut rates = Vec::new();
    let mut noise = Vec::new();
    let mut ks = vec![0i32];
    for k in 1..=OU_CUTOFF {
        ks.push(k);
        ks.push(-k);
    }
    for k in ks {
        let kk = k.abs() as f64;
        for _ in 0..2 {
            rates.push(1.0 + kk * kk);
            // complex Brownian motion splits its variance over two real parts
            noise.push((-kk.powi(3)).exp() / 2f64.sqrt());
        }
    }
    (rates, noise)
}

/// `δ̂(k) = 1/(1+|k|)` on real parts, unit length: not smooth enough for the
/// transition laws to be equivalent.
pub fn ou_rough_direction() -> Vec<f64> {
    let (rates, _) = ou_coefficients();
    let mut v: Vec<f64> = rates
        .iter()
        .enumerate()
        .map(|(i, r)| if i % 2 == 0 { 1.0 / (1.0 + (r - 1.0).sqrt()) } else { 0.0 })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl ToySystem {
    pub fn dim(&self) -> usize {
        match self {
            ToySystem::Sde1 | ToySystem::Sde2 => 2,
            ToySystem::OuChain => 2 * (2 * OU_CUTOFF as usize + 1),
        }
    }

    /// Advances state and tangent by `h`; exact for the linear systems,
    /// Euler-Maruyama with step `dt` otherwise.
    fn advance(&self, x: &mut [f64], tangent: &mut [Vec<f64>], h: f64, dt: f64, rng: &mut ChaCha8Rng, ou: &(Vec<f64>, Vec<f64>)) {
        match self {
            ToySystem::Sde1 => {
                let a = (-h).exp();
                let s = ((1.0 - a * a) / 2.0).sqrt();
                x[0] = x[0] * a + s * rng.sample::<f64, _>(StandardNormal);
                x[1] *= a;
                for t in tangent.iter_mut() {
                    t[0] *= a;
                    t[1] *= a;
                }
            }
            ToySystem::Sde2 => {
                let steps = (h / dt).round().max(1.0) as usize;
                let dt = h / steps as f64;
                for _ in 0..steps {
                    let lin = 1.0 - 3.0 * x[0] * x[0];
                    for t in tangent.iter_mut() {
                        t[0] += lin * t[0] * dt;
                    }
                    x[0] += (x[0] - x[0].powi(3)) * dt + dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
                let a = (-h).exp();
                x[1] *= a;
                for t in tangent.iter_mut() {
                    t[1] *= a;
                }
            }
            ToySystem::OuChain => {
                let (rates, noise) = ou;
                for i in 0..x.len() {
                    let a = (-rates[i] * h).exp();
                    let var = noise[i] * noise[i] * (1.0 - a * a) / (2.0 * rates[i]);
                    x[i] = x[i] * a + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
                    for t in tangent.iter_mut() {
                        t[i] *= a;
                    }
                }
            }
        }
    }

    /// Samples `(X_t, J_t ξ)` at the sorted `times` from one replica.
    fn path(&self, x0: &[f64], dirs: &[Vec<f64>], times: &[f64], dt: f64, seed: u64, replica: u64) -> Vec<(Vec<f64>, Vec<Vec<f64>>)> {
        let ou = if *self == ToySystem::OuChain {
            ou_coefficients()
        } else {
            (Vec::new(), Vec::new())
        };
        let mut rng = StreamKey::new(seed, replica).at_step(0);
        let mut x = x0.to_vec();
        let mut tangent = dirs.to_vec();
        let mut now = 0.0;
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            if t > now {
                self.advance(&mut x, &mut tangent, t - now, dt, &mut rng, &ou);
                now = t;
            }
            out.push((x.clone(), tangent.clone()));
        }
        out
    }
}

/// Test functions of the probe coordinates `z[0], z[1]`.
#[derive(Debug, Clone, Copy, Serialize)]
pub enum ToyFunction {
    Sine([f64; 2]),
    /// `tanh(z[1]/width)`, a mollified `sgn(y)`.
    SmoothSign(f64),
}

impl ToyFunction {
    pub fn sup_norm(&self) -> f64 {
        1.0
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            ToyFunction::Sine(a) => (a[0] * a[0] + a[1] * a[1]).sqrt(),
            ToyFunction::SmoothSign(w) => 1.0 / w,
        }
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        match self {
            ToyFunction::Sine(a) => (a[0] * z[0] + a[1] * z[1]).sin(),
            ToyFunction::SmoothSign(w) => (z[1] / w).tanh(),
        }
    }

    /// `∇φ(z) · v`.
    pub fn directional(&self, z: &[f64], v: &[f64]) -> f64 {
        match self {
            ToyFunction::Sine(a) => (a[0] * z[0] + a[1] * z[1]).cos() * (a[0] * v[0] + a[1] * v[1]),
            ToyFunction::SmoothSign(w) => {
                let c = (z[1] / w).cosh();
                v[1] / (w * c * c)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyConfig {
    pub times: Vec<f64>,
    /// Paired with `times` for the `γ`-scan: `d_n = d_{ε_n}` at `t_n`.
    pub eps: Vec<f64>,
    pub gammas: Vec<f64>,
    pub ensemble: usize,
    /// Atoms per side in the `γ`-scan transport problems.
    pub scan_samples: usize,
    /// Euler-Maruyama step for the nonlinear system.
    pub dt: f64,
    pub widths: Vec<f64>,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            times: vec![0.5, 1.0, 2.0, 3.0, 4.0],
            eps: vec![0.5, 0.25, 0.1, 0.05, 0.02],
            gammas: vec![1.0, 0.3, 0.1, 0.03],
            ensemble: 4000,
            scan_samples: 200,
            dt: 1e-3,
            widths: vec![1.0, 0.1, 0.01],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientRow {
    pub t: f64,
    pub phi: ToyFunction,
    pub xi: Vec<f64>,
    /// Monte-Carlo mean of `∇φ(X_t) · J_t ξ`.
    pub mean: f64,
    pub se: f64,
    pub sup_norm: f64,
    pub lipschitz: f64,
    /// `‖∇φ‖_∞ E|J_t ξ|`.
    pub tangent_bound: f64,
    /// `‖∇φ‖_∞ e^{−t}`, the contraction bound of the linear systems.
    pub exp_bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SignRow {
    pub width: f64,
    pub t: f64,
    /// `P_t φ(x₀)`.
    pub smoothed: f64,
    /// `φ(x₀)`.
    pub phi: f64,
    /// `|∂_y P_t φ(x₀)|`, to be compared with `‖φ‖_∞ = 1`.
    pub grad_y: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub n: usize,
    pub t: f64,
    pub eps: f64,
    /// `max_ξ ‖P_t(x₀,·) − P_t(x₀+γξ,·)‖_{d_ε}` on common-noise ensembles.
    pub distance: f64,
    /// Synchronous-coupling value `min(1, ‖J_t γξ‖/ε)` (linear systems).
    pub synchronous: Option<f64>,
    /// Total variation between the Gaussian transition laws (OU chain).
    pub gaussian_tv: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AsfTable {
    pub system: ToySystem,
    pub x0: Vec<f64>,
    pub gradients: Vec<GradientRow>,
    pub sign_probe: Vec<SignRow>,
    pub gamma_scan: Vec<GammaRow>,
    /// Nonnegative fit `|∇P_tφ·ξ| ≈ c₀‖φ‖_∞ + c₁e^{−t}‖∇φ‖_∞`.
    pub fit: (f64, f64),
    /// Smallest `C` with `|mean| ≤ C(‖φ‖_∞ + e^{−t}‖∇φ‖_∞)` on the table.
    pub constant: f64,
    /// Every row satisfies `|mean| ≤ ‖∇φ‖_∞e^{−t} + 2·se` (linear systems).
    pub exp_bound_holds: bool,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Gradient-bound table, smoothed-sign probe and `γ`-scan for a toy system.
pub fn asf_probe_toy(system: ToySystem, x0: &[f64], cfg: &ToyConfig) -> Result<AsfTable> {
    let dim = system.dim();
    if x0.len() != dim {
        return Err(Error::LengthMismatch { expected: dim, got: x0.len() });
    }
    if cfg.eps.len() != cfg.times.len() {
        return Err(Error::LengthMismatch {
            expected: cfg.times.len(),
            got: cfg.eps.len(),
        });
    }
    if cfg.ensemble < 2 || cfg.times.windows(2).any(|w| w[1] < w[0]) || cfg.times.iter().any(|t| *t < 0.0) {
        return Err(Error::Config("toy probe needs ensemble ≥ 2 and sorted nonnegative times".into()));
    }
    let unit = |i: usize| {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    };
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut dirs = vec![unit(0), unit(1)];
    let mut diag = vec![0.0; dim];
    diag[0] = s;
    diag[1] = s;
    dirs.push(diag);
    if system == ToySystem::OuChain {
        dirs.push(ou_rough_direction());
    }
    let mut phis = vec![
        ToyFunction::Sine([1.0, 0.0]),
        ToyFunction::Sine([0.0, 1.0]),
        ToyFunction::Sine([1.0, 1.0]),
        ToyFunction::Sine([2.0, -1.0]),
    ];
    phis.extend(cfg.widths.iter().map(|&w| ToyFunction::SmoothSign(w)));

    let paths: Vec<Vec<(Vec<f64>, Vec<Vec<f64>>)>> = (0..cfg.ensemble as u64)
        .into_par_iter()
        .map(|r| system.path(x0, &dirs, &cfg.times, cfg.dt, cfg.seed, r))
        .collect();

    let mut gradients = Vec::new();
    for (ti, &t) in cfg.times.iter().enumerate() {
        for phi in &phis {
            for (di, xi) in dirs.iter().enumerate() {
                let samples: Vec<f64> = paths.iter().map(|p| phi.directional(&p[ti].0, &p[ti].1[di])).collect();
                let (mean, se) = mean_se(&samples);
                let tangent_norm = paths.iter().map(|p| euclid(&p[ti].1[di], &vec![0.0; dim])).sum::<f64>() / paths.len() as f64;
                gradients.push(GradientRow {
                    t,
                    phi: *phi,
                    xi: xi.clone(),
                    mean,
                    se,
                    sup_norm: phi.sup_norm(),
                    lipschitz: phi.lipschitz(),
                    tangent_bound: phi.lipschitz() * tangent_norm,
                    exp_bound: phi.lipschitz() * (-t).exp(),
                });
            }
        }
    }
    let linear = matches!(system, ToySystem::Sde1 | ToySystem::OuChain);
    let exp_bound_holds = linear && gradients.iter().all(|r| r.mean.abs() <= r.exp_bound + 2.0 * r.se + 1e-15);
    let fit = fit_decomposition(&gradients);
    let constant = gradients
        .iter()
        .map(|r| r.mean.abs() / (r.sup_norm + r.exp_bound))
        .fold(0.0, f64::max);

    let mut sign_probe = Vec::new();
    for (ti, &t) in cfg.times.iter().enumerate() {
        for &w in &cfg.widths {
            let phi = ToyFunction::SmoothSign(w);
            let vals: Vec<f64> = paths.iter().map(|p| phi.value(&p[ti].0)).collect();
            let grads: Vec<f64> = paths.iter().map(|p| phi.directional(&p[ti].0, &p[ti].1[1])).collect();
            let (g, se) = mean_se(&grads);
            sign_probe.push(SignRow {
                width: w,
                t,
                smoothed: mean_se(&vals).0,
                phi: phi.value(x0),
                grad_y: g.abs(),
                se,
            });
        }
    }

    let gamma_scan = gamma_scan(system, x0, &dirs, cfg)?;
    Ok(AsfTable {
        system,
        x0: x0.to_vec(),
        gradients,
        sign_probe,
        gamma_scan,
        fit,
        constant,
        exp_bound_holds,
    })
}

fn fit_decomposition(rows: &[GradientRow]) -> (f64, f64) {
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in rows {
        let (x1, x2, y) = (r.sup_norm, r.exp_bound, r.mean.abs());
        a11 += x1 * x1;
        a12 += x1 * x2;
        a22 += x2 * x2;
        b1 += x1 * y;
        b2 += x2 * y;
    }
    let det = a11 * a22 - a12 * a12;
    if det.abs() > 1e-300 {
        let c0 = (b1 * a22 - b2 * a12) / det;
        let c1 = (a11 * b2 - a12 * b1) / det;
        if c0 >= 0.0 && c1 >= 0.0 {
            return (c0, c1);
        }
    }
    // best single-term fit
    let only0 = if a11 > 0.0 { (b1 / a11).max(0.0) } else { 0.0 };
    let only1 = if a22 > 0.0 { (b2 / a22).max(0.0) } else { 0.0 };
    let sse = |c0: f64, c1: f64| {
        rows.iter()
            .map(|r| (r.mean.abs() - c0 * r.sup_norm - c1 * r.exp_bound).powi(2))
            .sum::<f64>()
    };
    if sse(only0, 0.0) <= sse(0.0, only1) {
        (only0, 0.0)
    } else {
        (0.0, only1)
    }
}

/// `TV(N(a,Σ), N(b,Σ)) = 2Φ(D/2) − 1` for diagonal `Σ`; a mean shift along a
/// noiseless coordinate makes the laws singular.
pub fn gaussian_tv_diagonal(shift: &[f64], var: &[f64]) -> f64 {
    let mut d2 = 0.0;
    for (s, v) in shift.iter().zip(var) {
        if *s == 0.0 {
            continue;
        }
        if *v <= 0.0 {
            return 1.0;
        }
        d2 += s * s / v;
    }
    statrs::function::erf::erf(d2.sqrt() / (2.0 * 2f64.sqrt()))
}

fn gamma_scan(system: ToySystem, x0: &[f64], dirs: &[Vec<f64>], cfg: &ToyConfig) -> Result<Vec<GammaRow>> {
    let samples = cfg.scan_samples.min(cfg.ensemble);
    let ou = ou_coefficients();
    let jobs: Vec<(usize, usize)> = (0..cfg.gammas.len()).flat_map(|g| (0..cfg.times.len()).map(move |n| (g, n))).collect();
    jobs.par_iter()
        .map(|&(g, n)| {
            let gamma = cfg.gammas[g];
            let (t, eps) = (cfg.times[n], cfg.eps[n]);
            let d = PseudoMetric::scaled(eps)?;
            let at = |start: &[f64]| -> Result<EmpiricalMeasure> {
                let pts = (0..samples as u64)
                    .map(|r| system.path(start, &[], &[t], cfg.dt, cfg.seed ^ 0x5ca1, r).remove(0).0)
                    .collect();
                EmpiricalMeasure::uniform(pts)
            };
            let base = at(x0)?;
            let mut distance: f64 = 0.0;
            let mut sync: f64 = 0.0;
            let mut tv: f64 = 0.0;
            for xi in dirs {
                let y0: Vec<f64> = x0.iter().zip(xi).map(|(a, b)| a + gamma * b).collect();
                distance = distance.max(coupling_distance(&base, &at(&y0)?, &d)?);
                match system {
                    ToySystem::Sde1 => {
                        sync = sync.max((gamma * (-t).exp() / eps).min(1.0));
                    }
                    ToySystem::OuChain => {
                        let shift: Vec<f64> = xi.iter().zip(&ou.0).map(|(x, r)| gamma * x * (-r * t).exp()).collect();
                        let var: Vec<f64> = ou
                            .0
                            .iter()
                            .zip(&ou.1)
                            .map(|(r, q)| q * q * (1.0 - (-2.0 * r * t).exp()) / (2.0 * r))
                            .collect();
                        sync = sync.max((euclid(&shift, &vec![0.0; shift.len()]) / eps).min(1.0));
                        tv = tv.max(gaussian_tv_diagonal(&shift, &var));
                    }
                    ToySystem::Sde2 => {}
                }
            }
            Ok(GammaRow {
                gamma,
                n,
                t,
                eps,
                distance,
                synchronous: (system != ToySystem::Sde2).then_some(sync),
                gaussian_tv: (system == ToySystem::OuChain).then_some(tv),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct NseDistanceRow {
    pub t: f64,
    pub eps: f64,
    pub distance: f64,
    pub nsamples: usize,
}

/// Coupling distances between transition ensembles from two initial
/// conditions. Replica `r` uses the same noise for both, so equal initial
/// conditions give identical ensembles. Ensembles above `cap` are subsampled
/// with one shared index set.
pub fn nse_coupling_distance(
    model: &Model,
    w0a: &VorticityField,
    w0b: &VorticityField,
    times: &[f64],
    eps: &[f64],
    ensemble: usize,
    cap: usize,
) -> Result<Vec<NseDistanceRow>> {
    for w in [w0a, w0b] {
        if w.grid().dim() != model.grid().dim() || w.grid().trunc() != model.grid().trunc() {
            return Err(Error::GridMismatch {
                left: w.grid().trunc(),
                right: model.grid().trunc(),
            });
        }
    }
    if ensemble == 0 || cap == 0 {
        return Err(Error::Config("ensemble and cap must be positive".into()));
    }
    let steps: Vec<usize> = times.iter().map(|&t| model.steps_for(t)).collect();
    let last = steps.iter().copied().max().unwrap_or(0);
    let keep: Vec<usize> = if ensemble > cap {
        let mut rng = model.stream(0).aux(0xc0de);
        let mut idx = sample(&mut rng, ensemble, cap).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..ensemble).collect()
    };
    let sample_states = |w0: &VorticityField| -> Result<Vec<Vec<Vec<f64>>>> {
        keep.par_iter()
            .map(|&r| {
                let mut snaps = vec![Vec::new(); steps.len()];
                model.run(w0, last, r as u64, |i, w, _| {
                    for (k, &s) in steps.iter().enumerate() {
                        if s == i {
                            snaps[k] = w.to_real().as_slice().to_vec();
                        }
                    }
                })?;
                Ok(snaps)
            })
            .collect()
    };
    let a = sample_states(w0a)?;
    let b = sample_states(w0b)?;
    let jobs: Vec<(usize, usize)> = (0..times.len()).flat_map(|k| (0..eps.len()).map(move |e| (k, e))).collect();
    jobs.par_iter()
        .map(|&(k, e)| {
            let mu = EmpiricalMeasure::uniform(a.iter().map(|s| s[k].clone()).collect())?;
            let nu = EmpiricalMeasure::uniform(b.iter().map(|s| s[k].clone()).collect())?;
            let d = PseudoMetric::scaled(eps[e])?;
            Ok(NseDistanceRow {
                t: times[k],
                eps: eps[e],
                distance: optimal_coupling(&mu, &nu, &d, cap)?.cost,
                nsamples: keep.len(),
            })
        })
        .collect()
}
