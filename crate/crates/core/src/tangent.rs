//! Linearized flow, second variation, the noise-to-state operator `A` and the
//! Malliavin matrix `M = AA*`.
//!
//! Everything is the exact derivative (or adjoint) of the discrete step
//! `w_{i+1} = E(w_i + dt·B(Kw_i, w_i) + QΔW_i)`, `E = e^{νΔdt}`, written in
//! the orthonormal real basis. With `L_i = E(I + dt·B̃(w_i, ·))`:
//!
//! * `J_{a,b} = L_{b-1} ⋯ L_a`
//! * `K_{a,b}(ξ, ξ') = Σ_{i=a}^{b-1} J_{i+1,b} E dt B̃(J_{a,i}ξ', J_{a,i}ξ)`
//! * `A v = Σ_{i=a}^{b-1} J_{i+1,b} E Q v_i dt`, `(A*x)_i = QᵀE J_{i+1,b}ᵀ x`
//! * `∂w_b/∂ΔW_r^j = J_{r+1,b} E Q e_j`
//!
//! Interval endpoints are step indices into the trajectory.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::TrajectoryRecord;
use crate::spectral::{symmetrized_matrix, VorticityField};

/// Direction in state space, real coordinates.
pub type TangentVector = DVector<f64>;

/// Control path: one `R^m` value per step of the interval.
pub type ControlPath = Vec<DVector<f64>>;

/// Tangent dynamics of a stored trajectory over steps `[s, t]`.
#[derive(Debug, Clone)]
pub struct LinearizedFlow<'a> {
    rec: &'a TrajectoryRecord,
    s: usize,
    t: usize,
    /// `L_i` for `i ∈ [s, t)`.
    steps: Vec<DMatrix<f64>>,
    /// `B̃(w_i, ·)` for `i ∈ [s, t)`.
    bilinear: Vec<DMatrix<f64>>,
    decay: DVector<f64>,
    /// `E Q`.
    eq: DMatrix<f64>,
    dt: f64,
}

impl<'a> LinearizedFlow<'a> {
    pub fn new(rec: &'a TrajectoryRecord, s: usize, t: usize) -> Result<Self> {
        if s > t || t > rec.steps() {
            return Err(Error::Interval {
                s,
                t,
                steps: rec.steps(),
            });
        }
        let model = &rec.model;
        let grid = model.grid();
        let decay = model.decay_real();
        let dt = model.dt();
        let nonlinear = model.config().nonlinear;
        let mut steps = Vec::with_capacity(t - s);
        let mut bilinear = Vec::with_capacity(t - s);
        for i in s..t {
            let b = if nonlinear {
                symmetrized_matrix(&rec.states[i])
            } else {
                DMatrix::zeros(grid.dim(), grid.dim())
            };
            let mut l = &b * dt;
            for r in 0..grid.dim() {
                l[(r, r)] += 1.0;
            }
            for (r, d) in decay.iter().enumerate() {
                l.row_mut(r).scale_mut(*d);
            }
            steps.push(l);
            bilinear.push(b);
        }
        let decay = DVector::from_vec(decay);
        let mut eq = model.noise().q_matrix(grid);
        for (r, d) in decay.iter().enumerate() {
            eq.row_mut(r).scale_mut(*d);
        }
        Ok(Self {
            rec,
            s,
            t,
            steps,
            bilinear,
            decay,
            eq,
            dt,
        })
    }

    /// Flow over the time interval `[s, t]`; endpoints must sit on the step grid.
    pub fn over_times(rec: &'a TrajectoryRecord, s: f64, t: f64) -> Result<Self> {
        let dt = rec.dt();
        let idx = |x: f64| -> Result<usize> {
            let r = (x / dt).round();
            if r < 0.0 || (x / dt - r).abs() > 1e-9 * r.max(1.0) {
                return Err(Error::Interval {
                    s: (s / dt) as usize,
                    t: (t / dt) as usize,
                    steps: rec.steps(),
                });
            }
            Ok(r as usize)
        };
        Self::new(rec, idx(s)?, idx(t)?)
    }

    pub fn start(&self) -> usize {
        self.s
    }

    pub fn end(&self) -> usize {
        self.t
    }

    pub fn len(&self) -> usize {
        self.t - self.s
    }

    pub fn is_empty(&self) -> bool {
        self.t == self.s
    }

    pub fn dim(&self) -> usize {
        self.decay.len()
    }

    pub fn m(&self) -> usize {
        self.eq.ncols()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn record(&self) -> &TrajectoryRecord {
        self.rec
    }

    /// `E Q` (dim × m).
    pub fn eq(&self) -> &DMatrix<f64> {
        &self.eq
    }

    pub fn decay(&self) -> &DVector<f64> {
        &self.decay
    }

    /// `L_i` for absolute step `i`.
    pub fn step_matrix(&self, i: usize) -> &DMatrix<f64> {
        &self.steps[i - self.s]
    }

    fn check_sub(&self, a: usize, b: usize) -> Result<()> {
        if a < self.s || b > self.t || a > b {
            return Err(Error::Interval {
                s: a,
                t: b,
                steps: self.rec.steps(),
            });
        }
        Ok(())
    }

    fn check_len(&self, xi: &TangentVector) -> Result<()> {
        if xi.len() != self.dim() {
            return Err(Error::LengthMismatch {
                expected: self.dim(),
                got: xi.len(),
            });
        }
        Ok(())
    }

    /// `J_{a,b}ξ` for `s ≤ a ≤ b ≤ t`.
    pub fn jacobian_between(&self, a: usize, b: usize, xi: &TangentVector) -> Result<TangentVector> {
        self.check_sub(a, b)?;
        self.check_len(xi)?;
        let mut x = xi.clone();
        for i in a..b {
            x = self.step_matrix(i) * x;
        }
        Ok(x)
    }

    /// `J_{s,t}ξ`.
    pub fn jacobian_apply(&self, xi: &TangentVector) -> Result<TangentVector> {
        self.jacobian_between(self.s, self.t, xi)
    }

    /// `J_{a,b}ᵀη`.
    pub fn jacobian_adjoint_between(&self, a: usize, b: usize, eta: &TangentVector) -> Result<TangentVector> {
        self.check_sub(a, b)?;
        self.check_len(eta)?;
        let mut x = eta.clone();
        for i in (a..b).rev() {
            x = self.step_matrix(i).tr_mul(&x);
        }
        Ok(x)
    }

    pub fn jacobian_adjoint_apply(&self, eta: &TangentVector) -> Result<TangentVector> {
        self.jacobian_adjoint_between(self.s, self.t, eta)
    }

    /// Dense `J_{a,b}`.
    pub fn jacobian_matrix_between(&self, a: usize, b: usize) -> Result<DMatrix<f64>> {
        self.check_sub(a, b)?;
        let mut j = DMatrix::identity(self.dim(), self.dim());
        for i in a..b {
            j = self.step_matrix(i) * j;
        }
        Ok(j)
    }

    pub fn jacobian_matrix(&self) -> DMatrix<f64> {
        self.jacobian_matrix_between(self.s, self.t).unwrap()
    }

    /// `K_{a,b}(ξ, ξ')`.
    pub fn second_variation_between(
        &self,
        a: usize,
        b: usize,
        xi: &TangentVector,
        xi2: &TangentVector,
    ) -> Result<TangentVector> {
        self.check_sub(a, b)?;
        self.check_len(xi)?;
        self.check_len(xi2)?;
        let mut z1 = xi.clone();
        let mut z2 = xi2.clone();
        let mut acc = DVector::zeros(self.dim());
        for i in a..b {
            let kick = self.bilinear_form(&z2, &z1);
            acc = self.step_matrix(i) * acc + self.decay.component_mul(&kick) * self.dt;
            z1 = self.step_matrix(i) * z1;
            z2 = self.step_matrix(i) * z2;
        }
        Ok(acc)
    }

    pub fn second_variation(&self, xi: &TangentVector, xi2: &TangentVector) -> Result<TangentVector> {
        self.second_variation_between(self.s, self.t, xi, xi2)
    }

    /// `B̃(x, y)` in real coordinates.
    fn bilinear_form(&self, x: &TangentVector, y: &TangentVector) -> TangentVector {
        let grid = self.rec.grid();
        let fx = VorticityField::from_real(grid.clone(), x.as_slice()).unwrap();
        let fy = VorticityField::from_real(grid.clone(), y.as_slice()).unwrap();
        if self.rec.model.config().nonlinear {
            symmetrized_matrix(&fx) * fy.to_real()
        } else {
            DVector::zeros(self.dim())
        }
    }

    fn check_path(&self, v: &ControlPath) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                got: v.len(),
            });
        }
        for vi in v {
            if vi.len() != self.m() {
                return Err(Error::LengthMismatch {
                    expected: self.m(),
                    got: vi.len(),
                });
            }
        }
        Ok(())
    }

    /// `A v = Σ_i J_{i+1,t} E Q v_i dt`.
    pub fn a_apply(&self, v: &ControlPath) -> Result<TangentVector> {
        self.check_path(v)?;
        let mut acc = DVector::zeros(self.dim());
        for (k, vi) in v.iter().enumerate() {
            let i = self.s + k;
            acc = self.step_matrix(i) * acc + &self.eq * vi * self.dt;
        }
        Ok(acc)
    }

    /// `(A*x)_i = QᵀE J_{i+1,t}ᵀ x`.
    pub fn a_adjoint_apply(&self, x: &TangentVector) -> Result<ControlPath> {
        self.check_len(x)?;
        let mut out = vec![DVector::zeros(self.m()); self.len()];
        let mut y = x.clone();
        for i in (self.s..self.t).rev() {
            out[i - self.s] = self.eq.tr_mul(&y);
            y = self.step_matrix(i).tr_mul(&y);
        }
        Ok(out)
    }

    /// Dense `[J_{i+1,t} E Q]_{i=s..t-1}` (dim × m·len), column block `i - s`.
    pub fn a_matrix(&self) -> DMatrix<f64> {
        self.a_matrix_between(self.s, self.t).unwrap()
    }

    /// Dense `[J_{i+1,b} E Q]_{i=a..b-1}`, column block `i - a`.
    pub fn a_matrix_between(&self, a: usize, b: usize) -> Result<DMatrix<f64>> {
        self.check_sub(a, b)?;
        let m = self.m();
        let mut g = DMatrix::zeros(self.dim(), m * (b - a));
        for k in 0..b - a {
            // propagate existing blocks through L_i, then append E Q
            if k > 0 {
                let cols = g.columns(0, m * k).into_owned();
                g.columns_mut(0, m * k).copy_from(&(self.step_matrix(a + k) * cols));
            }
            g.columns_mut(m * k, m).copy_from(&self.eq);
        }
        Ok(g)
    }

    /// `M + β I` assembled as `G Gᵀ dt`.
    pub fn malliavin_matrix(&self, beta: f64) -> Result<MalliavinMatrix> {
        if !(beta >= 0.0) {
            return Err(Error::Config(format!("beta must be nonnegative, got {beta}")));
        }
        let g = self.a_matrix();
        let mut mat = &g * g.transpose() * self.dt;
        symmetrize(&mut mat);
        for r in 0..self.dim() {
            mat[(r, r)] += beta;
        }
        Ok(MalliavinMatrix {
            s: self.s as f64 * self.dt,
            t: self.t as f64 * self.dt,
            beta,
            mat,
        })
    }

    /// `M + β I` by the recursion `M ← L M Lᵀ + EQQᵀE dt`.
    pub fn malliavin_matrix_recursive(&self, beta: f64) -> Result<MalliavinMatrix> {
        if !(beta >= 0.0) {
            return Err(Error::Config(format!("beta must be nonnegative, got {beta}")));
        }
        let kick = &self.eq * self.eq.transpose() * self.dt;
        let mut mat = DMatrix::zeros(self.dim(), self.dim());
        for i in self.s..self.t {
            let l = self.step_matrix(i);
            mat = l * mat * l.transpose() + &kick;
        }
        symmetrize(&mut mat);
        for r in 0..self.dim() {
            mat[(r, r)] += beta;
        }
        Ok(MalliavinMatrix {
            s: self.s as f64 * self.dt,
            t: self.t as f64 * self.dt,
            beta,
            mat,
        })
    }

    /// `∂w_b/∂ΔW_r^j = J_{r+1,b} E Q e_j` for `r < b`, else zero.
    pub fn noise_response(&self, r: usize, j: usize, b: usize) -> Result<TangentVector> {
        if r >= b {
            return Ok(DVector::zeros(self.dim()));
        }
        let col = self.eq.column(j).into_owned();
        self.jacobian_between(r + 1, b, &col)
    }

    /// `∂(J_{a,b}ξ)/∂ΔW_r^j`, the Malliavin derivative of the Jacobian.
    ///
    /// `K_{r+1,b}(EQe_j, J_{a,r+1}ξ)` when `r ≥ a`, else `K_{a,b}(J_{r+1,a}EQe_j, ξ)`.
    /// The second case needs `r + 1 ≥ s`.
    pub fn malliavin_deriv_jacobian(
        &self,
        r: usize,
        j: usize,
        a: usize,
        b: usize,
        xi: &TangentVector,
    ) -> Result<TangentVector> {
        self.check_sub(a, b)?;
        if j >= self.m() {
            return Err(Error::Config(format!("noise channel {j} out of range (m = {})", self.m())));
        }
        if r + 1 >= b {
            return Ok(DVector::zeros(self.dim()));
        }
        let col = self.eq.column(j).into_owned();
        if r >= a {
            let z = self.jacobian_between(a, r + 1, xi)?;
            self.second_variation_between(r + 1, b, &col, &z)
        } else {
            if r + 1 < self.s {
                return Err(Error::Interval {
                    s: r + 1,
                    t: b,
                    steps: self.rec.steps(),
                });
            }
            let g = self.jacobian_between(r + 1, a, &col)?;
            self.second_variation_between(a, b, &g, xi)
        }
    }

    /// Dense `∂J_{a,b}/∂ΔW_r^j`.
    pub fn malliavin_deriv_jacobian_matrix(&self, r: usize, j: usize, a: usize, b: usize) -> Result<DMatrix<f64>> {
        self.check_sub(a, b)?;
        let dim = self.dim();
        let mut out = DMatrix::zeros(dim, dim);
        if r + 1 >= b {
            return Ok(out);
        }
        // Σ_{i ≥ max(a, r+1)} J_{i+1,b} E dt B̃(g_i, ·) J_{a,i}, g_i = ∂w_i/∂ΔW_r^j
        let start = a.max(r + 1);
        let mut g = self.noise_response(r, j, start)?;
        let mut ja = self.jacobian_matrix_between(a, start)?;
        for i in start..b {
            let grid = self.rec.grid();
            let gf = VorticityField::from_real(grid.clone(), g.as_slice()).unwrap();
            let bm = if self.rec.model.config().nonlinear {
                symmetrized_matrix(&gf)
            } else {
                DMatrix::zeros(dim, dim)
            };
            let mut term = bm * &ja * self.dt;
            for (row, d) in self.decay.iter().enumerate() {
                term.row_mut(row).scale_mut(*d);
            }
            out = self.step_matrix(i) * out + term;
            ja = self.step_matrix(i) * ja;
            g = self.step_matrix(i) * g;
        }
        Ok(out)
    }

    /// `B̃(w_i, ·)` for absolute step `i`.
    pub fn bilinear_matrix(&self, i: usize) -> &DMatrix<f64> {
        &self.bilinear[i - self.s]
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `β I + M` on the real basis.
#[derive(Debug, Clone)]
pub struct MalliavinMatrix {
    pub s: f64,
    pub t: f64,
    pub beta: f64,
    pub mat: DMatrix<f64>,
}

impl MalliavinMatrix {
    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn quadratic_form(&self, xi: &TangentVector) -> f64 {
        xi.dot(&(&self.mat * xi))
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let eig = SymmetricEigen::new(self.mat.clone());
        let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    /// Same matrix with a different shift.
    pub fn with_beta(&self, beta: f64) -> MalliavinMatrix {
        let mut mat = self.mat.clone();
        for r in 0..self.dim() {
            mat[(r, r)] += beta - self.beta;
        }
        MalliavinMatrix {
            s: self.s,
            t: self.t,
            beta,
            mat,
        }
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.mat.clone())
            .ok_or_else(|| Error::Numeric(format!("Cholesky failed (beta = {:e})", self.beta)))
    }

    /// CSV: header `dim,s,t,beta`, one value row, then the matrix rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "dim,s,t,beta")?;
        writeln!(out, "{},{},{},{:e}", self.dim(), self.s, self.t, self.beta)?;
        for i in 0..self.dim() {
            let row: Vec<String> = (0..self.dim()).map(|j| format!("{:.17e}", self.mat[(i, j)])).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<MalliavinMatrix> {
        let mut lines = text.lines();
        let bad = |m: &str| Error::Format(m.to_string());
        if lines.next() != Some("dim,s,t,beta") {
            return Err(bad("missing matrix header"));
        }
        let head: Vec<&str> = lines.next().ok_or_else(|| bad("missing header values"))?.split(',').collect();
        if head.len() != 4 {
            return Err(bad("malformed header values"));
        }
        let p = |x: &str| x.trim().parse::<f64>().map_err(|e| Error::Format(e.to_string()));
        let dim: usize = head[0].trim().parse().map_err(|_| bad("bad dim"))?;
        let (s, t, beta) = (p(head[1])?, p(head[2])?, p(head[3])?);
        let mut mat = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            let row = lines.next().ok_or_else(|| bad("truncated matrix"))?;
            let vals: Vec<&str> = row.split(',').collect();
            if vals.len() != dim {
                return Err(bad("row length mismatch"));
            }
            for (j, v) in vals.iter().enumerate() {
                mat[(i, j)] = p(v)?;
            }
        }
        Ok(MalliavinMatrix { s, t, beta, mat })
    }
}

/// Empirical tail `P(⟨Mφ,φ⟩ < ε‖φ‖₁²)` over probe pairs.
#[derive(Debug, Clone, Serialize)]
pub struct LowModeTail {
    pub epsilons: Vec<f64>,
    pub frequency: Vec<f64>,
    /// Probes that satisfied `‖π_ℓφ‖ ≥ α‖φ‖₁`.
    pub valid: usize,
}

/// Tail curve over `mats × probes`; probes violating the low-mode constraint are dropped.
pub fn lowmode_probe(
    mats: &[MalliavinMatrix],
    probes: &[TangentVector],
    h1_weights: &[f64],
    low_mask: &[bool],
    alpha: f64,
    epsilons: &[f64],
) -> LowModeTail {
    let h1 = |p: &TangentVector| p.iter().zip(h1_weights).map(|(x, w)| x * x * w).sum::<f64>();
    let low = |p: &TangentVector| {
        p.iter()
            .zip(low_mask)
            .filter(|(_, &m)| m)
            .map(|(x, _)| x * x)
            .sum::<f64>()
            .sqrt()
    };
    let valid: Vec<&TangentVector> = probes.iter().filter(|p| low(p) >= alpha * h1(p).sqrt()).collect();
    let mut counts = vec![0usize; epsilons.len()];
    let mut total = 0usize;
    for m in mats {
        for p in &valid {
            let ratio = m.quadratic_form(p) / h1(p);
            for (c, e) in counts.iter_mut().zip(epsilons) {
                if ratio < *e {
                    *c += 1;
                }
            }
            total += 1;
        }
    }
    LowModeTail {
        epsilons: epsilons.to_vec(),
        frequency: counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect(),
        valid: valid.len(),
    }
}

/// Random probes concentrated on the low modes, `E|φ_k|² ∝ |k|^{-2·decay}`.
pub fn random_probes<R: Rng + ?Sized>(rng: &mut R, wavenumbers_sq: &[f64], decay: f64, count: usize) -> Vec<TangentVector> {
    (0..count)
        .map(|_| {
            DVector::from_iterator(
                wavenumbers_sq.len(),
                wavenumbers_sq
                    .iter()
                    .map(|k2| rng.sample::<f64, _>(StandardNormal) * k2.powf(-decay / 2.0)),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerIteration {
    pub norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest singular value of `x ↦ apply(x)` via power iteration on `adjoint ∘ apply`.
pub fn operator_norm<F, G>(dim: usize, apply: F, adjoint: G, max_iter: usize, tol: f64, seed: u64) -> PowerIteration
where
    F: Fn(&TangentVector) -> TangentVector,
    G: Fn(&TangentVector) -> TangentVector,
{
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut x = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
    x /= x.norm();
    let mut prev = 0.0;
    for it in 1..=max_iter {
        let y = apply(&x);
        let sigma = y.norm();
        if sigma == 0.0 {
            return PowerIteration {
                norm: 0.0,
                iterations: it,
                converged: true,
            };
        }
        let z = adjoint(&y);
        let zn = z.norm();
        x = z / zn;
        if (sigma - prev).abs() <= tol * sigma {
            return PowerIteration {
                norm: sigma,
                iterations: it,
                converged: true,
            };
        }
        prev = sigma;
    }
    PowerIteration {
        norm: prev,
        iterations: max_iter,
        converged: false,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectedNorms {
    pub cut: usize,
    /// `‖(1 − π_ℓ) J_{s,t}‖`.
    pub high_after: PowerIteration,
    /// `‖J_{s,t} (1 − π_ℓ)‖`.
    pub high_before: PowerIteration,
}

/// High-mode parts of the Jacobian, `π_ℓ` keeping `max(|k1|,|k2|) ≤ cut`.
pub fn projected_jacobian_norm(flow: &LinearizedFlow<'_>, cut: usize, max_iter: usize, tol: f64) -> ProjectedNorms {
    let mask = flow.record().grid().low_mask(cut);
    let high = |x: &TangentVector| {
        let mut y = x.clone();
        for (v, &low) in y.iter_mut().zip(&mask) {
            if low {
                *v = 0.0;
            }
        }
        y
    };
    let dim = flow.dim();
    let after = operator_norm(
        dim,
        |x| high(&flow.jacobian_apply(x).unwrap()),
        |y| flow.jacobian_adjoint_apply(&high(y)).unwrap(),
        max_iter,
        tol,
        1,
    );
    let before = operator_norm(
        dim,
        |x| flow.jacobian_apply(&high(x)).unwrap(),
        |y| high(&flow.jacobian_adjoint_apply(y).unwrap()),
        max_iter,
        tol,
        2,
    );
    ProjectedNorms {
        cut,
        high_after: after,
        high_before: before,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{examples, Mode};
    use crate::integrator::{IntegratorConfig, Model, NoiseModel};
    use crate::spectral::SpectralGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(n: usize, nonlinear: bool, steps: usize) -> TrajectoryRecord {
        let grid = SpectralGrid::new(n).unwrap();
        let mut cfg = IntegratorConfig::new(0.3, 0.02, 5);
        cfg.nonlinear = nonlinear;
        let noise = NoiseModel::uniform(&examples::full_space(), 1.0).unwrap();
        let model = Model::new(grid.clone(), cfg, noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w0 = VorticityField::random(grid, &mut rng, 1.0).scale(3.0);
        model.simulate_replica(&w0, steps, 0).unwrap()
    }

    fn rvec(rng: &mut ChaCha8Rng, n: usize) -> TangentVector {
        DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
    }

    fn path(rng: &mut ChaCha8Rng, len: usize, m: usize) -> ControlPath {
        (0..len).map(|_| rvec(rng, m)).collect()
    }

    fn rel(a: &TangentVector, b: &TangentVector) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn linear_case_jacobian_is_diagonal_heat() {
        let rec = record(3, false, 20);
        let flow = LinearizedFlow::new(&rec, 0, 20).unwrap();
        let j = flow.jacobian_matrix();
        let k2 = rec.grid().real_wavenumbers_sq();
        for r in 0..flow.dim() {
            for c in 0..flow.dim() {
                let expect = if r == c { (-0.3 * k2[r] * 0.4).exp() } else { 0.0 };
                assert!((j[(r, c)] - expect).abs() < 1e-14);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rvec(&mut rng, flow.dim());
        assert!(rel(&flow.jacobian_adjoint_apply(&x).unwrap(), &flow.jacobian_apply(&x).unwrap()) < 1e-14);
        assert_eq!(flow.second_variation(&x, &x).unwrap().norm(), 0.0);
        assert_eq!(flow.malliavin_deriv_jacobian(3, 0, 0, 20, &x).unwrap().norm(), 0.0);
    }

    #[test]
    fn cocycle_and_adjoint_pairings() {
        let rec = record(4, true, 30);
        let flow = LinearizedFlow::new(&rec, 0, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for r in [0, 7, 15, 30] {
            let x = rvec(&mut rng, flow.dim());
            let direct = flow.jacobian_apply(&x).unwrap();
            let split = flow
                .jacobian_between(r, 30, &flow.jacobian_between(0, r, &x).unwrap())
                .unwrap();
            assert!(rel(&split, &direct) < 1e-13);
        }
        for _ in 0..20 {
            let x = rvec(&mut rng, flow.dim());
            let y = rvec(&mut rng, flow.dim());
            let a = flow.jacobian_apply(&x).unwrap().dot(&y);
            let b = x.dot(&flow.jacobian_adjoint_apply(&y).unwrap());
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
            let v = path(&mut rng, flow.len(), flow.m());
            let av = flow.a_apply(&v).unwrap().dot(&y);
            let asy: f64 = flow
                .a_adjoint_apply(&y)
                .unwrap()
                .iter()
                .zip(&v)
                .map(|(p, q)| p.dot(q) * flow.dt())
                .sum();
            assert!((av - asy).abs() < 1e-10 * av.abs().max(1.0));
        }
        let zero = DVector::zeros(flow.dim());
        assert_eq!(flow.jacobian_adjoint_apply(&zero).unwrap().norm(), 0.0);
        assert!(flow.a_adjoint_apply(&zero).unwrap().iter().all(|v| v.norm() == 0.0));
        assert!(LinearizedFlow::new(&rec, 5, 31).is_err());
        assert!(LinearizedFlow::over_times(&rec, 0.0, 0.013).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences_first_order() {
        let rec = record(4, true, 25);
        let flow = LinearizedFlow::new(&rec, 0, 25).unwrap();
        let model = &rec.model;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xi = rvec(&mut rng, flow.dim());
        let jx = flow.jacobian_apply(&xi).unwrap();
        let w0 = rec.states[0].to_real();
        let run = |x: &TangentVector| {
            let f = VorticityField::from_real(rec.grid().clone(), x.as_slice()).unwrap();
            model
                .simulate_with_increments(&f, rec.increments.clone())
                .unwrap()
                .states
                .last()
                .unwrap()
                .to_real()
        };
        let base = run(&w0);
        let mut errs = Vec::new();
        for eps in [1e-3, 1e-4, 1e-5] {
            let fd = (run(&(&w0 + &xi * eps)) - &base) / eps;
            errs.push((fd - &jx).norm());
        }
        let slope = (errs[0] / errs[2]).log10() / 2.0;
        assert!((0.9..1.1).contains(&slope), "slope {slope}, errs {errs:?}");
    }

    #[test]
    fn second_variation_matches_second_differences() {
        let rec = record(4, true, 25);
        let flow = LinearizedFlow::new(&rec, 0, 25).unwrap();
        let model = &rec.model;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x1 = rvec(&mut rng, flow.dim());
        let x2 = rvec(&mut rng, flow.dim());
        let k = flow.second_variation(&x1, &x2).unwrap();
        let k_sym = flow.second_variation(&x2, &x1).unwrap();
        assert!(rel(&k_sym, &k) < 1e-13);
        let w0 = rec.states[0].to_real();
        let run = |x: &TangentVector| {
            let f = VorticityField::from_real(rec.grid().clone(), x.as_slice()).unwrap();
            model
                .simulate_with_increments(&f, rec.increments.clone())
                .unwrap()
                .states
                .last()
                .unwrap()
                .to_real()
        };
        let mut errs = Vec::new();
        for eps in [1e-2, 1e-3] {
            let d = run(&(&w0 + &x1 * eps + &x2 * eps)) - run(&(&w0 + &x1 * eps)) - run(&(&w0 + &x2 * eps)) + run(&w0);
            errs.push((d / (eps * eps) - &k).norm());
        }
        let slope = (errs[0] / errs[1]).log10();
        assert!((0.8..1.2).contains(&slope), "slope {slope}, errs {errs:?}");
    }

    #[test]
    fn a_operator_examples() {
        let rec = record(3, false, 40);
        let flow = LinearizedFlow::new(&rec, 0, 40).unwrap();
        let mut v = vec![DVector::zeros(flow.m()); flow.len()];
        v[39][1] = 2.0;
        let expect = flow.eq().column(1) * 2.0 * flow.dt();
        assert!(rel(&flow.a_apply(&v).unwrap(), &expect.into_owned()) < 1e-15);
        // constant control against the continuous closed form
        let c = DVector::from_element(flow.m(), 1.0);
        let av = flow.a_apply(&vec![c; flow.len()]).unwrap();
        let grid = rec.grid();
        for e in rec.model.noise().entries() {
            let r = grid.real_index(&e.mode).unwrap();
            let lam = 0.3 * e.mode.norm_sq() as f64;
            let exact = e.q * (1.0 - (-lam * 0.8).exp()) / lam;
            assert!((av[r] - exact).abs() < 2.0 * lam * flow.dt() * exact);
        }
        assert!(flow.a_apply(&vec![DVector::zeros(2); 40]).is_err());
        // linearity
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = path(&mut rng, 40, flow.m());
        let q = path(&mut rng, 40, flow.m());
        let comb: ControlPath = p.iter().zip(&q).map(|(a, b)| a * 0.3 - b * 1.7).collect();
        let lhs = flow.a_apply(&comb).unwrap();
        let rhs = flow.a_apply(&p).unwrap() * 0.3 - flow.a_apply(&q).unwrap() * 1.7;
        assert!(rel(&lhs, &rhs) < 1e-14);
        // diagonal adjoint
        let x = rvec(&mut rng, flow.dim());
        let ad = flow.a_adjoint_apply(&x).unwrap();
        for (n, e) in rec.model.noise().entries().iter().enumerate() {
            let r = grid.real_index(&e.mode).unwrap();
            let lam = 0.3 * e.mode.norm_sq() as f64 * flow.dt();
            for i in 0..40 {
                let expect = e.q * (-lam * (40 - i) as f64).exp() * x[r];
                assert!((ad[i][n] - expect).abs() < 1e-13 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn malliavin_matrix_routes_agree_and_are_psd() {
        let rec = record(4, true, 25);
        let flow = LinearizedFlow::new(&rec, 5, 25).unwrap();
        let m1 = flow.malliavin_matrix(0.0).unwrap();
        let m2 = flow.malliavin_matrix_recursive(0.0).unwrap();
        let diff = (&m1.mat - &m2.mat).norm() / m1.mat.norm();
        assert!(diff < 1e-12, "{diff}");
        let eig = m1.eigenvalues();
        let max = *eig.last().unwrap();
        assert!(eig[0] >= -1e-10 * max);
        let beta = 0.25;
        let shifted = m1.with_beta(beta).eigenvalues();
        for (a, b) in eig.iter().zip(&shifted) {
            assert!((a + beta - b).abs() < 1e-12 * max.max(1.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mb = flow.malliavin_matrix(beta).unwrap();
        for _ in 0..10 {
            let x = rvec(&mut rng, flow.dim());
            let astar: f64 = flow.a_adjoint_apply(&x).unwrap().iter().map(|v| v.norm_squared() * flow.dt()).sum();
            let expect = astar + beta * x.norm_squared();
            assert!((mb.quadratic_form(&x) - expect).abs() < 1e-10 * expect);
        }
    }

    #[test]
    fn malliavin_matrix_linear_and_unforced_cases() {
        let rec = record(3, false, 50);
        let flow = LinearizedFlow::new(&rec, 0, 50).unwrap();
        let beta = 1e-3;
        let m = flow.malliavin_matrix(beta).unwrap();
        let grid = rec.grid();
        let forced: Vec<usize> = rec.model.noise().real_indices(grid);
        let dt = flow.dt();
        for r in 0..flow.dim() {
            if let Some(n) = forced.iter().position(|&f| f == r) {
                let e = rec.model.noise().entries()[n];
                let lam = 0.3 * e.mode.norm_sq() as f64;
                // scheme-exact geometric sum and its continuous limit
                let a2 = (-2.0 * lam * dt).exp();
                let discrete = e.q * e.q * dt * a2 * (1.0 - a2.powi(50)) / (1.0 - a2);
                assert!((m.mat[(r, r)] - beta - discrete).abs() < 1e-13);
                let cont = e.q * e.q * (1.0 - (-2.0 * lam).exp()) / (2.0 * lam);
                assert!((discrete - cont).abs() < 2.0 * lam * dt * cont);
            } else {
                assert!((m.mat[(r, r)] - beta).abs() < 1e-15);
            }
        }
        let grid2 = SpectralGrid::new(2).unwrap();
        let model = Model::new(grid2.clone(), IntegratorConfig::new(0.3, 0.02, 0), NoiseModel::none()).unwrap();
        let rec2 = model.simulate_replica(&VorticityField::basis(grid2, &Mode::new(1, 1), 1.0).unwrap(), 10, 0).unwrap();
        let m0 = LinearizedFlow::new(&rec2, 0, 10).unwrap().malliavin_matrix(0.5).unwrap();
        assert!((&m0.mat - DMatrix::identity(m0.dim(), m0.dim()) * 0.5).norm() == 0.0);
    }

    #[test]
    fn malliavin_derivative_of_jacobian_matches_noise_differencing() {
        let rec = record(3, true, 20);
        let flow = LinearizedFlow::new(&rec, 0, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xi = rvec(&mut rng, flow.dim());
        let rerun = |r: usize, j: usize, eps: f64, a: usize, b: usize| {
            let mut incs = rec.increments.clone();
            incs[r][j] += eps;
            let pert = rec.model.simulate_with_increments(&rec.states[0], incs).unwrap();
            LinearizedFlow::new(&pert, 0, 20).unwrap().jacobian_between(a, b, &xi).unwrap()
        };
        for (r, j, a, b) in [(3usize, 1usize, 2usize, 18usize), (10, 0, 4, 20), (1, 2, 5, 15), (17, 3, 0, 20)] {
            let d = flow.malliavin_deriv_jacobian(r, j, a, b, &xi).unwrap();
            let dm = flow.malliavin_deriv_jacobian_matrix(r, j, a, b).unwrap() * &xi;
            assert!(rel(&dm, &d) < 1e-12 || d.norm() < 1e-14);
            let mut errs = Vec::new();
            for eps in [1e-3, 1e-4] {
                let fd = (rerun(r, j, eps, a, b) - rerun(r, j, -eps, a, b)) / (2.0 * eps);
                errs.push((fd - &d).norm());
            }
            assert!(errs[1] < 1e-6 * d.norm().max(1e-3), "errs {errs:?}");
        }
        let last = flow.malliavin_deriv_jacobian(19, 0, 0, 20, &xi).unwrap();
        assert_eq!(last.norm(), 0.0);
    }

    #[test]
    fn projected_norms() {
        let rec = record(4, false, 25);
        let flow = LinearizedFlow::new(&rec, 0, 25).unwrap();
        for cut in [1usize, 2, 3] {
            let p = projected_jacobian_norm(&flow, cut, 2000, 1e-12);
            let expect = (-0.3 * ((cut + 1) * (cut + 1)) as f64 * 0.5).exp();
            assert!(p.high_after.converged);
            assert!((p.high_after.norm - expect).abs() < 1e-6 * expect, "{} vs {expect}", p.high_after.norm);
            assert!((p.high_before.norm - expect).abs() < 1e-6 * expect);
        }
        let p = projected_jacobian_norm(&flow, 4, 100, 1e-12);
        assert_eq!(p.high_after.norm, 0.0);
    }

    #[test]
    fn lowmode_tail_examples() {
        let rec = record(3, false, 25);
        let flow = LinearizedFlow::new(&rec, 0, 25).unwrap();
        let m = flow.malliavin_matrix(0.0).unwrap();
        let grid = rec.grid();
        let k2 = grid.real_wavenumbers_sq();
        let mask = grid.low_mask(1);
        let r = grid.real_index(&Mode::new(1, 0)).unwrap();
        let mut phi = DVector::zeros(flow.dim());
        phi[r] = 1.0;
        let diag = m.mat[(r, r)];
        let tail = lowmode_probe(&[m.clone()], &[phi.clone()], &k2, &mask, 0.5, &[0.5 * diag, 2.0 * diag]);
        assert_eq!(tail.valid, 1);
        assert_eq!(tail.frequency, vec![0.0, 1.0]);
        let none = lowmode_probe(&[m], &[phi], &k2, &mask, 2.0, &[1.0]);
        assert_eq!(none.valid, 0);
    }

    #[test]
    fn matrix_csv_roundtrip() {
        let rec = record(2, true, 10);
        let m = LinearizedFlow::new(&rec, 0, 10).unwrap().malliavin_matrix(1e-6).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = MalliavinMatrix::read_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.mat, m.mat);
        assert_eq!(back.beta, 1e-6);
    }
}
