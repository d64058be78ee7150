//! Truncated vorticity fields in Fourier space.
//!
//! A field is stored by its complex coefficients `w_k` on the upper
//! half-plane modes; `w_{-k} = conj(w_k)` is implicit. Coefficients are
//! taken against the orthonormal exponentials `(2π)⁻¹ exp(ik·x)` on the
//! torus `[-π, π]²`, so `‖w‖² = Σ_k |w_k|²` over the full lattice.
//!
//! The real coordinate system used for all linear algebra is the
//! orthonormal basis `f_k = sin(k·x)/(√2 π)` for `k ∈ Z²₊` and
//! `f_k = cos(k·x)/(√2 π)` for `k ∈ Z²₋`. Half-plane mode `i` owns the real
//! coordinates `2i` (sine) and `2i + 1` (cosine). In these coordinates the
//! `L²` pairing is the Euclidean dot product.
//!
//! The drift is `B(Kw, w) = -(u·∇)w` with `u = Kw`, which in Fourier space
//! reads `-(1/4π) Σ_{j+ℓ=k} ⟨j⊥, ℓ⟩ (1/|j|² - 1/|ℓ|²) w_j w_ℓ`.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Mode;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Which modes a grid retains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Truncation {
    /// `0 < max(|k1|, |k2|) ≤ N`.
    #[default]
    Square,
    /// `0 < |k| ≤ N`.
    Disc,
}

struct FftPlan {
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftPlan").field("size", &self.size).finish()
    }
}

/// Mode bookkeeping for a truncation level `N`.
#[derive(Debug)]
pub struct SpectralGrid {
    trunc: usize,
    truncation: Truncation,
    modes: Vec<Mode>,
    index: HashMap<Mode, usize>,
    /// `(2N+1)²` lookup: slot → (half index, conjugated?)
    lookup: Vec<Option<(usize, bool)>>,
    fft_size: usize,
    plan: OnceLock<FftPlan>,
}

/// Smallest `2^a 3^b 5^c ≥ n`.
pub fn smooth_length(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

impl SpectralGrid {
    pub fn new(trunc: usize) -> Result<Arc<Self>> {
        Self::build(trunc, Truncation::Square, None)
    }

    pub fn with_truncation(trunc: usize, truncation: Truncation) -> Result<Arc<Self>> {
        Self::build(trunc, truncation, None)
    }

    /// Grid with an explicit padded transform length; must be at least `3N + 1`.
    pub fn with_fft_size(trunc: usize, size: usize) -> Result<Arc<Self>> {
        Self::build(trunc, Truncation::Square, Some(size))
    }

    fn build(trunc: usize, truncation: Truncation, fft_size: Option<usize>) -> Result<Arc<Self>> {
        if trunc == 0 {
            return Err(Error::Config("truncation N must be positive".into()));
        }
        let min_size = 3 * trunc + 1;
        let fft_size = match fft_size {
            Some(s) if s < min_size => {
                return Err(Error::Config(format!(
                    "transform size {s} too small for dealiasing at N = {trunc} (need ≥ {min_size})"
                )))
            }
            Some(s) => s,
            None => smooth_length(min_size),
        };
        let n = trunc as i64;
        let mut modes = Vec::new();
        for k1 in -n..=n {
            for k2 in -n..=n {
                let m = Mode::new(k1, k2);
                if !m.in_upper_half() {
                    continue;
                }
                let keep = match truncation {
                    Truncation::Square => true,
                    Truncation::Disc => m.norm_sq() <= n * n,
                };
                if keep {
                    modes.push(m);
                }
            }
        }
        modes.sort_by_key(|m| (m.norm_sq(), m.k2, m.k1));
        let index: HashMap<Mode, usize> = modes.iter().enumerate().map(|(i, m)| (*m, i)).collect();
        let side = 2 * trunc + 1;
        let mut lookup = vec![None; side * side];
        for (i, m) in modes.iter().enumerate() {
            let slot = |k: &Mode| ((k.k1 + n) as usize) * side + (k.k2 + n) as usize;
            lookup[slot(m)] = Some((i, false));
            lookup[slot(&m.neg())] = Some((i, true));
        }
        Ok(Arc::new(Self {
            trunc,
            truncation,
            modes,
            index,
            lookup,
            fft_size,
            plan: OnceLock::new(),
        }))
    }

    pub fn trunc(&self) -> usize {
        self.trunc
    }

    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    /// Half-plane modes in index order (sorted by `|k|²`).
    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn half_len(&self) -> usize {
        self.modes.len()
    }

    /// Number of real degrees of freedom.
    pub fn dim(&self) -> usize {
        2 * self.modes.len()
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn half_index(&self, k: &Mode) -> Option<usize> {
        self.index.get(k).copied()
    }

    pub fn contains(&self, k: &Mode) -> bool {
        self.slot(k).is_some()
    }

    fn slot(&self, k: &Mode) -> Option<(usize, bool)> {
        let n = self.trunc as i64;
        if k.k1.abs() > n || k.k2.abs() > n {
            return None;
        }
        let side = 2 * self.trunc + 1;
        self.lookup[((k.k1 + n) as usize) * side + (k.k2 + n) as usize]
    }

    /// Real coordinate carrying `f_k`.
    pub fn real_index(&self, k: &Mode) -> Option<usize> {
        let (i, conj) = self.slot(k)?;
        Some(if conj { 2 * i + 1 } else { 2 * i })
    }

    /// Mode whose basis function `f_k` sits at real coordinate `r`.
    pub fn real_mode(&self, r: usize) -> Mode {
        let m = self.modes[r / 2];
        if r % 2 == 0 {
            m
        } else {
            m.neg()
        }
    }

    /// `|k|²` for each real coordinate.
    pub fn real_wavenumbers_sq(&self) -> Vec<f64> {
        (0..self.dim()).map(|r| self.modes[r / 2].norm_sq() as f64).collect()
    }

    /// Real coordinates with `max(|k1|,|k2|) ≤ cut`.
    pub fn low_mask(&self, cut: usize) -> Vec<bool> {
        (0..self.dim())
            .map(|r| self.modes[r / 2].max_norm() <= cut as i64)
            .collect()
    }

    fn plan(&self) -> &FftPlan {
        self.plan.get_or_init(|| {
            let mut planner = FftPlanner::new();
            FftPlan {
                size: self.fft_size,
                forward: planner.plan_fft_forward(self.fft_size),
                inverse: planner.plan_fft_inverse(self.fft_size),
            }
        })
    }
}

/// Coupling coefficient `c(j, ℓ) = -(1/4π)⟨j⊥, ℓ⟩(1/|j|² - 1/|ℓ|²)`, symmetric in `(j, ℓ)`.
#[inline]
pub fn coupling(j: &Mode, l: &Mode) -> f64 {
    let cross = j.perp().dot(l) as f64;
    if cross == 0.0 {
        return 0.0;
    }
    -cross * (1.0 / j.norm_sq() as f64 - 1.0 / l.norm_sq() as f64) / (4.0 * PI)
}

/// Vorticity field on a truncated grid.
#[derive(Debug, Clone)]
pub struct VorticityField {
    grid: Arc<SpectralGrid>,
    coeffs: Vec<Complex64>,
}

/// Velocity field `u = (u1, u2)` in Fourier space, half-plane storage.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub grid: Arc<SpectralGrid>,
    pub u1: Vec<Complex64>,
    pub u2: Vec<Complex64>,
}

impl VelocityField {
    /// Full-lattice coefficient pair at `k`.
    pub fn at(&self, k: &Mode) -> (Complex64, Complex64) {
        match self.grid.slot(k) {
            None => (Complex64::default(), Complex64::default()),
            Some((i, false)) => (self.u1[i], self.u2[i]),
            Some((i, true)) => (self.u1[i].conj(), self.u2[i].conj()),
        }
    }

    /// Max over modes of `|k·u_k|`.
    pub fn max_divergence(&self) -> f64 {
        self.grid
            .modes()
            .iter()
            .enumerate()
            .map(|(i, k)| (self.u1[i] * k.k1 as f64 + self.u2[i] * k.k2 as f64).norm())
            .fold(0.0, f64::max)
    }

    /// Curl `∂2 u1 - ∂1 u2` as a vorticity field.
    pub fn curl(&self) -> VorticityField {
        let coeffs = self
            .grid
            .modes()
            .iter()
            .enumerate()
            .map(|(i, k)| I * (k.k2 as f64) * self.u1[i] - I * (k.k1 as f64) * self.u2[i])
            .collect();
        VorticityField::from_coeffs(self.grid.clone(), coeffs).unwrap()
    }

    /// `Σ_k |k|^{2α} |u_k|²` summed over the full lattice, square-rooted.
    pub fn sobolev_norm(&self, alpha: f64) -> f64 {
        let s: f64 = self
            .grid
            .modes()
            .iter()
            .enumerate()
            .map(|(i, k)| {
                (k.norm_sq() as f64).powf(alpha) * (self.u1[i].norm_sqr() + self.u2[i].norm_sqr())
            })
            .sum();
        (2.0 * s).sqrt()
    }
}

impl VorticityField {
    pub fn zeros(grid: Arc<SpectralGrid>) -> Self {
        let n = grid.half_len();
        Self {
            grid,
            coeffs: vec![Complex64::default(); n],
        }
    }

    pub fn from_coeffs(grid: Arc<SpectralGrid>, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != grid.half_len() {
            return Err(Error::LengthMismatch {
                expected: grid.half_len(),
                got: coeffs.len(),
            });
        }
        Ok(Self { grid, coeffs })
    }

    /// Field from real coordinates in the orthonormal `f_k` basis.
    pub fn from_real(grid: Arc<SpectralGrid>, x: &[f64]) -> Result<Self> {
        if x.len() != grid.dim() {
            return Err(Error::LengthMismatch {
                expected: grid.dim(),
                got: x.len(),
            });
        }
        let coeffs = x
            .chunks_exact(2)
            .map(|p| Complex64::new(p[1], -p[0]) * FRAC_1_SQRT_2)
            .collect();
        Ok(Self { grid, coeffs })
    }

    pub fn to_real(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.grid.dim());
        for (i, c) in self.coeffs.iter().enumerate() {
            x[2 * i] = -SQRT_2 * c.im;
            x[2 * i + 1] = SQRT_2 * c.re;
        }
        x
    }

    /// Gaussian random field with `E|w_k|² ∝ |k|^{-2·decay}`.
    pub fn random<R: Rng + ?Sized>(grid: Arc<SpectralGrid>, rng: &mut R, decay: f64) -> Self {
        let coeffs = grid
            .modes()
            .iter()
            .map(|k| {
                let s = (k.norm_sq() as f64).powf(-decay / 2.0) * FRAC_1_SQRT_2;
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re, im) * s
            })
            .collect();
        Self { grid, coeffs }
    }

    /// Single real basis function `f_k` with amplitude `amp`.
    pub fn basis(grid: Arc<SpectralGrid>, k: &Mode, amp: f64) -> Result<Self> {
        let r = grid.real_index(k).ok_or(Error::ModeOutsideTruncation {
            mode: *k,
            trunc: grid.trunc(),
        })?;
        let mut x = vec![0.0; grid.dim()];
        x[r] = amp;
        Self::from_real(grid, &x)
    }

    pub fn grid(&self) -> &Arc<SpectralGrid> {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Full-lattice coefficient `w_k` (zero outside the truncation).
    pub fn at(&self, k: &Mode) -> Complex64 {
        match self.grid.slot(k) {
            None => Complex64::default(),
            Some((i, false)) => self.coeffs[i],
            Some((i, true)) => self.coeffs[i].conj(),
        }
    }

    fn check_grid(&self, other: &Self) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid)
            || (self.grid.trunc == other.grid.trunc && self.grid.truncation == other.grid.truncation)
        {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                left: self.grid.trunc,
                right: other.grid.trunc,
            })
        }
    }

    /// Real `L²` inner product.
    pub fn inner(&self, other: &Self) -> f64 {
        2.0 * self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a.conj() * b).re)
            .sum::<f64>()
    }

    pub fn norm(&self) -> f64 {
        self.sobolev_norm(0.0)
    }

    /// `‖w‖_α = (Σ_k |k|^{2α} |w_k|²)^{1/2}` over both half-planes.
    pub fn sobolev_norm(&self, alpha: f64) -> f64 {
        let s: f64 = self
            .grid
            .modes()
            .iter()
            .zip(&self.coeffs)
            .map(|(k, c)| (k.norm_sq() as f64).powf(alpha) * c.norm_sqr())
            .sum();
        (2.0 * s).sqrt()
    }

    /// Kinetic energy `‖Kw‖² = ‖w‖²_{-1}`.
    pub fn energy(&self) -> f64 {
        self.sobolev_norm(-1.0).powi(2)
    }

    /// Enstrophy `‖w‖²`.
    pub fn enstrophy(&self) -> f64 {
        self.norm().powi(2)
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            coeffs: self.coeffs.iter().map(|c| c * a).collect(),
        }
    }

    /// `self + a·other`.
    pub fn axpy(&self, a: f64, other: &Self) -> Self {
        Self {
            grid: self.grid.clone(),
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(x, y)| x + y * a).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Multiplies mode `k` by `factor(|k|²)`.
    pub fn map_diag<F: Fn(f64) -> f64>(&self, factor: F) -> Self {
        Self {
            grid: self.grid.clone(),
            coeffs: self
                .grid
                .modes()
                .iter()
                .zip(&self.coeffs)
                .map(|(k, c)| c * factor(k.norm_sq() as f64))
                .collect(),
        }
    }

    /// `(Kw)_k = -i w_k k⊥/|k|²`.
    pub fn biot_savart(&self) -> VelocityField {
        let mut u1 = Vec::with_capacity(self.coeffs.len());
        let mut u2 = Vec::with_capacity(self.coeffs.len());
        for (k, c) in self.grid.modes().iter().zip(&self.coeffs) {
            let p = k.perp();
            let s = -I * c / k.norm_sq() as f64;
            u1.push(s * p.k1 as f64);
            u2.push(s * p.k2 as f64);
        }
        VelocityField {
            grid: self.grid.clone(),
            u1,
            u2,
        }
    }

    /// Value at a physical point `x ∈ T²`.
    pub fn eval(&self, x: [f64; 2]) -> Complex64 {
        let mut s = Complex64::default();
        for (k, c) in self.grid.modes().iter().zip(&self.coeffs) {
            let e = Complex64::from_polar(1.0, k.k1 as f64 * x[0] + k.k2 as f64 * x[1]);
            s += c * e + (c * e).conj();
        }
        s / (2.0 * PI)
    }

    /// Values on the uniform `m × m` grid `x = 2π(i, j)/m`, via the inverse FFT of size `m`.
    pub fn to_physical(&self, m: usize) -> Vec<Complex64> {
        let n = self.grid.trunc as i64;
        assert!(m as i64 > 2 * n, "physical grid too coarse");
        let mut buf = vec![Complex64::default(); m * m];
        let wrap = |k: i64| k.rem_euclid(m as i64) as usize;
        for k1 in -n..=n {
            for k2 in -n..=n {
                let k = Mode::new(k1, k2);
                let c = self.at(&k);
                if c != Complex64::default() {
                    buf[wrap(k1) * m + wrap(k2)] = c / (2.0 * PI);
                }
            }
        }
        let mut planner = FftPlanner::new();
        let inv = planner.plan_fft_inverse(m);
        fft2(&mut buf, m, inv.as_ref());
        buf
    }

    /// `B(Kw, w)` by exact double sum over retained `j + ℓ = k`.
    pub fn nonlinearity_direct(&self) -> VorticityField {
        self.bilinear_direct(self, 1.0)
    }

    /// `B̃(w, v) = B(Kw, v) + B(Kv, w)` by exact double sum.
    pub fn symmetrized_direct(&self, v: &Self) -> Result<VorticityField> {
        self.check_grid(v)?;
        Ok(self.bilinear_direct(v, 2.0))
    }

    /// `factor · Σ_{j+ℓ=k} c(j,ℓ) w_j v_ℓ` for every half-plane `k`.
    fn bilinear_direct(&self, v: &Self, factor: f64) -> VorticityField {
        let grid = &self.grid;
        let n = grid.trunc as i64;
        let mut full_w = Vec::new();
        let mut full_v = Vec::new();
        for k1 in -n..=n {
            for k2 in -n..=n {
                let k = Mode::new(k1, k2);
                if grid.contains(&k) {
                    full_w.push((k, self.at(&k)));
                    full_v.push((k, v.at(&k)));
                }
            }
        }
        let mut out = vec![Complex64::default(); grid.half_len()];
        for (idx, k) in grid.modes().iter().enumerate() {
            let mut s = Complex64::default();
            for (j, wj) in &full_w {
                let l = Mode::new(k.k1 - j.k1, k.k2 - j.k2);
                if l.is_origin() || !grid.contains(&l) {
                    continue;
                }
                let c = coupling(j, &l);
                if c != 0.0 {
                    s += wj * v.at(&l) * c;
                }
            }
            out[idx] = s * factor;
        }
        let _ = full_v;
        VorticityField::from_coeffs(grid.clone(), out).unwrap()
    }

    /// `B(u, v) = -(u·∇)v` for a general velocity `u`, by direct sum.
    pub fn advected_by(&self, u: &VelocityField) -> VorticityField {
        let grid = &self.grid;
        let n = grid.trunc as i64;
        let mut out = vec![Complex64::default(); grid.half_len()];
        for (idx, k) in grid.modes().iter().enumerate() {
            let mut s = Complex64::default();
            for j1 in -n..=n {
                for j2 in -n..=n {
                    let j = Mode::new(j1, j2);
                    if !grid.contains(&j) {
                        continue;
                    }
                    let l = Mode::new(k.k1 - j1, k.k2 - j2);
                    if l.is_origin() || !grid.contains(&l) {
                        continue;
                    }
                    let (a, b) = u.at(&j);
                    // u_j · (iℓ) v_ℓ
                    s += (a * l.k1 as f64 + b * l.k2 as f64) * I * self.at(&l);
                }
            }
            out[idx] = -s / (2.0 * PI);
        }
        VorticityField::from_coeffs(grid.clone(), out).unwrap()
    }

    /// `B(Kw, w)` through the dealiased padded transform.
    pub fn nonlinearity_fft(&self) -> VorticityField {
        let plan = self.grid.plan();
        let m = plan.size;
        let (u1, u2) = self.velocity_physical(plan);
        let (d1, d2) = self.gradient_physical(plan);
        let prod: Vec<Complex64> = (0..m * m).map(|p| u1[p] * d1[p] + u2[p] * d2[p]).collect();
        self.project_product(prod, plan, -1.0)
    }

    /// `B̃(w, v)` through the dealiased padded transform.
    pub fn symmetrized_fft(&self, v: &Self) -> Result<VorticityField> {
        self.check_grid(v)?;
        let plan = self.grid.plan();
        let m = plan.size;
        let (wu1, wu2) = self.velocity_physical(plan);
        let (wd1, wd2) = self.gradient_physical(plan);
        let (vu1, vu2) = v.velocity_physical(plan);
        let (vd1, vd2) = v.gradient_physical(plan);
        let prod: Vec<Complex64> = (0..m * m)
            .map(|p| wu1[p] * vd1[p] + wu2[p] * vd2[p] + vu1[p] * wd1[p] + vu2[p] * wd2[p])
            .collect();
        Ok(self.project_product(prod, plan, -1.0))
    }

    /// Default fast path for `B̃(w, v)`.
    pub fn symmetrized_nonlinearity(&self, v: &Self) -> Result<VorticityField> {
        self.symmetrized_fft(v)
    }

    fn spread<F: Fn(&Mode, Complex64) -> Complex64>(&self, plan: &FftPlan, f: F) -> Vec<Complex64> {
        let m = plan.size;
        let mut buf = vec![Complex64::default(); m * m];
        let wrap = |k: i64| k.rem_euclid(m as i64) as usize;
        for (k, c) in self.grid.modes().iter().zip(&self.coeffs) {
            let a = f(k, *c);
            let nk = k.neg();
            let b = f(&nk, c.conj());
            buf[wrap(k.k1) * m + wrap(k.k2)] = a;
            buf[wrap(nk.k1) * m + wrap(nk.k2)] = b;
        }
        fft2(&mut buf, m, plan.inverse.as_ref());
        buf
    }

    fn velocity_physical(&self, plan: &FftPlan) -> (Vec<Complex64>, Vec<Complex64>) {
        let u1 = self.spread(plan, |k, c| -I * c * k.perp().k1 as f64 / k.norm_sq() as f64);
        let u2 = self.spread(plan, |k, c| -I * c * k.perp().k2 as f64 / k.norm_sq() as f64);
        (u1, u2)
    }

    fn gradient_physical(&self, plan: &FftPlan) -> (Vec<Complex64>, Vec<Complex64>) {
        let d1 = self.spread(plan, |k, c| I * c * k.k1 as f64);
        let d2 = self.spread(plan, |k, c| I * c * k.k2 as f64);
        (d1, d2)
    }

    /// Forward transform of a product of two spread fields and Galerkin projection.
    fn project_product(&self, mut prod: Vec<Complex64>, plan: &FftPlan, sign: f64) -> VorticityField {
        let m = plan.size;
        fft2(&mut prod, m, plan.forward.as_ref());
        let scale = sign / ((m * m) as f64 * 2.0 * PI);
        let wrap = |k: i64| k.rem_euclid(m as i64) as usize;
        let coeffs = self
            .grid
            .modes()
            .iter()
            .map(|k| prod[wrap(k.k1) * m + wrap(k.k2)] * scale)
            .collect();
        VorticityField::from_coeffs(self.grid.clone(), coeffs).unwrap()
    }
}

fn transpose(buf: &mut [Complex64], m: usize) {
    for i in 0..m {
        for j in i + 1..m {
            buf.swap(i * m + j, j * m + i);
        }
    }
}

fn fft2(buf: &mut [Complex64], m: usize, fft: &dyn Fft<f64>) {
    fft.process(buf);
    transpose(buf, m);
    fft.process(buf);
    transpose(buf, m);
}

/// Dense real-basis matrix of `ξ ↦ B̃(w, ξ)`.
///
/// Each column is a sparse convolution of `w` with one basis function, so the
/// whole matrix costs `O(dim²)`.
pub fn symmetrized_matrix(w: &VorticityField) -> DMatrix<f64> {
    let grid = w.grid();
    let dim = grid.dim();
    let mut mat = DMatrix::zeros(dim, dim);
    let mut out = vec![Complex64::default(); grid.half_len()];
    for r in 0..dim {
        let m = grid.modes()[r / 2];
        // complex coefficients of f at +m and -m
        let xi_m = if r % 2 == 0 {
            Complex64::new(0.0, -FRAC_1_SQRT_2)
        } else {
            Complex64::new(FRAC_1_SQRT_2, 0.0)
        };
        let xi_neg = xi_m.conj();
        for o in out.iter_mut() {
            *o = Complex64::default();
        }
        for (idx, k) in grid.modes().iter().enumerate() {
            let mut s = Complex64::default();
            for (l, xl) in [(m, xi_m), (m.neg(), xi_neg)] {
                let j = Mode::new(k.k1 - l.k1, k.k2 - l.k2);
                if j.is_origin() || !grid.contains(&j) {
                    continue;
                }
                let c = coupling(&j, &l);
                if c != 0.0 {
                    s += w.at(&j) * xl * (2.0 * c);
                }
            }
            out[idx] = s;
        }
        for (idx, c) in out.iter().enumerate() {
            mat[(2 * idx, r)] = -SQRT_2 * c.im;
            mat[(2 * idx + 1, r)] = SQRT_2 * c.re;
        }
    }
    mat
}

/// JSON field format: `{"N": n, "coeffs": [[k1, k2, re, im], ...]}` over the half-plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldJson {
    #[serde(rename = "N")]
    pub n: usize,
    pub coeffs: Vec<(i64, i64, f64, f64)>,
}

impl VorticityField {
    pub fn to_json(&self) -> FieldJson {
        FieldJson {
            n: self.grid.trunc,
            coeffs: self
                .grid
                .modes()
                .iter()
                .zip(&self.coeffs)
                .map(|(k, c)| (k.k1, k.k2, c.re, c.im))
                .collect(),
        }
    }

    /// Reads a JSON field onto `grid`; listed modes must be half-plane modes of the grid.
    pub fn from_json(grid: Arc<SpectralGrid>, json: &FieldJson) -> Result<Self> {
        if json.n != grid.trunc {
            return Err(Error::GridMismatch {
                left: grid.trunc,
                right: json.n,
            });
        }
        let mut w = Self::zeros(grid.clone());
        for &(k1, k2, re, im) in &json.coeffs {
            let k = Mode::new(k1, k2);
            let i = grid.half_index(&k).ok_or_else(|| {
                Error::Format(format!("mode {k} is not a retained upper half-plane mode"))
            })?;
            w.coeffs[i] = Complex64::new(re, im);
        }
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn rel(a: &VorticityField, b: &VorticityField) -> f64 {
        a.axpy(-1.0, b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn grid_counts() {
        let g = SpectralGrid::new(8).unwrap();
        assert_eq!(g.dim(), 17 * 17 - 1);
        assert_eq!(g.fft_size(), 25);
        assert_eq!(g.modes()[0], Mode::new(1, 0));
        assert_eq!(g.modes()[1], Mode::new(0, 1));
        for r in 0..g.dim() {
            assert_eq!(g.real_index(&g.real_mode(r)), Some(r));
        }
        assert!(SpectralGrid::with_fft_size(8, 24).is_err());
        assert!(SpectralGrid::with_fft_size(8, 25).is_ok());
        let d = SpectralGrid::with_truncation(4, Truncation::Disc).unwrap();
        assert!(d.modes().iter().all(|k| k.norm_sq() <= 16));
        assert_eq!(smooth_length(19), 20);
        assert_eq!(smooth_length(13), 15);
    }

    #[test]
    fn real_coordinates_roundtrip_and_isometry() {
        let g = SpectralGrid::new(4).unwrap();
        let mut r = rng();
        let w = VorticityField::random(g.clone(), &mut r, 0.5);
        let v = VorticityField::random(g.clone(), &mut r, 0.5);
        let x = w.to_real();
        let back = VorticityField::from_real(g.clone(), x.as_slice()).unwrap();
        assert!(rel(&back, &w) < 1e-15);
        assert!((w.inner(&v) - x.dot(&v.to_real())).abs() < 1e-12);
    }

    #[test]
    fn basis_functions_match_sine_and_cosine() {
        let g = SpectralGrid::new(3).unwrap();
        let k = Mode::new(2, 1);
        let s = VorticityField::basis(g.clone(), &k, 1.0).unwrap();
        let c = VorticityField::basis(g.clone(), &k.neg(), 1.0).unwrap();
        let x = [0.3, -1.1];
        let phase: f64 = 2.0 * 0.3 + 1.0 * -1.1;
        let norm = SQRT_2 * PI;
        assert!((s.eval(x).re - phase.sin() / norm).abs() < 1e-14);
        assert!((c.eval(x).re - phase.cos() / norm).abs() < 1e-14);
        assert!((s.norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn biot_savart_single_mode() {
        let g = SpectralGrid::new(2).unwrap();
        let mut w = VorticityField::zeros(g.clone());
        w.coeffs_mut()[g.half_index(&Mode::new(1, 0)).unwrap()] = Complex64::new(1.0, 0.0);
        let u = w.biot_savart();
        let (a, b) = u.at(&Mode::new(1, 0));
        assert!((a - Complex64::new(0.0, 0.0)).norm() < 1e-15);
        assert!((b - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        let zero = VorticityField::zeros(g).biot_savart();
        assert_eq!(zero.sobolev_norm(0.0), 0.0);
    }

    #[test]
    fn biot_savart_identities() {
        let g = SpectralGrid::new(6).unwrap();
        let mut r = rng();
        for _ in 0..5 {
            let w = VorticityField::random(g.clone(), &mut r, 0.3);
            let u = w.biot_savart();
            assert!(u.max_divergence() < 1e-14);
            assert!(rel(&u.curl(), &w) < 1e-14);
            for alpha in [-1.0, 0.0, 0.5, 1.0, 2.0] {
                let a = u.sobolev_norm(alpha);
                let b = w.sobolev_norm(alpha - 1.0);
                assert!((a - b).abs() <= 1e-12 * b);
            }
        }
    }

    #[test]
    fn sobolev_examples() {
        let g = SpectralGrid::new(3).unwrap();
        let mut w = VorticityField::zeros(g.clone());
        w.coeffs_mut()[g.half_index(&Mode::new(2, 1)).unwrap()] = Complex64::new(0.6, 0.8);
        for alpha in [0.0, 0.5, 1.0, 2.0, -1.0] {
            let expect = 2.0 * 5f64.powf(alpha);
            assert!((w.sobolev_norm(alpha).powi(2) - expect).abs() < 1e-12 * expect);
        }
        assert_eq!(VorticityField::zeros(g).sobolev_norm(1.0), 0.0);
    }

    #[test]
    fn interpolation_inequality() {
        let g = SpectralGrid::new(6).unwrap();
        let mut r = rng();
        let (a, b, c) = (0.0, 1.0, 2.0);
        for _ in 0..50 {
            let w = VorticityField::random(g.clone(), &mut r, 0.2);
            let (na, nb, nc) = (w.sobolev_norm(a).powi(2), w.sobolev_norm(b).powi(2), w.sobolev_norm(c).powi(2));
            for eps in [0.1f64, 1.0, 10.0] {
                // sharp Young exponent
                let rhs = eps * na + eps.powf(-(c - b) / (b - a)) * nc;
                assert!(nb <= rhs * (1.0 + 1e-12));
                // doubled exponent only dominates for eps <= 1
                if eps <= 1.0 {
                    let rhs2 = eps * na + eps.powf(-2.0 * (c - b) / (b - a)) * nc;
                    assert!(nb <= rhs2 * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn doubled_exponent_fails_above_one() {
        let g = SpectralGrid::new(6).unwrap();
        let w = VorticityField::basis(g, &Mode::new(5, 5), 1.0).unwrap();
        let eps: f64 = 10.0;
        let lhs = w.sobolev_norm(1.0).powi(2);
        let rhs = eps * w.sobolev_norm(0.0).powi(2) + eps.powi(-2) * w.sobolev_norm(2.0).powi(2);
        assert!(lhs > rhs);
    }

    #[test]
    fn single_shell_cancels() {
        let g = SpectralGrid::new(4).unwrap();
        let mut w = VorticityField::zeros(g.clone());
        w.coeffs_mut()[g.half_index(&Mode::new(2, 1)).unwrap()] = Complex64::new(0.3, -1.2);
        assert!(w.nonlinearity_direct().norm() < 1e-15);
        assert!(w.nonlinearity_fft().norm() < 1e-12);
        let z = VorticityField::zeros(g);
        assert_eq!(z.nonlinearity_fft().norm(), 0.0);
    }

    /// Hand expansion for unit real amplitudes on f_(1,0)... replaced by complex
    /// amplitudes w_(1,0) = w_(1,1) = 1: only the triads (1,0)+(1,1) and
    /// (1,0)+(-1,-1) (plus conjugates) interact.
    #[test]
    fn two_mode_interaction_against_hand_sum() {
        let g = SpectralGrid::new(3).unwrap();
        let mut w = VorticityField::zeros(g.clone());
        let a = Mode::new(1, 0);
        let b = Mode::new(1, 1);
        w.coeffs_mut()[g.half_index(&a).unwrap()] = Complex64::new(1.0, 0.0);
        w.coeffs_mut()[g.half_index(&b).unwrap()] = Complex64::new(1.0, 0.0);
        let out = w.nonlinearity_direct();
        // k = (2,1) = a + b, both orderings: 2·c(a,b)
        // c(a,b) = -(1/4π)⟨a⊥,b⟩(1/|a|² - 1/|b|²) = -(1/4π)(-1)(1 - 1/2) = 1/(8π)
        let c_ab = 1.0 / (8.0 * PI);
        let expect_21 = 2.0 * c_ab;
        // k = (0,1) = b - a: pairs (b, -a) and (-a, b); c(b,-a) = -(1/4π)⟨b⊥,-a⟩(1/2 - 1)
        // b⊥ = (1,-1), ⟨b⊥,-a⟩ = -1  ⇒  c = -(1/4π)(-1)(-1/2) = -1/(8π)
        let expect_01 = 2.0 * (-1.0 / (8.0 * PI));
        for k in g.modes() {
            let v = out.at(k);
            let expect = if *k == Mode::new(2, 1) {
                expect_21
            } else if *k == Mode::new(0, 1) {
                expect_01
            } else {
                0.0
            };
            assert!((v - Complex64::new(expect, 0.0)).norm() < 1e-15, "mode {k}: {v}");
        }
        assert!(rel(&w.nonlinearity_fft(), &out) < 1e-13);
    }

    #[test]
    fn fft_matches_direct_on_random_fields() {
        let g = SpectralGrid::new(8).unwrap();
        let mut r = rng();
        for _ in 0..10 {
            let w = VorticityField::random(g.clone(), &mut r, 0.5);
            assert!(rel(&w.nonlinearity_fft(), &w.nonlinearity_direct()) < 1e-11);
        }
    }

    #[test]
    fn symmetrized_identities() {
        let g = SpectralGrid::new(5).unwrap();
        let mut r = rng();
        let w = VorticityField::random(g.clone(), &mut r, 0.5);
        let v1 = VorticityField::random(g.clone(), &mut r, 0.5);
        let v2 = VorticityField::random(g.clone(), &mut r, 0.5);
        let bww = w.symmetrized_fft(&w).unwrap();
        assert!(rel(&bww, &w.nonlinearity_fft().scale(2.0)) < 1e-12);
        // symmetry: exact in the direct route
        let a = w.symmetrized_direct(&v1).unwrap();
        let b = v1.symmetrized_direct(&w).unwrap();
        assert!(rel(&a, &b) < 1e-15);
        let (x, y) = (0.7, -1.3);
        let lhs = w.symmetrized_fft(&v1.scale(x).axpy(y, &v2)).unwrap();
        let rhs = w
            .symmetrized_fft(&v1)
            .unwrap()
            .scale(x)
            .axpy(y, &w.symmetrized_fft(&v2).unwrap());
        assert!(rel(&lhs, &rhs) < 1e-12);
        assert!(rel(&w.symmetrized_fft(&v1).unwrap(), &a) < 1e-12);
        let other = SpectralGrid::new(4).unwrap();
        let z = VorticityField::zeros(other);
        assert!(matches!(w.symmetrized_fft(&z), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn symmetrized_matrix_matches_direct() {
        let g = SpectralGrid::new(4).unwrap();
        let mut r = rng();
        let w = VorticityField::random(g.clone(), &mut r, 0.5);
        let xi = VorticityField::random(g.clone(), &mut r, 0.5);
        let m = symmetrized_matrix(&w);
        let y = &m * xi.to_real();
        let direct = w.symmetrized_direct(&xi).unwrap().to_real();
        assert!((y - &direct).norm() < 1e-13 * direct.norm());
    }

    #[test]
    fn antisymmetry_and_conservation() {
        let g = SpectralGrid::new(5).unwrap();
        let mut r = rng();
        for _ in 0..5 {
            let xi = VorticityField::random(g.clone(), &mut r, 0.5);
            let v = VorticityField::random(g.clone(), &mut r, 0.5);
            let w = VorticityField::random(g.clone(), &mut r, 0.5);
            let u = xi.biot_savart();
            let a = v.advected_by(&u).inner(&w);
            let b = w.advected_by(&u).inner(&v);
            let scale = u.sobolev_norm(0.0) * v.sobolev_norm(1.0) * w.norm();
            assert!((a + b).abs() < 1e-12 * scale);

            let n = xi.nonlinearity_direct();
            let s = xi.norm().powi(3) * xi.sobolev_norm(1.0);
            // enstrophy and energy neutrality
            assert!(n.inner(&xi).abs() < 1e-12 * s);
            let inv_lap = xi.map_diag(|k2| 1.0 / k2);
            assert!(n.inner(&inv_lap).abs() < 1e-12 * s);
            // advected_by agrees with the coupling form
            assert!(rel(&xi.advected_by(&u), &n) < 1e-12);
        }
    }

    #[test]
    fn trilinear_bound_has_finite_constant() {
        let g = SpectralGrid::new(5).unwrap();
        let mut r = rng();
        let mut c_fit: f64 = 0.0;
        for i in 0..1000 {
            let decay = 0.2 + (i % 5) as f64 * 0.4;
            let xi = VorticityField::random(g.clone(), &mut r, decay);
            let v = VorticityField::random(g.clone(), &mut r, decay);
            let w = VorticityField::random(g.clone(), &mut r, decay);
            let u = xi.biot_savart();
            let val = v.advected_by(&u).inner(&w).abs();
            let bound = u.sobolev_norm(1.0) * v.sobolev_norm(1.0) * w.sobolev_norm(0.5);
            c_fit = c_fit.max(val / bound);
        }
        assert!(c_fit.is_finite() && c_fit > 0.0 && c_fit < 1.0, "C = {c_fit}");
    }

    #[test]
    fn physical_field_is_real() {
        let g = SpectralGrid::new(6).unwrap();
        let w = VorticityField::random(g, &mut rng(), 0.3);
        let phys = w.to_physical(32);
        let max_im = phys.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        assert!(max_im < 1e-13 * w.norm());
        let p = phys[3 * 32 + 5];
        let x = [2.0 * PI * 3.0 / 32.0, 2.0 * PI * 5.0 / 32.0];
        assert!((p - w.eval(x)).norm() < 1e-12);
    }

    /// Checks the 1/(4π) constant and the sign of the drift against a
    /// finite-difference evaluation of -(u·∇)w in physical space.
    #[test]
    fn drift_matches_physical_finite_differences() {
        let g = SpectralGrid::new(2).unwrap();
        let mut w = VorticityField::zeros(g.clone());
        w.coeffs_mut()[g.half_index(&Mode::new(1, 0)).unwrap()] = Complex64::new(0.7, 0.2);
        w.coeffs_mut()[g.half_index(&Mode::new(1, 1)).unwrap()] = Complex64::new(-0.4, 0.5);
        w.coeffs_mut()[g.half_index(&Mode::new(0, 1)).unwrap()] = Complex64::new(0.1, -0.3);
        let u = w.biot_savart();
        let eval_u = |x: [f64; 2]| {
            let (mut a, mut b) = (Complex64::default(), Complex64::default());
            for (i, k) in g.modes().iter().enumerate() {
                let e = Complex64::from_polar(1.0, k.k1 as f64 * x[0] + k.k2 as f64 * x[1]);
                a += u.u1[i] * e + (u.u1[i] * e).conj();
                b += u.u2[i] * e + (u.u2[i] * e).conj();
            }
            (a.re / (2.0 * PI), b.re / (2.0 * PI))
        };
        let m = 96;
        let h = 2.0 * PI / m as f64;
        let wv = |x: [f64; 2]| w.eval(x).re;
        let mut proj = vec![Complex64::default(); g.half_len()];
        for i in 0..m {
            for j in 0..m {
                let x = [i as f64 * h, j as f64 * h];
                // fourth-order centred differences
                let d = |e: [f64; 2]| {
                    let p = |s: f64| wv([x[0] + s * e[0], x[1] + s * e[1]]);
                    (-p(2.0 * h) + 8.0 * p(h) - 8.0 * p(-h) + p(-2.0 * h)) / (12.0 * h)
                };
                let (u1, u2) = eval_u(x);
                let adv = -(u1 * d([1.0, 0.0]) + u2 * d([0.0, 1.0]));
                for (idx, k) in g.modes().iter().enumerate() {
                    let e = Complex64::from_polar(1.0, -(k.k1 as f64 * x[0] + k.k2 as f64 * x[1]));
                    proj[idx] += e * adv * h * h / (2.0 * PI);
                }
            }
        }
        let fd = VorticityField::from_coeffs(g.clone(), proj).unwrap();
        let spectral = w.nonlinearity_direct();
        assert!(rel(&fd, &spectral) < 1e-5, "rel = {}", rel(&fd, &spectral));
    }

    #[test]
    fn json_roundtrip() {
        let g = SpectralGrid::new(3).unwrap();
        let w = VorticityField::random(g.clone(), &mut rng(), 0.5);
        let text = serde_json::to_string(&w.to_json()).unwrap();
        let back: FieldJson = serde_json::from_str(&text).unwrap();
        let w2 = VorticityField::from_json(g, &back).unwrap();
        assert!(rel(&w2, &w) < 1e-16);
    }
}
