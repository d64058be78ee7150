//! Forcing geometry: which Fourier modes the noise can reach.
//!
//! Everything here is exact integer arithmetic. The mode walk that defines
//! `Z∞` only admits a step `ℓ → ℓ + j` (with `j` a forced mode) when `ℓ` and
//! `j` are not collinear and have different Euclidean lengths; the set of
//! reachable modes is compared against the integer lattice generated by the
//! forced modes.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer wave vector `(k1, k2)`, never the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mode {
    pub k1: i64,
    pub k2: i64,
}

impl Mode {
    pub const fn new(k1: i64, k2: i64) -> Self {
        Self { k1, k2 }
    }

    pub fn is_origin(&self) -> bool {
        self.k1 == 0 && self.k2 == 0
    }

    /// `k⊥ = (k2, -k1)`.
    pub fn perp(&self) -> Mode {
        Mode::new(self.k2, -self.k1)
    }

    pub fn norm_sq(&self) -> i64 {
        self.k1 * self.k1 + self.k2 * self.k2
    }

    pub fn norm(&self) -> f64 {
        (self.norm_sq() as f64).sqrt()
    }

    /// Max-norm `max(|k1|, |k2|)`, used by the square truncation.
    pub fn max_norm(&self) -> i64 {
        self.k1.abs().max(self.k2.abs())
    }

    pub fn dot(&self, other: &Mode) -> i64 {
        self.k1 * other.k1 + self.k2 * other.k2
    }

    /// `det(k, ℓ)` of the 2×2 matrix with columns `k`, `ℓ`.
    pub fn det(&self, other: &Mode) -> i64 {
        self.k1 * other.k2 - self.k2 * other.k1
    }

    pub fn neg(&self) -> Mode {
        Mode::new(-self.k1, -self.k2)
    }

    pub fn add(&self, other: &Mode) -> Mode {
        Mode::new(self.k1 + other.k1, self.k2 + other.k2)
    }

    pub fn collinear(&self, other: &Mode) -> bool {
        self.det(other) == 0
    }

    /// Membership in the upper half-plane `Z²₊` (`k2 > 0`, or `k2 = 0` and `k1 > 0`).
    pub fn in_upper_half(&self) -> bool {
        self.k2 > 0 || (self.k2 == 0 && self.k1 > 0)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.k1, self.k2)
    }
}

/// Finite set of forced modes `Z₀`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModeSet {
    modes: BTreeSet<Mode>,
}

impl ModeSet {
    /// Builds a non-empty set that excludes the origin.
    pub fn new<I: IntoIterator<Item = Mode>>(modes: I) -> Result<Self> {
        let modes: BTreeSet<Mode> = modes.into_iter().collect();
        if modes.is_empty() {
            return Err(Error::EmptyModeSet);
        }
        if modes.iter().any(Mode::is_origin) {
            return Err(Error::OriginMode);
        }
        Ok(Self { modes })
    }

    /// Unchecked constructor for intermediate sets (possibly empty).
    pub fn from_iter_unchecked<I: IntoIterator<Item = Mode>>(modes: I) -> Self {
        Self {
            modes: modes.into_iter().filter(|m| !m.is_origin()).collect(),
        }
    }

    pub fn from_pairs(pairs: &[(i64, i64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(a, b)| Mode::new(a, b)))
    }

    /// Parses `"1,0;-1,0;1,1"`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut modes = Vec::new();
        for (idx, chunk) in text.split(';').map(str::trim).enumerate() {
            if chunk.is_empty() {
                continue;
            }
            let parts: Vec<&str> = chunk.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!("modes[{idx}]: expected 'k1,k2', got '{chunk}'")));
            }
            let parse = |s: &str| {
                s.parse::<i64>()
                    .map_err(|e| Error::Config(format!("modes[{idx}]: {e}")))
            };
            modes.push(Mode::new(parse(parts[0])?, parse(parts[1])?));
        }
        Self::new(modes)
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn contains(&self, k: &Mode) -> bool {
        self.modes.contains(k)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mode> + '_ {
        self.modes.iter()
    }

    pub fn to_vec(&self) -> Vec<Mode> {
        self.modes.iter().copied().collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.modes.iter().all(|k| self.modes.contains(&k.neg()))
    }

    pub fn negated(&self) -> ModeSet {
        Self::from_iter_unchecked(self.modes.iter().map(Mode::neg))
    }

    pub fn max_norm_euclid(&self) -> f64 {
        self.modes.iter().map(Mode::norm).fold(0.0, f64::max)
    }
}

impl<'a> IntoIterator for &'a ModeSet {
    type Item = &'a Mode;
    type IntoIter = std::collections::btree_set::Iter<'a, Mode>;
    fn into_iter(self) -> Self::IntoIter {
        self.modes.iter()
    }
}

/// Closure of `z0` under `k ↦ -k`.
pub fn symmetrize(z0: &ModeSet) -> Result<ModeSet> {
    if z0.is_empty() {
        return Err(Error::EmptyModeSet);
    }
    if z0.iter().any(Mode::is_origin) {
        return Err(Error::OriginMode);
    }
    ModeSet::new(z0.iter().flat_map(|k| [*k, k.neg()]))
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Returns `(g, s, t)` with `s·a + t·b = g = gcd(a, b) ≥ 0`.
fn ext_gcd(a: i64, b: i64) -> (i64, i64, i64) {
    let (mut r0, mut r1) = (a, b);
    let (mut s0, mut s1) = (1i64, 0i64);
    let (mut t0, mut t1) = (0i64, 1i64);
    while r1 != 0 {
        let q = r0.div_euclid(r1);
        (r0, r1) = (r1, r0 - q * r1);
        (s0, s1) = (s1, s0 - q * s1);
        (t0, t1) = (t1, t0 - q * t1);
    }
    if r0 < 0 {
        (-r0, -s0, -t0)
    } else {
        (r0, s0, t0)
    }
}

/// Canonical basis of the sublattice generated by a mode set.
///
/// Rank 2: columns `(a, 0)` and `(c, d)` with `a, d > 0`, `0 ≤ c < a`.
/// Rank 1: a single primitive-direction generator with positive leading sign.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeBasis {
    pub generators: Vec<Mode>,
}

impl LatticeBasis {
    pub fn rank(&self) -> usize {
        self.generators.len()
    }

    /// Index of the lattice in `Z²` (0 for rank < 2).
    pub fn index(&self) -> i64 {
        match self.generators.as_slice() {
            [a, b] => a.det(b).abs(),
            _ => 0,
        }
    }

    /// Exact lattice membership test.
    pub fn contains(&self, p: &Mode) -> bool {
        match self.generators.as_slice() {
            [] => p.is_origin(),
            [g] => {
                if !g.collinear(p) {
                    return false;
                }
                if g.k1 != 0 {
                    p.k1 % g.k1 == 0
                } else {
                    p.k2 % g.k2 == 0
                }
            }
            [b1, b2] => {
                // b1 = (a, 0), b2 = (c, d)
                let (a, c, d) = (b1.k1, b2.k1, b2.k2);
                if p.k2 % d != 0 {
                    return false;
                }
                let n2 = p.k2 / d;
                (p.k1 - n2 * c) % a == 0
            }
            _ => unreachable!("lattice basis has at most two generators"),
        }
    }
}

/// Integer column reduction of the 2×m matrix of modes; returns the canonical
/// basis together with `gcd_{k,ℓ ∈ z0} |det(k, ℓ)|` (0 when all modes are collinear).
pub fn generated_lattice(z0: &ModeSet) -> Result<(LatticeBasis, i64)> {
    if z0.is_empty() {
        return Err(Error::EmptyModeSet);
    }
    let mut pivot: Option<(i64, i64)> = None;
    let mut row_gcd = 0i64;
    for k in z0 {
        let col = (k.k1, k.k2);
        if col.1 == 0 {
            row_gcd = gcd(row_gcd, col.0);
            continue;
        }
        match pivot {
            None => pivot = Some(col),
            Some(p) => {
                let (g, s, t) = ext_gcd(p.1, col.1);
                let new_pivot = (s * p.0 + t * col.0, g);
                let (pa, ca) = (p.1 / g, col.1 / g);
                let rest = ca * p.0 - pa * col.0;
                row_gcd = gcd(row_gcd, rest);
                pivot = Some(new_pivot);
            }
        }
    }
    let generators = match pivot {
        None => vec![Mode::new(row_gcd, 0)],
        Some((c, d)) => {
            let (c, d) = if d < 0 { (-c, -d) } else { (c, d) };
            if row_gcd == 0 {
                vec![Mode::new(c, d)]
            } else {
                vec![Mode::new(row_gcd, 0), Mode::new(c.rem_euclid(row_gcd), d)]
            }
        }
    };

    let modes = z0.to_vec();
    let mut gcd_det = 0i64;
    for (i, a) in modes.iter().enumerate() {
        for b in &modes[i + 1..] {
            gcd_det = gcd(gcd_det, a.det(b));
        }
    }
    Ok((LatticeBasis { generators }, gcd_det))
}

/// Conditions A1 (two distinct Euclidean norms) and A2 (modes generate `Z²`).
pub fn check_conditions(z0: &ModeSet) -> Result<(bool, bool)> {
    let (_, gcd_det) = generated_lattice(z0)?;
    let mut norms = z0.iter().map(Mode::norm_sq);
    let first = norms.next().ok_or(Error::EmptyModeSet)?;
    let a1 = norms.any(|n| n != first);
    Ok((a1, gcd_det == 1))
}

fn admissible(l: &Mode, j: &Mode) -> bool {
    l.perp().dot(j) != 0 && l.norm_sq() != j.norm_sq()
}

/// One step of the mode recursion: `{ℓ + j : j ∈ z0, ℓ ∈ prev, ⟨ℓ⊥, j⟩ ≠ 0, |j| ≠ |ℓ|}`.
pub fn zn_step(prev: &ModeSet, z0: &ModeSet) -> ModeSet {
    let mut out = BTreeSet::new();
    for l in prev {
        for j in z0 {
            if admissible(l, j) {
                out.insert(l.add(j));
            }
        }
    }
    ModeSet::from_iter_unchecked(out)
}

/// `Z∞ ∩ {|k| ≤ radius}` by breadth-first search over the mode walk.
///
/// The search is seeded with `z0` itself and explores every mode within
/// `radius + 2·max|k|` before intersecting with the ball.
pub fn zinfty_ball(z0: &ModeSet, radius: f64) -> ModeSet {
    zinfty_ball_with_margin(z0, radius, 2.0 * z0.max_norm_euclid())
}

/// As [`zinfty_ball`] with an explicit exploration margin.
pub fn zinfty_ball_with_margin(z0: &ModeSet, radius: f64, margin: f64) -> ModeSet {
    let explore = radius + margin;
    let explore_sq = explore * explore;
    let mut seen: HashSet<Mode> = HashSet::new();
    let mut queue: VecDeque<Mode> = VecDeque::new();
    for k in z0 {
        if (k.norm_sq() as f64) <= explore_sq && seen.insert(*k) {
            queue.push_back(*k);
        }
    }
    while let Some(l) = queue.pop_front() {
        for j in z0 {
            if !admissible(&l, j) {
                continue;
            }
            let next = l.add(j);
            if (next.norm_sq() as f64) <= explore_sq && seen.insert(next) {
                queue.push_back(next);
            }
        }
    }
    let r_sq = radius * radius;
    ModeSet::from_iter_unchecked(seen.into_iter().filter(|k| (k.norm_sq() as f64) <= r_sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    FullSpace,
    FiniteOU,
    ProperSublattice,
}

/// Translation `v = 2π·k/|k|²`, stored exactly as `k` and `|k|²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Period {
    pub numer: Mode,
    pub denom: i64,
    pub value: [f64; 2],
}

impl Period {
    fn from_generator(k: &Mode) -> Self {
        let denom = k.norm_sq();
        let s = 2.0 * std::f64::consts::PI / denom as f64;
        Self {
            numer: *k,
            denom,
            value: [s * k.k1 as f64, s * k.k2 as f64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub modes: Vec<Mode>,
    pub is_symmetric: bool,
    pub a1: bool,
    pub a2: bool,
    pub gcd_det: i64,
    pub lattice_basis: Vec<Mode>,
    pub classification: Classification,
    pub periods: Option<[Period; 2]>,
}

/// Assembles the full geometry report for a forcing set.
pub fn classify(z0: &ModeSet) -> Result<GeometryReport> {
    let (basis, gcd_det) = generated_lattice(z0)?;
    let (a1, a2) = check_conditions(z0)?;
    let all_collinear = gcd_det == 0;
    let classification = if all_collinear || !a1 {
        Classification::FiniteOU
    } else if a2 {
        Classification::FullSpace
    } else {
        Classification::ProperSublattice
    };
    let periods = match (classification, basis.generators.as_slice()) {
        (Classification::ProperSublattice, [g1, g2]) => {
            Some([Period::from_generator(g1), Period::from_generator(g2)])
        }
        _ => None,
    };
    Ok(GeometryReport {
        modes: z0.to_vec(),
        is_symmetric: z0.is_symmetric(),
        a1,
        a2,
        gcd_det,
        lattice_basis: basis.generators,
        classification,
        periods,
    })
}

/// The three worked forcing sets.
pub mod examples {
    use super::ModeSet;

    pub fn full_space() -> ModeSet {
        ModeSet::from_pairs(&[(1, 0), (-1, 0), (1, 1), (-1, -1)]).unwrap()
    }

    pub fn finite_ou() -> ModeSet {
        ModeSet::from_pairs(&[(1, 0), (-1, 0), (0, 1), (0, -1)]).unwrap()
    }

    pub fn sublattice() -> ModeSet {
        ModeSet::from_pairs(&[(2, 0), (-2, 0), (2, 2), (-2, -2)]).unwrap()
    }
}
