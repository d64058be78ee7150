//! Experiment configuration: JSON with field-path errors.
//!
//! Top level: `{N, nu, dt, T, seed, scheme, modes: [{k: [k1, k2], q}]}`; the
//! mode list may also sit under `noise.modes`. Optional keys: `truncation`,
//! `nonlinear`, `initial`, `experiment`, `output`.

use std::path::PathBuf;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use snse_core::geometry::Mode;
use snse_core::integrator::NoiseEntry;
use snse_core::spectral::Truncation;
use snse_core::{IntegratorConfig, NoiseModel, Scheme, SpectralGrid};

/// Schema violation located by its JSON path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

type Res<T> = std::result::Result<T, ConfigError>;

fn err<T>(path: &str, message: impl Into<String>) -> Res<T> {
    Err(ConfigError {
        path: path.to_string(),
        message: message.into(),
    })
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

/// Object with known keys; unknown keys are rejected.
struct Obj<'a> {
    map: &'a Map<String, Value>,
    path: String,
}

impl<'a> Obj<'a> {
    fn new(v: &'a Value, path: &str, allowed: &[&str]) -> Res<Self> {
        let Value::Object(map) = v else {
            return err(path, "expected an object");
        };
        for key in map.keys() {
            if !allowed.contains(&key.as_str()) {
                return err(&join(path, key), format!("unknown key (allowed: {})", allowed.join(", ")));
            }
        }
        Ok(Self {
            map,
            path: path.to_string(),
        })
    }

    fn get(&self, key: &str) -> Option<(&'a Value, String)> {
        self.map.get(key).map(|v| (v, join(&self.path, key)))
    }

    fn f64(&self, key: &str) -> Res<Option<f64>> {
        self.get(key).map(|(v, p)| as_f64(v, &p)).transpose()
    }

    fn u64(&self, key: &str) -> Res<Option<u64>> {
        match self.get(key) {
            None => Ok(None),
            Some((v, p)) => v.as_u64().map(Some).ok_or(()).or_else(|_| err(&p, "expected a nonnegative integer")),
        }
    }

    fn usize(&self, key: &str) -> Res<Option<usize>> {
        Ok(self.u64(key)?.map(|x| x as usize))
    }

    fn bool(&self, key: &str) -> Res<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some((v, p)) => v.as_bool().map(Some).ok_or(()).or_else(|_| err(&p, "expected true or false")),
        }
    }

    fn str(&self, key: &str) -> Res<Option<&'a str>> {
        match self.get(key) {
            None => Ok(None),
            Some((v, p)) => v.as_str().map(Some).ok_or(()).or_else(|_| err(&p, "expected a string")),
        }
    }

    fn f64_list(&self, key: &str) -> Res<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some((Value::Array(items), p)) => items
                .iter()
                .enumerate()
                .map(|(i, v)| as_f64(v, &format!("{p}[{i}]")))
                .collect::<Res<Vec<_>>>()
                .map(Some),
            Some((_, p)) => err(&p, "expected an array of numbers"),
        }
    }
}

fn as_f64(v: &Value, path: &str) -> Res<f64> {
    match v.as_f64() {
        Some(x) if x.is_finite() => Ok(x),
        _ => err(path, "expected a finite number"),
    }
}

/// Initial vorticity.
#[derive(Debug, Clone, PartialEq)]
pub enum Initial {
    Zero,
    /// Coefficients `N(0,1)·amplitude·|k|^{-decay}` from the seed's auxiliary stream.
    Random { amplitude: f64, decay: f64 },
    /// Field JSON `{N, coeffs: [[k1, k2, re, im], ...]}`.
    File(PathBuf),
}

/// Tangent direction `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub enum Direction {
    /// Unit vector with `|k|^{-decay}` spectrum from the seed's auxiliary stream.
    Random { decay: f64 },
    /// Unit vector on the sine (`part = 0`) or cosine (`part = 1`) slot of `mode`.
    Mode { mode: Mode, part: usize },
}

/// Experiment-specific settings; every field has a default.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentBlock {
    pub betas: Vec<f64>,
    pub cut: Option<usize>,
    pub eps: Vec<f64>,
    pub times: Vec<f64>,
    pub replicas: usize,
    pub intervals: usize,
    pub interval_length: f64,
    pub skorokhod: bool,
    pub budget: f64,
    pub xi: Direction,
    /// Frequencies of `sin(a · x_{0..4})`.
    pub phi: [f64; 4],
    pub fd_eps: f64,
    pub bootstrap: usize,
    pub ensemble: usize,
    pub cap: usize,
}

impl Default for ExperimentBlock {
    fn default() -> Self {
        Self {
            betas: vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
            cut: None,
            eps: vec![1.0, 0.1, 0.01],
            times: vec![1.0, 2.0, 5.0, 10.0],
            replicas: 200,
            intervals: 8,
            interval_length: 1.0,
            skorokhod: false,
            budget: snse_core::control::SKOROKHOD_BUDGET,
            xi: Direction::Random { decay: 1.0 },
            phi: [1.0, 0.5, -0.5, 0.25],
            fd_eps: 1e-4,
            bootstrap: 1000,
            ensemble: 200,
            cap: snse_core::metrics::DEFAULT_SUPPORT_CAP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n: usize,
    pub truncation: Truncation,
    pub nu: f64,
    pub dt: f64,
    pub t: f64,
    pub seed: u64,
    pub scheme: Scheme,
    pub nonlinear: bool,
    pub noise: NoiseModel,
    pub initial: Initial,
    pub experiment: ExperimentBlock,
    pub output: Option<PathBuf>,
    /// SHA-256 of the raw configuration text.
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

const TOP_KEYS: &[&str] = &[
    "N",
    "truncation",
    "nu",
    "dt",
    "T",
    "seed",
    "scheme",
    "nonlinear",
    "modes",
    "noise",
    "initial",
    "experiment",
    "output",
];

/// Parses and validates a configuration; cross-references are checked here.
pub fn parse_config(text: &str) -> Res<ExperimentConfig> {
    let root: Value = serde_json::from_str(text).or_else(|e| err("", format!("invalid JSON: {e}")))?;
    let top = Obj::new(&root, "", TOP_KEYS)?;

    let n = match top.u64("N")? {
        Some(n) if n >= 1 => n as usize,
        Some(_) => return err("N", "must be at least 1"),
        None => return err("N", "missing"),
    };
    let truncation = match top.str("truncation")? {
        None | Some("square") => Truncation::Square,
        Some("disc") => Truncation::Disc,
        Some(other) => return err("truncation", format!("expected 'square' or 'disc', got '{other}'")),
    };
    let nu = top.f64("nu")?.ok_or(()).or_else(|_| err("nu", "missing"))?;
    if nu < 0.0 {
        return err("nu", "must be nonnegative");
    }
    let dt = top.f64("dt")?.ok_or(()).or_else(|_| err("dt", "missing"))?;
    if dt <= 0.0 {
        return err("dt", "must be positive");
    }
    let t = top.f64("T")?.unwrap_or(1.0);
    if t < 0.0 {
        return err("T", "must be nonnegative");
    }
    let seed = top.u64("seed")?.unwrap_or(0);
    let scheme = match top.str("scheme")? {
        None | Some("exp-euler-maruyama") | Some("exp-euler") | Some("em") => Scheme::ExpEulerMaruyama,
        Some("rk4") => Scheme::DeterministicRK4,
        Some(other) => return err("scheme", format!("expected 'exp-euler-maruyama' or 'rk4', got '{other}'")),
    };
    let nonlinear = top.bool("nonlinear")?.unwrap_or(true);

    let grid = SpectralGrid::with_truncation(n, truncation).or_else(|e| err("N", e.to_string()))?;
    let modes = match (top.get("modes"), top.get("noise")) {
        (Some(_), Some(_)) => return err("noise", "give the mode list either at top level or under noise, not both"),
        (Some((v, p)), None) => Some((v, p)),
        (None, Some((v, p))) => {
            let noise = Obj::new(v, &p, &["modes"])?;
            noise.get("modes")
        }
        (None, None) => None,
    };
    let noise = match modes {
        None => NoiseModel::none(),
        Some((v, path)) => parse_modes(v, &path, &grid)?,
    };
    let mut cfg = IntegratorConfig::new(nu, dt, seed);
    cfg.scheme = scheme;
    cfg.nonlinear = nonlinear;
    cfg.validate(&noise).or_else(|e| err("scheme", e.to_string()))?;

    let initial = match top.get("initial") {
        None => Initial::Zero,
        Some((v, p)) => parse_initial(v, &p)?,
    };
    let experiment = match top.get("experiment") {
        None => ExperimentBlock::default(),
        Some((v, p)) => parse_experiment(v, &p, &grid)?,
    };
    if let Some(cut) = experiment.cut {
        let forced = noise.modes();
        for k in grid.modes() {
            for kk in [*k, k.neg()] {
                if kk.max_norm() as usize <= cut && !forced.contains(&kk) {
                    return err("experiment.cut", format!("low mode {kk} (cut {cut}) is not forced"));
                }
            }
        }
    }
    let output = top.str("output")?.map(PathBuf::from);
    Ok(ExperimentConfig {
        n,
        truncation,
        nu,
        dt,
        t,
        seed,
        scheme,
        nonlinear,
        noise,
        initial,
        experiment,
        output,
        hash: sha256_hex(text.as_bytes()),
    })
}

fn parse_modes(v: &Value, path: &str, grid: &SpectralGrid) -> Res<NoiseModel> {
    let Value::Array(items) = v else {
        return err(path, "expected an array of {k: [k1, k2], q}");
    };
    let mut entries: Vec<NoiseEntry> = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let p = format!("{path}[{i}]");
        let obj = Obj::new(item, &p, &["k", "q"])?;
        let (kv, kp) = obj.get("k").ok_or(()).or_else(|_| err(&p, "missing k"))?;
        let ks = match kv {
            Value::Array(a) if a.len() == 2 => a,
            _ => return err(&kp, "expected [k1, k2]"),
        };
        let mut comps = [0i64; 2];
        for (c, x) in ks.iter().enumerate() {
            comps[c] = x.as_i64().ok_or(()).or_else(|_| err(&format!("{kp}[{c}]"), "expected an integer"))?;
        }
        let mode = Mode::new(comps[0], comps[1]);
        if mode.is_origin() {
            return err(&p, "the origin (0,0) cannot be forced");
        }
        let q = obj.f64("q")?.unwrap_or(1.0);
        if q <= 0.0 {
            return err(&join(&p, "q"), "must be positive");
        }
        if !grid.contains(&mode) {
            return err(&p, format!("mode {mode} lies outside truncation N = {}", grid.trunc()));
        }
        if let Some(j) = entries.iter().position(|e| e.mode == mode) {
            return err(&p, format!("duplicate mode {mode} (first at {path}[{j}])"));
        }
        entries.push(NoiseEntry { mode, q });
    }
    for (i, e) in entries.iter().enumerate() {
        if !entries.iter().any(|f| f.mode == e.mode.neg()) {
            return err(&format!("{path}[{i}]"), format!("mode {} has no partner {}", e.mode, e.mode.neg()));
        }
    }
    if entries.is_empty() {
        return Ok(NoiseModel::none());
    }
    NoiseModel::new(entries).or_else(|e| err(path, e.to_string()))
}

fn parse_initial(v: &Value, path: &str) -> Res<Initial> {
    let obj = Obj::new(v, path, &["kind", "amplitude", "decay", "path"])?;
    match obj.str("kind")?.unwrap_or("zero") {
        "zero" => Ok(Initial::Zero),
        "random" => Ok(Initial::Random {
            amplitude: obj.f64("amplitude")?.unwrap_or(1.0),
            decay: obj.f64("decay")?.unwrap_or(1.0),
        }),
        "file" => Ok(Initial::File(PathBuf::from(
            obj.str("path")?.ok_or(()).or_else(|_| err(&join(path, "path"), "missing"))?,
        ))),
        other => err(&join(path, "kind"), format!("expected zero, random or file, got '{other}'")),
    }
}

const EXPERIMENT_KEYS: &[&str] = &[
    "betas",
    "cut",
    "eps",
    "times",
    "replicas",
    "intervals",
    "interval_length",
    "skorokhod",
    "budget",
    "xi",
    "phi",
    "fd_eps",
    "bootstrap",
    "ensemble",
    "cap",
];

fn parse_experiment(v: &Value, path: &str, grid: &SpectralGrid) -> Res<ExperimentBlock> {
    let obj = Obj::new(v, path, EXPERIMENT_KEYS)?;
    let mut block = ExperimentBlock::default();
    if let Some(b) = obj.f64_list("betas")? {
        if b.is_empty() {
            return err(&join(path, "betas"), "must not be empty");
        }
        if let Some(i) = b.iter().position(|x| *x <= 0.0) {
            return err(&format!("{}[{i}]", join(path, "betas")), "must be positive");
        }
        block.betas = b;
    }
    block.cut = obj.usize("cut")?;
    if let Some(e) = obj.f64_list("eps")? {
        if let Some(i) = e.iter().position(|x| *x <= 0.0) {
            return err(&format!("{}[{i}]", join(path, "eps")), "must be positive");
        }
        block.eps = e;
    }
    if let Some(t) = obj.f64_list("times")? {
        if let Some(i) = t.iter().position(|x| *x < 0.0) {
            return err(&format!("{}[{i}]", join(path, "times")), "must be nonnegative");
        }
        block.times = t;
    }
    if let Some(x) = obj.usize("replicas")? {
        block.replicas = x;
    }
    if let Some(x) = obj.usize("intervals")? {
        block.intervals = x;
    }
    if let Some(x) = obj.f64("interval_length")? {
        if x <= 0.0 {
            return err(&join(path, "interval_length"), "must be positive");
        }
        block.interval_length = x;
    }
    if let Some(x) = obj.bool("skorokhod")? {
        block.skorokhod = x;
    }
    if let Some(x) = obj.f64("budget")? {
        block.budget = x;
    }
    if let Some((xv, xp)) = obj.get("xi") {
        block.xi = parse_direction(xv, &xp, grid)?;
    }
    if let Some(phi) = obj.f64_list("phi")? {
        if phi.len() != 4 {
            return err(&join(path, "phi"), "expected four frequencies");
        }
        block.phi = [phi[0], phi[1], phi[2], phi[3]];
    }
    if let Some(x) = obj.f64("fd_eps")? {
        if x <= 0.0 {
            return err(&join(path, "fd_eps"), "must be positive");
        }
        block.fd_eps = x;
    }
    if let Some(x) = obj.usize("bootstrap")? {
        block.bootstrap = x;
    }
    if let Some(x) = obj.usize("ensemble")? {
        if x == 0 {
            return err(&join(path, "ensemble"), "must be positive");
        }
        block.ensemble = x;
    }
    if let Some(x) = obj.usize("cap")? {
        if x == 0 {
            return err(&join(path, "cap"), "must be positive");
        }
        block.cap = x;
    }
    Ok(block)
}

fn parse_direction(v: &Value, path: &str, grid: &SpectralGrid) -> Res<Direction> {
    let obj = Obj::new(v, path, &["kind", "decay", "k", "part"])?;
    match obj.str("kind")?.unwrap_or("random") {
        "random" => Ok(Direction::Random {
            decay: obj.f64("decay")?.unwrap_or(1.0),
        }),
        "mode" => {
            let k = obj.f64_list("k")?.ok_or(()).or_else(|_| err(&join(path, "k"), "missing"))?;
            if k.len() != 2 || k.iter().any(|x| x.fract() != 0.0) {
                return err(&join(path, "k"), "expected [k1, k2] integers");
            }
            let mode = Mode::new(k[0] as i64, k[1] as i64);
            if !grid.contains(&mode) {
                return err(&join(path, "k"), format!("mode {mode} lies outside truncation N = {}", grid.trunc()));
            }
            let part = match obj.str("part")?.unwrap_or("sin") {
                "sin" => 0,
                "cos" => 1,
                other => return err(&join(path, "part"), format!("expected sin or cos, got '{other}'")),
            };
            Ok(Direction::Mode { mode, part })
        }
        other => err(&join(path, "kind"), format!("expected random or mode, got '{other}'")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"N": 4, "nu": 0.5, "dt": 0.01, "T": 1, "seed": 3,
        "modes": [{"k": [1, 0], "q": 1}, {"k": [-1, 0], "q": 1}]}"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.n, 4);
        assert_eq!(cfg.noise.m(), 2);
        assert_eq!(cfg.hash.len(), 64);
        assert_eq!(cfg.experiment, ExperimentBlock::default());
    }

    #[test]
    fn errors_name_the_field() {
        let text = r#"{"N": 4, "nu": 0.5, "dt": 0.01,
            "noise": {"modes": [{"k": [1, 0]}, {"k": [-1, 0]}, {"k": [9, 0]}]}}"#;
        let e = parse_config(text).unwrap_err();
        assert_eq!(e.path, "noise.modes[2]");
        let text = r#"{"N": 4, "nu": 0.5, "dt": 0.01, "modes": [{"k": [1, 0]}, {"k": [-1, 0]}, {"k": [1, 0]}]}"#;
        let e = parse_config(text).unwrap_err();
        assert_eq!(e.path, "modes[2]");
        assert!(e.message.contains("duplicate"));
        let e = parse_config(r#"{"N": 4, "nu": 0.5, "dt": 0.01, "modes": [{"k": [1, 1]}]}"#).unwrap_err();
        assert!(e.message.contains("partner"), "{e}");
        let e = parse_config(r#"{"N": 4, "nu": -1, "dt": 0.01}"#).unwrap_err();
        assert_eq!(e.path, "nu");
        let e = parse_config(r#"{"N": 4, "nu": 1, "dt": 0.01, "colour": 1}"#).unwrap_err();
        assert_eq!(e.path, "colour");
        let e = parse_config(r#"{"N": 4, "nu": 1, "dt": 0.01, "experiment": {"betas": [1, 0]}}"#).unwrap_err();
        assert_eq!(e.path, "experiment.betas[1]");
        let e = parse_config("{").unwrap_err();
        assert!(e.message.contains("invalid JSON"));
    }

    #[test]
    fn cut_must_be_forced() {
        let text = r#"{"N": 4, "nu": 0.5, "dt": 0.01,
            "modes": [{"k": [1, 0]}, {"k": [-1, 0]}, {"k": [0, 1]}, {"k": [0, -1]}],
            "experiment": {"cut": 1}}"#;
        let e = parse_config(text).unwrap_err();
        assert_eq!(e.path, "experiment.cut");
        assert!(e.message.contains("is not forced"), "{e}");
    }

    #[test]
    fn rk4_requires_no_noise() {
        let e = parse_config(r#"{"N": 4, "nu": 0, "dt": 0.01, "scheme": "rk4", "modes": [{"k": [1, 0]}, {"k": [-1, 0]}]}"#).unwrap_err();
        assert_eq!(e.path, "scheme");
        assert!(parse_config(r#"{"N": 4, "nu": 0, "dt": 0.01, "scheme": "rk4"}"#).is_ok());
    }
}
