//! Subcommand bodies. Each returns its artifacts' summary line on success.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde_json::{json, Value};

use snse_core::control::{
    elliptic_control_run, gradient_bound_estimate, hypo_run, GradientConfig, HypoConfig, TestFunction,
};
use snse_core::geometry::{classify, generated_lattice, zinfty_ball, ModeSet};
use snse_core::integrator::{
    diagnostics_row, energy_balance_report, read_trajectory, write_trajectory, EnergyPath, TrajectoryRecord,
    DIAGNOSTICS_HEADER,
};
use snse_core::metrics::{asf_probe_toy, nse_coupling_distance, ToyConfig, ToySystem};
use snse_core::rng::StreamKey;
use snse_core::spectral::FieldJson;
use snse_core::{IntegratorConfig, LinearizedFlow, Model, SpectralGrid, TangentVector, VorticityField};

use crate::artifacts::{num, sha256_args, write_csv, write_json, Provenance};
use crate::config::{parse_config, Direction, ExperimentConfig, Initial};
use crate::CliError;

/// Telescoping tolerance on every hypoelliptic run.
pub const TELESCOPE_TOL: f64 = 1e-8;
/// Residual-recursion tolerance for the elliptic control.
pub const ELLIPTIC_TOL: f64 = 1e-10;

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<Model, CliError> {
    let grid = SpectralGrid::with_truncation(cfg.n, cfg.truncation)?;
    let mut ic = IntegratorConfig::new(cfg.nu, cfg.dt, cfg.seed);
    ic.scheme = cfg.scheme;
    ic.nonlinear = cfg.nonlinear;
    Ok(Model::new(grid, ic, cfg.noise.clone())?)
}

pub fn read_field(path: &Path, model: &Model) -> Result<VorticityField, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let json: FieldJson =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: invalid field JSON: {e}", path.display())))?;
    if json.n != model.grid().trunc() {
        return Err(CliError::Config(format!(
            "{}: field has N = {}, config has N = {}",
            path.display(),
            json.n,
            model.grid().trunc()
        )));
    }
    VorticityField::from_json(model.grid().clone(), &json).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn initial_field(cfg: &ExperimentConfig, model: &Model) -> Result<VorticityField, CliError> {
    match &cfg.initial {
        Initial::Zero => Ok(VorticityField::zeros(model.grid().clone())),
        Initial::Random { amplitude, decay } => {
            let mut rng = StreamKey::new(cfg.seed, 0).aux(1);
            Ok(VorticityField::random(model.grid().clone(), &mut rng, *decay).scale(*amplitude))
        }
        Initial::File(p) => read_field(p, model),
    }
}

pub fn direction(cfg: &ExperimentConfig, model: &Model) -> Result<TangentVector, CliError> {
    let grid = model.grid();
    let v = match &cfg.experiment.xi {
        Direction::Random { decay } => {
            let mut rng = StreamKey::new(cfg.seed, 0).aux(2);
            VorticityField::random(grid.clone(), &mut rng, *decay).to_real()
        }
        Direction::Mode { mode, part } => {
            let r = grid
                .real_index(mode)
                .ok_or_else(|| CliError::Config(format!("experiment.xi.k: mode {mode} outside the grid")))?;
            // negative-half modes address the partner's slots
            let mut v = DVector::zeros(grid.dim());
            v[(r & !1) + part] = 1.0;
            v
        }
    };
    let n = v.norm();
    if n == 0.0 {
        return Err(CliError::Config("experiment.xi: direction is zero".into()));
    }
    Ok(v / n)
}

fn prov(cfg: &ExperimentConfig) -> Provenance {
    Provenance {
        hash: cfg.hash.clone(),
        seed: cfg.seed,
    }
}

pub fn analyze_forcing(modes: Option<&str>, config: Option<&Path>, radius: f64, json_out: bool, out: Option<&Path>) -> Result<String, CliError> {
    let (set, prov) = match (modes, config) {
        (Some(text), None) => (
            ModeSet::parse(text)?,
            Provenance {
                hash: sha256_args(&["analyze-forcing", text, &radius.to_string()]),
                seed: 0,
            },
        ),
        (None, Some(path)) => {
            let cfg = load_config(path)?;
            if cfg.noise.m() == 0 {
                return Err(CliError::Config(format!("{}: modes: the forcing set is empty", path.display())));
            }
            (cfg.noise.modes(), prov(&cfg))
        }
        _ => return Err(CliError::Usage("analyze-forcing needs exactly one of --modes or --config".into())),
    };
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(CliError::Usage(format!("--radius must be nonnegative, got {radius}")));
    }
    let report = classify(&set)?;
    let ball = zinfty_ball(&set, radius);
    let (basis, _) = generated_lattice(&set)?;
    let r = radius.floor() as i64;
    let mut lattice_in_ball = 0usize;
    for k1 in -r..=r {
        for k2 in -r..=r {
            let k = snse_core::Mode::new(k1, k2);
            if !k.is_origin() && (k.norm_sq() as f64) <= radius * radius && basis.contains(&k) {
                lattice_in_ball += 1;
            }
        }
    }
    let body = json!({
        "report": report,
        "zinfty": {"radius": radius, "size": ball.len(), "lattice_in_ball": lattice_in_ball},
    });
    let text = crate::artifacts::stamped_json(&prov, body.clone());
    if let Some(p) = out {
        write_json(p, &prov, body)?;
    }
    if json_out {
        print!("{text}");
        Ok(String::new())
    } else {
        Ok(format!(
            "classification {:?}; A1 {} A2 {} gcd_det {}; lattice basis {}; |Z∞ ∩ B({radius})| = {}",
            report.classification,
            report.a1,
            report.a2,
            report.gcd_det,
            report.lattice_basis.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "),
            ball.len()
        ))
    }
}

pub fn simulate(config: &Path, out: Option<&Path>, csv: &Path, replica: u64, every: usize) -> Result<String, CliError> {
    let cfg = load_config(config)?;
    let model = build_model(&cfg)?;
    let w0 = initial_field(&cfg, &model)?;
    let steps = model.steps_for(cfg.t);
    let every = every.max(1);
    let p = prov(&cfg);
    let mut rows = String::new();
    rows.push_str(&p.comment());
    rows.push('\n');
    rows.push_str(DIAGNOSTICS_HEADER);
    rows.push('\n');
    let mut path = EnergyPath::with_capacity(model.dt(), model.nu(), model.noise().e0(), steps + 1);
    let keep = out.is_some();
    let mut states = Vec::new();
    let mut increments = Vec::new();
    model.run(&w0, steps, replica, |i, w, dw| {
        path.push(w);
        if i < steps && !dw.is_empty() {
            path.push_increment(w, model.noise(), dw);
        }
        if i % every == 0 || i == steps {
            rows.push_str(&diagnostics_row(i as f64 * model.dt(), w));
            rows.push('\n');
        }
        if keep {
            states.push(w.clone());
            if i < steps {
                increments.push(dw.to_vec());
            }
        }
    })?;
    fs::write(csv, rows).map_err(|e| CliError::Failure(format!("cannot write {}: {e}", csv.display())))?;
    if let Some(o) = out {
        let rec = TrajectoryRecord {
            model: model.clone(),
            replica,
            states,
            increments,
        };
        let file = fs::File::create(o).map_err(|e| CliError::Failure(format!("cannot write {}: {e}", o.display())))?;
        let mut w = BufWriter::new(file);
        write_trajectory(&rec, &mut w)?;
        w.flush().map_err(|e| CliError::Failure(e.to_string()))?;
    }
    let balance = energy_balance_report(&path);
    let burn = path.steps() / 10;
    let summary = format!(
        "{steps} steps; mean 2ν‖w‖₁² = {:.6} (E₀ = {:.6}, burn-in {burn} steps); max |step residual| = {:.3e}",
        if path.steps() > burn { path.mean_dissipation(burn) } else { f64::NAN },
        model.noise().e0(),
        balance.max_abs_step_residual
    );
    Ok(summary)
}

pub fn malliavin_spectrum(traj: &Path, s: f64, t: Option<f64>, beta: f64, out: &Path, matrix: Option<&Path>) -> Result<String, CliError> {
    let bytes = fs::read(traj).map_err(|e| CliError::Config(format!("cannot read {}: {e}", traj.display())))?;
    let rec = read_trajectory(BufReader::new(bytes.as_slice())).map_err(|e| CliError::Config(format!("{}: {e}", traj.display())))?;
    let t = t.unwrap_or(rec.steps() as f64 * rec.dt());
    if beta < 0.0 {
        return Err(CliError::Usage(format!("--beta must be nonnegative, got {beta}")));
    }
    let flow = LinearizedFlow::over_times(&rec, s, t).map_err(|e| CliError::Usage(e.to_string()))?;
    let m = flow.malliavin_matrix(beta)?;
    let eig = m.eigenvalues();
    let p = Provenance {
        hash: crate::artifacts::sha256_bytes(&[&bytes, format!("{s}|{t}|{beta}").as_bytes()]),
        seed: rec.model.config().seed,
    };
    let rows: Vec<Vec<String>> = eig.iter().enumerate().map(|(i, l)| vec![i.to_string(), num(*l)]).collect();
    write_csv(out, &p, &["index", "eigenvalue"], &rows)?;
    if let Some(mp) = matrix {
        let file = fs::File::create(mp).map_err(|e| CliError::Failure(format!("cannot write {}: {e}", mp.display())))?;
        m.write_csv(BufWriter::new(file))?;
    }
    let min = eig.first().copied().unwrap_or(f64::NAN);
    let max = eig.last().copied().unwrap_or(f64::NAN);
    Ok(format!("dim {}; eigenvalues in [{min:.3e}, {max:.3e}] on [{s}, {t}] with beta {beta:e}", eig.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ControlMode {
    Hypo,
    Elliptic,
}

pub struct ControlArgs<'a> {
    pub config: &'a Path,
    pub mode: ControlMode,
    pub betas: Option<Vec<f64>>,
    pub steps: Option<usize>,
    pub replicas: Option<usize>,
    pub cut: Option<usize>,
    pub skorokhod: bool,
    pub verify: bool,
    pub out: &'a Path,
}

pub fn control_experiment(a: ControlArgs<'_>) -> Result<String, CliError> {
    let cfg = load_config(a.config)?;
    let model = build_model(&cfg)?;
    let w0 = initial_field(&cfg, &model)?;
    let xi = direction(&cfg, &model)?;
    let p = prov(&cfg);
    match a.mode {
        ControlMode::Elliptic => {
            let cut = a
                .cut
                .or(cfg.experiment.cut)
                .ok_or_else(|| CliError::Config("elliptic control needs experiment.cut or --cut".into()))?;
            let rec = model.simulate(&w0, cfg.t)?;
            let flow = LinearizedFlow::new(&rec, 0, rec.steps())?;
            let run = elliptic_control_run(&flow, &xi, cut).map_err(|e| match e {
                snse_core::Error::Config(m) => CliError::Config(m),
                other => other.into(),
            })?;
            let l0 = run.low_norms[0];
            let rows: Vec<Vec<String>> = run
                .times
                .iter()
                .zip(&run.low_norms)
                .map(|(t, l)| vec![num(*t), num(*l), num((l0 - t / 2.0).max(0.0))])
                .collect();
            write_csv(a.out, &p, &["t", "low_norm", "expected"], &rows)?;
            if !(run.residual_deviation < ELLIPTIC_TOL) {
                return Err(CliError::Failure(format!(
                    "residual recursion deviates from the controlled path by {:.3e}",
                    run.residual_deviation
                )));
            }
            Ok(format!(
                "elliptic control, cut {cut}: ‖π_ℓ ξ‖ = {l0:.6}, zero from t = {:.3}; recursion deviation {:.2e}",
                2.0 * l0,
                run.residual_deviation
            ))
        }
        ControlMode::Hypo => {
            let e = &cfg.experiment;
            let hc = HypoConfig {
                betas: a.betas.clone().unwrap_or_else(|| e.betas.clone()),
                intervals: a.steps.unwrap_or(e.intervals),
                interval_length: e.interval_length,
                replicas: a.replicas.unwrap_or(e.replicas),
                skorokhod: a.skorokhod || e.skorokhod,
                budget: e.budget,
                verify: a.verify,
            };
            if hc.betas.iter().any(|b| !(*b > 0.0)) {
                return Err(CliError::Usage("--beta values must be positive".into()));
            }
            let report = hypo_run(&model, &w0, &xi, &hc)?;
            let scan = hc.betas.len() > 1;
            let mut header = vec!["n", "mean_rho", "p95_rho", "telescope_residual", "ito_cost", "skorokhod_correction", "bound_value"];
            if scan {
                header.insert(0, "beta");
            }
            let mut rows = Vec::new();
            for s in &report.summaries {
                for n in 0..=hc.intervals {
                    let at = |v: &Vec<f64>, k: usize| v.get(k).map(|x| num(*x)).unwrap_or_default();
                    // interval quantities belong to the interval ending at n
                    let k = n.wrapping_sub(1);
                    let mut row = vec![
                        n.to_string(),
                        num(s.mean_rho[n]),
                        num(s.p95_rho[n]),
                        num(s.max_telescope[n]),
                        if n == 0 { String::new() } else { at(&s.mean_ito, k) },
                        if n == 0 || !hc.skorokhod { String::new() } else { at(&s.mean_correction, k) },
                        if n == 0 || !hc.skorokhod { String::new() } else { at(&s.mean_bound, k) },
                    ];
                    if scan {
                        row.insert(0, num(s.beta));
                    }
                    rows.push(row);
                }
            }
            write_csv(a.out, &p, &header, &rows)?;
            let mut json_path = PathBuf::from(a.out);
            json_path.set_extension("json");
            write_json(&json_path, &p, serde_json::to_value(&report).expect("report serializes"))?;
            if !(report.max_telescope < TELESCOPE_TOL) {
                return Err(CliError::Failure(format!(
                    "telescoping identity residual {:.3e} exceeds {TELESCOPE_TOL:e}",
                    report.max_telescope
                )));
            }
            if a.verify && !report.operator_bounds_ok {
                return Err(CliError::Failure("operator-norm or β-monotonicity check failed".into()));
            }
            Ok(format!(
                "{} replicas x {} intervals; best beta {:e} with decay factor {:.4} per unit time; max telescoping residual {:.2e}",
                report.replicas, report.intervals, report.best_beta, report.best_factor, report.max_telescope
            ))
        }
    }
}

pub fn gradient_bound(config: &Path, beta: Option<f64>, steps: Option<usize>, replicas: Option<usize>, out: &Path) -> Result<String, CliError> {
    let cfg = load_config(config)?;
    let model = build_model(&cfg)?;
    let w0 = initial_field(&cfg, &model)?;
    let xi = direction(&cfg, &model)?;
    let e = &cfg.experiment;
    let gc = GradientConfig {
        beta: beta.unwrap_or(e.betas[0]),
        intervals: steps.unwrap_or(e.intervals),
        interval_length: e.interval_length,
        replicas: replicas.unwrap_or(e.replicas),
        fd_eps: e.fd_eps,
        bootstrap: e.bootstrap,
        seed: cfg.seed,
    };
    if !(gc.beta > 0.0) {
        return Err(CliError::Usage("--beta must be positive".into()));
    }
    let report = gradient_bound_estimate(&model, &w0, &xi, TestFunction::Sine(e.phi), &gc)?;
    let p = prov(&cfg);
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                num(r.pathwise),
                num(r.pathwise_se),
                num(r.finite_difference),
                num(r.finite_difference_se),
                num(r.integral_term),
                num(r.residual_term),
            ]
        })
        .collect();
    write_csv(
        out,
        &p,
        &["n", "pathwise", "pathwise_se", "finite_difference", "finite_difference_se", "integral_term", "residual_term"],
        &rows,
    )?;
    let mut json_path = PathBuf::from(out);
    json_path.set_extension("json");
    write_json(&json_path, &p, serde_json::to_value(&report).expect("report serializes"))?;
    Ok(format!(
        "delta = {:.4} (95% CI [{:.4}, {:.4}]){}",
        report.delta,
        report.delta_ci.0,
        report.delta_ci.1,
        if report.delta_positive { "" } else { "; not positive at 95%" }
    ))
}

pub struct CouplingArgs<'a> {
    pub config: &'a Path,
    pub w0a: &'a Path,
    pub w0b: &'a Path,
    pub times: Option<Vec<f64>>,
    pub eps: Option<Vec<f64>>,
    pub ensemble: Option<usize>,
    pub cap: Option<usize>,
    pub out: &'a Path,
}

pub fn coupling_distance(a: CouplingArgs<'_>) -> Result<String, CliError> {
    let cfg = load_config(a.config)?;
    let model = build_model(&cfg)?;
    let wa = read_field(a.w0a, &model)?;
    let wb = read_field(a.w0b, &model)?;
    let times = a.times.unwrap_or_else(|| cfg.experiment.times.clone());
    let eps = a.eps.unwrap_or_else(|| cfg.experiment.eps.clone());
    if times.iter().any(|t| *t < 0.0) || eps.iter().any(|e| *e <= 0.0) {
        return Err(CliError::Usage("--T must be nonnegative and --eps positive".into()));
    }
    let rows = nse_coupling_distance(
        &model,
        &wa,
        &wb,
        &times,
        &eps,
        a.ensemble.unwrap_or(cfg.experiment.ensemble),
        a.cap.unwrap_or(cfg.experiment.cap),
    )?;
    let p = prov(&cfg);
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![num(r.t), num(r.eps), num(r.distance), r.nsamples.to_string()])
        .collect();
    write_csv(a.out, &p, &["T", "eps", "distance", "nsamples"], &table)?;
    Ok(format!("{} (T, eps) pairs, {} samples per side", rows.len(), rows.first().map(|r| r.nsamples).unwrap_or(0)))
}

pub struct ToyArgs<'a> {
    pub system: &'a str,
    pub x0: Option<Vec<f64>>,
    pub times: Option<Vec<f64>>,
    pub eps: Option<Vec<f64>>,
    pub gammas: Option<Vec<f64>>,
    pub ensemble: Option<usize>,
    pub seed: u64,
    pub out: &'a Path,
}

pub fn asf_toy(a: ToyArgs<'_>) -> Result<String, CliError> {
    let system: ToySystem = a.system.parse().map_err(|e: snse_core::Error| CliError::Usage(e.to_string()))?;
    let mut tc = ToyConfig {
        seed: a.seed,
        ..ToyConfig::default()
    };
    if let Some(t) = a.times {
        tc.times = t;
    }
    if let Some(e) = a.eps {
        tc.eps = e;
    }
    if let Some(g) = a.gammas {
        tc.gammas = g;
    }
    if let Some(n) = a.ensemble {
        tc.ensemble = n;
    }
    let x0 = match a.x0 {
        Some(x) => x,
        None => {
            let mut x = vec![0.0; system.dim()];
            if system != ToySystem::OuChain {
                x[0] = 0.3;
                x[1] = 0.2;
            }
            x
        }
    };
    let table = asf_probe_toy(system, &x0, &tc).map_err(|e| CliError::Usage(e.to_string()))?;
    let p = Provenance {
        hash: sha256_args(&[
            "asf-toy",
            a.system,
            &format!("{x0:?}|{:?}|{:?}|{:?}|{}", tc.times, tc.eps, tc.gammas, tc.ensemble),
        ]),
        seed: a.seed,
    };
    let phi_name = |phi: &snse_core::metrics::ToyFunction| match phi {
        snse_core::metrics::ToyFunction::Sine(a) => format!("sin({};{})", a[0], a[1]),
        snse_core::metrics::ToyFunction::SmoothSign(w) => format!("tanh(y/{w})"),
    };
    let grad_rows: Vec<Vec<String>> = table
        .gradients
        .iter()
        .map(|r| {
            vec![
                num(r.t),
                phi_name(&r.phi),
                format!("xi{}", dirs_label(&r.xi)),
                num(r.mean),
                num(r.se),
                num(r.sup_norm),
                num(r.lipschitz),
                num(r.tangent_bound),
                num(r.exp_bound),
            ]
        })
        .collect();
    write_csv(
        &a.out.join("gradients.csv"),
        &p,
        &["t", "phi", "xi", "mean", "se", "sup_norm", "lipschitz", "tangent_bound", "exp_bound"],
        &grad_rows,
    )?;
    let sign_rows: Vec<Vec<String>> = table
        .sign_probe
        .iter()
        .map(|r| vec![num(r.width), num(r.t), num(r.smoothed), num(r.phi), num(r.grad_y), num(r.se)])
        .collect();
    write_csv(&a.out.join("sign.csv"), &p, &["width", "t", "smoothed", "phi", "grad_y", "se"], &sign_rows)?;
    let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
    let gamma_rows: Vec<Vec<String>> = table
        .gamma_scan
        .iter()
        .map(|r| {
            vec![
                num(r.gamma),
                r.n.to_string(),
                num(r.t),
                num(r.eps),
                num(r.distance),
                opt(r.synchronous),
                opt(r.gaussian_tv),
            ]
        })
        .collect();
    write_csv(
        &a.out.join("gamma_scan.csv"),
        &p,
        &["gamma", "n", "t", "eps", "distance", "synchronous", "gaussian_tv"],
        &gamma_rows,
    )?;
    write_json(
        &a.out.join("summary.json"),
        &p,
        json!({"system": table.system, "fit": table.fit, "constant": table.constant, "exp_bound_holds": table.exp_bound_holds}),
    )?;
    Ok(format!(
        "{:?}: fit c0 = {:.4}, c1 = {:.4}; bound constant {:.4}; e^(-t) bound {}",
        system,
        table.fit.0,
        table.fit.1,
        table.constant,
        if table.exp_bound_holds { "holds" } else { "not asserted" }
    ))
}

fn dirs_label(xi: &[f64]) -> String {
    let nz: Vec<usize> = xi.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
    match nz.as_slice() {
        [i] => format!("[e{i}]"),
        [0, 1] => "[diag]".into(),
        _ => "[rough]".into(),
    }
}

pub fn field_json(w: &VorticityField) -> Value {
    serde_json::to_value(w.to_json()).expect("field serializes")
}
