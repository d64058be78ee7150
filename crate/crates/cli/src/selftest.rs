//! Fast invariant checks that exercise every module once.

use nalgebra::DMatrix;

use snse_core::geometry::{classify, examples, Classification};
use snse_core::integrator::{read_trajectory, write_trajectory};
use snse_core::metrics::{brute_force_transport, solve_transport};
use snse_core::rng::StreamKey;
use snse_core::{IntegratorConfig, LinearizedFlow, Model, NoiseModel, SpectralGrid, VorticityField};

use crate::CliError;

type Check = (&'static str, Result<bool, snse_core::Error>);

fn checks() -> Vec<Check> {
    let mut out: Vec<Check> = Vec::new();
    out.push((
        "forcing classification of the three reference sets",
        (|| {
            Ok(classify(&examples::full_space())?.classification == Classification::FullSpace
                && classify(&examples::finite_ou())?.classification == Classification::FiniteOU
                && classify(&examples::sublattice())?.classification == Classification::ProperSublattice)
        })(),
    ));
    out.push((
        "FFT nonlinearity matches direct sum and conserves both invariants",
        (|| {
            let grid = SpectralGrid::new(5)?;
            let mut rng = StreamKey::new(7, 0).aux(0);
            let w = VorticityField::random(grid, &mut rng, 1.0);
            let fft = w.nonlinearity_fft();
            let direct = w.nonlinearity_direct();
            let scale = w.norm() * fft.norm();
            let energy = w.map_diag(|k2| 1.0 / k2);
            Ok(fft.axpy(-1.0, &direct).norm() < 1e-10 * fft.norm().max(1.0)
                && fft.inner(&w).abs() < 1e-11 * scale
                && fft.inner(&energy).abs() < 1e-11 * scale)
        })(),
    ));
    out.push((
        "trajectory round-trip and Jacobian adjoint pairing",
        (|| {
            let grid = SpectralGrid::new(3)?;
            let model = Model::new(
                grid.clone(),
                IntegratorConfig::new(0.3, 0.02, 11),
                NoiseModel::uniform(&examples::full_space(), 1.0)?,
            )?;
            let mut rng = StreamKey::new(11, 0).aux(0);
            let w0 = VorticityField::random(grid.clone(), &mut rng, 1.0);
            let rec = model.simulate_replica(&w0, 30, 0)?;
            let mut buf = Vec::new();
            write_trajectory(&rec, &mut buf)?;
            let back = read_trajectory(buf.as_slice())?;
            let flow = LinearizedFlow::new(&rec, 0, 30)?;
            let xi = VorticityField::random(grid.clone(), &mut rng, 1.0).to_real();
            let eta = VorticityField::random(grid, &mut rng, 1.0).to_real();
            let lhs = flow.jacobian_apply(&xi)?.dot(&eta);
            let rhs = xi.dot(&flow.jacobian_adjoint_apply(&eta)?);
            Ok(back.same_path(&rec) && (lhs - rhs).abs() < 1e-10 * xi.norm() * eta.norm())
        })(),
    ));
    out.push((
        "transport simplex matches spanning-tree enumeration",
        (|| {
            let supply = [0.2, 0.5, 0.3];
            let demand = [0.4, 0.1, 0.25, 0.25];
            let cost = DMatrix::from_fn(3, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 / 4.0);
            let plan = solve_transport(&supply, &demand, &cost)?;
            let brute = brute_force_transport(&supply, &demand, &cost)?;
            Ok((plan.cost - brute).abs() < 1e-12)
        })(),
    ));
    out
}

pub fn run() -> Result<String, CliError> {
    let results = checks();
    let mut failed = 0;
    for (name, r) in &results {
        let status = match r {
            Ok(true) => "ok",
            Ok(false) => "FAIL",
            Err(_) => "ERROR",
        };
        if status != "ok" {
            failed += 1;
        }
        match r {
            Err(e) => println!("{status:5} {name}: {e}"),
            _ => println!("{status:5} {name}"),
        }
    }
    if failed > 0 {
        return Err(CliError::Failure(format!("{failed} of {} self-checks failed", results.len())));
    }
    Ok(format!("all {} self-checks passed", results.len()))
}
