// scratch: solver pipeline diagnostics
use vortices::field::curvature;
use vortices::geometry::{make_torus, LambdaSpec};
use vortices::solver::*;
use vortices::target::WeightModel;
use vortices::vortex::*;
use std::f64::consts::PI;
use std::time::Instant;

fn main() {
    let geom = make_torus(32, 32, 1.0, 1.0, &LambdaSpec::Constant(1.0)).unwrap();
    let model = WeightModel::vortex(1, 4.0 * PI);
    let opts = SolveOptions { newton_tol: 1e-7, ..Default::default() };

    let t0 = Instant::now();
    let r = solve_vortex(&geom, &model, &[1], &InitSpec::Random { amplitude: 0.3 }, &opts);
    match &r {
        Ok((state, rec)) => {
            let b = energy_identity(&geom, state, &model).unwrap();
            let zc = zero_count(&geom, state, &model, default_zero_threshold(&model));
            let f = curvature(&geom, &state.a).unwrap();
            let fmax = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let fmin = f.iter().cloned().fold(f64::INFINITY, f64::min);
            let amax = state.a.a_s.iter().chain(state.a.a_t.iter()).cloned().fold(0.0f64, |a, b| a.max(b.abs()));
            println!("d=1 32^2: conv={} E={:.4} pairing={:.4} zeros={:?} f in [{:.2},{:.2}] max|a|={:.2} time={:?}",
                rec.converged, b.e, b.pairing, zc, fmin, fmax, amax, t0.elapsed());
        }
        Err(e) => println!("d=1 error: {e}"),
    }

    // Same with prescribed zero at center
    let t0 = Instant::now();
    let r = solve_vortex(&geom, &model, &[1], &InitSpec::Zeros { points: vec![(0.52, 0.48)] }, &opts);
    match &r {
        Ok((state, rec)) => {
            let b = energy_identity(&geom, state, &model).unwrap();
            let zc = zero_count(&geom, state, &model, default_zero_threshold(&model));
            let f = curvature(&geom, &state.a).unwrap();
            let fmax = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let amax = state.a.a_s.iter().chain(state.a.a_t.iter()).cloned().fold(0.0f64, |a, b| a.max(b.abs()));
            println!("d=1 zeros-init: conv={} E={:.4} pairing={:.4} zeros={:?} fmax={:.2} max|a|={:.2} time={:?}",
                rec.converged, b.e, b.pairing, zc, fmax, amax, t0.elapsed());
        }
        Err(e) => println!("d=1 zeros error: {e}"),
    }
}
