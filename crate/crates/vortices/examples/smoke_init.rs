// scratch: eps-continuation slope for CP1 d=1 and d=2
use vortices::geometry::{make_torus, LambdaSpec};
use vortices::solver::*;
use vortices::target::WeightModel;
use std::f64::consts::PI;
use std::time::Instant;

fn main() {
    for (n, d, tauf, tol) in [(64usize, 1i64, 4.0, 3e-4), (64, 2, 8.0, 1e-4), (64, 2, 16.0, 1e-4)] {
        let geom = make_torus(n, n, 1.0, 1.0, &LambdaSpec::Constant(1.0)).unwrap();
        let model = WeightModel::new(2, 1, vec![1, 1], vec![tauf * PI]).unwrap();
        let opts = SolveOptions { newton_tol: tol, ..Default::default() };
        let t0 = Instant::now();
        let r = solve_vortex(&geom, &model, &[d], &InitSpec::Random { amplitude: 0.3 }, &opts);
        let (state, rec) = match r { Ok(x) => x, Err(e) => { println!("solve err: {e}"); continue; } };
        if !rec.converged { println!("{n}^2 d={d}: head not converged"); continue; }
        let schedule = [1.0, 0.5, 0.25, 0.1];
        match epsilon_continuation(&geom, &state, &model, &schedule, &opts) {
            Ok(recs) => {
                let pts: Vec<(f64, f64)> = recs.iter().map(|r| (r.control.ln(), r.sup_mu.ln())).collect();
                let m = pts.len() as f64;
                let sx: f64 = pts.iter().map(|p| p.0).sum();
                let sy: f64 = pts.iter().map(|p| p.1).sum();
                let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
                let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
                let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
                println!("{n}^2 CP1 d={d} tau={tauf}pi: sup_mu per eps: {:?}", recs.iter().map(|r| (r.control, r.sup_mu, r.converged)).collect::<Vec<_>>());
                println!("   slope = {:.3} t={:?}", slope, t0.elapsed());
            }
            Err(e) => println!("{n}^2 d={d} continuation err: {e}"),
        }
    }
}
