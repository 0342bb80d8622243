//! A flow kept on the normalization ellipsoid by tangent projection. Without
//! retraction the Euler iterates leave it at a rate of order two in the step.

use lnlab::control::{drift_order, integrate_projected_flow, per_step_drift, sample_ellipsoid};
use lnlab::normalization::{ellipsoid_residual, LnParams, NormKind};
use lnlab::numerics::RngStream;

fn main() -> lnlab::Result<()> {
    let ln = LnParams {
        gamma: vec![1.0, 0.5, 2.0, 1.5],
        beta: vec![0.2, -0.1, 0.0, 0.3],
        epsilon: 0.0,
        kind: NormKind::LayerNorm,
    };
    let x0 = sample_ellipsoid(&mut RngStream::new(5, 0).rng(), &ln);
    let field = |x: &[f64]| vec![x[1].sin(), x[2] - x[0], 0.3 * x[0] * x[3], -x[1]];

    let traj = integrate_projected_flow(&x0, field, &ln, 1000, 0.01, true)?;
    let worst = traj
        .iter()
        .map(|x| ellipsoid_residual(x, &ln).map(f64::abs))
        .collect::<lnlab::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    println!("retracted, 1000 steps: max residual {worst:.2e}");

    let hs = [0.004, 0.002, 0.001, 0.0005];
    for h in hs {
        println!("h={h:<7} drift per step {:.4e}", per_step_drift(&x0, field, &ln, 50, h)?);
    }
    println!("fitted order {:.3}", drift_order(&x0, field, &ln, 50, &hs)?);
    Ok(())
}
