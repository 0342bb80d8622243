//! Exact `W_2` between two input clouds and between their images under a
//! Peri model, against the propagation bound, for several step sizes.

use lnlab::diagnostics::wasserstein_stability_check;
use lnlab::model::{random_model, ModelConfig, Placement};
use lnlab::numerics::{normal_matrix, wasserstein_exact, Matrix, RngStream};

fn main() -> lnlab::Result<()> {
    let base = ModelConfig {
        depth: 8,
        placement: Placement::Peri,
        ..ModelConfig::default()
    };
    let params = random_model(&base, &mut RngStream::new(6, 0).rng());
    let mut rng = RngStream::new(6, 1).rng();
    let mu: Vec<Matrix> = (0..32).map(|_| normal_matrix(&mut rng, base.d, base.n, 1.0)).collect();
    let nu: Vec<Matrix> = (0..32)
        .map(|_| normal_matrix(&mut rng, base.d, base.n, 1.0).map(|v| v + 0.5))
        .collect();
    println!("input W2 {:.6}", wasserstein_exact(&mu, &nu, 2.0)?);
    for delta_t in [1.0, 0.5, 0.1] {
        let cfg = ModelConfig { delta_t, ..base.clone() };
        let r = wasserstein_stability_check(&mu, &nu, &params, &cfg, 2.0)?;
        println!("dt={delta_t:<4} output W2 {:.6}  bound {:.4}  margin {:.4}", r.lhs, r.rhs, r.margin);
    }
    Ok(())
}
