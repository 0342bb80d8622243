//! The closed-form maximizer of `-<P, F>` over the normalization ellipsoid
//! against the best of many sampled points.

use lnlab::control::{hamiltonian_maximizer, hamiltonian_value, sample_ellipsoid};
use lnlab::normalization::{ellipsoid_residual, LnParams, NormKind};
use lnlab::numerics::{normal_matrix, normal_vec, Matrix, RngStream};

fn main() -> lnlab::Result<()> {
    let (d, n) = (5, 3);
    let mut rng = RngStream::new(4, 0).rng();
    let p = normal_matrix(&mut rng, d, n, 1.0);
    let gamma: Vec<f64> = normal_vec(&mut rng, d, 1.0).into_iter().map(|g| g + g.signum() * 0.2).collect();
    let beta = normal_vec(&mut rng, d, 0.5);
    let ln = LnParams {
        gamma: gamma.clone(),
        beta: beta.clone(),
        epsilon: 0.0,
        kind: NormKind::LayerNorm,
    };

    let f = hamiltonian_maximizer(&p, &gamma, &beta)?;
    let best = hamiltonian_value(&p, &f);
    for j in 0..n {
        println!("column {j}: ellipsoid residual {:.2e}", ellipsoid_residual(f.col(j), &ln)?);
    }
    let mut sampled = f64::NEG_INFINITY;
    for _ in 0..100_000 {
        let cols: Vec<Vec<f64>> = (0..n).map(|_| sample_ellipsoid(&mut rng, &ln)).collect();
        sampled = sampled.max(hamiltonian_value(&p, &Matrix::from_columns(&cols)));
    }
    println!("maximizer {best:.8}, best of 100000 samples {sampled:.8}");
    Ok(())
}
