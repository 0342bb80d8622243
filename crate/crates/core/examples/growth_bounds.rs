//! Growth, datawise spread and pathwise distance of random Peri models
//! against their closed-form bounds, at two step sizes.

use lnlab::diagnostics::{datawise_variance_all, pathwise_stability_check, peri_growth_check, BoundReport};
use lnlab::model::{model_forward, random_model, ModelConfig, Placement};
use lnlab::numerics::{normal_matrix, Matrix, RngStream};

fn show(r: &BoundReport) {
    println!(
        "{:<13} D={:<3} dt={:<4} lhs={:<12.4e} rhs={:<12.4e} margin={:.4e}",
        r.name, r.depth, r.delta_t, r.lhs, r.rhs, r.margin
    );
}

fn main() -> lnlab::Result<()> {
    for delta_t in [1.0, 0.1] {
        let cfg = ModelConfig {
            depth: 32,
            delta_t,
            placement: Placement::Peri,
            ..ModelConfig::default()
        };
        let params = random_model(&cfg, &mut RngStream::new(2, 0).rng());
        let mut rng = RngStream::new(2, 1).rng();
        let inputs: Vec<Matrix> = (0..32).map(|_| normal_matrix(&mut rng, cfg.d, cfg.n, 1.0)).collect();

        for r in peri_growth_check(&model_forward(&inputs[0], &params, &cfg)?)? {
            show(&r);
        }
        let worst = datawise_variance_all(&inputs, &params, &cfg)?
            .into_iter()
            .min_by(|a, b| a.1.margin.total_cmp(&b.1.margin))
            .expect("entries");
        print!("entry {:?}  ", worst.0);
        show(&worst.1);
        show(&pathwise_stability_check(&inputs[0], &inputs[1], &params, &cfg)?);
    }
    Ok(())
}
