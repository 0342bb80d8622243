//! Rescaling a sublayer's weights: Peri leaves the stage sensitivity
//! unchanged, Pre scales `(S - I)` by the product of the factors.

use lnlab::diagnostics::rescale_invariance_test;
use lnlab::ffn::Activation;
use lnlab::model::{model_forward, random_model, ModelConfig, Placement, Sublayer};
use lnlab::numerics::{normal_matrix, RngStream};

fn main() -> lnlab::Result<()> {
    let scales = [(10.0, 10.0), (0.1, 7.0), (1e3, 1e-2)];
    for epsilon in [0.0, 1e-5] {
        for placement in [Placement::Peri, Placement::Pre] {
            let cfg = ModelConfig {
                placement,
                epsilon,
                activation: Activation::Relu,
                ..ModelConfig::default()
            };
            let mut rng = RngStream::new(3, 0).rng();
            let params = random_model(&cfg, &mut rng);
            let x = normal_matrix(&mut rng, cfg.d, cfg.n, 1.0);
            let tape = model_forward(&x, &params, &cfg)?;
            for sub in [Sublayer::Attention, Sublayer::Ffn] {
                for (c1, c2) in scales {
                    let o = rescale_invariance_test(&tape, 1, (c1, c2), sub)?;
                    println!(
                        "eps={epsilon:<6e} {placement:<4} {:<9} c=({c1}, {c2}) max dev {:<10.3e} ratio {:.6} (c1c2 = {:.6})",
                        format!("{sub:?}"),
                        o.max_abs_dev,
                        o.scale_ratio,
                        c1 * c2
                    );
                }
            }
        }
    }
    Ok(())
}
