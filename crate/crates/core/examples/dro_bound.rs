//! A deterministic loss bound under input shift, built from a trained Peri
//! model's loss and output-norm gains.

use lnlab::diagnostics::{c_hat, dro_bound, output_norm_extrema};
use lnlab::training::{train_run, TrainConfig};

fn main() -> lnlab::Result<()> {
    let tc = TrainConfig {
        steps: 100,
        ..TrainConfig::default()
    };
    let outcome = train_run(&tc)?;
    let cfg = &tc.cfg;
    let (gamma_max, _) = output_norm_extrema(&outcome.final_params);
    println!("final training loss {:.4e}, output gain {gamma_max:.3}", outcome.final_loss);
    for radius in [0.0, 0.1, 1.0] {
        let v = dro_bound(outcome.final_loss, 1.0, radius, c_hat(1.0, cfg.nd()), cfg.depth, cfg.delta_t, cfg.nd(), gamma_max)?;
        println!("radius {radius:<4} worst-case loss <= {v:.4}");
    }
    println!("hand example: {}", dro_bound(1.0, 2.0, 0.5, 1.0, 4, 1.0, 12, 0.25)?);
    Ok(())
}
