//! One input through the four normalization placements: per-layer mean
//! absolute value of the hidden state.

use lnlab::diagnostics::layer_moments;
use lnlab::model::{model_forward, random_model, ModelConfig, Placement};
use lnlab::numerics::{normal_matrix, RngStream};

fn main() -> lnlab::Result<()> {
    let depth = 16;
    let base = ModelConfig {
        d: 8,
        n: 4,
        depth,
        ..ModelConfig::default()
    };
    let x0 = normal_matrix(&mut RngStream::new(1, 0).rng(), base.d, base.n, 1.0);

    let mut columns = Vec::new();
    for placement in Placement::ALL {
        let cfg = ModelConfig { placement, ..base.clone() };
        let params = random_model(&cfg, &mut RngStream::new(1, 1).rng());
        columns.push(layer_moments(&model_forward(&x0, &params, &cfg)?)?);
    }
    print!("{:>5}", "layer");
    for p in Placement::ALL {
        print!(" {:>12}", p.as_str());
    }
    println!();
    for layer in 0..=depth {
        print!("{layer:>5}");
        for col in &columns {
            print!(" {:>12.4e}", col[layer].ma);
        }
        println!();
    }
    Ok(())
}
