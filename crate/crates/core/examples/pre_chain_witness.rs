//! The normalized attention chain: its product bound, and how far its mean
//! absolute value outgrows a Peri model of the same depth.

use lnlab::diagnostics::{pre_exponential_bound, unboundedness_witness, WitnessConfig};

fn main() -> lnlab::Result<()> {
    for depth in [4, 8, 16, 32] {
        let wc = WitnessConfig {
            depth,
            ..WitnessConfig::default()
        };
        let w = unboundedness_witness(0, &wc)?;
        let (bound, factors) = pre_exponential_bound(&w.chain, &w.layers, wc.delta_t);
        let product: f64 = factors.iter().product();
        println!(
            "D={depth:<3} chain MA {:<11.4e} bound {:<11.4e} factor product {:<11.4e} peri MA {:<9.4e} ratio {:.2}",
            w.pre_ma, bound.rhs, product, w.peri_ma, w.ratio
        );
    }
    Ok(())
}
