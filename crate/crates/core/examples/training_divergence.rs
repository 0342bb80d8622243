//! Divergence counts of a short, aggressive training sweep over placements
//! and weight decay.
//!
//!     cargo run --release --example training_divergence -- [seeds]

use lnlab::model::{ModelConfig, Placement};
use lnlab::training::{stability_trial, TrainConfig};

fn main() -> lnlab::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(8, |a| a.parse().expect("seeds"));
    let base = TrainConfig {
        steps: 100,
        lr: 0.03,
        checkpoint_every: 25,
        cfg: ModelConfig {
            depth: 8,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let seeds: Vec<u64> = (0..seeds).collect();
    let table = stability_trial(
        &base,
        &[Placement::Off, Placement::Pre, Placement::Peri],
        &[0.0, 0.5],
        &seeds,
    )?;
    for (placement, wd, diverged, runs) in table.counts() {
        println!("{placement:<5} weight_decay {wd:<4} diverged {diverged}/{runs}");
    }
    let peri = table.rows.iter().filter(|r| r.placement == Placement::Peri);
    let mean = peri.clone().map(|r| r.outcome.final_loss).sum::<f64>() / peri.count() as f64;
    println!("peri mean final loss {mean:.4e}");
    Ok(())
}
