//! Finite differences against every analytic derivative on a handful of
//! random instances.
//!
//!     cargo run --release --example gradcheck -- [instances] [seed]

use lnlab::gradcheck::{gradcheck_suite, GRADCHECK_TOLERANCE};

fn main() -> lnlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let instances: usize = args.next().map_or(12, |a| a.parse().expect("instances"));
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));
    let rows = gradcheck_suite(seed, instances)?;

    let mut checks: Vec<&str> = Vec::new();
    for r in &rows {
        if !checks.contains(&r.check) {
            checks.push(r.check);
        }
    }
    println!("{:<22} {:>12}", "check", "max rel err");
    for c in checks {
        let worst = rows
            .iter()
            .filter(|r| r.check == c)
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max);
        println!("{c:<22} {worst:>12.3e}");
    }
    let failing = rows.iter().filter(|r| !r.pass).count();
    println!("{failing} of {} rows above {GRADCHECK_TOLERANCE:e}", rows.len());
    Ok(())
}
