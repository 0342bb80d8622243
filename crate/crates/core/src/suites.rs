//! Seeded batches of checks that the CLI, the examples and the acceptance
//! suite share. Every instance draws from its own stream, so results do not
//! depend on thread count or on which other instances run.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    datawise_variance_all, layer_increments, layer_moments, pathwise_stability_check, peri_growth_check,
    pre_exponential_bound, unboundedness_witness, wasserstein_stability_check, BoundReport, WitnessConfig,
};
use crate::error::{Error, Result};
use crate::model::{model_forward, random_model, zero_model, BlockParams, ModelConfig, Placement};
use crate::numerics::{normal_matrix, wasserstein_bruteforce, wasserstein_exact, Matrix, RngStream};
use crate::report::{BoundRow, MomentRow};

/// Stream tags, combined with an instance index.
const PARAMS: u64 = 1;
const INPUTS: u64 = 2;
const CLOUDS: u64 = 3;

pub fn instance_stream(seed: u64, tag: u64, instance: usize) -> RngStream {
    RngStream::new(seed, (tag << 32) | instance as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    #[default]
    Random,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundSuite {
    /// Mean-absolute and variance growth of one run.
    Growth,
    /// Entrywise variance across a batch of inputs.
    Datawise,
    /// Distance between two runs.
    Pathwise,
    /// The normalized chain and the growth comparison against Peri.
    Chain,
}

impl BoundSuite {
    pub const ALL: [BoundSuite; 4] = [BoundSuite::Growth, BoundSuite::Datawise, BoundSuite::Pathwise, BoundSuite::Chain];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundOptions {
    pub suites: Vec<BoundSuite>,
    pub init: Init,
    /// Multiplies every drawn input.
    pub input_scale: f64,
    pub datawise_samples: usize,
    /// `‖W_i‖₂` of the chain layers.
    pub chain_w_norm: f64,
    /// Pre/Peri ratio the growth comparison must reach.
    pub witness_ratio: f64,
}

impl Default for BoundOptions {
    fn default() -> Self {
        BoundOptions {
            suites: BoundSuite::ALL.to_vec(),
            init: Init::Random,
            input_scale: 1.0,
            datawise_samples: 16,
            chain_w_norm: 3.0,
            witness_ratio: 10.0,
        }
    }
}

pub fn instance_model(cfg: &ModelConfig, init: Init, seed: u64, instance: usize) -> Vec<BlockParams> {
    match init {
        Init::Random => random_model(cfg, &mut instance_stream(seed, PARAMS, instance).rng()),
        Init::Zero => zero_model(cfg),
    }
}

pub fn instance_inputs(cfg: &ModelConfig, count: usize, scale: f64, seed: u64, instance: usize) -> Vec<Matrix> {
    let mut rng = instance_stream(seed, INPUTS, instance).rng();
    (0..count)
        .map(|_| normal_matrix(&mut rng, cfg.d, cfg.n, 1.0).scale(scale))
        .collect()
}

fn peri_rows(cfg: &ModelConfig, opts: &BoundOptions, seed: u64, instance: usize) -> Result<Vec<BoundReport>> {
    let params = instance_model(cfg, opts.init, seed, instance);
    let samples = opts.datawise_samples.max(2);
    let inputs = instance_inputs(cfg, samples, opts.input_scale, seed, instance);
    let mut out = Vec::new();
    if opts.suites.contains(&BoundSuite::Growth) {
        out.extend(peri_growth_check(&model_forward(&inputs[0], &params, cfg)?)?);
    }
    if opts.suites.contains(&BoundSuite::Datawise) {
        let worst = datawise_variance_all(&inputs, &params, cfg)?
            .into_iter()
            .map(|(_, r)| r)
            .min_by(|a, b| a.margin.total_cmp(&b.margin))
            .expect("at least one entry");
        out.push(worst);
    }
    if opts.suites.contains(&BoundSuite::Pathwise) {
        out.push(pathwise_stability_check(&inputs[0], &inputs[1], &params, cfg)?);
    }
    Ok(out)
}

fn witness_config(cfg: &ModelConfig, opts: &BoundOptions) -> WitnessConfig {
    WitnessConfig {
        d: cfg.d,
        n: cfg.n,
        k: cfg.k,
        depth: cfg.depth,
        delta_t: cfg.delta_t,
        w_norm: opts.chain_w_norm,
        ..WitnessConfig::default()
    }
}

fn pre_rows(cfg: &ModelConfig, opts: &BoundOptions, seed: u64, instance: usize) -> Result<Vec<BoundReport>> {
    if !opts.suites.contains(&BoundSuite::Chain) {
        return Ok(Vec::new());
    }
    let wc = witness_config(cfg, opts);
    let w = unboundedness_witness(seed.wrapping_add(instance as u64), &wc)?;
    let (chain, _) = pre_exponential_bound(&w.chain, &w.layers, cfg.delta_t);
    let witness = BoundReport {
        name: "pre_witness",
        lhs: opts.witness_ratio * w.peri_ma,
        rhs: w.pre_ma,
        margin: w.pre_ma - opts.witness_ratio * w.peri_ma,
        ..chain.clone()
    };
    Ok(vec![chain, witness])
}

/// Bound rows for every `(depth, Δt, instance)`. Peri runs the growth,
/// datawise and pathwise checks; Pre runs the chain checks.
pub fn bound_suite(
    base: &ModelConfig,
    opts: &BoundOptions,
    depths: &[usize],
    delta_ts: &[f64],
    seed: u64,
    instances: usize,
) -> Result<Vec<BoundRow>> {
    if !matches!(base.placement, Placement::Peri | Placement::Pre) {
        return Err(Error::Config(format!(
            "bounds need peri or pre placement, got {}",
            base.placement
        )));
    }
    let mut jobs = Vec::new();
    for &depth in depths {
        for &delta_t in delta_ts {
            let cfg = ModelConfig {
                depth,
                delta_t,
                ..base.clone()
            };
            cfg.validate()?;
            for i in 0..instances {
                jobs.push((cfg.clone(), i));
            }
        }
    }
    let per: Vec<Result<Vec<BoundRow>>> = jobs
        .into_par_iter()
        .map(|(cfg, i)| {
            let reports = match cfg.placement {
                Placement::Peri => peri_rows(&cfg, opts, seed, i)?,
                _ => pre_rows(&cfg, opts, seed, i)?,
            };
            Ok(reports
                .into_iter()
                .map(|report| BoundRow { report, seed })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for r in per {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Per-layer moments of one model on one input.
pub fn moment_rows(cfg: &ModelConfig, init: Init, seed: u64) -> Result<Vec<MomentRow>> {
    let params = instance_model(cfg, init, seed, 0);
    let x0 = instance_inputs(cfg, 1, 1.0, seed, 0).remove(0);
    let tape = model_forward(&x0, &params, cfg)?;
    Ok(layer_moments(&tape)?
        .into_iter()
        .map(|moments| MomentRow {
            moments,
            seed,
            placement: cfg.placement,
            delta_t: cfg.delta_t,
        })
        .collect())
}

/// Layer increments at two steps on identical weights and input.
pub fn increment_pair(cfg: &ModelConfig, seed: u64, instance: usize, small: f64, large: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let params = instance_model(cfg, Init::Random, seed, instance);
    let x0 = instance_inputs(cfg, 1, 1.0, seed, instance).remove(0);
    let run = |dt: f64| -> Result<Vec<f64>> {
        let c = ModelConfig {
            delta_t: dt,
            ..cfg.clone()
        };
        Ok(layer_increments(&model_forward(&x0, &params, &c)?))
    };
    Ok((run(small)?, run(large)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OtOptions {
    /// Cloud size of the bound check.
    pub points: usize,
    /// Cloud size of the brute-force cross-check.
    pub bruteforce_points: usize,
    pub p: f64,
    /// Agreement required between matching and enumeration.
    pub agreement: f64,
    /// Shift between the two input clouds.
    pub shift: f64,
}

impl Default for OtOptions {
    fn default() -> Self {
        OtOptions {
            points: 32,
            bruteforce_points: 5,
            p: 2.0,
            agreement: 1e-12,
            shift: 0.5,
        }
    }
}

fn cloud(cfg: &ModelConfig, seed: u64, instance: usize, side: usize, size: usize, shift: f64) -> Vec<Matrix> {
    let mut rng = instance_stream(seed, CLOUDS, 2 * instance + side).rng();
    (0..size)
        .map(|_| normal_matrix(&mut rng, cfg.d, cfg.n, 1.0).map(|v| v + shift))
        .collect()
}

/// Matching-versus-enumeration rows (`lhs = |difference|`, `rhs` = required
/// agreement) followed by transport bound rows, per instance.
pub fn ot_suite(cfg: &ModelConfig, opts: &OtOptions, seed: u64, instances: usize) -> Result<Vec<BoundRow>> {
    if cfg.placement != Placement::Peri {
        return Err(Error::Config(format!("ot-check needs peri placement, got {}", cfg.placement)));
    }
    cfg.validate()?;
    let per: Vec<Result<Vec<BoundRow>>> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let a = cloud(cfg, seed, i, 0, opts.bruteforce_points, 0.0);
            let b = cloud(cfg, seed, i, 1, opts.bruteforce_points, opts.shift);
            let fast = wasserstein_exact(&a, &b, opts.p)?;
            let slow = wasserstein_bruteforce(&a, &b, opts.p)?;
            let diff = (fast - slow).abs();
            let cross = BoundReport {
                name: "ot_bruteforce",
                placement: cfg.placement,
                depth: 0,
                delta_t: 0.0,
                gamma_max: 0.0,
                beta_max: 0.0,
                nd: cfg.nd(),
                lhs: diff,
                rhs: opts.agreement,
                margin: opts.agreement - diff,
            };
            let params = instance_model(cfg, Init::Random, seed, i);
            let mu = cloud(cfg, seed, i, 0, opts.points, 0.0);
            let nu = cloud(cfg, seed, i, 1, opts.points, opts.shift);
            let bound = wasserstein_stability_check(&mu, &nu, &params, cfg, opts.p)?;
            Ok(vec![BoundRow { report: cross, seed }, BoundRow { report: bound, seed }])
        })
        .collect();
    let mut rows = Vec::new();
    for r in per {
        rows.extend(r?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_with_zero_inputs_has_degenerate_lhs() {
        let cfg = ModelConfig::default();
        let opts = BoundOptions {
            init: Init::Zero,
            input_scale: 0.0,
            suites: vec![BoundSuite::Growth, BoundSuite::Datawise, BoundSuite::Pathwise],
            ..BoundOptions::default()
        };
        let rows = bound_suite(&cfg, &opts, &[4], &[1.0], 0, 3).unwrap();
        assert_eq!(rows.len(), 12);
        for r in rows {
            assert_eq!(r.report.lhs, 0.0);
            assert_eq!(r.report.margin, r.report.rhs);
        }
    }

    #[test]
    fn suites_do_not_depend_on_instance_count() {
        let cfg = ModelConfig::default();
        let opts = BoundOptions::default();
        let a = bound_suite(&cfg, &opts, &[3], &[1.0], 9, 2).unwrap();
        let b = bound_suite(&cfg, &opts, &[3], &[1.0], 9, 4).unwrap();
        assert_eq!(a[..], b[..a.len()]);
    }

    #[test]
    fn off_placement_has_no_bounds() {
        let cfg = ModelConfig {
            placement: Placement::Off,
            ..ModelConfig::default()
        };
        assert!(bound_suite(&cfg, &BoundOptions::default(), &[2], &[1.0], 0, 1).is_err());
    }

    #[test]
    fn ot_rows_pass_on_small_runs() {
        let cfg = ModelConfig::default();
        let opts = OtOptions {
            points: 8,
            ..OtOptions::default()
        };
        let rows = ot_suite(&cfg, &opts, 1, 3).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.report.margin >= -1e-9));
    }

    #[test]
    fn step_shrinks_increments() {
        let cfg = ModelConfig {
            depth: 6,
            ..ModelConfig::default()
        };
        let (small, large) = increment_pair(&cfg, 2, 0, 0.1, 1.0).unwrap();
        assert_eq!(small.len(), 6);
        assert!(small.iter().zip(&large).all(|(s, l)| s < l));
    }
}
