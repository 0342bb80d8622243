//! Bound checks on forward tapes. Every check reports both sides of its
//! inequality and the margin `rhs - lhs`, so near-violations stay visible.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ffn::Activation;
use crate::model::{
    model_forward, random_model, simplified_pre_chain, stage_jacobian_at, BlockParams, ForwardTape, ModelConfig,
    Placement, PreChainLayer, PreChainOutput, Sublayer,
};
use crate::numerics::{moments, normal_matrix, spectral_norm_default, wasserstein_exact, Matrix, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub name: &'static str,
    pub placement: Placement,
    pub depth: usize,
    pub delta_t: f64,
    pub gamma_max: f64,
    pub beta_max: f64,
    pub nd: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

impl BoundReport {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &'static str,
        placement: Placement,
        depth: usize,
        delta_t: f64,
        gamma_max: f64,
        beta_max: f64,
        nd: usize,
        lhs: f64,
        rhs: f64,
    ) -> Self {
        BoundReport {
            name,
            placement,
            depth,
            delta_t,
            gamma_max,
            beta_max,
            nd,
            lhs,
            rhs,
            margin: rhs - lhs,
        }
    }

    /// Holds up to an absolute rounding slack.
    pub fn holds(&self, slack: f64) -> bool {
        self.margin >= -slack
    }
}

/// Absolute slack granted to every bound for rounding.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerMoments {
    pub layer: usize,
    pub ma: f64,
    pub var: f64,
    pub frob: f64,
}

/// Moments of `X_0 .. X_D`.
pub fn layer_moments(tape: &ForwardTape) -> Result<Vec<LayerMoments>> {
    tape.states
        .iter()
        .enumerate()
        .map(|(layer, x)| {
            let m = moments(x)?;
            Ok(LayerMoments {
                layer,
                ma: m.mean_abs,
                var: m.var,
                frob: m.frob,
            })
        })
        .collect()
}

/// `‖X_{i+1} - X_i‖_F` for every block.
pub fn layer_increments(tape: &ForwardTape) -> Vec<f64> {
    tape.states
        .windows(2)
        .map(|w| w[1].sub(&w[0]).expect("states share a shape").frobenius())
        .collect()
}

/// Largest `|γ|` and `|β|` over the output-side norms of every block.
pub fn output_norm_extrema(params: &[BlockParams]) -> (f64, f64) {
    params
        .iter()
        .flat_map(|b| [&b.ln.attn_out, &b.ln.ffn_out])
        .flatten()
        .fold((0.0f64, 0.0f64), |(g, bt), p| (g.max(p.gamma_max()), bt.max(p.beta_max())))
}

fn require_peri(cfg: &ModelConfig, op: &'static str) -> Result<()> {
    if cfg.placement != Placement::Peri {
        return Err(Error::undefined(op, format!("needs peri placement, got {}", cfg.placement)));
    }
    Ok(())
}

/// Growth envelope `‖X_0‖_F + 2DΔt√(nd)(γ_max+β_max)` on `‖X_D‖_F`.
pub fn growth_envelope(x0_frob: f64, depth: usize, delta_t: f64, nd: usize, gamma_max: f64, beta_max: f64) -> f64 {
    x0_frob + 2.0 * depth as f64 * delta_t * (nd as f64).sqrt() * (gamma_max + beta_max)
}

/// Mean-absolute and variance bounds given the endpoints of a run.
#[allow(clippy::too_many_arguments)]
pub fn peri_growth_bounds(
    x0: &Matrix,
    xd: &Matrix,
    depth: usize,
    delta_t: f64,
    gamma_max: f64,
    beta_max: f64,
) -> Result<[BoundReport; 2]> {
    let nd = x0.len();
    let m = moments(xd)?;
    let sq = (nd as f64).sqrt();
    let ma_rhs = x0.frobenius() / sq + 2.0 * depth as f64 * delta_t * (gamma_max + beta_max);
    let env = growth_envelope(x0.frobenius(), depth, delta_t, nd, gamma_max, beta_max);
    let var_rhs = env * env / (nd as f64 - 1.0);
    Ok([
        BoundReport::new("peri_ma", Placement::Peri, depth, delta_t, gamma_max, beta_max, nd, m.mean_abs, ma_rhs),
        BoundReport::new("peri_var", Placement::Peri, depth, delta_t, gamma_max, beta_max, nd, m.var, var_rhs),
    ])
}

pub fn peri_growth_check(tape: &ForwardTape) -> Result<[BoundReport; 2]> {
    require_peri(&tape.cfg, "peri_growth_check")?;
    let (g, b) = output_norm_extrema(&tape.params);
    peri_growth_bounds(tape.input(), tape.output(), tape.depth(), tape.cfg.delta_t, g, b)
}

/// Population variance of one terminal entry across inputs against the mean
/// squared growth envelope.
pub fn datawise_variance_check(
    inputs: &[Matrix],
    params: &[BlockParams],
    cfg: &ModelConfig,
    entry: (usize, usize),
) -> Result<BoundReport> {
    datawise_variance_all(inputs, params, cfg)?
        .into_iter()
        .find(|(e, _)| *e == entry)
        .map(|(_, r)| r)
        .ok_or(Error::IndexOutOfRange {
            what: "entry",
            index: entry.0 * cfg.n + entry.1,
            len: cfg.nd(),
        })
}

/// The datawise variance bound at every entry `(row, col)`.
pub fn datawise_variance_all(
    inputs: &[Matrix],
    params: &[BlockParams],
    cfg: &ModelConfig,
) -> Result<Vec<((usize, usize), BoundReport)>> {
    require_peri(cfg, "datawise_variance_check")?;
    if inputs.len() < 2 {
        return Err(Error::undefined("datawise_variance_check", "needs at least 2 samples"));
    }
    let (g, b) = output_norm_extrema(params);
    let nd = cfg.nd();
    let mut outs = Vec::with_capacity(inputs.len());
    let mut rhs = 0.0;
    for x in inputs {
        outs.push(model_forward(x, params, cfg)?.output().clone());
        let env = growth_envelope(x.frobenius(), cfg.depth, cfg.delta_t, nd, g, b);
        rhs += env * env;
    }
    let count = inputs.len() as f64;
    rhs /= count;
    let mut reports = Vec::with_capacity(nd);
    for col in 0..cfg.n {
        for row in 0..cfg.d {
            let vals: Vec<f64> = outs.iter().map(|o| o[(row, col)]).collect();
            let mean = vals.iter().sum::<f64>() / count;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            reports.push((
                (row, col),
                BoundReport::new("datawise_var", Placement::Peri, cfg.depth, cfg.delta_t, g, b, nd, var, rhs),
            ));
        }
    }
    Ok(reports)
}

/// `‖X_D^a - X_D^b‖_F ≤ ‖X_0^a - X_0^b‖_F + 4DΔt√(nd)γ_max`.
pub fn pathwise_stability_check(
    x0a: &Matrix,
    x0b: &Matrix,
    params: &[BlockParams],
    cfg: &ModelConfig,
) -> Result<BoundReport> {
    require_peri(cfg, "pathwise_stability_check")?;
    let (g, b) = output_norm_extrema(params);
    let nd = cfg.nd();
    let xa = model_forward(x0a, params, cfg)?;
    let xb = model_forward(x0b, params, cfg)?;
    let lhs = xa.output().sub(xb.output())?.frobenius();
    let rhs = x0a.sub(x0b)?.frobenius() + spread_term(cfg.depth, cfg.delta_t, nd, g);
    Ok(BoundReport::new("pathwise", Placement::Peri, cfg.depth, cfg.delta_t, g, b, nd, lhs, rhs))
}

fn spread_term(depth: usize, delta_t: f64, nd: usize, gamma_max: f64) -> f64 {
    4.0 * depth as f64 * delta_t * (nd as f64).sqrt() * gamma_max
}

/// Norm-equivalence constant between the entrywise `p`-norm and the
/// Frobenius norm; exactly 1 at `p = 2`.
pub fn c_hat(p: f64, nd: usize) -> f64 {
    if p == 2.0 {
        1.0
    } else {
        (nd as f64).powf((0.5 - 1.0 / p).abs())
    }
}

/// Exact `W_p` between pushed-forward clouds against
/// `2^{(p-1)/p} (Ĉ(p) W_p(μ_0, ν_0) + 4DΔt√(nd)γ_max)`.
pub fn wasserstein_stability_check(
    mu0: &[Matrix],
    nu0: &[Matrix],
    params: &[BlockParams],
    cfg: &ModelConfig,
    p: f64,
) -> Result<BoundReport> {
    require_peri(cfg, "wasserstein_stability_check")?;
    let (g, b) = output_norm_extrema(params);
    let nd = cfg.nd();
    let push = |xs: &[Matrix]| -> Result<Vec<Matrix>> {
        xs.iter()
            .map(|x| Ok(model_forward(x, params, cfg)?.output().clone()))
            .collect()
    };
    let w_in = wasserstein_exact(mu0, nu0, p)?;
    let lhs = wasserstein_exact(&push(mu0)?, &push(nu0)?, p)?;
    let rhs = 2f64.powf((p - 1.0) / p) * (c_hat(p, nd) * w_in + spread_term(cfg.depth, cfg.delta_t, nd, g));
    Ok(BoundReport::new("wasserstein", Placement::Peri, cfg.depth, cfg.delta_t, g, b, nd, lhs, rhs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescaleOutcome {
    /// Entrywise deviation between the stage sensitivities before and after.
    pub max_abs_dev: f64,
    /// Least-squares `s` in `(S' - I) ≈ s (S - I)`.
    pub scale_ratio: f64,
}

/// Rescales one sublayer of block `block` and compares the Jacobian of that
/// residual stage, evaluated at the same stage input, before and after.
///
/// Attention scales `(W, V) → (c1 W, c2 V)`; FFN scales `(W1, W2) → (c1 W1,
/// c2 W2)`, which is only a pure rescaling of the output for relu.
pub fn rescale_invariance_test(
    tape: &ForwardTape,
    block: usize,
    (c1, c2): (f64, f64),
    sublayer: Sublayer,
) -> Result<RescaleOutcome> {
    let cfg = &tape.cfg;
    if !matches!(cfg.placement, Placement::Pre | Placement::Peri) {
        return Err(Error::undefined("rescale_invariance_test", "needs pre or peri placement"));
    }
    if !(c1 > 0.0 && c2 > 0.0) {
        return Err(Error::undefined("rescale_invariance_test", "scales must be positive"));
    }
    if block >= tape.depth() {
        return Err(Error::IndexOutOfRange {
            what: "block",
            index: block,
            len: tape.depth(),
        });
    }
    let mut scaled = tape.params[block].clone();
    match sublayer {
        Sublayer::Attention => {
            for h in &mut scaled.attn.heads {
                h.w = h.w.scale(c1);
                h.v = h.v.scale(c2);
            }
        }
        Sublayer::Ffn => {
            if scaled.ffn.activation == Activation::Tanh && c1 != 1.0 {
                return Err(Error::undefined(
                    "rescale_invariance_test",
                    "tanh is not homogeneous; rescaling W1 changes the map (use relu)",
                ));
            }
            scaled.ffn.w1 = scaled.ffn.w1.scale(c1);
            scaled.ffn.w2 = scaled.ffn.w2.scale(c2);
        }
    }
    let (x, t) = match sublayer {
        Sublayer::Attention => (&tape.blocks[block].attn.input, &tape.params[block]),
        Sublayer::Ffn => (&tape.blocks[block].ffn.input, &tape.params[block]),
    };
    let s = stage_jacobian_at(x, t, cfg, sublayer)?;
    let s_after = stage_jacobian_at(x, &scaled, cfg, sublayer)?;
    let nd = s.rows();
    let eye = Matrix::identity(nd);
    let a = s.sub(&eye)?;
    let b = s_after.sub(&eye)?;
    let denom = a.dot(&a);
    Ok(RescaleOutcome {
        max_abs_dev: s_after.sub(&s)?.max_abs(),
        scale_ratio: if denom == 0.0 { 1.0 } else { a.dot(&b) / denom },
    })
}

/// Margin of the chain bound, with per-layer factors.
pub fn pre_exponential_bound(chain: &PreChainOutput, layers: &[PreChainLayer], delta_t: f64) -> (BoundReport, Vec<f64>) {
    let (d, n) = chain.states[0].shape();
    let gamma_max = layers
        .iter()
        .flat_map(|l| l.gamma.iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let report = BoundReport::new(
        "pre_chain",
        Placement::Pre,
        chain.factors.len(),
        delta_t,
        gamma_max,
        0.0,
        n * d,
        chain.ma_final,
        chain.bound_rhs,
    );
    (report, chain.factors.clone())
}

/// `train_loss + L (Ĉ(1) r + 4DΔt√(nd)γ_max)`.
#[allow(clippy::too_many_arguments)]
pub fn dro_bound(
    train_loss: f64,
    lipschitz: f64,
    radius: f64,
    c_hat_1: f64,
    depth: usize,
    delta_t: f64,
    nd: usize,
    gamma_max: f64,
) -> Result<f64> {
    for (name, v) in [
        ("lipschitz", lipschitz),
        ("radius", radius),
        ("c_hat", c_hat_1),
        ("delta_t", delta_t),
        ("gamma_max", gamma_max),
    ] {
        if !(v >= 0.0) {
            return Err(Error::undefined("dro_bound", format!("{name} must be non-negative, got {v}")));
        }
    }
    Ok(train_loss + lipschitz * (c_hat_1 * radius + spread_term(depth, delta_t, nd, gamma_max)))
}

/// Settings of the unbounded-growth comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WitnessConfig {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub depth: usize,
    pub delta_t: f64,
    /// Target `‖W_i‖₂` of every chain layer.
    pub w_norm: f64,
    /// Weight of the random symmetric perturbation around the identity.
    pub jitter: f64,
}

impl Default for WitnessConfig {
    fn default() -> Self {
        WitnessConfig {
            d: 8,
            n: 4,
            k: 4,
            depth: 32,
            delta_t: 1.0,
            w_norm: 3.0,
            jitter: 0.3,
        }
    }
}

/// Chain layers with `W_i = s (I + jitter·sym(G)) / ‖·‖₂`, so every layer
/// pushes tokens along themselves, and `γ_i = √d`, which makes the column
/// normalization an RMSNorm with unit gain.
pub fn coherent_chain_layers(rng: &mut impl Rng, wc: &WitnessConfig) -> Result<Vec<PreChainLayer>> {
    let d = wc.d;
    let sd = 1.0 / (d as f64).sqrt();
    (0..wc.depth)
        .map(|_| {
            let g = normal_matrix(rng, d, d, sd);
            let sym = g.add(&g.transpose())?.scale(0.5);
            let m = Matrix::identity(d).add_scaled(wc.jitter, &sym)?;
            let w = m.scale(wc.w_norm / spectral_norm_default(&m)?);
            Ok(PreChainLayer {
                w,
                gamma: vec![(d as f64).sqrt(); d],
                q: normal_matrix(rng, wc.k, d, sd),
                k: normal_matrix(rng, wc.k, d, sd),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WitnessOutcome {
    pub pre_ma: f64,
    pub peri_ma: f64,
    pub ratio: f64,
    pub chain: PreChainOutput,
    pub layers: Vec<PreChainLayer>,
}

/// Same input, depth and step for the chain and for an attention-only
/// Peri model at standard initialization; FFN weights are zero, which makes
/// the FFN stage an exact skip under Peri.
pub fn unboundedness_witness(seed: u64, wc: &WitnessConfig) -> Result<WitnessOutcome> {
    let mut rng = RngStream::new(seed, 0).rng();
    let x0 = normal_matrix(&mut rng, wc.d, wc.n, 1.0);
    let layers = coherent_chain_layers(&mut rng, wc)?;
    let chain = simplified_pre_chain(&x0, &layers, wc.delta_t)?;
    let cfg = ModelConfig {
        d: wc.d,
        n: wc.n,
        k: wc.k,
        m: wc.d,
        heads: 1,
        depth: wc.depth,
        placement: Placement::Peri,
        delta_t: wc.delta_t,
        ..ModelConfig::default()
    };
    let mut params = random_model(&cfg, &mut RngStream::new(seed, 1).rng());
    for b in &mut params {
        b.ffn.w1 = Matrix::zeros(cfg.m, cfg.d);
        b.ffn.w2 = Matrix::zeros(cfg.d, cfg.m);
    }
    let peri_ma = moments(model_forward(&x0, &params, &cfg)?.output())?.mean_abs;
    Ok(WitnessOutcome {
        pre_ma: chain.ma_final,
        peri_ma,
        ratio: chain.ma_final / peri_ma,
        chain,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::zero_model;

    fn peri(depth: usize, delta_t: f64) -> ModelConfig {
        ModelConfig {
            depth,
            delta_t,
            placement: Placement::Peri,
            ..ModelConfig::default()
        }
    }

    fn x(cfg: &ModelConfig, seed: u64, stream: u64) -> Matrix {
        normal_matrix(&mut RngStream::new(seed, stream).rng(), cfg.d, cfg.n, 1.0)
    }

    #[test]
    fn zero_depth_reduces_to_cauchy_schwarz() {
        let x0 = Matrix::from_rows(&[&[1.0, -1.0], &[1.0, -1.0]]);
        let [ma, _] = peri_growth_bounds(&x0, &x0, 0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(ma.margin, 0.0);
        let y = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 0.1]]);
        let [ma, _] = peri_growth_bounds(&y, &y, 0, 1.0, 1.0, 0.0).unwrap();
        assert!(ma.margin > 0.0);
    }

    #[test]
    fn zero_output_gain_pins_the_state() {
        let c = peri(6, 1.0);
        let mut params = random_model(&c, &mut RngStream::new(1, 0).rng());
        for b in &mut params {
            for site in [&mut b.ln.attn_out, &mut b.ln.ffn_out].into_iter().flatten() {
                site.gamma = vec![0.0; c.d];
            }
        }
        let x0 = x(&c, 1, 1);
        let tape = model_forward(&x0, &params, &c).unwrap();
        assert_eq!(tape.output(), &x0);
        let [ma, _] = peri_growth_check(&tape).unwrap();
        assert!((ma.rhs - x0.frobenius() / (c.nd() as f64).sqrt()).abs() < 1e-15);
        let other = x(&c, 1, 2);
        let r = pathwise_stability_check(&x0, &other, &params, &c).unwrap();
        assert!((r.lhs - x0.sub(&other).unwrap().frobenius()).abs() < 1e-14);
    }

    #[test]
    fn growth_bounds_hold_on_random_models() {
        for seed in 0..10 {
            for dt in [1.0, 0.1] {
                let c = peri(16, dt);
                let params = random_model(&c, &mut RngStream::new(seed, 0).rng());
                let tape = model_forward(&x(&c, seed, 1), &params, &c).unwrap();
                for r in peri_growth_check(&tape).unwrap() {
                    assert!(r.holds(BOUND_SLACK), "{r:?}");
                }
            }
        }
    }

    #[test]
    fn growth_check_needs_peri() {
        let c = ModelConfig { placement: Placement::Pre, ..peri(2, 1.0) };
        let tape = model_forward(&x(&c, 0, 0), &zero_model(&c), &c).unwrap();
        assert!(peri_growth_check(&tape).is_err());
    }

    #[test]
    fn identical_inputs_have_zero_spread() {
        let c = peri(4, 1.0);
        let params = random_model(&c, &mut RngStream::new(2, 0).rng());
        let x0 = x(&c, 2, 1);
        let inputs = vec![x0.clone(); 5];
        for (_, r) in datawise_variance_all(&inputs, &params, &c).unwrap() {
            assert!(r.lhs < 1e-28);
            assert!(r.margin >= 0.0);
        }
        let p = pathwise_stability_check(&x0, &x0, &params, &c).unwrap();
        assert_eq!(p.lhs, 0.0);
        let cloud: Vec<Matrix> = (0..4).map(|i| x(&c, 3, i)).collect();
        let w = wasserstein_stability_check(&cloud, &cloud, &params, &c, 2.0).unwrap();
        assert_eq!(w.lhs, 0.0);
        assert_eq!(w.margin, w.rhs);
    }

    #[test]
    fn datawise_bound_shrinks_with_step() {
        let inputs: Vec<Matrix> = (0..8).map(|i| x(&peri(4, 1.0), 4, i)).collect();
        let params = random_model(&peri(4, 1.0), &mut RngStream::new(4, 0).rng());
        let r1 = datawise_variance_check(&inputs, &params, &peri(4, 1.0), (0, 0)).unwrap();
        let r01 = datawise_variance_check(&inputs, &params, &peri(4, 0.1), (0, 0)).unwrap();
        // Mean over samples of (‖X_0‖ + a Δt)².
        let nd = 12.0f64;
        let a = 2.0 * 4.0 * nd.sqrt();
        let expected = |dt: f64| inputs.iter().map(|x| (x.frobenius() + a * dt).powi(2)).sum::<f64>() / 8.0;
        assert!((r1.rhs - expected(1.0)).abs() < 1e-9);
        assert!((r01.rhs - expected(0.1)).abs() < 1e-9);
        assert!(r01.rhs < r1.rhs);
        assert!(datawise_variance_check(&inputs[..1], &params, &peri(4, 1.0), (0, 0)).is_err());
    }

    #[test]
    fn single_point_clouds_reduce_to_pathwise() {
        let c = peri(5, 0.5);
        let params = random_model(&c, &mut RngStream::new(5, 0).rng());
        let a = x(&c, 5, 1);
        let b = x(&c, 5, 2);
        let path = pathwise_stability_check(&a, &b, &params, &c).unwrap();
        let w = wasserstein_stability_check(&[a], &[b], &params, &c, 2.0).unwrap();
        assert!((w.lhs - path.lhs).abs() < 1e-12);
        assert!((w.rhs - 2f64.sqrt() * path.rhs).abs() < 1e-9);
    }

    #[test]
    fn dro_hand_values() {
        assert_eq!(dro_bound(0.7, 0.0, 3.0, 1.0, 4, 1.0, 12, 0.25).unwrap(), 0.7);
        assert_eq!(dro_bound(0.7, 2.0, 0.0, 1.0, 4, 1.0, 12, 0.0).unwrap(), 0.7);
        let v = dro_bound(1.0, 2.0, 0.5, 1.0, 4, 1.0, 12, 0.25).unwrap();
        // 1 + 2 (0.5 + 4·4·1·√12·0.25) = 2 + 8√12.
        assert!((v - (2.0 + 8.0 * 12f64.sqrt())).abs() < 1e-12);
        assert!((v - 29.712812921102035).abs() < 1e-12);
        assert!(dro_bound(1.0, -1.0, 0.5, 1.0, 4, 1.0, 12, 0.25).is_err());
    }

    #[test]
    fn c_hat_values() {
        assert_eq!(c_hat(2.0, 12), 1.0);
        assert!((c_hat(1.0, 16) - 4.0).abs() < 1e-15);
        assert!((c_hat(f64::INFINITY, 16) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn unit_rescale_changes_nothing() {
        for placement in [Placement::Pre, Placement::Peri] {
            let c = ModelConfig { placement, ..peri(2, 1.0) };
            let params = random_model(&c, &mut RngStream::new(6, 0).rng());
            let tape = model_forward(&x(&c, 6, 1), &params, &c).unwrap();
            for sub in [Sublayer::Attention, Sublayer::Ffn] {
                let r = rescale_invariance_test(&tape, 1, (1.0, 1.0), sub).unwrap();
                assert_eq!(r.max_abs_dev, 0.0);
                assert_eq!(r.scale_ratio, 1.0);
            }
        }
    }

    #[test]
    fn tanh_ffn_rescale_is_refused() {
        let c = peri(1, 1.0);
        let params = random_model(&c, &mut RngStream::new(7, 0).rng());
        let tape = model_forward(&x(&c, 7, 1), &params, &c).unwrap();
        assert!(rescale_invariance_test(&tape, 0, (10.0, 10.0), Sublayer::Ffn).is_err());
        assert!(rescale_invariance_test(&tape, 0, (1.0, 10.0), Sublayer::Ffn).is_ok());
    }

    #[test]
    fn pre_attention_scales_bilinearly() {
        let c = ModelConfig { placement: Placement::Pre, ..peri(2, 0.5) };
        let params = random_model(&c, &mut RngStream::new(8, 0).rng());
        let tape = model_forward(&x(&c, 8, 1), &params, &c).unwrap();
        let r = rescale_invariance_test(&tape, 0, (10.0, 10.0), Sublayer::Attention).unwrap();
        assert!((r.scale_ratio - 100.0).abs() <= 1e-8 * 100.0);
    }

    #[test]
    fn peri_attention_is_scale_free_without_epsilon() {
        let c = ModelConfig { epsilon: 0.0, ..peri(2, 1.0) };
        let params = random_model(&c, &mut RngStream::new(9, 0).rng());
        let tape = model_forward(&x(&c, 9, 1), &params, &c).unwrap();
        for cs in [(10.0, 10.0), (1e3, 1e-2)] {
            let r = rescale_invariance_test(&tape, 1, cs, Sublayer::Attention).unwrap();
            assert!(r.max_abs_dev <= 1e-10, "{r:?}");
        }
    }

    #[test]
    fn chain_bound_holds_with_growing_factors() {
        let wc = WitnessConfig { depth: 16, ..WitnessConfig::default() };
        let out = unboundedness_witness(3, &wc).unwrap();
        let (r, factors) = pre_exponential_bound(&out.chain, &out.layers, wc.delta_t);
        assert_eq!(r.gamma_max, 8f64.sqrt());
        assert!(r.margin >= 0.0);
        assert_eq!(factors.len(), 16);
        assert!(factors.iter().all(|&f| f > 1.0));
    }
}
