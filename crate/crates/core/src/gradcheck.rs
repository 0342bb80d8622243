//! Central finite differences against every analytic derivative.
//!
//! Relative error is normwise: `max|A - F| / max(max|A|, max|F|)`, so entries
//! that are zero up to rounding do not blow the ratio up.

use rand::Rng;
use rayon::prelude::*;

use crate::attention::{attn_forward, attn_jacobian};
use crate::error::Result;
use crate::ffn::{ffn_forward, ffn_jacobian, Activation};
use crate::model::{block_forward, local_sensitivity, model_forward, param_gradients, random_model, BlockParams, ModelConfig, Placement};
use crate::normalization::{ln_forward, ln_jacobian, LnParams, NormKind, DEFAULT_EPSILON};
use crate::numerics::{normal_matrix, normal_vec, Matrix, RngStream};

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Relative step of every difference quotient here.
pub const FD_SCALE: f64 = 1e-6;

/// `1e-6 (1 + ‖x‖∞)`.
pub fn fd_step(x: &Matrix) -> f64 {
    FD_SCALE * (1.0 + x.max_abs())
}

/// Dense Jacobian of `vec(f(X))` with respect to `vec(X)` by central
/// differences.
pub fn central_jacobian(f: impl Fn(&Matrix) -> Result<Matrix>, x: &Matrix) -> Result<Matrix> {
    central_jacobian_scaled(f, x, FD_SCALE)
}

/// As [`central_jacobian`] with step `scale (1 + ‖x‖∞)`.
pub fn central_jacobian_scaled(f: impl Fn(&Matrix) -> Result<Matrix>, x: &Matrix, scale: f64) -> Result<Matrix> {
    let h = scale * (1.0 + x.max_abs());
    let mut cols = Vec::with_capacity(x.len());
    for e in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_mut_slice()[e] += h;
        xm.as_mut_slice()[e] -= h;
        let fp = f(&xp)?;
        let fm = f(&xm)?;
        cols.push(
            fp.as_slice()
                .iter()
                .zip(fm.as_slice())
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<f64>>(),
        );
    }
    Ok(Matrix::from_columns(&cols))
}

pub fn relative_error_slices(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shapes");
    relative_error_slices(a.as_slice(), b.as_slice())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub check: &'static str,
    pub instance: usize,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Dimensions of one randomized instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dims {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub heads: usize,
    pub depth: usize,
}

impl Dims {
    fn draw(rng: &mut impl Rng) -> Dims {
        Dims {
            d: rng.random_range(3..=8),
            n: rng.random_range(1..=5),
            k: rng.random_range(2..=4),
            m: rng.random_range(2..=8),
            heads: rng.random_range(1..=2),
            depth: rng.random_range(1..=4),
        }
    }
}

fn model_config(dims: Dims, placement: Placement) -> ModelConfig {
    ModelConfig {
        d: dims.d,
        n: dims.n,
        k: dims.k,
        m: dims.m,
        heads: dims.heads,
        depth: dims.depth,
        placement,
        delta_t: 1.0,
        activation: Activation::Tanh,
        epsilon: DEFAULT_EPSILON,
        norm_kind: NormKind::LayerNorm,
    }
}

fn row(check: &'static str, instance: usize, seed: u64, err: f64) -> GradcheckRow {
    GradcheckRow {
        check,
        instance,
        seed,
        max_rel_err: err,
        tolerance: GRADCHECK_TOLERANCE,
        pass: err <= GRADCHECK_TOLERANCE,
    }
}

fn norm_check(kind: NormKind, d: usize, rng: &mut impl Rng, scale: f64) -> Result<f64> {
    let p = LnParams {
        gamma: normal_vec(rng, d, 1.0),
        beta: normal_vec(rng, d, 1.0),
        epsilon: DEFAULT_EPSILON,
        kind,
    };
    let x = Matrix::from_columns(&[normal_vec(rng, d, 1.0)]);
    let analytic = ln_jacobian(x.col(0), &p)?;
    let fd = central_jacobian_scaled(|z| Ok(Matrix::from_columns(&[ln_forward(z.col(0), &p)?])), &x, scale)?;
    Ok(relative_error(&analytic, &fd))
}

/// Every token pair, assembled block by block and compared against the dense
/// finite-difference Jacobian.
fn attention_check(cfg: &ModelConfig, b: &BlockParams, x: &Matrix, scale: f64) -> Result<f64> {
    let fd = central_jacobian_scaled(|z| attn_forward(z, &b.attn), x, scale)?;
    let d = cfg.d;
    let mut analytic = Matrix::zeros(fd.rows(), fd.cols());
    for j in 0..cfg.n {
        for i in 0..cfg.n {
            analytic.set_block(j * d, i * d, &attn_jacobian(x, &b.attn, i, j)?);
        }
    }
    Ok(relative_error(&analytic, &fd))
}

fn ffn_check(cfg: &ModelConfig, b: &BlockParams, x: &Matrix, scale: f64) -> Result<f64> {
    let fd = central_jacobian_scaled(|z| ffn_forward(z, &b.ffn), x, scale)?;
    let d = cfg.d;
    let mut analytic = Matrix::zeros(fd.rows(), fd.cols());
    for j in 0..cfg.n {
        analytic.set_block(j * d, j * d, &ffn_jacobian(x, &b.ffn, j)?);
    }
    Ok(relative_error(&analytic, &fd))
}

fn sensitivity_check(cfg: &ModelConfig, params: &[BlockParams], x: &Matrix, scale: f64) -> Result<f64> {
    let tape = model_forward(x, params, cfg)?;
    let i = tape.depth() - 1;
    let c1 = ModelConfig { depth: 1, ..cfg.clone() };
    let analytic = local_sensitivity(&tape, i)?;
    let fd = central_jacobian_scaled(|z| Ok(block_forward(z, &params[i], &c1)?.0), &tape.states[i], scale)?;
    Ok(relative_error(&analytic, &fd))
}

/// Gradient of `<U, X_D>` for every parameter entry and for `X_0`.
pub fn param_gradient_check(cfg: &ModelConfig, params: &[BlockParams], x: &Matrix, upstream: &Matrix) -> Result<f64> {
    param_gradient_check_scaled(cfg, params, x, upstream, FD_SCALE)
}

/// As [`param_gradient_check`]; each entry `θ` moves by `scale (1 + |θ|)`.
pub fn param_gradient_check_scaled(
    cfg: &ModelConfig,
    params: &[BlockParams],
    x: &Matrix,
    upstream: &Matrix,
    scale: f64,
) -> Result<f64> {
    let tape = model_forward(x, params, cfg)?;
    let grads = param_gradients(&tape, upstream)?;
    let loss = |p: &[BlockParams]| -> Result<f64> { Ok(model_forward(x, p, cfg)?.output().dot(upstream)) };
    let mut analytic = Vec::new();
    let mut fd = Vec::new();
    for (bi, g) in grads.blocks.iter().enumerate() {
        let tensors: Vec<Vec<f64>> = g.tensors(&params[bi]).into_iter().map(|t| t.to_vec()).collect();
        for (ti, t) in tensors.iter().enumerate() {
            for e in 0..t.len() {
                let mut plus = params.to_vec();
                let mut minus = params.to_vec();
                let h = {
                    let base = &mut plus[bi].tensors_mut()[ti].0;
                    scale * (1.0 + base[e].abs())
                };
                plus[bi].tensors_mut()[ti].0[e] += h;
                minus[bi].tensors_mut()[ti].0[e] -= h;
                fd.push((loss(&plus)? - loss(&minus)?) / (2.0 * h));
                analytic.push(t[e]);
            }
        }
    }
    let fd_x = central_jacobian_scaled(|z| Ok(model_forward(z, params, cfg)?.output().clone()), x, scale)?
        .transpose()
        .mat_vec(upstream.as_slice())?;
    analytic.extend_from_slice(grads.input.as_slice());
    fd.extend(fd_x);
    Ok(relative_error_slices(&analytic, &fd))
}

/// Where instance dimensions come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DimsSource {
    /// Drawn per instance: `d` 3..=8, `n` 1..=5, `k` 2..=4, `m` 2..=8,
    /// `H` 1..=2, `D` 1..=4.
    Random,
    /// Dimensions of this config for every instance.
    Fixed(ModelConfig),
}

/// All rows of one randomized instance at the standard step.
pub fn gradcheck_instance(seed: u64, instance: usize) -> Result<Vec<GradcheckRow>> {
    gradcheck_instance_with(seed, instance, &DimsSource::Random, FD_SCALE)
}

/// One instance with explicit dimensions and relative step. Placements
/// cycle through off, pre, peri, post with the instance index; the weights
/// and inputs do not depend on `scale`.
pub fn gradcheck_instance_with(seed: u64, instance: usize, dims: &DimsSource, scale: f64) -> Result<Vec<GradcheckRow>> {
    let mut rng = RngStream::new(seed, instance as u64).rng();
    let dims = match dims {
        DimsSource::Random => Dims::draw(&mut rng),
        DimsSource::Fixed(c) => Dims {
            d: c.d,
            n: c.n,
            k: c.k,
            m: c.m,
            heads: c.heads,
            depth: c.depth,
        },
    };
    let placement = Placement::ALL[instance % 4];
    let cfg = model_config(dims, placement);
    cfg.validate()?;
    let params = random_model(&cfg, &mut rng);
    let x = normal_matrix(&mut rng, cfg.d, cfg.n, 1.0);
    let upstream = normal_matrix(&mut rng, cfg.d, cfg.n, 1.0);
    let peri = ModelConfig { placement: Placement::Peri, ..cfg.clone() };
    let peri_params = random_model(&peri, &mut rng);
    let off = ModelConfig { placement: Placement::Off, ..cfg.clone() };
    let off_params = random_model(&off, &mut rng);
    let s = scale;

    Ok(vec![
        row("layernorm", instance, seed, norm_check(NormKind::LayerNorm, dims.d, &mut rng, s)?),
        row("rmsnorm", instance, seed, norm_check(NormKind::RmsNorm, dims.d, &mut rng, s)?),
        row("attention", instance, seed, attention_check(&cfg, &params[0], &x, s)?),
        row("ffn", instance, seed, ffn_check(&cfg, &params[0], &x, s)?),
        row("sensitivity", instance, seed, sensitivity_check(&cfg, &params, &x, s)?),
        row("param_gradients", instance, seed, param_gradient_check_scaled(&cfg, &params, &x, &upstream, s)?),
        row("param_gradients_peri", instance, seed, param_gradient_check_scaled(&peri, &peri_params, &x, &upstream, s)?),
        row("param_gradients_off", instance, seed, param_gradient_check_scaled(&off, &off_params, &x, &upstream, s)?),
    ])
}

/// Instances run in parallel; rows come back ordered by instance.
pub fn gradcheck_suite(seed: u64, instances: usize) -> Result<Vec<GradcheckRow>> {
    gradcheck_suite_with(seed, instances, &DimsSource::Random)
}

pub fn gradcheck_suite_with(seed: u64, instances: usize, dims: &DimsSource) -> Result<Vec<GradcheckRow>> {
    let per: Vec<Result<Vec<GradcheckRow>>> = (0..instances)
        .into_par_iter()
        .map(|i| gradcheck_instance_with(seed, i, dims, FD_SCALE))
        .collect();
    let mut rows = Vec::new();
    for r in per {
        rows.extend(r?);
    }
    Ok(rows)
}
