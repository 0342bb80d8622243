//! Control-theoretic constructions on the normalization ellipsoid
//! `{z : (z-β)ᵀΓ⁻²(z-β) = d}`: the closed-form maximizer of `-<p, f>` over
//! the ellipsoid, the tangent projection that keeps a flow on it, and an
//! Euler integrator for the projected flow.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::normalization::{ellipsoid_residual, LnParams};
use crate::numerics::{dot, Matrix};

/// Column-wise `f*_j = -√d Γ²p_j / √(p_jᵀΓ²p_j) + β`.
pub fn hamiltonian_maximizer(p: &Matrix, gamma: &[f64], beta: &[f64]) -> Result<Matrix> {
    let d = p.rows();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::DimensionMismatch {
            op: "hamiltonian_maximizer",
            left: p.shape(),
            right: (gamma.len(), beta.len()),
        });
    }
    if let Some(index) = gamma.iter().position(|&g| g == 0.0) {
        return Err(Error::ZeroGamma { index });
    }
    let sqrt_d = (d as f64).sqrt();
    let mut out = Matrix::zeros(d, p.cols());
    for j in 0..p.cols() {
        let col = p.col(j);
        if col.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroAdjoint { column: j });
        }
        let g2p: Vec<f64> = col.iter().zip(gamma).map(|(p, g)| g * g * p).collect();
        let norm = dot(col, &g2p).sqrt();
        for a in 0..d {
            out[(a, j)] = -sqrt_d * g2p[a] / norm + beta[a];
        }
    }
    Ok(out)
}

/// `-<P, F>`, the quantity the maximizer maximizes.
pub fn hamiltonian_value(p: &Matrix, f: &Matrix) -> f64 {
    -p.dot(f)
}

/// Draws a point on the ellipsoid of `params`: a Gaussian direction scaled
/// to radius `√d`, mapped through `Γ`, shifted to the center.
pub fn sample_ellipsoid(rng: &mut impl Rng, params: &LnParams) -> Vec<f64> {
    let d = params.dim();
    let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let r = dot(&z, &z).sqrt();
    let scale = (d as f64).sqrt() / r;
    z.iter()
        .zip(&params.gamma)
        .zip(params.center())
        .map(|((z, g), b)| g * z * scale + b)
        .collect()
}

fn metric_dot(u: &[f64], v: &[f64], gamma: &[f64]) -> f64 {
    u.iter().zip(v).zip(gamma).map(|((u, v), g)| u * v / (g * g)).sum()
}

/// Removes from `f` its component along `x - β` in the `Γ⁻²` inner product.
pub fn postln_projection(x: &[f64], f: &[f64], params: &LnParams) -> Result<Vec<f64>> {
    let d = params.dim();
    if x.len() != d || f.len() != d {
        return Err(Error::DimensionMismatch {
            op: "postln_projection",
            left: (x.len(), f.len()),
            right: (d, 1),
        });
    }
    if let Some(index) = params.gamma.iter().position(|&g| g == 0.0) {
        return Err(Error::ZeroGamma { index });
    }
    let r: Vec<f64> = x.iter().zip(params.center()).map(|(x, b)| x - b).collect();
    let denom = metric_dot(&r, &r, &params.gamma);
    if denom == 0.0 {
        return Err(Error::undefined("postln_projection", "x coincides with the ellipsoid center"));
    }
    let coef = metric_dot(&r, f, &params.gamma) / denom;
    Ok(f.iter().zip(&r).map(|(f, r)| f - coef * r).collect())
}

/// Radial retraction onto the ellipsoid about its center.
pub fn reproject(x: &[f64], params: &LnParams) -> Result<Vec<f64>> {
    let center = params.center();
    let r: Vec<f64> = x.iter().zip(&center).map(|(x, b)| x - b).collect();
    let q = metric_dot(&r, &r, &params.gamma);
    if q == 0.0 {
        return Err(Error::undefined("reproject", "x coincides with the ellipsoid center"));
    }
    let s = (params.dim() as f64 / q).sqrt();
    Ok(r.iter().zip(&center).map(|(r, b)| b + r * s).collect())
}

pub const ON_ELLIPSOID_TOL: f64 = 1e-9;

/// Euler steps `x ← x + h P_x(field(x))`, optionally followed by the radial
/// retraction. Returns every iterate including `x0`.
pub fn integrate_projected_flow(
    x0: &[f64],
    field: impl Fn(&[f64]) -> Vec<f64>,
    params: &LnParams,
    steps: usize,
    h: f64,
    retract: bool,
) -> Result<Vec<Vec<f64>>> {
    let r0 = ellipsoid_residual(x0, params)?;
    if r0.abs() > ON_ELLIPSOID_TOL {
        return Err(Error::undefined(
            "integrate_projected_flow",
            format!("x0 is off the ellipsoid (residual {r0:e})"),
        ));
    }
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(x0.to_vec());
    for _ in 0..steps {
        let x = traj.last().unwrap();
        let f = field(x);
        if f.len() != x.len() || !f.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "integrate_projected_flow field" });
        }
        let v = postln_projection(x, &f, params)?;
        let mut next: Vec<f64> = x.iter().zip(&v).map(|(x, v)| x + h * v).collect();
        if retract {
            next = reproject(&next, params)?;
        }
        traj.push(next);
    }
    Ok(traj)
}

/// Mean per-step growth of the ellipsoid residual without retraction.
pub fn per_step_drift(
    x0: &[f64],
    field: impl Fn(&[f64]) -> Vec<f64>,
    params: &LnParams,
    steps: usize,
    h: f64,
) -> Result<f64> {
    let traj = integrate_projected_flow(x0, field, params, steps, h, false)?;
    let last = ellipsoid_residual(traj.last().unwrap(), params)?;
    Ok((last - ellipsoid_residual(x0, params)?).abs() / steps as f64)
}

/// Least-squares slope of `log drift` against `log h`.
pub fn drift_order(
    x0: &[f64],
    field: impl Fn(&[f64]) -> Vec<f64> + Copy,
    params: &LnParams,
    steps: usize,
    hs: &[f64],
) -> Result<f64> {
    if hs.len() < 2 {
        return Err(Error::undefined("drift_order", "needs at least two step sizes"));
    }
    let pts = hs
        .iter()
        .map(|&h| Ok((h.ln(), per_step_drift(x0, field, params, steps, h)?.ln())))
        .collect::<Result<Vec<_>>>()?;
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}
