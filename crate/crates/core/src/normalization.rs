//! LayerNorm and RMSNorm applied per token, with exact Jacobians,
//! vector-Jacobian products and the ellipsoid residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    #[serde(alias = "layer_norm", alias = "ln")]
    LayerNorm,
    #[serde(alias = "rms_norm", alias = "rms")]
    RmsNorm,
}

/// Parameters of one normalization site.
///
/// RMSNorm ignores `beta`; it is kept so that every site has the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
    pub kind: NormKind,
}

impl LnParams {
    /// `γ = 1`, `β = 0`.
    pub fn unit(d: usize, epsilon: f64, kind: NormKind) -> Self {
        LnParams {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            epsilon,
            kind,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    /// `‖β‖∞`, zero for RMSNorm.
    pub fn beta_max(&self) -> f64 {
        match self.kind {
            NormKind::LayerNorm => self.beta.iter().fold(0.0, |m, b| m.max(b.abs())),
            NormKind::RmsNorm => 0.0,
        }
    }

    /// The center of the output ellipsoid.
    pub fn center(&self) -> Vec<f64> {
        match self.kind {
            NormKind::LayerNorm => self.beta.clone(),
            NormKind::RmsNorm => vec![0.0; self.dim()],
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        let d = self.dim();
        if x.len() != d || self.beta.len() != d {
            return Err(Error::DimensionMismatch {
                op: "normalization",
                left: (x.len(), 1),
                right: (d, self.beta.len()),
            });
        }
        if self.kind == NormKind::LayerNorm && d < 2 {
            return Err(Error::undefined("normalization", "LayerNorm needs d >= 2"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::undefined("normalization", "epsilon must be >= 0"));
        }
        Ok(())
    }
}

/// Per-token statistics: `c` is the centered input (the input itself for
/// RMSNorm) and `s` the normalizing scale.
struct Stats {
    c: Vec<f64>,
    s: f64,
}

fn stats(x: &[f64], p: &LnParams, token: usize) -> Result<Stats> {
    p.check(x)?;
    let d = x.len() as f64;
    let c: Vec<f64> = match p.kind {
        NormKind::LayerNorm => {
            let mu = x.iter().sum::<f64>() / d;
            x.iter().map(|v| v - mu).collect()
        }
        NormKind::RmsNorm => x.to_vec(),
    };
    let ms = c.iter().map(|v| v * v).sum::<f64>() / d;
    if p.epsilon == 0.0 && ms == 0.0 {
        return Err(Error::DegenerateNorm { token });
    }
    Ok(Stats {
        s: (ms + p.epsilon).sqrt(),
        c,
    })
}

pub fn ln_forward(x: &[f64], p: &LnParams) -> Result<Vec<f64>> {
    ln_forward_token(x, p, 0)
}

pub(crate) fn ln_forward_token(x: &[f64], p: &LnParams, token: usize) -> Result<Vec<f64>> {
    let st = stats(x, p, token)?;
    let center = p.center();
    Ok(st
        .c
        .iter()
        .zip(&p.gamma)
        .zip(&center)
        .map(|((c, g), b)| g * c / st.s + b)
        .collect())
}

/// Normalizes every column of `x`.
pub fn ln_forward_matrix(x: &Matrix, p: &LnParams) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for j in 0..x.cols() {
        let y = ln_forward_token(x.col(j), p, j)?;
        out.set_col(j, &y);
    }
    Ok(out)
}

/// `(z-β)ᵀΓ⁻²(z-β) - d`, with `β = 0` for RMSNorm.
pub fn ellipsoid_residual(z: &[f64], p: &LnParams) -> Result<f64> {
    if let Some(index) = p.gamma.iter().position(|&g| g == 0.0) {
        return Err(Error::ZeroGamma { index });
    }
    if z.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            op: "ellipsoid_residual",
            left: (z.len(), 1),
            right: (p.dim(), 1),
        });
    }
    let q: f64 = z
        .iter()
        .zip(p.center())
        .zip(&p.gamma)
        .map(|((z, b), g)| (z - b) * (z - b) / (g * g))
        .sum();
    Ok(q - p.dim() as f64)
}

/// `J[a][b] = ∂y_a/∂x_b`.
pub fn ln_jacobian(x: &[f64], p: &LnParams) -> Result<Matrix> {
    ln_jacobian_token(x, p, 0)
}

pub(crate) fn ln_jacobian_token(x: &[f64], p: &LnParams, token: usize) -> Result<Matrix> {
    let st = stats(x, p, token)?;
    let d = x.len();
    let df = d as f64;
    let s3 = st.s * st.s * st.s;
    let mean_term = match p.kind {
        NormKind::LayerNorm => 1.0 / df,
        NormKind::RmsNorm => 0.0,
    };
    Ok(Matrix::from_fn(d, d, |a, b| {
        let delta = if a == b { 1.0 } else { 0.0 };
        p.gamma[a] * ((delta - mean_term) / st.s - st.c[a] * st.c[b] / (df * s3))
    }))
}

/// Cotangents of one normalized token.
#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub x: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Always zero for RMSNorm.
    pub beta: Vec<f64>,
}

/// Pulls the output cotangent `g` back through the normalization of `x`.
pub fn ln_vjp(x: &[f64], p: &LnParams, g: &[f64]) -> Result<NormGrads> {
    ln_vjp_token(x, p, g, 0)
}

pub(crate) fn ln_vjp_token(x: &[f64], p: &LnParams, g: &[f64], token: usize) -> Result<NormGrads> {
    let st = stats(x, p, token)?;
    let df = x.len() as f64;
    let xhat: Vec<f64> = st.c.iter().map(|c| c / st.s).collect();
    let gh: Vec<f64> = g.iter().zip(&p.gamma).map(|(g, gm)| g * gm).collect();
    let proj = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / df;
    let mean = match p.kind {
        NormKind::LayerNorm => gh.iter().sum::<f64>() / df,
        NormKind::RmsNorm => 0.0,
    };
    let gx = gh
        .iter()
        .zip(&xhat)
        .map(|(h, xh)| (h - mean - xh * proj) / st.s)
        .collect();
    let beta = match p.kind {
        NormKind::LayerNorm => g.to_vec(),
        NormKind::RmsNorm => vec![0.0; g.len()],
    };
    Ok(NormGrads {
        x: gx,
        gamma: g.iter().zip(&xhat).map(|(g, xh)| g * xh).collect(),
        beta,
    })
}
