//! Two-matrix feedforward sublayer `W2 φ(W1 X)`, no bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// `None` at the relu kink.
    pub fn derivative(self, z: f64) -> Option<f64> {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                Some(1.0 - t * t)
            }
            Activation::Relu if z == 0.0 => None,
            Activation::Relu => Some(if z > 0.0 { 1.0 } else { 0.0 }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    /// `m x d`
    pub w1: Matrix,
    /// `d x m`
    pub w2: Matrix,
    pub activation: Activation,
}

impl FfnParams {
    pub fn zeros(d: usize, m: usize, activation: Activation) -> Self {
        FfnParams {
            w1: Matrix::zeros(m, d),
            w2: Matrix::zeros(d, m),
            activation,
        }
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        let (m, d) = self.w1.shape();
        if x.rows() != d {
            return Err(Error::DimensionMismatch {
                op: "ffn input",
                left: self.w1.shape(),
                right: x.shape(),
            });
        }
        if self.w2.shape() != (d, m) {
            return Err(Error::DimensionMismatch {
                op: "ffn weights",
                left: self.w1.shape(),
                right: self.w2.shape(),
            });
        }
        Ok(())
    }
}

pub fn ffn_forward(x: &Matrix, p: &FfnParams) -> Result<Matrix> {
    p.check(x)?;
    let z = matmul(&p.w1, x)?;
    let act = p.activation;
    matmul(&p.w2, &z.map(|v| act.apply(v)))
}

fn derivatives(z: &Matrix, act: Activation) -> Result<Matrix> {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for j in 0..z.cols() {
        for u in 0..z.rows() {
            out[(u, j)] = act
                .derivative(z[(u, j)])
                .ok_or(Error::ReluKink { token: j, unit: u })?;
        }
    }
    Ok(out)
}

/// `W2 diag(φ'(W1 x_j)) W1`; the map acts on each token independently.
pub fn ffn_jacobian(x: &Matrix, p: &FfnParams, j: usize) -> Result<Matrix> {
    p.check(x)?;
    if j >= x.cols() {
        return Err(Error::IndexOutOfRange {
            what: "token",
            index: j,
            len: x.cols(),
        });
    }
    let z = p.w1.mat_vec(x.col(j))?;
    let mut scaled = p.w1.clone();
    for (u, &zu) in z.iter().enumerate() {
        let dphi = p
            .activation
            .derivative(zu)
            .ok_or(Error::ReluKink { token: j, unit: u })?;
        for b in 0..scaled.cols() {
            scaled[(u, b)] *= dphi;
        }
    }
    matmul(&p.w2, &scaled)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnGrads {
    pub x: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

pub fn ffn_vjp(x: &Matrix, p: &FfnParams, g: &Matrix) -> Result<FfnGrads> {
    p.check(x)?;
    if g.shape() != x.shape() {
        return Err(Error::DimensionMismatch {
            op: "ffn_vjp",
            left: g.shape(),
            right: x.shape(),
        });
    }
    let z = matmul(&p.w1, x)?;
    let dz = derivatives(&z, p.activation)?;
    let act = p.activation;
    let h = z.map(|v| act.apply(v));
    let gh = matmul(&p.w2.transpose(), g)?;
    let mut gz = gh;
    for (a, b) in gz.as_mut_slice().iter_mut().zip(dz.as_slice()) {
        *a *= b;
    }
    Ok(FfnGrads {
        x: matmul(&p.w1.transpose(), &gz)?,
        w1: matmul(&gz, &x.transpose())?,
        w2: matmul(g, &h.transpose())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{normal_matrix, RngStream};
    use proptest::prelude::*;

    fn random_params(seed: u64, d: usize, m: usize, act: Activation) -> FfnParams {
        let mut rng = RngStream::new(seed, 200).rng();
        FfnParams {
            w1: normal_matrix(&mut rng, m, d, 1.0 / (d as f64).sqrt()),
            w2: normal_matrix(&mut rng, d, m, 1.0 / (m as f64).sqrt()),
            activation: act,
        }
    }

    fn fd_token(x: &Matrix, p: &FfnParams, j: usize) -> Matrix {
        let d = x.rows();
        let h = 1e-6 * (1.0 + x.max_abs());
        let mut out = Matrix::zeros(d, d);
        for b in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[(b, j)] += h;
            xm[(b, j)] -= h;
            let fp = ffn_forward(&xp, p).unwrap();
            let fm = ffn_forward(&xm, p).unwrap();
            for a in 0..d {
                out[(a, b)] = (fp[(a, j)] - fm[(a, j)]) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn identity_relu_passes_nonnegative_input() {
        let p = FfnParams {
            w1: Matrix::identity(3),
            w2: Matrix::identity(3),
            activation: Activation::Relu,
        };
        let x = Matrix::from_rows(&[&[0.0, 1.0], &[2.0, 0.5], &[3.0, 0.0]]);
        assert_eq!(ffn_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn zero_first_layer_gives_zero() {
        let mut p = random_params(1, 3, 5, Activation::Tanh);
        p.w1 = Matrix::zeros(5, 3);
        let x = normal_matrix(&mut RngStream::new(1, 1).rng(), 3, 2, 1.0);
        assert_eq!(ffn_forward(&x, &p).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn scripted_evaluation() {
        // W1 = [[1, -1]], W2 = [[2], [0.5]], x = (0.3, 0.1): z = 0.2.
        let p = FfnParams {
            w1: Matrix::from_rows(&[&[1.0, -1.0]]),
            w2: Matrix::from_rows(&[&[2.0], &[0.5]]),
            activation: Activation::Tanh,
        };
        let x = Matrix::from_columns(&[vec![0.3, 0.1]]);
        let y = ffn_forward(&x, &p).unwrap();
        let t = 0.2f64.tanh();
        assert!((y[(0, 0)] - 2.0 * t).abs() < 1e-15);
        assert!((y[(1, 0)] - 0.5 * t).abs() < 1e-15);
    }

    #[test]
    fn tanh_identity_jacobian_at_origin() {
        let p = FfnParams {
            w1: Matrix::identity(3),
            w2: Matrix::identity(3),
            activation: Activation::Tanh,
        };
        assert_eq!(ffn_jacobian(&Matrix::zeros(3, 1), &p, 0).unwrap(), Matrix::identity(3));
    }

    #[test]
    fn relu_kink_is_reported() {
        let p = FfnParams::zeros(2, 2, Activation::Relu);
        let x = Matrix::zeros(2, 1);
        assert!(matches!(ffn_jacobian(&x, &p, 0), Err(Error::ReluKink { .. })));
        assert!(matches!(ffn_vjp(&x, &p, &x), Err(Error::ReluKink { .. })));
    }

    #[test]
    fn relu_jacobian_is_bilinear_in_weights() {
        let p = random_params(3, 4, 6, Activation::Relu);
        let x = normal_matrix(&mut RngStream::new(3, 1).rng(), 4, 2, 1.0);
        let scaled = FfnParams {
            w1: p.w1.scale(7.0),
            w2: p.w2.scale(0.25),
            activation: Activation::Relu,
        };
        for j in 0..2 {
            let a = ffn_jacobian(&x, &p, j).unwrap().scale(7.0 * 0.25);
            let b = ffn_jacobian(&x, &scaled, j).unwrap();
            assert!(a.sub(&b).unwrap().max_abs() <= 1e-14 * a.max_abs());
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let p = random_params(4, 3, 5, Activation::Tanh);
        let mut rng = RngStream::new(4, 1).rng();
        let x = normal_matrix(&mut rng, 3, 2, 1.0);
        let g = normal_matrix(&mut rng, 3, 2, 1.0);
        let grads = ffn_vjp(&x, &p, &g).unwrap();
        let h = 1e-6;
        for e in 0..p.w1.len() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.w1.as_mut_slice()[e] += h;
            pm.w1.as_mut_slice()[e] -= h;
            let fd = (ffn_forward(&x, &pp).unwrap().dot(&g) - ffn_forward(&x, &pm).unwrap().dot(&g)) / (2.0 * h);
            assert!((fd - grads.w1.as_slice()[e]).abs() < 1e-8);
        }
        for e in 0..p.w2.len() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.w2.as_mut_slice()[e] += h;
            pm.w2.as_mut_slice()[e] -= h;
            let fd = (ffn_forward(&x, &pp).unwrap().dot(&g) - ffn_forward(&x, &pm).unwrap().dot(&g)) / (2.0 * h);
            assert!((fd - grads.w2.as_slice()[e]).abs() < 1e-8);
        }
        for e in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_mut_slice()[e] += h;
            xm.as_mut_slice()[e] -= h;
            let fd = (ffn_forward(&xp, &p).unwrap().dot(&g) - ffn_forward(&xm, &p).unwrap().dot(&g)) / (2.0 * h);
            assert!((fd - grads.x.as_slice()[e]).abs() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(crate::test_support::pinned(200))]

        #[test]
        fn tanh_jacobian_matches_central_differences(seed in any::<u64>(), d in 2usize..9, m in 1usize..12, n in 1usize..5) {
            let p = random_params(seed, d, m, Activation::Tanh);
            let x = normal_matrix(&mut RngStream::new(seed, 1).rng(), d, n, 1.0);
            let mut diff = 0.0f64;
            let mut scale = 0.0f64;
            for j in 0..n {
                let a = ffn_jacobian(&x, &p, j).unwrap();
                let f = fd_token(&x, &p, j);
                diff = diff.max(a.sub(&f).unwrap().max_abs());
                scale = scale.max(a.max_abs()).max(f.max_abs());
            }
            prop_assert!(diff <= 1e-6 * scale);
        }
    }
}
