//! Multi-head self-attention over a `d x n` hidden state.
//!
//! Each head maps `X` to `W V X softmax((K X)ᵀ Q X / √k)`, softmax taken per
//! column, and the heads are summed. No causal mask.

use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_columns, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    /// `k x d`
    pub q: Matrix,
    /// `k x d`
    pub k: Matrix,
    /// `k x d`
    pub v: Matrix,
    /// `d x k`
    pub w: Matrix,
}

impl AttentionHead {
    pub fn zeros(d: usize, k: usize) -> Self {
        AttentionHead {
            q: Matrix::zeros(k, d),
            k: Matrix::zeros(k, d),
            v: Matrix::zeros(k, d),
            w: Matrix::zeros(d, k),
        }
    }

    pub fn key_dim(&self) -> usize {
        self.q.rows()
    }

    fn check(&self, d: usize) -> Result<()> {
        let k = self.key_dim();
        for (m, shape) in [
            (&self.q, (k, d)),
            (&self.k, (k, d)),
            (&self.v, (k, d)),
            (&self.w, (d, k)),
        ] {
            if m.shape() != shape {
                return Err(Error::DimensionMismatch {
                    op: "attention head",
                    left: m.shape(),
                    right: shape,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: Vec<AttentionHead>,
}

impl AttentionParams {
    pub fn zeros(d: usize, k: usize, heads: usize) -> Self {
        AttentionParams {
            heads: (0..heads).map(|_| AttentionHead::zeros(d, k)).collect(),
        }
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::undefined("attention", "at least one head is required"));
        }
        let k = self.heads[0].key_dim();
        for h in &self.heads {
            h.check(x.rows())?;
            if h.key_dim() != k {
                return Err(Error::undefined("attention", "heads must share the key dimension"));
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "attention" });
        }
        Ok(())
    }
}

/// Per-head intermediates of one forward evaluation.
#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    pub qx: Matrix,
    pub kx: Matrix,
    pub vx: Matrix,
    /// `n x n`, column `j` holds the weights token `j` puts on every `l`.
    pub a: Matrix,
}

fn head_cache(h: &AttentionHead, x: &Matrix) -> Result<HeadCache> {
    let qx = matmul(&h.q, x)?;
    let kx = matmul(&h.k, x)?;
    let vx = matmul(&h.v, x)?;
    let scale = 1.0 / (h.key_dim() as f64).sqrt();
    let s = matmul(&kx.transpose(), &qx)?.scale(scale);
    let a = softmax_columns(&s)?;
    Ok(HeadCache { qx, kx, vx, a })
}

pub fn attn_forward(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    p.check(x)?;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for h in &p.heads {
        let c = head_cache(h, x)?;
        let wv = matmul(&h.w, &c.vx)?;
        out.add_assign(&matmul(&wv, &c.a)?)?;
    }
    Ok(out)
}

/// Attention weights of every head, `n x n` each.
pub fn attention_weights(x: &Matrix, p: &AttentionParams) -> Result<Vec<Matrix>> {
    p.check(x)?;
    p.heads.iter().map(|h| Ok(head_cache(h, x)?.a)).collect()
}

/// `∂[f(X)]_j / ∂x_i`, rows indexing the output features.
pub fn attn_jacobian(x: &Matrix, p: &AttentionParams, i: usize, j: usize) -> Result<Matrix> {
    p.check(x)?;
    let n = x.cols();
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::IndexOutOfRange {
                what: "token",
                index: idx,
                len: n,
            });
        }
    }
    let caches = p
        .heads
        .iter()
        .map(|h| head_cache(h, x))
        .collect::<Result<Vec<_>>>()?;
    let wvs = p
        .heads
        .iter()
        .map(|h| matmul(&h.w, &h.v))
        .collect::<Result<Vec<_>>>()?;
    jacobian_block(x, p, &caches, &wvs, i, j)
}

fn jacobian_block(
    x: &Matrix,
    p: &AttentionParams,
    caches: &[HeadCache],
    wvs: &[Matrix],
    i: usize,
    j: usize,
) -> Result<Matrix> {
    let d = x.rows();
    let n = x.cols();
    let mut out = Matrix::zeros(d, d);
    for ((h, c), wv) in p.heads.iter().zip(caches).zip(wvs) {
        let scale = 1.0 / (h.key_dim() as f64).sqrt();
        let a = c.a.col(j);
        // G = ∂s_j/∂x_i, n x d.
        let mut g = Matrix::zeros(n, d);
        let qk = h.k.transpose().mat_vec(c.qx.col(j))?;
        for (b, v) in qk.iter().enumerate() {
            g[(i, b)] += scale * v;
        }
        if i == j {
            let kxq = matmul(&c.kx.transpose(), &h.q)?;
            g.add_assign(&kxq.scale(scale))?;
        }
        // (diag(a) - a aᵀ) G
        let mut sg = Matrix::zeros(n, d);
        for b in 0..d {
            let ag: f64 = (0..n).map(|l| a[l] * g[(l, b)]).sum();
            for l in 0..n {
                sg[(l, b)] = a[l] * (g[(l, b)] - ag);
            }
        }
        let mut inner = matmul(x, &sg)?;
        for r in 0..d {
            inner[(r, r)] += a[i];
        }
        out.add_assign(&matmul(wv, &inner)?)?;
    }
    Ok(out)
}

/// Dense `nd x nd` Jacobian of `vec(f(X))` with respect to `vec(X)`.
pub fn attn_full_jacobian(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    p.check(x)?;
    let (d, n) = x.shape();
    let caches = p
        .heads
        .iter()
        .map(|h| head_cache(h, x))
        .collect::<Result<Vec<_>>>()?;
    let wvs = p
        .heads
        .iter()
        .map(|h| matmul(&h.w, &h.v))
        .collect::<Result<Vec<_>>>()?;
    let mut full = Matrix::zeros(n * d, n * d);
    for j in 0..n {
        for i in 0..n {
            let b = jacobian_block(x, p, &caches, &wvs, i, j)?;
            full.set_block(j * d, i * d, &b);
        }
    }
    Ok(full)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub w: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub x: Matrix,
    pub heads: Vec<HeadGrads>,
}

/// Pulls the output cotangent `g` back to the input and to every head's
/// weights.
pub fn attn_vjp(x: &Matrix, p: &AttentionParams, g: &Matrix) -> Result<AttentionGrads> {
    p.check(x)?;
    if g.shape() != x.shape() {
        return Err(Error::DimensionMismatch {
            op: "attn_vjp",
            left: g.shape(),
            right: x.shape(),
        });
    }
    let xt = x.transpose();
    let mut gx = Matrix::zeros(x.rows(), x.cols());
    let mut heads = Vec::with_capacity(p.heads.len());
    for h in &p.heads {
        let c = head_cache(h, x)?;
        let scale = 1.0 / (h.key_dim() as f64).sqrt();
        let vxa = matmul(&c.vx, &c.a)?;
        let gw = matmul(g, &vxa.transpose())?;
        let gva = matmul(&h.w.transpose(), g)?;
        let gvx = matmul(&gva, &c.a.transpose())?;
        let ga = matmul(&c.vx.transpose(), &gva)?;
        let mut gs = Matrix::zeros(ga.rows(), ga.cols());
        for j in 0..ga.cols() {
            let a = c.a.col(j);
            let gaj = ga.col(j);
            let dotp: f64 = a.iter().zip(gaj).map(|(a, g)| a * g).sum();
            for (l, out) in gs.col_mut(j).iter_mut().enumerate() {
                *out = a[l] * (gaj[l] - dotp);
            }
        }
        let gkx = matmul(&c.qx, &gs.transpose())?.scale(scale);
        let gqx = matmul(&c.kx, &gs)?.scale(scale);
        gx.add_assign(&matmul(&h.v.transpose(), &gvx)?)?;
        gx.add_assign(&matmul(&h.k.transpose(), &gkx)?)?;
        gx.add_assign(&matmul(&h.q.transpose(), &gqx)?)?;
        heads.push(HeadGrads {
            q: matmul(&gqx, &xt)?,
            k: matmul(&gkx, &xt)?,
            v: matmul(&gvx, &xt)?,
            w: gw,
        });
    }
    Ok(AttentionGrads { x: gx, heads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{normal_matrix, RngStream};
    use proptest::prelude::*;

    fn random_params(seed: u64, d: usize, k: usize, heads: usize) -> AttentionParams {
        let mut rng = RngStream::new(seed, 100).rng();
        let sd = 1.0 / (d as f64).sqrt();
        let sk = 1.0 / (k as f64).sqrt();
        AttentionParams {
            heads: (0..heads)
                .map(|_| AttentionHead {
                    q: normal_matrix(&mut rng, k, d, sd),
                    k: normal_matrix(&mut rng, k, d, sd),
                    v: normal_matrix(&mut rng, k, d, sd),
                    w: normal_matrix(&mut rng, d, k, sk),
                })
                .collect(),
        }
    }

    fn fd_block(x: &Matrix, p: &AttentionParams, i: usize, j: usize) -> Matrix {
        let d = x.rows();
        let h = 1e-6 * (1.0 + x.max_abs());
        let mut out = Matrix::zeros(d, d);
        for b in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[(b, i)] += h;
            xm[(b, i)] -= h;
            let fp = attn_forward(&xp, p).unwrap();
            let fm = attn_forward(&xm, p).unwrap();
            for a in 0..d {
                out[(a, b)] = (fp[(a, j)] - fm[(a, j)]) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn zero_logits_give_column_means() {
        let mut p = random_params(1, 3, 2, 1);
        p.heads[0].q = Matrix::zeros(2, 3);
        p.heads[0].k = Matrix::zeros(2, 3);
        let x = normal_matrix(&mut RngStream::new(2, 0).rng(), 3, 4, 1.0);
        let out = attn_forward(&x, &p).unwrap();
        let wvx = matmul(&matmul(&p.heads[0].w, &p.heads[0].v).unwrap(), &x).unwrap();
        for a in 0..3 {
            let mean = (0..4).map(|l| wvx[(a, l)]).sum::<f64>() / 4.0;
            for j in 0..4 {
                assert!((out[(a, j)] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_token_is_linear() {
        let p = random_params(3, 3, 2, 1);
        let x = Matrix::from_columns(&[vec![0.5, -1.0, 2.0]]);
        let out = attn_forward(&x, &p).unwrap();
        let expected = matmul(&matmul(&p.heads[0].w, &p.heads[0].v).unwrap(), &x).unwrap();
        assert!(out.sub(&expected).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn small_integer_instance() {
        // Q = K = V = W = I (k = d = 2), X = [[1, 0], [0, 1]].
        // Logits S = XᵀX / √2 = I/√2, so each column of A is
        // (e^{1/√2}, 1) / (e^{1/√2} + 1) up to order, and out = X A = A.
        let i2 = Matrix::identity(2);
        let p = AttentionParams {
            heads: vec![AttentionHead {
                q: i2.clone(),
                k: i2.clone(),
                v: i2.clone(),
                w: i2.clone(),
            }],
        };
        let out = attn_forward(&i2, &p).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let hi = e / (e + 1.0);
        let lo = 1.0 / (e + 1.0);
        let expected = Matrix::from_rows(&[&[hi, lo], &[lo, hi]]);
        assert!(out.sub(&expected).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_zero_jacobian() {
        let p = AttentionParams::zeros(3, 2, 2);
        let x = normal_matrix(&mut RngStream::new(4, 0).rng(), 3, 3, 1.0);
        assert_eq!(attn_full_jacobian(&x, &p).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn token_index_out_of_range() {
        let p = random_params(5, 2, 2, 1);
        let x = Matrix::zeros(2, 3);
        assert!(matches!(
            attn_jacobian(&x, &p, 3, 0),
            Err(Error::IndexOutOfRange { index: 3, len: 3, .. })
        ));
    }

    #[test]
    fn vjp_matches_full_jacobian_transpose() {
        let p = random_params(6, 4, 3, 2);
        let mut rng = RngStream::new(7, 0).rng();
        let x = normal_matrix(&mut rng, 4, 3, 1.0);
        let g = normal_matrix(&mut rng, 4, 3, 1.0);
        let jt = attn_full_jacobian(&x, &p).unwrap().transpose();
        let expected = jt.mat_vec(g.as_slice()).unwrap();
        let got = attn_vjp(&x, &p, &g).unwrap();
        for (a, b) in got.x.as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_vjp_matches_finite_differences() {
        let p = random_params(8, 3, 2, 2);
        let mut rng = RngStream::new(9, 0).rng();
        let x = normal_matrix(&mut rng, 3, 3, 1.0);
        let g = normal_matrix(&mut rng, 3, 3, 1.0);
        let grads = attn_vjp(&x, &p, &g).unwrap();
        let loss = |q: &AttentionParams| attn_forward(&x, q).unwrap().dot(&g);
        let h = 1e-6;
        for hd in 0..2 {
            for which in 0..4 {
                let analytic = match which {
                    0 => &grads.heads[hd].q,
                    1 => &grads.heads[hd].k,
                    2 => &grads.heads[hd].v,
                    _ => &grads.heads[hd].w,
                };
                for e in 0..analytic.len() {
                    let bump = |delta: f64| {
                        let mut q = p.clone();
                        let m = match which {
                            0 => &mut q.heads[hd].q,
                            1 => &mut q.heads[hd].k,
                            2 => &mut q.heads[hd].v,
                            _ => &mut q.heads[hd].w,
                        };
                        m.as_mut_slice()[e] += delta;
                        loss(&q)
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    assert!((fd - analytic.as_slice()[e]).abs() < 1e-7, "{fd} vs {}", analytic.as_slice()[e]);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(crate::test_support::pinned(100))]

        #[test]
        fn blocks_match_central_differences(seed in any::<u64>(), d in 2usize..9, n in 1usize..6, heads in 1usize..3, k in 1usize..5) {
            let p = random_params(seed, d, k, heads);
            let x = normal_matrix(&mut RngStream::new(seed, 1).rng(), d, n, 1.0);
            // Normwise over all n² blocks: a block far smaller than the map
            // itself is below what a difference quotient can resolve.
            let mut diff = 0.0f64;
            let mut scale = 0.0f64;
            for j in 0..n {
                for i in 0..n {
                    let a = attn_jacobian(&x, &p, i, j).unwrap();
                    let f = fd_block(&x, &p, i, j);
                    diff = diff.max(a.sub(&f).unwrap().max_abs());
                    scale = scale.max(a.max_abs()).max(f.max_abs());
                }
            }
            prop_assert!(diff <= 1e-6 * scale);
        }

        #[test]
        fn bilinear_in_output_and_value(seed in any::<u64>(), c1 in -20.0f64..20.0, c2 in -20.0f64..20.0) {
            let p = random_params(seed, 4, 3, 2);
            let x = normal_matrix(&mut RngStream::new(seed, 2).rng(), 4, 3, 1.0);
            let mut scaled = p.clone();
            for h in &mut scaled.heads {
                h.w = h.w.scale(c1);
                h.v = h.v.scale(c2);
            }
            let j = attn_full_jacobian(&x, &p).unwrap();
            let js = attn_full_jacobian(&x, &scaled).unwrap();
            let expected = j.scale(c1 * c2);
            for (a, b) in js.as_slice().iter().zip(expected.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-3 * expected.max_abs()));
            }
        }
    }
}
