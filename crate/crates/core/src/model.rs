//! Transformer blocks under a normalization placement, with residual step
//! `Δt`, a recorded forward tape, dense block sensitivities and a reverse
//! pass for parameter gradients.
//!
//! A block is two stages, attention then FFN. With `f` the sublayer:
//!
//! | placement | stage                                  |
//! |-----------|----------------------------------------|
//! | Off       | `X + Δt f(X)`                          |
//! | Pre       | `X + Δt f(LN_in(X))`                   |
//! | Peri      | `X + Δt LN_out(f(LN_in(X)))`           |
//! | Post      | `LN(X + Δt f(X))`                      |
//!
//! Post keeps its residual norms in the `*_out` slots.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attn_forward, attn_full_jacobian, attn_vjp, AttentionHead, AttentionParams, HeadGrads};
use crate::error::{Error, Result, Site};
use crate::ffn::{ffn_forward, ffn_jacobian, ffn_vjp, Activation, FfnParams};
use crate::normalization::{
    ln_forward_token, ln_jacobian_token, ln_vjp_token, LnParams, NormKind, DEFAULT_EPSILON,
};
use crate::numerics::{matmul, moments, norm2, normal_matrix, softmax_columns, spectral_norm_default, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Off,
    Pre,
    #[default]
    Peri,
    Post,
}

impl Placement {
    pub const ALL: [Placement; 4] = [Placement::Off, Placement::Pre, Placement::Peri, Placement::Post];

    /// Which of (attn-in, attn-out, ffn-in, ffn-out) carry a norm.
    pub fn active_sites(self) -> [bool; 4] {
        match self {
            Placement::Off => [false; 4],
            Placement::Pre => [true, false, true, false],
            Placement::Peri => [true; 4],
            Placement::Post => [false, true, false, true],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Placement::Off => "off",
            Placement::Pre => "pre",
            Placement::Peri => "peri",
            Placement::Post => "post",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Ok(Placement::Off),
            "pre" => Ok(Placement::Pre),
            "peri" => Ok(Placement::Peri),
            "post" => Ok(Placement::Post),
            other => Err(Error::Config(format!(
                "unknown placement '{other}' (expected off, pre, peri or post)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub heads: usize,
    pub depth: usize,
    pub placement: Placement,
    pub delta_t: f64,
    pub activation: Activation,
    pub epsilon: f64,
    pub norm_kind: NormKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 4,
            n: 3,
            k: 3,
            m: 8,
            heads: 2,
            depth: 4,
            placement: Placement::Peri,
            delta_t: 1.0,
            activation: Activation::Tanh,
            epsilon: DEFAULT_EPSILON,
            norm_kind: NormKind::LayerNorm,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [("d", self.d), ("n", self.n), ("k", self.k), ("m", self.m), ("heads", self.heads), ("depth", self.depth)];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.delta_t > 0.0 && self.delta_t <= 1.0) {
            return Err(Error::Config(format!("delta_t = {} must lie in (0, 1]", self.delta_t)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon = {} must be >= 0", self.epsilon)));
        }
        if self.norm_kind == NormKind::LayerNorm && self.d < 2 && self.placement != Placement::Off {
            return Err(Error::Config("LayerNorm needs d >= 2".into()));
        }
        Ok(())
    }

    pub fn nd(&self) -> usize {
        self.n * self.d
    }

    pub fn unit_norm(&self) -> LnParams {
        LnParams::unit(self.d, self.epsilon, self.norm_kind)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LnSites {
    pub attn_in: Option<LnParams>,
    pub attn_out: Option<LnParams>,
    pub ffn_in: Option<LnParams>,
    pub ffn_out: Option<LnParams>,
}

impl LnSites {
    /// Unit sites for exactly the slots `placement` uses.
    pub fn for_placement(placement: Placement, unit: &LnParams) -> Self {
        let [ai, ao, fi, fo] = placement.active_sites();
        let pick = |on: bool| on.then(|| unit.clone());
        LnSites {
            attn_in: pick(ai),
            attn_out: pick(ao),
            ffn_in: pick(fi),
            ffn_out: pick(fo),
        }
    }

    fn slots(&self) -> [(&Option<LnParams>, Site); 4] {
        [
            (&self.attn_in, Site::AttnIn),
            (&self.attn_out, Site::AttnOut),
            (&self.ffn_in, Site::FfnIn),
            (&self.ffn_out, Site::FfnOut),
        ]
    }

    pub fn iter(&self) -> impl Iterator<Item = &LnParams> {
        [&self.attn_in, &self.attn_out, &self.ffn_in, &self.ffn_out]
            .into_iter()
            .flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub ffn: FfnParams,
    pub ln: LnSites,
}

impl BlockParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        BlockParams {
            attn: AttentionParams::zeros(cfg.d, cfg.k, cfg.heads),
            ffn: FfnParams::zeros(cfg.d, cfg.m, cfg.activation),
            ln: LnSites::for_placement(cfg.placement, &cfg.unit_norm()),
        }
    }

    /// Weights `~ N(0, 1/fan_in)`, `γ = 1`, `β = 0`.
    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let sd = 1.0 / (cfg.d as f64).sqrt();
        let sk = 1.0 / (cfg.k as f64).sqrt();
        let sm = 1.0 / (cfg.m as f64).sqrt();
        let heads = (0..cfg.heads)
            .map(|_| AttentionHead {
                q: normal_matrix(rng, cfg.k, cfg.d, sd),
                k: normal_matrix(rng, cfg.k, cfg.d, sd),
                v: normal_matrix(rng, cfg.k, cfg.d, sd),
                w: normal_matrix(rng, cfg.d, cfg.k, sk),
            })
            .collect();
        BlockParams {
            attn: AttentionParams { heads },
            ffn: FfnParams {
                w1: normal_matrix(rng, cfg.m, cfg.d, sd),
                w2: normal_matrix(rng, cfg.d, cfg.m, sm),
                activation: cfg.activation,
            },
            ln: LnSites::for_placement(cfg.placement, &cfg.unit_norm()),
        }
    }

    pub fn validate(&self, placement: Placement) -> Result<()> {
        let want = placement.active_sites();
        for ((slot, site), on) in self.ln.slots().into_iter().zip(want) {
            if slot.is_some() != on {
                return Err(Error::Config(format!(
                    "site {site} must be {} under {placement} placement",
                    if on { "present" } else { "absent" }
                )));
            }
        }
        Ok(())
    }

    /// Every trainable tensor, paired with whether weight decay applies.
    /// The order matches [`BlockGrads::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out: Vec<(&mut [f64], bool)> = Vec::new();
        for h in &mut self.attn.heads {
            out.push((h.q.as_mut_slice(), true));
            out.push((h.k.as_mut_slice(), true));
            out.push((h.v.as_mut_slice(), true));
            out.push((h.w.as_mut_slice(), true));
        }
        out.push((self.ffn.w1.as_mut_slice(), true));
        out.push((self.ffn.w2.as_mut_slice(), true));
        let LnSites {
            attn_in,
            attn_out,
            ffn_in,
            ffn_out,
        } = &mut self.ln;
        for site in [attn_in, attn_out, ffn_in, ffn_out].into_iter().flatten() {
            out.push((site.gamma.as_mut_slice(), false));
            if site.kind == NormKind::LayerNorm {
                out.push((site.beta.as_mut_slice(), false));
            }
        }
        out
    }

    pub fn weight_sq_norm(&self) -> f64 {
        let mut s = 0.0;
        for h in &self.attn.heads {
            for m in [&h.q, &h.k, &h.v, &h.w] {
                s += m.dot(m);
            }
        }
        s + self.ffn.w1.dot(&self.ffn.w1) + self.ffn.w2.dot(&self.ffn.w2)
    }
}

pub fn random_model(cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<BlockParams> {
    (0..cfg.depth).map(|_| BlockParams::random(cfg, rng)).collect()
}

pub fn zero_model(cfg: &ModelConfig) -> Vec<BlockParams> {
    (0..cfg.depth).map(|_| BlockParams::zeros(cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sublayer {
    Attention,
    Ffn,
}

impl Sublayer {
    fn site(self) -> Site {
        match self {
            Sublayer::Attention => Site::Attention,
            Sublayer::Ffn => Site::Ffn,
        }
    }
}

/// Intermediate states of one residual stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SublayerTape {
    pub input: Matrix,
    /// `LN_in(input)`, or `input` when no input norm is active.
    pub normed: Matrix,
    /// The raw sublayer output `f(normed)`.
    pub raw: Matrix,
    /// What enters the residual sum: `LN_out(raw)` under Peri, else `raw`.
    pub update: Matrix,
    /// `input + Δt * update`.
    pub residual: Matrix,
    /// `residual`, or `LN(residual)` under Post.
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTape {
    pub attn: SublayerTape,
    pub ffn: SublayerTape,
}

impl BlockTape {
    pub fn output(&self) -> &Matrix {
        &self.ffn.output
    }
}

/// Everything a forward pass produced. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTape {
    pub cfg: ModelConfig,
    pub params: Vec<BlockParams>,
    /// `X_0 .. X_D`.
    pub states: Vec<Matrix>,
    pub blocks: Vec<BlockTape>,
}

impl ForwardTape {
    pub fn input(&self) -> &Matrix {
        &self.states[0]
    }

    pub fn output(&self) -> &Matrix {
        self.states.last().expect("tape holds at least X_0")
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Re-runs the recorded input through the recorded parameters.
    pub fn replay(&self) -> Result<ForwardTape> {
        model_forward(self.input(), &self.params, &self.cfg)
    }
}

struct StageSpec<'a> {
    sub: Sublayer,
    norm_in: Option<&'a LnParams>,
    norm_out: Option<&'a LnParams>,
    post: bool,
    in_site: Site,
    out_site: Site,
}

fn stage_specs<'a>(b: &'a BlockParams, placement: Placement) -> [StageSpec<'a>; 2] {
    let post = placement == Placement::Post;
    [
        StageSpec {
            sub: Sublayer::Attention,
            norm_in: b.ln.attn_in.as_ref(),
            norm_out: b.ln.attn_out.as_ref(),
            post,
            in_site: Site::AttnIn,
            out_site: Site::AttnOut,
        },
        StageSpec {
            sub: Sublayer::Ffn,
            norm_in: b.ln.ffn_in.as_ref(),
            norm_out: b.ln.ffn_out.as_ref(),
            post,
            in_site: Site::FfnIn,
            out_site: Site::FfnOut,
        },
    ]
}

fn norm_columns(x: &Matrix, p: &LnParams) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for j in 0..x.cols() {
        out.set_col(j, &ln_forward_token(x.col(j), p, j)?);
    }
    Ok(out)
}

fn apply_sublayer(sub: Sublayer, b: &BlockParams, x: &Matrix) -> Result<Matrix> {
    match sub {
        Sublayer::Attention => attn_forward(x, &b.attn),
        Sublayer::Ffn => ffn_forward(x, &b.ffn),
    }
}

fn stage_forward(x: &Matrix, b: &BlockParams, spec: &StageSpec, dt: f64, block: usize) -> Result<SublayerTape> {
    let normed = match spec.norm_in {
        Some(p) => norm_columns(x, p).map_err(|e| e.at(block, spec.in_site))?,
        None => x.clone(),
    };
    let raw = apply_sublayer(spec.sub, b, &normed).map_err(|e| e.at(block, spec.sub.site()))?;
    let update = match (spec.norm_out, spec.post) {
        (Some(p), false) => norm_columns(&raw, p).map_err(|e| e.at(block, spec.out_site))?,
        _ => raw.clone(),
    };
    let residual = x.add_scaled(dt, &update)?;
    let output = match (spec.norm_out, spec.post) {
        (Some(p), true) => norm_columns(&residual, p).map_err(|e| e.at(block, spec.out_site))?,
        _ => residual.clone(),
    };
    Ok(SublayerTape {
        input: x.clone(),
        normed,
        raw,
        update,
        residual,
        output,
    })
}

fn check_input(x: &Matrix, cfg: &ModelConfig) -> Result<()> {
    if x.shape() != (cfg.d, cfg.n) {
        return Err(Error::DimensionMismatch {
            op: "hidden state",
            left: x.shape(),
            right: (cfg.d, cfg.n),
        });
    }
    Ok(())
}

/// One block, tagged with `block` in any error it raises.
pub fn block_forward_at(x: &Matrix, b: &BlockParams, cfg: &ModelConfig, block: usize) -> Result<(Matrix, BlockTape)> {
    check_input(x, cfg)?;
    b.validate(cfg.placement)?;
    let [sa, sf] = stage_specs(b, cfg.placement);
    let attn = stage_forward(x, b, &sa, cfg.delta_t, block)?;
    let ffn = stage_forward(&attn.output, b, &sf, cfg.delta_t, block)?;
    Ok((ffn.output.clone(), BlockTape { attn, ffn }))
}

pub fn block_forward(x: &Matrix, b: &BlockParams, cfg: &ModelConfig) -> Result<(Matrix, BlockTape)> {
    block_forward_at(x, b, cfg, 0)
}

fn is_non_finite(e: &Error) -> bool {
    match e {
        Error::NonFinite { .. } => true,
        Error::Block { source, .. } => is_non_finite(source),
        _ => false,
    }
}

pub fn model_forward(x0: &Matrix, params: &[BlockParams], cfg: &ModelConfig) -> Result<ForwardTape> {
    if params.len() != cfg.depth {
        return Err(Error::Config(format!(
            "model has {} blocks but depth is {}",
            params.len(),
            cfg.depth
        )));
    }
    check_input(x0, cfg)?;
    if !x0.is_finite() {
        return Err(Error::NonFinite { op: "model input" });
    }
    let mut states = Vec::with_capacity(params.len() + 1);
    let mut blocks = Vec::with_capacity(params.len());
    states.push(x0.clone());
    for (i, b) in params.iter().enumerate() {
        let (next, tape) = match block_forward_at(states.last().unwrap(), b, cfg, i) {
            Ok(r) => r,
            Err(e) if is_non_finite(&e) => return Err(Error::Divergence { block: i }),
            Err(e) => return Err(e),
        };
        if !next.is_finite() {
            return Err(Error::Divergence { block: i });
        }
        states.push(next);
        blocks.push(tape);
    }
    Ok(ForwardTape {
        cfg: cfg.clone(),
        params: params.to_vec(),
        states,
        blocks,
    })
}

fn norm_block_diag(x: &Matrix, p: &LnParams) -> Result<Matrix> {
    let d = x.rows();
    let mut out = Matrix::zeros(x.len(), x.len());
    for j in 0..x.cols() {
        out.set_block(j * d, j * d, &ln_jacobian_token(x.col(j), p, j)?);
    }
    Ok(out)
}

fn sublayer_jacobian(sub: Sublayer, b: &BlockParams, x: &Matrix) -> Result<Matrix> {
    match sub {
        Sublayer::Attention => attn_full_jacobian(x, &b.attn),
        Sublayer::Ffn => {
            let d = x.rows();
            let mut out = Matrix::zeros(x.len(), x.len());
            for j in 0..x.cols() {
                out.set_block(j * d, j * d, &ffn_jacobian(x, &b.ffn, j)?);
            }
            Ok(out)
        }
    }
}

fn stage_jacobian(t: &SublayerTape, b: &BlockParams, spec: &StageSpec, dt: f64, block: usize) -> Result<Matrix> {
    let mut j = sublayer_jacobian(spec.sub, b, &t.normed).map_err(|e| e.at(block, spec.sub.site()))?;
    if let Some(p) = spec.norm_in {
        let jin = norm_block_diag(&t.input, p).map_err(|e| e.at(block, spec.in_site))?;
        j = matmul(&j, &jin)?;
    }
    if let (Some(p), false) = (spec.norm_out, spec.post) {
        let jout = norm_block_diag(&t.raw, p).map_err(|e| e.at(block, spec.out_site))?;
        j = matmul(&jout, &j)?;
    }
    let stage = Matrix::identity(j.rows()).add_scaled(dt, &j)?;
    match (spec.norm_out, spec.post) {
        (Some(p), true) => {
            let jpost = norm_block_diag(&t.residual, p).map_err(|e| e.at(block, spec.out_site))?;
            matmul(&jpost, &stage)
        }
        _ => Ok(stage),
    }
}

fn block_index(tape: &ForwardTape, i: usize) -> Result<()> {
    if i >= tape.depth() {
        return Err(Error::IndexOutOfRange {
            what: "block",
            index: i,
            len: tape.depth(),
        });
    }
    Ok(())
}

/// Jacobians of the attention stage and the FFN stage of block `i`.
pub fn stage_sensitivities(tape: &ForwardTape, i: usize) -> Result<(Matrix, Matrix)> {
    block_index(tape, i)?;
    let b = &tape.params[i];
    let bt = &tape.blocks[i];
    let [sa, sf] = stage_specs(b, tape.cfg.placement);
    let ja = stage_jacobian(&bt.attn, b, &sa, tape.cfg.delta_t, i)?;
    let jf = stage_jacobian(&bt.ffn, b, &sf, tape.cfg.delta_t, i)?;
    Ok((ja, jf))
}

/// Jacobian of one residual stage of `b`, evaluated at stage input `x`.
pub fn stage_jacobian_at(x: &Matrix, b: &BlockParams, cfg: &ModelConfig, sub: Sublayer) -> Result<Matrix> {
    check_input(x, cfg)?;
    b.validate(cfg.placement)?;
    let [sa, sf] = stage_specs(b, cfg.placement);
    let spec = match sub {
        Sublayer::Attention => sa,
        Sublayer::Ffn => sf,
    };
    let t = stage_forward(x, b, &spec, cfg.delta_t, 0)?;
    stage_jacobian(&t, b, &spec, cfg.delta_t, 0)
}

/// `∂vec(X_{i+1}) / ∂vec(X_i)`, `nd x nd`.
pub fn local_sensitivity(tape: &ForwardTape, i: usize) -> Result<Matrix> {
    let (ja, jf) = stage_sensitivities(tape, i)?;
    matmul(&jf, &ja)
}

/// `∂vec(X_D) / ∂vec(X_i)`.
pub fn gradient_product(tape: &ForwardTape, i: usize) -> Result<Matrix> {
    block_index(tape, i)?;
    let mut acc = local_sensitivity(tape, i)?;
    for l in i + 1..tape.depth() {
        acc = matmul(&local_sensitivity(tape, l)?, &acc)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormSiteGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LnSiteGrads {
    pub attn_in: Option<NormSiteGrads>,
    pub attn_out: Option<NormSiteGrads>,
    pub ffn_in: Option<NormSiteGrads>,
    pub ffn_out: Option<NormSiteGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub attn: Vec<HeadGrads>,
    pub ffn_w1: Matrix,
    pub ffn_w2: Matrix,
    pub ln: LnSiteGrads,
}

impl BlockGrads {
    /// Same order as [`BlockParams::tensors_mut`].
    pub fn tensors(&self, params: &BlockParams) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for h in &self.attn {
            out.push(h.q.as_slice());
            out.push(h.k.as_slice());
            out.push(h.v.as_slice());
            out.push(h.w.as_slice());
        }
        out.push(self.ffn_w1.as_slice());
        out.push(self.ffn_w2.as_slice());
        let sites = [
            (&self.ln.attn_in, &params.ln.attn_in),
            (&self.ln.attn_out, &params.ln.attn_out),
            (&self.ln.ffn_in, &params.ln.ffn_in),
            (&self.ln.ffn_out, &params.ln.ffn_out),
        ];
        for (g, p) in sites {
            if let (Some(g), Some(p)) = (g, p) {
                out.push(g.gamma.as_slice());
                if p.kind == NormKind::LayerNorm {
                    out.push(g.beta.as_slice());
                }
            }
        }
        out
    }

    pub fn sq_norm(&self, params: &BlockParams) -> f64 {
        self.tensors(params).iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub blocks: Vec<BlockGrads>,
    /// Cotangent with respect to `X_0`.
    pub input: Matrix,
}

fn norm_columns_vjp(x: &Matrix, p: &LnParams, g: &Matrix) -> Result<(Matrix, NormSiteGrads)> {
    let d = x.rows();
    let mut gx = Matrix::zeros(d, x.cols());
    let mut site = NormSiteGrads {
        gamma: vec![0.0; d],
        beta: vec![0.0; d],
    };
    for j in 0..x.cols() {
        let r = ln_vjp_token(x.col(j), p, g.col(j), j)?;
        gx.set_col(j, &r.x);
        for a in 0..d {
            site.gamma[a] += r.gamma[a];
            site.beta[a] += r.beta[a];
        }
    }
    Ok((gx, site))
}

struct StageGrads {
    x: Matrix,
    attn: Option<Vec<HeadGrads>>,
    ffn: Option<(Matrix, Matrix)>,
    norm_in: Option<NormSiteGrads>,
    norm_out: Option<NormSiteGrads>,
}

fn stage_vjp(t: &SublayerTape, b: &BlockParams, spec: &StageSpec, dt: f64, g: &Matrix, block: usize) -> Result<StageGrads> {
    let mut norm_out = None;
    let g_res = match (spec.norm_out, spec.post) {
        (Some(p), true) => {
            let (gx, site) = norm_columns_vjp(&t.residual, p, g).map_err(|e| e.at(block, spec.out_site))?;
            norm_out = Some(site);
            gx
        }
        _ => g.clone(),
    };
    let g_upd = g_res.scale(dt);
    let g_raw = match (spec.norm_out, spec.post) {
        (Some(p), false) => {
            let (gx, site) = norm_columns_vjp(&t.raw, p, &g_upd).map_err(|e| e.at(block, spec.out_site))?;
            norm_out = Some(site);
            gx
        }
        _ => g_upd,
    };
    let (g_normed, attn, ffn) = match spec.sub {
        Sublayer::Attention => {
            let r = attn_vjp(&t.normed, &b.attn, &g_raw).map_err(|e| e.at(block, Site::Attention))?;
            (r.x, Some(r.heads), None)
        }
        Sublayer::Ffn => {
            let r = ffn_vjp(&t.normed, &b.ffn, &g_raw).map_err(|e| e.at(block, Site::Ffn))?;
            (r.x, None, Some((r.w1, r.w2)))
        }
    };
    let mut norm_in = None;
    let g_in = match spec.norm_in {
        Some(p) => {
            let (gx, site) = norm_columns_vjp(&t.input, p, &g_normed).map_err(|e| e.at(block, spec.in_site))?;
            norm_in = Some(site);
            gx
        }
        None => g_normed,
    };
    Ok(StageGrads {
        x: g_res.add(&g_in)?,
        attn,
        ffn,
        norm_in,
        norm_out,
    })
}

/// Reverse pass: gradients of `<upstream, X_D>` with respect to every block
/// parameter and to `X_0`.
pub fn param_gradients(tape: &ForwardTape, upstream: &Matrix) -> Result<ModelGrads> {
    if upstream.shape() != tape.output().shape() {
        return Err(Error::DimensionMismatch {
            op: "param_gradients",
            left: upstream.shape(),
            right: tape.output().shape(),
        });
    }
    if !upstream.is_finite() {
        return Err(Error::NonFinite { op: "param_gradients" });
    }
    let dt = tape.cfg.delta_t;
    let mut g = upstream.clone();
    let mut blocks = Vec::with_capacity(tape.depth());
    for i in (0..tape.depth()).rev() {
        let b = &tape.params[i];
        let bt = &tape.blocks[i];
        let [sa, sf] = stage_specs(b, tape.cfg.placement);
        let gf = stage_vjp(&bt.ffn, b, &sf, dt, &g, i)?;
        let ga = stage_vjp(&bt.attn, b, &sa, dt, &gf.x, i)?;
        let (w1, w2) = gf.ffn.expect("ffn stage yields ffn grads");
        blocks.push(BlockGrads {
            attn: ga.attn.expect("attention stage yields head grads"),
            ffn_w1: w1,
            ffn_w2: w2,
            ln: LnSiteGrads {
                attn_in: ga.norm_in,
                attn_out: ga.norm_out,
                ffn_in: gf.norm_in,
                ffn_out: gf.norm_out,
            },
        });
        g = ga.x;
    }
    blocks.reverse();
    Ok(ModelGrads { blocks, input: g })
}

/// One layer of the attention-only, single-head chain with merged output
/// and value map `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreChainLayer {
    /// `d x d`, the product of output and value maps.
    pub w: Matrix,
    pub gamma: Vec<f64>,
    /// `k x d`
    pub q: Matrix,
    /// `k x d`
    pub k: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreChainOutput {
    /// `X_0 .. X_D`.
    pub states: Vec<Matrix>,
    /// `1 + Δt √n ‖γ_i‖∞ max_j ‖x_{i,j}‖⁻¹ ‖W_i‖₂` for every layer.
    pub factors: Vec<f64>,
    pub ma_final: f64,
    /// `(1/√(nd)) Π factors ‖X_0‖_F`.
    pub bound_rhs: f64,
}

impl PreChainOutput {
    pub fn x0_frob(&self) -> f64 {
        self.states[0].frobenius()
    }

    pub fn final_state(&self) -> &Matrix {
        self.states.last().expect("chain holds X_0")
    }
}

/// Runs `X_{i+1} = X_i + Δt W_i (Γ_i X_i D_i⁻¹) A_i`, `D_i = diag(‖x_{i,j}‖₂)`,
/// `A_i = softmax((K X̃)ᵀ Q X̃ / √k)` on the normalized state `X̃`.
pub fn simplified_pre_chain(x0: &Matrix, layers: &[PreChainLayer], delta_t: f64) -> Result<PreChainOutput> {
    let (d, n) = x0.shape();
    if n * d < 2 {
        return Err(Error::undefined("simplified_pre_chain", "needs at least 2 entries"));
    }
    let mut states = vec![x0.clone()];
    let mut factors = Vec::with_capacity(layers.len());
    let mut product = 1.0;
    for (i, layer) in layers.iter().enumerate() {
        if layer.w.shape() != (d, d) || layer.gamma.len() != d {
            return Err(Error::DimensionMismatch {
                op: "simplified_pre_chain",
                left: layer.w.shape(),
                right: (d, d),
            });
        }
        let x = states.last().unwrap();
        let mut normed = Matrix::zeros(d, n);
        let mut max_inv = 0.0f64;
        for j in 0..n {
            let r = norm2(x.col(j));
            if r == 0.0 || !r.is_finite() {
                return Err(Error::DegenerateNorm { token: j }.at(i, Site::AttnIn));
            }
            max_inv = max_inv.max(1.0 / r);
            for a in 0..d {
                normed[(a, j)] = layer.gamma[a] * x[(a, j)] / r;
            }
        }
        let k = layer.q.rows().max(1) as f64;
        let s = matmul(&matmul(&layer.k, &normed)?.transpose(), &matmul(&layer.q, &normed)?)?.scale(1.0 / k.sqrt());
        let a = softmax_columns(&s).map_err(|e| e.at(i, Site::Attention))?;
        let update = matmul(&matmul(&layer.w, &normed)?, &a)?;
        let gamma_inf = layer.gamma.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let w_norm = spectral_norm_default(&layer.w)?;
        let factor = 1.0 + delta_t * (n as f64).sqrt() * gamma_inf * max_inv * w_norm;
        factors.push(factor);
        product *= factor;
        states.push(x.add_scaled(delta_t, &update)?);
    }
    let x_d = states.last().unwrap();
    let ma_final = moments(x_d)?.mean_abs;
    let bound_rhs = product * x0.frobenius() / ((n * d) as f64).sqrt();
    Ok(PreChainOutput {
        states,
        factors,
        ma_final,
        bound_rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_jacobian, relative_error};
    use crate::normalization::ellipsoid_residual;
    use crate::numerics::RngStream;

    fn cfg(placement: Placement) -> ModelConfig {
        ModelConfig {
            placement,
            ..ModelConfig::default()
        }
    }

    fn input(c: &ModelConfig, seed: u64) -> Matrix {
        normal_matrix(&mut RngStream::new(seed, 7).rng(), c.d, c.n, 1.0)
    }

    #[test]
    fn zero_weights_are_pure_skip() {
        for placement in [Placement::Off, Placement::Pre, Placement::Peri] {
            for dt in [0.1, 0.5, 1.0] {
                let c = ModelConfig { delta_t: dt, depth: 5, ..cfg(placement) };
                let x = input(&c, 1);
                let tape = model_forward(&x, &zero_model(&c), &c).unwrap();
                assert_eq!(tape.output(), &x, "{placement} dt={dt}");
            }
        }
    }

    #[test]
    fn post_outputs_sit_on_the_ellipsoid() {
        let c = ModelConfig { epsilon: 0.0, depth: 3, ..cfg(Placement::Post) };
        let mut rng = RngStream::new(3, 0).rng();
        let mut params = random_model(&c, &mut rng);
        for b in &mut params {
            let ffn_out = b.ln.ffn_out.as_mut().unwrap();
            ffn_out.gamma = vec![0.5, 2.0, -1.5, 1.0];
            ffn_out.beta = vec![0.1, -0.2, 0.3, 0.0];
        }
        let tape = model_forward(&input(&c, 3), &params, &c).unwrap();
        for (i, x) in tape.states.iter().enumerate().skip(1) {
            let site = params[i - 1].ln.ffn_out.as_ref().unwrap();
            for j in 0..c.n {
                assert!(ellipsoid_residual(x.col(j), site).unwrap().abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn unit_step_matches_unscaled_composition() {
        let c = cfg(Placement::Pre);
        let mut rng = RngStream::new(4, 0).rng();
        let b = BlockParams::random(&c, &mut rng);
        let x = input(&c, 4);
        let (out, _) = block_forward(&x, &b, &c).unwrap();
        let ln_in = b.ln.attn_in.as_ref().unwrap();
        let u = x.add(&attn_forward(&norm_columns(&x, ln_in).unwrap(), &b.attn).unwrap()).unwrap();
        let ffn_in = b.ln.ffn_in.as_ref().unwrap();
        let expected = u.add(&ffn_forward(&norm_columns(&u, ffn_in).unwrap(), &b.ffn).unwrap()).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn replay_is_bit_exact() {
        let c = ModelConfig { depth: 8, ..cfg(Placement::Peri) };
        let params = random_model(&c, &mut RngStream::new(5, 0).rng());
        let tape = model_forward(&input(&c, 5), &params, &c).unwrap();
        let again = tape.replay().unwrap();
        assert_eq!(tape, again);
        assert_eq!(tape.output().frobenius().to_bits(), again.output().frobenius().to_bits());
    }

    #[test]
    fn degenerate_norm_is_tagged_with_block_and_site() {
        let c = ModelConfig { epsilon: 0.0, ..cfg(Placement::Peri) };
        let params = zero_model(&c);
        let err = model_forward(&input(&c, 6), &params, &c).unwrap_err();
        match err {
            Error::Block { block, site, .. } => {
                assert_eq!(block, 0);
                assert_eq!(site, Site::AttnOut);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn blow_up_reports_divergence() {
        let c = ModelConfig { depth: 4, ..cfg(Placement::Off) };
        let mut params = random_model(&c, &mut RngStream::new(7, 0).rng());
        for b in &mut params {
            b.ffn.w1 = b.ffn.w1.scale(1e200);
            b.ffn.w2 = b.ffn.w2.scale(1e200);
        }
        assert!(matches!(
            model_forward(&input(&c, 7), &params, &c),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn wrong_sites_are_rejected() {
        let c = cfg(Placement::Pre);
        let mut b = BlockParams::zeros(&c);
        b.ln.attn_out = Some(c.unit_norm());
        assert!(block_forward(&input(&c, 1), &b, &c).is_err());
    }

    #[test]
    fn zero_weight_pre_sensitivity_is_identity() {
        let c = cfg(Placement::Pre);
        let tape = model_forward(&input(&c, 8), &zero_model(&c), &c).unwrap();
        assert_eq!(local_sensitivity(&tape, 0).unwrap(), Matrix::identity(c.nd()));
    }

    fn block_map<'a>(b: &'a BlockParams, c: &ModelConfig) -> impl Fn(&Matrix) -> Result<Matrix> + 'a {
        let c1 = ModelConfig { depth: 1, ..c.clone() };
        move |x: &Matrix| Ok(block_forward(x, b, &c1)?.0)
    }

    #[test]
    fn local_sensitivity_matches_finite_differences() {
        for placement in Placement::ALL {
            for seed in 0..10 {
                let c = ModelConfig { delta_t: 0.7, ..cfg(placement) };
                let params = random_model(&c, &mut RngStream::new(seed, 1).rng());
                let x = input(&c, seed);
                let tape = model_forward(&x, &params, &c).unwrap();
                let analytic = local_sensitivity(&tape, 1).unwrap();
                let fd = central_jacobian(block_map(&params[1], &c), &tape.states[1]).unwrap();
                let err = relative_error(&analytic, &fd);
                assert!(err <= 1e-6, "{placement} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn gradient_product_matches_composite_map() {
        let c = ModelConfig { d: 3, n: 2, depth: 4, ..cfg(Placement::Peri) };
        let params = random_model(&c, &mut RngStream::new(9, 0).rng());
        let x = input(&c, 9);
        let tape = model_forward(&x, &params, &c).unwrap();
        for i in 0..c.depth {
            let tail = ModelConfig { depth: c.depth - i, ..c.clone() };
            let rest = &params[i..];
            let f = |z: &Matrix| Ok(model_forward(z, rest, &tail)?.output().clone());
            let fd = central_jacobian(f, &tape.states[i]).unwrap();
            assert!(relative_error(&gradient_product(&tape, i).unwrap(), &fd) <= 1e-5);
        }
        assert_eq!(gradient_product(&tape, 3).unwrap(), local_sensitivity(&tape, 3).unwrap());
    }

    #[test]
    fn smaller_step_keeps_product_closer_to_identity() {
        for seed in 0..20 {
            let base = cfg(Placement::Peri);
            let params = random_model(&base, &mut RngStream::new(seed, 2).rng());
            let x = input(&base, seed);
            let dev = |dt: f64| {
                let c = ModelConfig { delta_t: dt, ..base.clone() };
                let tape = model_forward(&x, &params, &c).unwrap();
                gradient_product(&tape, 0).unwrap().sub(&Matrix::identity(c.nd())).unwrap().frobenius()
            };
            assert!(dev(0.1) < dev(1.0), "seed {seed}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let c = cfg(Placement::Peri);
        let params = random_model(&c, &mut RngStream::new(10, 0).rng());
        let tape = model_forward(&input(&c, 10), &params, &c).unwrap();
        let g = param_gradients(&tape, &Matrix::zeros(c.d, c.n)).unwrap();
        for (b, p) in g.blocks.iter().zip(&params) {
            assert_eq!(b.sq_norm(p), 0.0);
        }
        assert_eq!(g.input.max_abs(), 0.0);
    }

    #[test]
    fn input_cotangent_matches_gradient_product() {
        for placement in Placement::ALL {
            let c = cfg(placement);
            let params = random_model(&c, &mut RngStream::new(11, 0).rng());
            let tape = model_forward(&input(&c, 11), &params, &c).unwrap();
            let up = normal_matrix(&mut RngStream::new(11, 1).rng(), c.d, c.n, 1.0);
            let g = param_gradients(&tape, &up).unwrap();
            let expected = gradient_product(&tape, 0).unwrap().transpose().mat_vec(up.as_slice()).unwrap();
            for (a, b) in g.input.as_slice().iter().zip(&expected) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{placement}");
            }
        }
    }

    #[test]
    fn chain_without_weights_keeps_input() {
        let x = normal_matrix(&mut RngStream::new(12, 0).rng(), 4, 3, 1.0);
        let layers: Vec<PreChainLayer> = (0..3)
            .map(|_| PreChainLayer {
                w: Matrix::zeros(4, 4),
                gamma: vec![1.0; 4],
                q: Matrix::zeros(2, 4),
                k: Matrix::zeros(2, 4),
            })
            .collect();
        let out = simplified_pre_chain(&x, &layers, 1.0).unwrap();
        assert!(out.factors.iter().all(|&f| f == 1.0));
        assert_eq!(out.final_state(), &x);
        assert!(out.ma_final <= out.bound_rhs);
    }

    #[test]
    fn chain_rejects_zero_column() {
        let x = Matrix::from_columns(&[vec![1.0, 2.0], vec![0.0, 0.0]]);
        let layer = PreChainLayer {
            w: Matrix::identity(2),
            gamma: vec![1.0; 2],
            q: Matrix::zeros(1, 2),
            k: Matrix::zeros(1, 2),
        };
        assert!(simplified_pre_chain(&x, &[layer], 1.0).is_err());
    }
}
