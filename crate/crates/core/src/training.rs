//! Toy training harness: SGD with momentum and decoupled weight decay on two
//! synthetic regression tasks, with divergence detection.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{layer_moments, LayerMoments};
use crate::error::{Error, Result};
use crate::model::{model_forward, param_gradients, random_model, BlockParams, ModelConfig, Placement};
use crate::numerics::{normal_matrix, normal_vec, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    #[default]
    MeanRegression,
    NoisyCopy,
}

/// A fixed synthetic task. Predictions are `R · mean_j x_j` read off the
/// terminal state; the readout `R` is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    pub d: usize,
    pub n: usize,
    pub noise: f64,
    /// Maps the input token mean to the regression target.
    pub target_map: Matrix,
    pub readout: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Matrix,
    pub y: Vec<f64>,
}

pub fn make_task(kind: TaskKind, cfg: &ModelConfig, noise: f64, rng: &mut impl Rng) -> Task {
    let sd = 1.0 / (cfg.d as f64).sqrt();
    Task {
        kind,
        d: cfg.d,
        n: cfg.n,
        noise,
        target_map: normal_matrix(rng, cfg.d, cfg.d, sd),
        readout: normal_matrix(rng, cfg.d, cfg.d, sd),
    }
}

fn token_mean(x: &Matrix) -> Vec<f64> {
    let n = x.cols() as f64;
    (0..x.rows())
        .map(|a| (0..x.cols()).map(|j| x[(a, j)]).sum::<f64>() / n)
        .collect()
}

impl Task {
    pub fn sample(&self, rng: &mut impl Rng) -> Sample {
        let x = normal_matrix(rng, self.d, self.n, 1.0);
        let y = match self.kind {
            TaskKind::MeanRegression => self.target_map.mat_vec(&token_mean(&x)).expect("square map"),
            TaskKind::NoisyCopy => {
                let eps = normal_vec(rng, self.d, 1.0);
                x.col(0).iter().zip(eps).map(|(v, e)| v + self.noise * e).collect()
            }
        };
        Sample { x, y }
    }

    pub fn batch(&self, rng: &mut impl Rng, size: usize) -> Vec<Sample> {
        (0..size).map(|_| self.sample(rng)).collect()
    }

    pub fn predict(&self, xd: &Matrix) -> Result<Vec<f64>> {
        self.readout.mat_vec(&token_mean(xd))
    }

    /// `‖ŷ - y‖² / d`.
    pub fn loss(&self, xd: &Matrix, y: &[f64]) -> Result<f64> {
        let p = self.predict(xd)?;
        Ok(p.iter().zip(y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / self.d as f64)
    }

    /// Gradient of [`Task::loss`] with respect to the terminal state.
    pub fn loss_grad(&self, xd: &Matrix, y: &[f64]) -> Result<Matrix> {
        let p = self.predict(xd)?;
        let r: Vec<f64> = p.iter().zip(y).map(|(p, y)| 2.0 * (p - y) / self.d as f64).collect();
        let col = self.readout.transpose().mat_vec(&r)?;
        let n = xd.cols();
        let scaled: Vec<f64> = col.iter().map(|v| v / n as f64).collect();
        Ok(Matrix::from_columns(&vec![scaled; n]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub divergence_threshold: f64,
    pub batch_size: usize,
    /// Target noise of the copy task.
    pub noise: f64,
    /// Steps between moment snapshots; 0 keeps only the first and last.
    pub checkpoint_every: usize,
    pub cfg: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskKind::MeanRegression,
            steps: 200,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            divergence_threshold: 1e8,
            batch_size: 8,
            noise: 0.1,
            checkpoint_every: 50,
            cfg: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let checks = [
            ("lr", self.lr >= 0.0 && self.lr.is_finite()),
            ("momentum", (0.0..1.0).contains(&self.momentum)),
            ("weight_decay", self.weight_decay >= 0.0 && self.weight_decay.is_finite()),
            ("divergence_threshold", self.divergence_threshold > 0.0),
            ("batch_size", self.batch_size > 0),
            ("noise", self.noise >= 0.0 && self.noise.is_finite()),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(Error::Config(format!("train.{name} is out of range")));
        }
        if self.lr * self.weight_decay >= 1.0 {
            return Err(Error::Config("lr * weight_decay must be below 1".into()));
        }
        Ok(())
    }

    fn stream(&self, s: u64) -> RngStream {
        RngStream::new(self.seed, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentSnapshot {
    pub step: usize,
    /// `(MA, Var)` of `X_0 .. X_D` on a fixed probe input.
    pub layers: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub diverged: bool,
    pub first_divergence_step: Option<usize>,
    pub final_loss: f64,
    pub loss_curve: Vec<f64>,
    pub moment_curves: Vec<MomentSnapshot>,
    /// Weights after the last update, or when divergence was detected.
    #[serde(skip)]
    pub final_params: Vec<BlockParams>,
}

/// The divergence predicate.
pub fn is_diverged(loss: f64, terminal_frob: f64, threshold: f64) -> bool {
    !loss.is_finite() || !terminal_frob.is_finite() || terminal_frob > threshold
}

/// Momentum buffers shaped like [`BlockParams::tensors_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new(params: &mut [BlockParams], lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let buffers = params
            .iter_mut()
            .map(|b| b.tensors_mut().iter().map(|(t, _)| vec![0.0; t.len()]).collect())
            .collect();
        Sgd {
            lr,
            momentum,
            weight_decay,
            buffers,
        }
    }

    /// `m ← μm + g`, then `θ ← (1 - lr·λ)θ - lr·m`. Decay touches the
    /// attention and FFN matrices, not the norm gains and shifts.
    pub fn step(&mut self, params: &mut [BlockParams], grads: &[Vec<Vec<f64>>]) {
        let shrink = 1.0 - self.lr * self.weight_decay;
        for ((b, bufs), gs) in params.iter_mut().zip(&mut self.buffers).zip(grads) {
            for (((t, decay), m), g) in b.tensors_mut().into_iter().zip(bufs).zip(gs) {
                for ((w, m), g) in t.iter_mut().zip(m.iter_mut()).zip(g) {
                    *m = self.momentum * *m + g;
                    if decay {
                        *w *= shrink;
                    }
                    *w -= self.lr * *m;
                }
            }
        }
    }
}

fn snapshot(step: usize, probe: &Matrix, params: &[BlockParams], cfg: &ModelConfig) -> Option<MomentSnapshot> {
    let tape = model_forward(probe, params, cfg).ok()?;
    let layers = layer_moments(&tape).ok()?;
    Some(MomentSnapshot {
        step,
        layers: layers.iter().map(|m: &LayerMoments| (m.ma, m.var)).collect(),
    })
}

fn zero_grads(params: &mut [BlockParams]) -> Vec<Vec<Vec<f64>>> {
    params
        .iter_mut()
        .map(|b| b.tensors_mut().iter().map(|(t, _)| vec![0.0; t.len()]).collect())
        .collect()
}

/// Per block, per tensor, flattened gradient entries.
type FlatGrads = Vec<Vec<Vec<f64>>>;

/// Mean loss and mean parameter gradient over a batch. `Ok(None)` when the
/// forward pass trips the divergence predicate.
fn batch_step(
    task: &Task,
    batch: &[Sample],
    params: &mut [BlockParams],
    tc: &TrainConfig,
) -> Result<(f64, Option<FlatGrads>)> {
    let cfg = &tc.cfg;
    let mut acc = zero_grads(params);
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let tape = match model_forward(&s.x, params, cfg) {
            Ok(t) => t,
            Err(Error::Divergence { .. }) => return Ok((f64::NAN, None)),
            Err(e) => return Err(e),
        };
        let l = task.loss(tape.output(), &s.y)?;
        if is_diverged(l, tape.output().frobenius(), tc.divergence_threshold) {
            return Ok((l, None));
        }
        loss += l * scale;
        let up = task.loss_grad(tape.output(), &s.y)?;
        let grads = match param_gradients(&tape, &up) {
            Ok(g) => g,
            Err(Error::NonFinite { .. }) => return Ok((f64::NAN, None)),
            Err(e) => return Err(e),
        };
        for ((a, g), p) in acc.iter_mut().zip(&grads.blocks).zip(params.iter()) {
            for (at, gt) in a.iter_mut().zip(g.tensors(p)) {
                for (x, y) in at.iter_mut().zip(gt) {
                    *x += scale * y;
                }
            }
        }
    }
    if !acc.iter().flatten().flatten().all(|v| v.is_finite()) {
        return Ok((f64::NAN, None));
    }
    Ok((loss, Some(acc)))
}

/// Streams: 0 initial weights, 1 task maps, 2 batches, 3 probe input.
pub fn train_run(tc: &TrainConfig) -> Result<TrialOutcome> {
    tc.validate()?;
    let cfg = &tc.cfg;
    let mut params = random_model(cfg, &mut tc.stream(0).rng());
    let task = make_task(tc.task, cfg, tc.noise, &mut tc.stream(1).rng());
    let mut batches = tc.stream(2).rng();
    let probe = normal_matrix(&mut tc.stream(3).rng(), cfg.d, cfg.n, 1.0);
    let mut opt = Sgd::new(&mut params, tc.lr, tc.momentum, tc.weight_decay);

    let mut loss_curve = Vec::with_capacity(tc.steps + 1);
    let mut moment_curves: Vec<MomentSnapshot> = snapshot(0, &probe, &params, cfg).into_iter().collect();
    let mut first_divergence_step = None;
    for step in 0..=tc.steps {
        let batch = task.batch(&mut batches, tc.batch_size);
        let (loss, grads) = batch_step(&task, &batch, &mut params, tc)?;
        loss_curve.push(loss);
        let Some(grads) = grads else {
            first_divergence_step = Some(step);
            break;
        };
        // The last pass only measures the loss of the final parameters.
        if step == tc.steps {
            break;
        }
        opt.step(&mut params, &grads);
        let done = step + 1;
        if (tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0) || done == tc.steps {
            if let Some(s) = snapshot(done, &probe, &params, cfg) {
                if moment_curves.last().map(|m| m.step) != Some(done) {
                    moment_curves.push(s);
                }
            }
        }
    }
    Ok(TrialOutcome {
        diverged: first_divergence_step.is_some(),
        first_divergence_step,
        final_loss: *loss_curve.last().expect("at least one loss"),
        loss_curve,
        moment_curves,
        final_params: params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub placement: Placement,
    pub weight_decay: f64,
    pub seed: u64,
    pub outcome: TrialOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialTable {
    pub rows: Vec<TrialRow>,
}

impl TrialTable {
    pub fn diverged_count(&self, placement: Placement, weight_decay: f64) -> usize {
        self.rows
            .iter()
            .filter(|r| r.placement == placement && r.weight_decay == weight_decay && r.outcome.diverged)
            .count()
    }

    /// `(placement, λ, diverged count, runs)` in grid order.
    pub fn counts(&self) -> Vec<(Placement, f64, usize, usize)> {
        let mut out: Vec<(Placement, f64, usize, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|c| c.0 == r.placement && c.1 == r.weight_decay) {
                Some(c) => {
                    c.2 += r.outcome.diverged as usize;
                    c.3 += 1;
                }
                None => out.push((r.placement, r.weight_decay, r.outcome.diverged as usize, 1)),
            }
        }
        out
    }
}

/// Every `(placement, λ, seed)` combination of `base`, run in parallel and
/// returned in grid order.
pub fn stability_trial(
    base: &TrainConfig,
    placements: &[Placement],
    weight_decays: &[f64],
    seeds: &[u64],
) -> Result<TrialTable> {
    let mut grid = Vec::new();
    for &placement in placements {
        for &weight_decay in weight_decays {
            for &seed in seeds {
                grid.push((placement, weight_decay, seed));
            }
        }
    }
    let rows: Vec<Result<TrialRow>> = grid
        .into_par_iter()
        .map(|(placement, weight_decay, seed)| {
            let tc = TrainConfig {
                seed,
                weight_decay,
                cfg: ModelConfig {
                    placement,
                    ..base.cfg.clone()
                },
                ..base.clone()
            };
            Ok(TrialRow {
                placement,
                weight_decay,
                seed,
                outcome: train_run(&tc)?,
            })
        })
        .collect();
    Ok(TrialTable {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}
