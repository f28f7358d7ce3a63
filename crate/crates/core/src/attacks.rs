//! l∞ attacks: k-step PGD, the single sign step of free adversarial training,
//! and the persistent per-crop perturbation buffers that step updates.
//!
//! Every attack *ascends* its objective. Objectives are the same "loss to
//! minimize" scalars the trainers descend (see [`crate::losses`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, CropEmbeddingSet, EmbeddingBatch, TcrConfig};
use crate::models::SslModel;
use crate::numerics::{Matrix, Tape};
use crate::seed::{self, stream};

/// Evaluation attacks use this many steps.
pub const EVAL_STEPS: usize = 20;
/// Training attacks use this many steps.
pub const TRAIN_STEPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackObjective {
    SslLoss,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Radius on the [0, 1] pixel scale.
    pub epsilon: f64,
    /// Step size; `None` means `2.5·ε/k`.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub steps: usize,
    pub objective: AttackObjective,
    #[serde(default)]
    pub random_start: bool,
}

impl AttackConfig {
    pub fn training(epsilon: f64, steps: usize) -> Self {
        Self {
            epsilon,
            alpha: None,
            steps,
            objective: AttackObjective::SslLoss,
            random_start: false,
        }
    }

    pub fn evaluation(epsilon: f64) -> Self {
        Self {
            epsilon,
            alpha: None,
            steps: EVAL_STEPS,
            objective: AttackObjective::CrossEntropy,
            random_start: true,
        }
    }

    pub fn none() -> Self {
        Self::training(0.0, 0)
    }

    pub fn step_size(&self) -> f64 {
        match self.alpha {
            Some(a) => a,
            None if self.steps == 0 => 0.0,
            None => 2.5 * self.epsilon / self.steps as f64,
        }
    }

    /// False when the attack cannot move the input.
    pub fn is_active(&self) -> bool {
        self.epsilon > 0.0 && self.steps > 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("attack epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && self.epsilon > 0.0 && !(self.step_size() > 0.0 && self.step_size().is_finite()) {
            return Err(Error::Config(format!("attack alpha must be > 0, got {}", self.step_size())));
        }
        Ok(())
    }
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clips `delta` to the ε-ball and then so that `x + delta` stays in [0, 1].
fn project(delta: &mut Matrix<f64>, x: &Matrix<f64>, eps: f64) {
    for (d, &xv) in delta.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *d = d.clamp(-eps, eps);
        if xv + *d > 1.0 {
            *d = 1.0 - xv;
        } else if xv + *d < 0.0 {
            *d = -xv;
        }
    }
}

/// `clamp(x + δ, 0, 1)`.
pub fn apply_perturbation(x: &Matrix<f64>, delta: &Matrix<f64>) -> Result<Matrix<f64>> {
    if x.shape() != delta.shape() {
        return Err(Error::shape("apply_perturbation", format!("{:?}", x.shape()), format!("{:?}", delta.shape())));
    }
    Ok(x.zip_map(delta, |a, b| (a + b).clamp(0.0, 1.0)))
}

/// Result of a PGD run.
#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub delta: Matrix<f64>,
    /// `clamp(x + δ, 0, 1)`.
    pub adversarial: Matrix<f64>,
    /// Objective at each evaluated iterate (only the start point and each
    /// step's input when untraced).
    pub losses: Vec<f64>,
    /// `max|δ|` after each step.
    pub max_abs: Vec<f64>,
}

fn pgd_inner<F>(x: &Matrix<f64>, cfg: &AttackConfig, seed: u64, trace: bool, mut loss_grad: F) -> Result<PgdOutcome>
where
    F: FnMut(&Matrix<f64>) -> Result<(f64, Matrix<f64>)>,
{
    let eps = cfg.epsilon;
    let mut delta = Matrix::zeros(x.rows(), x.cols());
    if !cfg.is_active() {
        return Ok(PgdOutcome {
            adversarial: x.clone(),
            delta,
            losses: Vec::new(),
            max_abs: Vec::new(),
        });
    }
    if cfg.random_start {
        let mut rng = seed::rng(seed, &[stream::ATTACK]);
        for d in delta.as_mut_slice() {
            *d = rng.random_range(-eps..=eps);
        }
        project(&mut delta, x, eps);
    }
    let alpha = cfg.step_size();
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut max_abs = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let adv = apply_perturbation(x, &delta)?;
        let (loss, grad) = loss_grad(&adv)?;
        if grad.shape() != x.shape() {
            return Err(Error::shape("pgd gradient", format!("{:?}", x.shape()), format!("{:?}", grad.shape())));
        }
        losses.push(loss);
        for (d, &g) in delta.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *d += alpha * sign(g);
        }
        project(&mut delta, x, eps);
        max_abs.push(delta.max_abs());
    }
    let adversarial = apply_perturbation(x, &delta)?;
    if trace {
        losses.push(loss_grad(&adversarial)?.0);
    }
    Ok(PgdOutcome {
        delta,
        adversarial,
        losses,
        max_abs,
    })
}

/// k-step l∞ PGD ascending `loss_grad`, which maps an (already clamped) input to
/// its objective value and gradient.
pub fn pgd<F>(x: &Matrix<f64>, cfg: &AttackConfig, seed: u64, loss_grad: F) -> Result<PgdOutcome>
where
    F: FnMut(&Matrix<f64>) -> Result<(f64, Matrix<f64>)>,
{
    pgd_inner(x, cfg, seed, false, loss_grad)
}

/// As [`pgd`], with one extra evaluation so `losses` covers the final iterate too.
pub fn pgd_traced<F>(x: &Matrix<f64>, cfg: &AttackConfig, seed: u64, loss_grad: F) -> Result<PgdOutcome>
where
    F: FnMut(&Matrix<f64>) -> Result<(f64, Matrix<f64>)>,
{
    pgd_inner(x, cfg, seed, true, loss_grad)
}

/// One free-training update: `δ ← clip(δ + ε·sign(∇δ), −ε, ε)`.
pub fn free_step(delta: &mut Matrix<f64>, grad: &Matrix<f64>, eps: f64) -> Result<()> {
    if delta.shape() != grad.shape() {
        return Err(Error::shape("free_step", format!("{:?}", delta.shape()), format!("{:?}", grad.shape())));
    }
    for (d, &g) in delta.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *d = (*d + eps * sign(g)).clamp(-eps, eps);
    }
    Ok(())
}

/// Persistent perturbations for free training, one `batch × dim` slice per crop
/// slot. Row `i` belongs to batch position `i`, so the buffer carries over from
/// one minibatch to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationBuffer {
    epsilon: f64,
    batch: usize,
    dim: usize,
    shared: bool,
    slots: Vec<Matrix<f64>>,
    updates: u64,
}

impl PerturbationBuffer {
    /// `shared` keeps one δ for all crop slots instead of one per slot.
    pub fn new(batch: usize, crops: usize, dim: usize, epsilon: f64, shared: bool) -> Self {
        let n = if shared { 1 } else { crops.max(1) };
        Self {
            epsilon,
            batch,
            dim,
            shared,
            slots: vec![Matrix::zeros(batch, dim); n],
            updates: 0,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    /// Buffer steps applied so far (one per replay, regardless of slot count).
    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn index(&self, slot: usize) -> usize {
        if self.shared {
            0
        } else {
            slot
        }
    }

    /// The first `rows` rows of slot `slot`'s δ.
    pub fn slice(&self, slot: usize, rows: usize) -> Matrix<f64> {
        self.slots[self.index(slot)].slice_rows(0, rows)
    }

    pub fn max_abs(&self) -> f64 {
        self.slots.iter().map(|m| m.max_abs()).fold(0.0, f64::max)
    }

    /// Perturbs the stacked slot-major views (`C·n × dim`), clamping into [0, 1].
    pub fn perturb(&self, stacked: &Matrix<f64>, crops: usize) -> Result<Matrix<f64>> {
        let n = self.check(stacked, crops)?;
        let mut out = stacked.clone();
        for k in 0..crops {
            let d = &self.slots[self.index(k)];
            for i in 0..n {
                let dst = out.row_mut(k * n + i);
                for (p, &dv) in dst.iter_mut().zip(d.row(i)) {
                    *p = (*p + dv).clamp(0.0, 1.0);
                }
            }
        }
        Ok(out)
    }

    /// Applies [`free_step`] using the gradient w.r.t. the stacked perturbed input.
    ///
    /// In shared mode the slot gradients are summed, since one δ feeds every crop.
    pub fn step(&mut self, grad: &Matrix<f64>, crops: usize) -> Result<()> {
        let n = self.check(grad, crops)?;
        let eps = self.epsilon;
        if self.shared {
            let mut g = grad.slice_rows(0, n);
            for k in 1..crops {
                g.add_assign(&grad.slice_rows(k * n, n));
            }
            step_prefix(&mut self.slots[0], &g, eps)?;
        } else {
            for k in 0..crops {
                step_prefix(&mut self.slots[k], &grad.slice_rows(k * n, n), eps)?;
            }
        }
        self.updates += 1;
        Ok(())
    }

    fn check(&self, stacked: &Matrix<f64>, crops: usize) -> Result<usize> {
        let slots = if self.shared { crops } else { self.slots.len() };
        if crops == 0 || crops != slots || stacked.rows() % crops != 0 || stacked.cols() != self.dim {
            return Err(Error::shape(
                "PerturbationBuffer",
                format!("{} crops x <= {} rows x {}", slots, self.batch, self.dim),
                format!("{crops} crops, {:?}", stacked.shape()),
            ));
        }
        let n = stacked.rows() / crops;
        if n > self.batch {
            return Err(Error::shape("PerturbationBuffer", format!("<= {} rows per crop", self.batch), n));
        }
        Ok(n)
    }
}

fn step_prefix(delta: &mut Matrix<f64>, grad: &Matrix<f64>, eps: f64) -> Result<()> {
    let n = grad.rows();
    let mut head = delta.slice_rows(0, n);
    free_step(&mut head, grad, eps)?;
    for i in 0..n {
        delta.row_mut(i).copy_from_slice(head.row(i));
    }
    Ok(())
}

/// Which self-supervised loss the views feed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslScheme {
    /// Multi-crop coding rate plus invariance over `C` crops.
    EmpSsl,
    /// NT-Xent with (view 0, view 1) as positives. With `clean_pair` a third
    /// block (clean view 1) adds the clean (view 0, view 1) term.
    SimClr { clean_pair: bool },
}

impl SslScheme {
    /// Number of stacked blocks the scheme expects, or `None` for any `C ≥ 1`.
    pub fn blocks(&self) -> Option<usize> {
        match self {
            SslScheme::EmpSsl => None,
            SslScheme::SimClr { clean_pair: false } => Some(2),
            SslScheme::SimClr { clean_pair: true } => Some(3),
        }
    }
}

/// What a [`ssl_attack_objective`] pass should differentiate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Wants {
    pub params: bool,
    pub input: bool,
}

#[derive(Clone, Debug)]
pub struct SslPass {
    /// The loss trainers minimize and attackers maximize.
    pub loss: f64,
    pub tcr_mean: f64,
    pub invariance_mean: f64,
    /// Gradient w.r.t. the stacked input, same layout.
    pub input_grad: Option<Matrix<f64>>,
    /// Parameter gradients in store order.
    pub param_grads: Option<Vec<Matrix<f64>>>,
}

/// Evaluates the scheme's loss on `blocks` slot-major stacked views
/// (`blocks·n × input_dim`), with the requested gradients from one backward pass.
pub fn ssl_attack_objective(
    model: &SslModel,
    stacked: &Matrix<f64>,
    blocks: usize,
    cfg: &TcrConfig,
    scheme: SslScheme,
    wants: Wants,
) -> Result<SslPass> {
    if blocks == 0 {
        return Err(Error::EmptySet);
    }
    if let Some(expected) = scheme.blocks() {
        if blocks != expected {
            return Err(Error::SchemeMismatch(format!("{scheme:?} needs {expected} views, got {blocks}")));
        }
    }
    if stacked.rows() % blocks != 0 {
        return Err(Error::SchemeMismatch(format!("{} rows do not split into {blocks} views", stacked.rows())));
    }
    let n = stacked.rows() / blocks;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, wants.params);
    let x = if wants.input {
        tape.leaf(stacked.clone())
    } else {
        tape.constant(stacked.clone())
    };
    let out = model.forward(&mut tape, &bound, x)?;
    let mut members = Vec::with_capacity(blocks);
    for k in 0..blocks {
        let rows = tape.slice_rows(out.embedding, k * n, n);
        let z = EmbeddingBatch::from_rows(&mut tape, rows, false)?;
        members.push(EmbeddingBatch { normalized: true, ..z });
    }
    let (loss, tcr_mean, invariance_mean) = match scheme {
        SslScheme::EmpSsl => {
            let set = CropEmbeddingSet::new(&mut tape, members)?;
            let terms = losses::empssl_objective(&mut tape, &set, cfg)?;
            (terms.loss, terms.tcr_mean, terms.invariance_mean)
        }
        SslScheme::SimClr { clean_pair } => {
            let mut loss = losses::nt_xent(&mut tape, &members[0], &members[1], cfg.tau)?;
            if clean_pair {
                let clean = losses::nt_xent(&mut tape, &members[0], &members[2], cfg.tau)?;
                loss = tape.add(loss, clean);
            }
            // Diagnostics only; recorded after the loss so backward never visits them.
            let pair = CropEmbeddingSet::new(&mut tape, members[..2].to_vec())?;
            let diag = TcrConfig { tcr_weight: 1.0, lambda: 1.0, ..*cfg };
            let terms = losses::empssl_objective(&mut tape, &pair, &diag)?;
            (loss, terms.tcr_mean, terms.invariance_mean)
        }
    };
    let value = tape.value(loss).item();
    let (input_grad, param_grads) = if wants.input || wants.params {
        let mut g = tape.backward(loss)?;
        let ig = wants.input.then(|| g.take(x));
        let pg = wants.params.then(|| bound.vars().into_iter().map(|v| g.take(v)).collect());
        (ig, pg)
    } else {
        (None, None)
    };
    Ok(SslPass {
        loss: value,
        tcr_mean,
        invariance_mean,
        input_grad,
        param_grads,
    })
}
