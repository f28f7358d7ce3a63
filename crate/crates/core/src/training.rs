//! Adversarial pretraining: PGD and free (minibatch-replay) variants of the
//! multi-crop and contrastive schemes, the optimizers, and run artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackConfig, PerturbationBuffer, SslScheme, Wants};
use crate::augment::{self, AugmentSpec, ImageBatch};
use crate::error::{Error, Result};
use crate::evaluation::effective_rank;
use crate::losses::TcrConfig;
use crate::models::{EncoderSpec, ParameterStore, SslModel};
use crate::numerics::Matrix;
use crate::seed::{self, stream};

pub const METRICS_HEADER: &str = "epoch,scheme,loss_mean,tcr_mean,invariance_mean,effective_rank";
pub const TIMING_HEADER: &str = "epoch,seconds";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const WEIGHTS_FILE: &str = "weights.rssl1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EmpsslPgd,
    SimclrPgd,
    /// CF-AMC-SSL.
    EmpsslFree,
    SimclrFree,
}

impl Scheme {
    pub fn is_free(self) -> bool {
        matches!(self, Scheme::EmpsslFree | Scheme::SimclrFree)
    }

    pub fn is_simclr(self) -> bool {
        matches!(self, Scheme::SimclrPgd | Scheme::SimclrFree)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::EmpsslPgd => "empssl_pgd",
            Scheme::SimclrPgd => "simclr_pgd",
            Scheme::EmpsslFree => "empssl_free",
            Scheme::SimclrFree => "simclr_free",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::SgdMomentum { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment buffers, one per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    first: Vec<Matrix<f64>>,
    second: Vec<Matrix<f64>>,
    steps: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// One optimizer update of every tensor in `store`; bumps its update counter.
/// Diverged weights surface as a NaN Cholesky pivot before the loss is formed.
fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NotPositiveDefinite { value, .. } if !value.is_finite() => Error::NonFiniteLoss { epoch, step },
        e => e,
    }
}

pub fn optimizer_step(
    store: &mut ParameterStore,
    state: &mut OptimizerState,
    grads: &[Matrix<f64>],
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::shape("optimizer_step", format!("{} tensors", store.len()), grads.len()));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != store.tensor(i).shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{:?}", store.tensor(i).shape()),
                format!("{:?}", g.shape()),
            ));
        }
    }
    if state.first.is_empty() {
        state.first = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
        if matches!(cfg, OptimizerConfig::Adam { .. }) {
            state.second = state.first.clone();
        }
    }
    state.steps += 1;
    match *cfg {
        OptimizerConfig::SgdMomentum { lr, momentum } => {
            for (i, g) in grads.iter().enumerate() {
                let v = &mut state.first[i];
                for (vv, &gv) in v.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *vv = momentum * *vv + gv;
                }
                let theta = store.tensor_mut(i);
                for (p, &vv) in theta.as_mut_slice().iter_mut().zip(v.as_slice()) {
                    *p -= lr * vv;
                }
            }
        }
        OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
            let t = state.steps as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (i, g) in grads.iter().enumerate() {
                let m = state.first[i].as_mut_slice();
                let v = state.second[i].as_mut_slice();
                let theta = store.tensor_mut(i).as_mut_slice();
                for k in 0..theta.len() {
                    let gv = g.as_slice()[k];
                    m[k] = beta1 * m[k] + (1.0 - beta1) * gv;
                    v[k] = beta2 * v[k] + (1.0 - beta2) * gv * gv;
                    theta[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                }
            }
        }
    }
    store.record_update();
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    /// N_ep, counted in passes over the data including replays.
    pub total_epochs: usize,
    /// m; fixed at 1 for PGD schemes.
    #[serde(default = "one")]
    pub replays: usize,
    pub batch_size: usize,
    pub encoder: EncoderSpec,
    /// Crop family for pretraining; its view count is C.
    pub augment: AugmentSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub attack: AttackConfig,
    #[serde(default)]
    pub loss: TcrConfig,
    /// One δ for all crop slots instead of one per slot (free schemes).
    #[serde(default)]
    pub shared_delta: bool,
    /// Adds the clean (view 0, view 1) NT-Xent term to the contrastive schemes.
    #[serde(default)]
    pub simclr_clean_pair: bool,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn crops(&self) -> usize {
        self.augment.views()
    }

    pub fn ssl_scheme(&self) -> SslScheme {
        if self.scheme.is_simclr() {
            SslScheme::SimClr {
                clean_pair: self.simclr_clean_pair,
            }
        } else {
            SslScheme::EmpSsl
        }
    }

    pub fn outer_epochs(&self) -> usize {
        if self.scheme.is_free() {
            self.total_epochs / self.replays
        } else {
            self.total_epochs
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augment.validate()?;
        self.optimizer.validate()?;
        self.attack.validate()?;
        self.loss.validate()?;
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.scheme.is_free() {
            if self.replays == 0 || self.total_epochs % self.replays != 0 {
                return Err(Error::Config(format!(
                    "replays m = {} must be >= 1 and divide total_epochs = {}",
                    self.replays, self.total_epochs
                )));
            }
        } else if self.replays != 1 {
            return Err(Error::Config(format!("{} fixes replays to 1, got {}", self.scheme.name(), self.replays)));
        }
        if self.scheme.is_simclr() && self.crops() != 2 {
            return Err(Error::Config(format!("{} needs 2 views, got {}", self.scheme.name(), self.crops())));
        }
        if self.crops() < 2 && self.loss.lambda > 0.0 {
            return Err(Error::Config("the invariance term needs at least 2 crops".into()));
        }
        Ok(())
    }
}

/// Minibatches per pass over `n` samples; a trailing batch of one is dropped
/// because the losses need `b ≥ 2`.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n / batch_size;
    full + usize::from(n % batch_size >= 2)
}

/// Counts of the work a run performs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub outer_epochs: usize,
    pub batches_per_epoch: usize,
    pub optimizer_steps: u64,
    /// Perturbation updates: PGD iterations or free-buffer steps.
    pub delta_updates: u64,
    /// Forward/backward passes through the encoder.
    pub passes: u64,
    /// Largest `|δ|` ever produced.
    pub max_delta: f64,
}

impl Accounting {
    /// The counts a valid `cfg` must produce on `n` samples.
    pub fn predict(cfg: &TrainConfig, n: usize) -> Self {
        let bpe = batches_per_epoch(n, cfg.batch_size);
        let outer = cfg.outer_epochs();
        let batches = (outer * bpe) as u64;
        let active = cfg.attack.is_active();
        let (steps, delta, passes) = if cfg.scheme.is_free() {
            let m = cfg.replays as u64;
            (batches * m, if active { batches * m } else { 0 }, batches * m)
        } else {
            let k = if active { cfg.attack.steps as u64 } else { 0 };
            (batches, batches * k, batches * (k + 1))
        };
        Self {
            outer_epochs: outer,
            batches_per_epoch: bpe,
            optimizer_steps: steps,
            delta_updates: delta,
            passes,
            max_delta: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_mean: f64,
    pub tcr_mean: f64,
    pub invariance_mean: f64,
    pub effective_rank: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SslModel,
    pub metrics: Vec<EpochMetrics>,
    pub accounting: Accounting,
    pub epoch_seconds: Vec<f64>,
}

impl TrainOutcome {
    pub fn seconds(&self) -> f64 {
        self.epoch_seconds.iter().sum()
    }
}

/// Row range of the stacked views that the adversary perturbs, and the number
/// of crop slots it spans.
fn attacked_rows(scheme: SslScheme, blocks: usize, n: usize) -> (usize, usize, usize) {
    match scheme {
        SslScheme::EmpSsl => (0, blocks * n, blocks),
        SslScheme::SimClr { .. } => (n, n, 1),
    }
}

fn splice(stacked: &Matrix<f64>, start: usize, part: &Matrix<f64>) -> Matrix<f64> {
    let mut out = stacked.clone();
    for i in 0..part.rows() {
        out.row_mut(start + i).copy_from_slice(part.row(i));
    }
    out
}

/// Slot-major views for one minibatch; contrastive schemes append a clean copy
/// of view 1 when the clean-pair term is on.
fn stack_views(batch: &ImageBatch, cfg: &TrainConfig, seed: u64) -> Result<(Matrix<f64>, usize)> {
    let views = augment::sample_views(batch, &cfg.augment, seed)?;
    let mut parts: Vec<&Matrix<f64>> = views.iter().map(|v| v.pixels()).collect();
    if let SslScheme::SimClr { clean_pair: true } = cfg.ssl_scheme() {
        parts.push(views[1].pixels());
    }
    let blocks = parts.len();
    Ok((Matrix::vstack(&parts), blocks))
}

/// Mean-over-crops embedding `Z̄` (`d × b`) of `monitor` under `spec`, with a fixed seed.
pub fn monitor_embedding(model: &SslModel, monitor: &ImageBatch, spec: &AugmentSpec, seed: u64) -> Result<Matrix<f64>> {
    let views = augment::sample_views(monitor, &spec.without_jitter(), seed)?;
    let mut acc: Option<Matrix<f64>> = None;
    for v in &views {
        let z = model.embeddings_of(v.pixels())?;
        match &mut acc {
            Some(a) => a.add_assign(&z),
            None => acc = Some(z),
        }
    }
    let acc = acc.ok_or(Error::EmptySet)?;
    Ok(acc.scale(1.0 / views.len() as f64).transpose())
}

/// Runs pretraining in memory. `monitor` is a held-out batch whose mean-crop
/// embedding rank is logged each epoch.
pub fn train(data: &ImageBatch, monitor: Option<&ImageBatch>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.shape().dim() != cfg.encoder.input_dim || cfg.augment.out_shape(data.shape()).dim() != cfg.encoder.input_dim {
        return Err(Error::Config(format!(
            "encoder input_dim {} does not match images of dim {}",
            cfg.encoder.input_dim,
            data.shape().dim()
        )));
    }
    let n_total = data.len();
    let bpe = batches_per_epoch(n_total, cfg.batch_size);
    if bpe == 0 {
        return Err(Error::Config(format!("{n_total} samples cannot fill a batch")));
    }
    let mut model = SslModel::init(cfg.encoder.clone(), cfg.seed)?;
    let mut opt = OptimizerState::new();
    let scheme = cfg.ssl_scheme();
    let attacked_slots = if cfg.scheme.is_simclr() { 1 } else { cfg.crops() };
    let mut buffer = PerturbationBuffer::new(
        cfg.batch_size,
        attacked_slots,
        cfg.encoder.input_dim,
        cfg.attack.epsilon,
        cfg.shared_delta,
    );
    let replays = if cfg.scheme.is_free() { cfg.replays } else { 1 };
    let mut acc = Accounting {
        outer_epochs: cfg.outer_epochs(),
        batches_per_epoch: bpe,
        ..Accounting::default()
    };
    let mut metrics = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut order: Vec<usize> = (0..n_total).collect();

    for epoch in 0..cfg.outer_epochs() {
        let started = Instant::now();
        order.shuffle(&mut seed::rng(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut tcr_sum, mut inv_sum, mut count) = (0.0, 0.0, 0.0, 0usize);
        for b in 0..bpe {
            let lo = b * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(n_total);
            let batch = data.select(&order[lo..hi]);
            let n = batch.len();
            let aug_seed = seed::derive(cfg.seed, &[stream::AUGMENT, epoch as u64, b as u64]);
            let (stacked, blocks) = stack_views(&batch, cfg, aug_seed)?;
            let (start, len, slots) = attacked_rows(scheme, blocks, n);

            if cfg.scheme.is_free() {
                for r in 0..replays {
                    let input = if cfg.attack.is_active() {
                        splice(&stacked, start, &buffer.perturb(&stacked.slice_rows(start, len), slots)?)
                    } else {
                        stacked.clone()
                    };
                    let wants = Wants {
                        params: true,
                        input: cfg.attack.is_active(),
                    };
                    let step = b * replays + r;
                    let pass = attacks::ssl_attack_objective(&model, &input, blocks, &cfg.loss, scheme, wants)
                        .map_err(|e| diverged(e, epoch, step))?;
                    acc.passes += 1;
                    if !pass.loss.is_finite() {
                        return Err(Error::NonFiniteLoss { epoch, step });
                    }
                    if let Some(g) = &pass.input_grad {
                        buffer.step(&g.slice_rows(start, len), slots)?;
                        acc.delta_updates += 1;
                        acc.max_delta = acc.max_delta.max(buffer.max_abs());
                    }
                    let grads = pass.param_grads.expect("parameter gradients requested");
                    optimizer_step(&mut model.store, &mut opt, &grads, &cfg.optimizer)?;
                    acc.optimizer_steps += 1;
                    loss_sum += pass.loss;
                    tcr_sum += pass.tcr_mean;
                    inv_sum += pass.invariance_mean;
                    count += 1;
                }
            } else {
                let input = if cfg.attack.is_active() {
                    let x = stacked.slice_rows(start, len);
                    let attack_seed = seed::derive(cfg.seed, &[stream::ATTACK, epoch as u64, b as u64]);
                    let out = attacks::pgd(&x, &cfg.attack, attack_seed, |adv| {
                        let full = splice(&stacked, start, adv);
                        let wants = Wants {
                            params: false,
                            input: true,
                        };
                        let pass = attacks::ssl_attack_objective(&model, &full, blocks, &cfg.loss, scheme, wants)
                            .map_err(|e| diverged(e, epoch, b))?;
                        let g = pass.input_grad.expect("input gradient requested");
                        Ok((pass.loss, g.slice_rows(start, len)))
                    })?;
                    acc.passes += out.max_abs.len() as u64;
                    acc.delta_updates += out.max_abs.len() as u64;
                    acc.max_delta = out.max_abs.iter().copied().fold(acc.max_delta, f64::max);
                    splice(&stacked, start, &out.adversarial)
                } else {
                    stacked
                };
                let wants = Wants {
                    params: true,
                    input: false,
                };
                let pass = attacks::ssl_attack_objective(&model, &input, blocks, &cfg.loss, scheme, wants)
                    .map_err(|e| diverged(e, epoch, b))?;
                acc.passes += 1;
                if !pass.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step: b });
                }
                let grads = pass.param_grads.expect("parameter gradients requested");
                optimizer_step(&mut model.store, &mut opt, &grads, &cfg.optimizer)?;
                acc.optimizer_steps += 1;
                loss_sum += pass.loss;
                tcr_sum += pass.tcr_mean;
                inv_sum += pass.invariance_mean;
                count += 1;
            }
        }
        if buffer.max_abs() > cfg.attack.epsilon + 1e-12 {
            return Err(Error::InvalidSpec(format!(
                "perturbation buffer left the ε-ball: {} > {}",
                buffer.max_abs(),
                cfg.attack.epsilon
            )));
        }
        let rank = match monitor {
            Some(m) => {
                let z = monitor_embedding(&model, m, &cfg.augment, seed::derive(cfg.seed, &[stream::EVAL]))?;
                effective_rank(&z)?
            }
            None => f64::NAN,
        };
        let c = count as f64;
        metrics.push(EpochMetrics {
            epoch,
            loss_mean: loss_sum / c,
            tcr_mean: tcr_sum / c,
            invariance_mean: inv_sum / c,
            effective_rank: rank,
        });
        epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(TrainOutcome {
        model,
        metrics,
        accounting: acc,
        epoch_seconds,
    })
}

/// Metrics CSV body. Wall-clock lives in the timing file so this one is
/// reproducible byte for byte.
pub fn metrics_csv(scheme: Scheme, rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.epoch,
            scheme.name(),
            r.loss_mean,
            r.tcr_mean,
            r.invariance_mean,
            r.effective_rank
        );
    }
    s
}

pub fn timing_csv(seconds: &[f64]) -> String {
    let mut s = String::from(TIMING_HEADER);
    s.push('\n');
    for (e, t) in seconds.iter().enumerate() {
        let _ = writeln!(s, "{e},{t:.6}");
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub root: u64,
    pub init: u64,
    pub augment: u64,
    pub attack: u64,
    pub shuffle: u64,
}

impl RunSeeds {
    pub fn from_root(root: u64) -> Self {
        Self {
            root,
            init: seed::derive(root, &[stream::INIT]),
            augment: seed::derive(root, &[stream::AUGMENT]),
            attack: seed::derive(root, &[stream::ATTACK]),
            shuffle: seed::derive(root, &[stream::SHUFFLE]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub status: RunStatus,
    pub config: TrainConfig,
    pub seeds: RunSeeds,
    /// SHA-256 of the canonical config JSON.
    pub config_hash: String,
    pub code_version: String,
    pub dataset: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub wall_clock_seconds: Option<f64>,
    pub metrics_path: PathBuf,
    pub timing_path: PathBuf,
    pub weights_path: PathBuf,
    pub accounting: Option<Accounting>,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

pub fn config_hash<S: Serialize>(cfg: &S) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Creates `<root>/<prefix>-<k>` for the smallest free `k ≥ 1`.
pub fn create_run_dir(root: &Path, prefix: &str) -> Result<(String, PathBuf)> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for k in 1u32.. {
        let id = format!("{prefix}-{k}");
        let dir = root.join(&id);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok((id, dir)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("run id space exhausted")
}

/// Trains and writes `manifest.json`, `metrics.csv`, `timing.csv` and
/// `weights.rssl1` into a fresh run directory under `out_root`.
///
/// The manifest is written as `running` before training and rewritten as
/// `completed` or `failed` afterwards.
pub fn pretrain(
    data: &ImageBatch,
    monitor: Option<&ImageBatch>,
    cfg: &TrainConfig,
    dataset: &str,
    out_root: &Path,
) -> Result<(SslModel, RunManifest, PathBuf)> {
    let prefix = format!("{}-s{}", cfg.scheme.name(), cfg.seed);
    pretrain_as(&prefix, data, monitor, cfg, dataset, out_root)
}

/// [`pretrain`] with run ids of the form `<prefix>-<k>`.
pub fn pretrain_as(
    prefix: &str,
    data: &ImageBatch,
    monitor: Option<&ImageBatch>,
    cfg: &TrainConfig,
    dataset: &str,
    out_root: &Path,
) -> Result<(SslModel, RunManifest, PathBuf)> {
    cfg.validate()?;
    let (run_id, dir) = create_run_dir(out_root, prefix)?;
    let mut manifest = RunManifest {
        run_id,
        status: RunStatus::Running,
        config: cfg.clone(),
        seeds: RunSeeds::from_root(cfg.seed),
        config_hash: config_hash(cfg)?,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset: dataset.to_string(),
        started_unix: unix_now(),
        finished_unix: None,
        wall_clock_seconds: None,
        metrics_path: dir.join(METRICS_FILE),
        timing_path: dir.join(TIMING_FILE),
        weights_path: dir.join(WEIGHTS_FILE),
        accounting: None,
        error: None,
    };
    manifest.save(&dir)?;
    let started = Instant::now();
    let outcome = match train(data, monitor, cfg) {
        Ok(o) => o,
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            manifest.finished_unix = Some(unix_now());
            manifest.save(&dir)?;
            return Err(e);
        }
    };
    let write = |p: &Path, s: String| fs::write(p, s).map_err(|e| Error::io(p, e));
    write(&manifest.metrics_path, metrics_csv(cfg.scheme, &outcome.metrics))?;
    write(&manifest.timing_path, timing_csv(&outcome.epoch_seconds))?;
    outcome.model.store.save(&manifest.weights_path)?;
    manifest.status = RunStatus::Completed;
    manifest.finished_unix = Some(unix_now());
    manifest.wall_clock_seconds = Some(started.elapsed().as_secs_f64());
    manifest.accounting = Some(outcome.accounting);
    manifest.save(&dir)?;
    Ok((outcome.model, manifest, dir))
}
