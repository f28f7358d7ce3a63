//! Linear probing on frozen encoders (central and multi-view aggregated
//! protocols, standard or adversarially trained probes) and clean/robust
//! top-1 accuracy under end-to-end PGD.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, AttackObjective};
use crate::augment::{self, AugmentMode, AugmentSpec, CropWindow, ImageBatch, ImageShape};
use crate::error::{Error, Result};
use crate::losses;
use crate::models::{argmax_rows, LinearProbe, SslModel};
use crate::numerics::{singular_values, Matrix, RowMap, Tape, Var};
use crate::seed::{self, stream};
use crate::training::{optimizer_step, OptimizerConfig, OptimizerState};

pub const REPORT_HEADER: &str =
    "run_id,protocol,n,robust_probe,epsilon_num,epsilon_den,clean_acc,robust_acc,attack_steps,seed";

/// Images per evaluation chunk.
pub const EVAL_CHUNK: usize = 200;

/// `exp` of the Shannon entropy of the normalized singular values of `z`.
pub fn effective_rank(z: &Matrix<f64>) -> Result<f64> {
    if z.rows() < 1 || z.cols() < 2 {
        return Err(Error::shape("effective_rank", "b >= 2 columns", format!("{:?}", z.shape())));
    }
    let s = singular_values(z);
    let total: f64 = s.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let h: f64 = s
        .iter()
        .map(|&v| v / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(h.exp())
}

/// How an image becomes the probe's input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Protocol {
    /// The whole image, one view.
    Central,
    /// Mean of `n` encoder features over views drawn from the pretraining crop
    /// family, renormalized. `n = 1` is the central view.
    Aggregate(usize),
}

impl Protocol {
    pub fn views(&self) -> usize {
        match *self {
            Protocol::Central => 1,
            Protocol::Aggregate(n) => n,
        }
    }

    fn is_central(&self) -> bool {
        self.views() == 1
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Central => f.write_str("central"),
            Protocol::Aggregate(n) => write!(f, "agg:{n}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "central" {
            return Ok(Protocol::Central);
        }
        let n = s
            .strip_prefix("agg:")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("protocol must be `central` or `agg:<n>` with n >= 1, got `{s}`")))?;
        Ok(Protocol::Aggregate(n))
    }
}

impl TryFrom<String> for Protocol {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Protocol> for String {
    fn from(p: Protocol) -> String {
        p.to_string()
    }
}

/// A rational radius `num/den` on the pixel scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Epsilon {
    pub num: u32,
    pub den: u32,
}

impl Epsilon {
    pub const fn over_255(num: u32) -> Self {
        Self { num, den: 255 }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Epsilon {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("epsilon must look like `8/255`, got `{s}`"));
        let (a, b) = s.split_once('/').ok_or_else(bad)?;
        let num = a.trim().parse().map_err(|_| bad())?;
        let den: u32 = b.trim().parse().map_err(|_| bad())?;
        if den == 0 {
            return Err(bad());
        }
        Ok(Self { num, den })
    }
}

impl TryFrom<String> for Epsilon {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Epsilon> for String {
    fn from(e: Epsilon) -> String {
        e.to_string()
    }
}

/// The default evaluation grid, `{0, 4, 8, 16}/255`.
pub fn default_epsilons() -> Vec<Epsilon> {
    [0, 4, 8, 16].into_iter().map(Epsilon::over_255).collect()
}

/// Whether aggregated robust evaluation attacks through the aggregation or
/// each view separately.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    #[default]
    EndToEnd,
    PerView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub protocol: Protocol,
    /// Adversarially trained probe (r-LE).
    #[serde(default)]
    pub robust: bool,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "probe_optimizer")]
    pub optimizer: OptimizerConfig,
    /// Attack used while training a robust probe.
    pub attack: AttackConfig,
    #[serde(default = "default_epsilons")]
    pub eval_epsilons: Vec<Epsilon>,
    #[serde(default = "eval_steps")]
    pub eval_steps: usize,
    #[serde(default)]
    pub attack_mode: AttackMode,
    #[serde(default)]
    pub seed: u64,
}

fn probe_optimizer() -> OptimizerConfig {
    OptimizerConfig::Adam {
        lr: 1e-2,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    }
}

fn eval_steps() -> usize {
    attacks::EVAL_STEPS
}

impl ProbeConfig {
    pub fn standard(protocol: Protocol, epochs: usize) -> Self {
        Self {
            protocol,
            robust: false,
            epochs,
            batch_size: 64,
            optimizer: probe_optimizer(),
            attack: AttackConfig {
                objective: AttackObjective::CrossEntropy,
                ..AttackConfig::training(8.0 / 255.0, attacks::TRAIN_STEPS)
            },
            eval_epsilons: default_epsilons(),
            eval_steps: attacks::EVAL_STEPS,
            attack_mode: AttackMode::EndToEnd,
            seed: 0,
        }
    }

    pub fn robust(protocol: Protocol, epochs: usize) -> Self {
        Self {
            robust: true,
            ..Self::standard(protocol, epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.protocol.views() == 0 {
            return Err(Error::Config("protocol needs n >= 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch_size must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.attack.validate()
    }
}

/// Crop windows and the differentiable map producing a protocol's views for a
/// set of images. Views of image `g` depend only on `(seed, g)`.
#[derive(Clone, Debug)]
pub struct ViewPlan {
    map: Option<Arc<RowMap<f64>>>,
    views: usize,
    images: usize,
}

impl ViewPlan {
    /// `indices` are the images' positions in their dataset.
    pub fn new(protocol: Protocol, spec: &AugmentSpec, shape: ImageShape, indices: &[usize], seed: u64) -> Self {
        let images = indices.len();
        let out = spec.out_shape(shape);
        if protocol.is_central() {
            let map = (out != shape).then(|| {
                let windows = vec![vec![CropWindow::full(shape); images]];
                Arc::new(augment::views_row_map(&windows, shape, out))
            });
            return Self { map, views: 1, images };
        }
        let views = protocol.views();
        let family = AugmentSpec {
            crop_count: views,
            mode: if spec.mode == AugmentMode::Central { AugmentMode::Crop } else { spec.mode },
            ..spec.without_jitter()
        };
        let mut windows = vec![Vec::with_capacity(images); views];
        for &g in indices {
            let per = augment::plan_windows(1, shape, &family, seed::derive(seed, &[g as u64]));
            for (slot, w) in per.into_iter().enumerate() {
                windows[slot].push(w[0]);
            }
        }
        Self {
            map: Some(Arc::new(augment::views_row_map(&windows, shape, out))),
            views,
            images,
        }
    }

    pub fn views(&self) -> usize {
        self.views
    }

    fn expand(&self, tape: &mut Tape<f64>, x: Var) -> Var {
        match &self.map {
            Some(m) => tape.map_rows(x, m.clone()),
            None => x,
        }
    }

    fn pool(&self, tape: &mut Tape<f64>, h: Var) -> Var {
        if self.views == 1 {
            return h;
        }
        let n = self.images;
        let mut acc = tape.slice_rows(h, 0, n);
        for k in 1..self.views {
            let part = tape.slice_rows(h, k * n, n);
            acc = tape.add(acc, part);
        }
        tape.scale(acc, 1.0 / self.views as f64)
    }

    /// Normalized (pooled) encoder features of pixel node `x`.
    pub fn represent(&self, tape: &mut Tape<f64>, model: &SslModel, x: Var) -> Result<Var> {
        let bound = model.bind(tape, false);
        let input = self.expand(tape, x);
        let h = model.features(tape, &bound, input)?;
        let pooled = self.pool(tape, h);
        Ok(tape.normalize_rows(pooled))
    }

    /// Per-view normalized features, `views·n × feature_dim`.
    fn represent_views(&self, tape: &mut Tape<f64>, model: &SslModel, x: Var) -> Result<Var> {
        let bound = model.bind(tape, false);
        let h = model.features(tape, &bound, x)?;
        Ok(tape.normalize_rows(h))
    }
}

/// Unit-norm representation of each image under `protocol`; for the
/// aggregated protocol this is the renormalized mean of `n` view features.
pub fn aggregate_embedding(
    model: &SslModel,
    img: &ImageBatch,
    protocol: Protocol,
    spec: &AugmentSpec,
    seed: u64,
) -> Result<Matrix<f64>> {
    let indices: Vec<usize> = (0..img.len()).collect();
    represent_indexed(model, img.pixels(), &indices, img.shape(), protocol, spec, seed)
}

fn represent_indexed(
    model: &SslModel,
    pixels: &Matrix<f64>,
    indices: &[usize],
    shape: ImageShape,
    protocol: Protocol,
    spec: &AugmentSpec,
    seed: u64,
) -> Result<Matrix<f64>> {
    let mut parts = Vec::new();
    for lo in (0..indices.len()).step_by(EVAL_CHUNK) {
        let hi = (lo + EVAL_CHUNK).min(indices.len());
        let plan = ViewPlan::new(protocol, spec, shape, &indices[lo..hi], seed);
        let mut tape = Tape::new();
        let x = tape.constant(pixels.slice_rows(lo, hi - lo));
        let r = plan.represent(&mut tape, model, x)?;
        parts.push(tape.value(r).clone());
    }
    let refs: Vec<&Matrix<f64>> = parts.iter().collect();
    Ok(Matrix::vstack(&refs))
}

fn labels_of(img: &ImageBatch) -> Result<&[usize]> {
    img.labels().ok_or_else(|| Error::LabelMismatch("images carry no labels".into()))
}

/// Cross-entropy of `probe` on pixels `x` through the frozen pipeline, with its
/// gradient w.r.t. `x`.
fn pixel_ce_grad(
    model: &SslModel,
    probe: &LinearProbe,
    plan: &ViewPlan,
    x: &Matrix<f64>,
    labels: &[usize],
) -> Result<(f64, Matrix<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let r = plan.represent(&mut tape, model, xv)?;
    let pb = probe.bind(&mut tape, false);
    let logits = probe.forward_classify(&mut tape, &pb, r)?;
    let ce = losses::cross_entropy(&mut tape, logits, labels)?;
    let mut g = tape.backward(ce)?;
    Ok((tape.value(ce).item(), g.take(xv)))
}

/// Same as [`pixel_ce_grad`] but on already-expanded views classified one at a time.
fn view_ce_grad(model: &SslModel, probe: &LinearProbe, views: &Matrix<f64>, labels: &[usize]) -> Result<(f64, Matrix<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(views.clone());
    let plan = ViewPlan {
        map: None,
        views: 1,
        images: views.rows(),
    };
    let r = plan.represent_views(&mut tape, model, xv)?;
    let pb = probe.bind(&mut tape, false);
    let logits = probe.forward_classify(&mut tape, &pb, r)?;
    let ce = losses::cross_entropy(&mut tape, logits, labels)?;
    let mut g = tape.backward(ce)?;
    Ok((tape.value(ce).item(), g.take(xv)))
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub probe: LinearProbe,
    /// Mean training cross-entropy per epoch.
    pub losses: Vec<f64>,
}

/// Fits a linear probe on the frozen encoder. With `cfg.robust`, each
/// minibatch is first attacked end to end through the encoder with PGD on the
/// probe's cross-entropy.
pub fn train_probe(
    model: &SslModel,
    data: &ImageBatch,
    classes: usize,
    spec: &AugmentSpec,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let labels = labels_of(data)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelMismatch(format!("label {bad} out of range for {classes} classes")));
    }
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    let view_seed = seed::derive(cfg.seed, &[stream::PROBE, 1]);
    let all: Vec<usize> = (0..n).collect();
    let clean = represent_indexed(model, data.pixels(), &all, data.shape(), cfg.protocol, spec, view_seed)?;
    let mut probe = LinearProbe::zeros(clean.cols(), classes);
    let mut opt = OptimizerState::new();
    let adversarial = cfg.robust && cfg.attack.is_active();
    let mut order = all.clone();
    let mut losses_per_epoch = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(cfg.seed, &[stream::PROBE, 2, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let feats = if adversarial {
                let x = data.pixels().select_rows(idx);
                let plan = ViewPlan::new(cfg.protocol, spec, data.shape(), idx, view_seed);
                let attack_seed = seed::derive(cfg.seed, &[stream::ATTACK, epoch as u64, b as u64]);
                let out = attacks::pgd(&x, &cfg.attack, attack_seed, |adv| pixel_ce_grad(model, &probe, &plan, adv, &y))?;
                let mut tape = Tape::new();
                let xv = tape.constant(out.adversarial);
                let r = plan.represent(&mut tape, model, xv)?;
                tape.value(r).clone()
            } else {
                clean.select_rows(idx)
            };
            let mut tape = Tape::new();
            let pb = probe.bind(&mut tape, true);
            let h = tape.constant(feats);
            let logits = probe.forward_classify(&mut tape, &pb, h)?;
            let ce = losses::cross_entropy(&mut tape, logits, &y)?;
            let value = tape.value(ce).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: b });
            }
            let mut g = tape.backward(ce)?;
            let grads = [g.take(pb.weight), g.take(pb.bias)];
            optimizer_step(&mut probe.store, &mut opt, &grads, &cfg.optimizer)?;
            total += value;
            batches += 1;
        }
        losses_per_epoch.push(total / batches as f64);
    }
    Ok(ProbeOutcome {
        probe,
        losses: losses_per_epoch,
    })
}

/// One report line: accuracy at one radius under one protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub protocol: Protocol,
    pub robust_probe: bool,
    pub epsilon: Epsilon,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub attack_steps: usize,
    pub seed: u64,
}

/// Clean and robust top-1 accuracy at each radius in `epsilons`.
///
/// Radii are processed in increasing order and an example counts as robust at
/// `ε` only if no attack found at any radius `≤ ε` fools the classifier
/// (every smaller ball lies inside the larger one), so robust accuracy never
/// increases with `ε`.
pub fn evaluate(
    model: &SslModel,
    probe: &LinearProbe,
    data: &ImageBatch,
    spec: &AugmentSpec,
    cfg: &ProbeConfig,
    epsilons: &[Epsilon],
) -> Result<Vec<EvalRow>> {
    let labels = labels_of(data)?;
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    let view_seed = seed::derive(cfg.seed, &[stream::EVAL, 1]);
    let mut radii = epsilons.to_vec();
    radii.sort_by(|a, b| a.value().total_cmp(&b.value()));
    radii.dedup_by(|a, b| a.value() == b.value());

    let mut clean_ok = vec![false; n];
    let mut robust_ok: Vec<Vec<bool>> = vec![Vec::with_capacity(n); radii.len()];
    for lo in (0..n).step_by(EVAL_CHUNK) {
        let hi = (lo + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (lo..hi).collect();
        let y = &labels[lo..hi];
        let x = data.pixels().slice_rows(lo, hi - lo);
        let plan = ViewPlan::new(cfg.protocol, spec, data.shape(), &idx, view_seed);
        let predict = |pixels: &Matrix<f64>| -> Result<Vec<usize>> {
            let mut tape = Tape::new();
            let xv = tape.constant(pixels.clone());
            let r = plan.represent(&mut tape, model, xv)?;
            Ok(argmax_rows(&probe.logits_of(tape.value(r))?))
        };
        let clean_pred = predict(&x)?;
        let mut alive: Vec<bool> = clean_pred.iter().zip(y).map(|(p, t)| p == t).collect();
        clean_ok[lo..hi].copy_from_slice(&alive);
        for (r, eps) in radii.iter().enumerate() {
            let attack = AttackConfig {
                steps: cfg.eval_steps,
                ..AttackConfig::evaluation(eps.value())
            };
            if attack.is_active() && alive.iter().any(|&a| a) {
                let attack_seed = seed::derive(cfg.seed, &[stream::EVAL, 2, r as u64, lo as u64]);
                let pred = match (cfg.attack_mode, plan.views) {
                    (AttackMode::PerView, v) if v > 1 => per_view_attack(model, probe, &plan, &x, y, &attack, attack_seed)?,
                    _ => {
                        let out = attacks::pgd(&x, &attack, attack_seed, |adv| pixel_ce_grad(model, probe, &plan, adv, y))?;
                        predict(&out.adversarial)?
                    }
                };
                for (a, (p, t)) in alive.iter_mut().zip(pred.iter().zip(y)) {
                    *a &= p == t;
                }
            }
            robust_ok[r].extend_from_slice(&alive);
        }
    }
    let acc = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64 / v.len() as f64;
    let clean_acc = acc(&clean_ok);
    Ok(radii
        .iter()
        .zip(&robust_ok)
        .map(|(eps, ok)| EvalRow {
            protocol: cfg.protocol,
            robust_probe: cfg.robust,
            epsilon: *eps,
            clean_acc,
            robust_acc: acc(ok),
            attack_steps: if eps.num == 0 { 0 } else { cfg.eval_steps },
            seed: cfg.seed,
        })
        .collect())
}

/// Attacks each view against the single-view classifier, then classifies the
/// aggregate of the perturbed views.
fn per_view_attack(
    model: &SslModel,
    probe: &LinearProbe,
    plan: &ViewPlan,
    x: &Matrix<f64>,
    labels: &[usize],
    attack: &AttackConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    let views = match &plan.map {
        Some(m) => m.apply(x),
        None => x.clone(),
    };
    let y: Vec<usize> = (0..plan.views).flat_map(|_| labels.iter().copied()).collect();
    let out = attacks::pgd(&views, attack, seed, |adv| view_ce_grad(model, probe, adv, &y))?;
    let mut tape = Tape::new();
    let v = tape.constant(out.adversarial);
    let bound = model.bind(&mut tape, false);
    let h = model.features(&mut tape, &bound, v)?;
    let pooled = plan.pool(&mut tape, h);
    let r = tape.normalize_rows(pooled);
    Ok(argmax_rows(&probe.logits_of(tape.value(r))?))
}

/// Report CSV text for `rows`, with header.
pub fn report_csv(run_id: &str, rows: &[EvalRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        push_row(&mut s, run_id, r);
    }
    s
}

fn push_row(s: &mut String, run_id: &str, r: &EvalRow) {
    let _ = writeln!(
        s,
        "{},{},{},{},{},{},{:.6},{:.6},{},{}",
        run_id,
        r.protocol,
        r.protocol.views(),
        r.robust_probe,
        r.epsilon.num,
        r.epsilon.den,
        r.clean_acc,
        r.robust_acc,
        r.attack_steps,
        r.seed
    );
}

/// Appends rows to a report file, writing the header first if the file is new.
pub fn append_report(path: &Path, run_id: &str, rows: &[EvalRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut text = String::new();
    if fresh {
        text.push_str(REPORT_HEADER);
        text.push('\n');
    }
    for r in rows {
        push_row(&mut text, run_id, r);
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Human-readable accuracy table.
pub fn format_table(rows: &[EvalRow]) -> String {
    let mut s = format!("{:<10} {:>6} {:>8} {:>8} {:>8}\n", "protocol", "r-LE", "eps", "clean", "robust");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>8} {:>7.2}% {:>7.2}%",
            r.protocol.to_string(),
            r.robust_probe,
            r.epsilon.to_string(),
            100.0 * r.clean_acc,
            100.0 * r.robust_acc
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, EncoderSpec};
    use crate::numerics::jacobi_eigenvalues;
    use rand::Rng;

    #[test]
    fn effective_rank_cases() {
        let ones = Matrix::filled(3, 5, 0.7);
        assert!((effective_rank(&ones).unwrap() - 1.0).abs() < 1e-9);
        let eye = Matrix::<f64>::identity(4);
        assert!((effective_rank(&eye).unwrap() - 4.0).abs() < 1e-9);
        assert!(matches!(effective_rank(&Matrix::zeros(3, 3)), Err(Error::ZeroMatrix)));
        assert!(effective_rank(&Matrix::zeros(3, 1)).is_err());

        let mut rng = seed::rng(8, &[]);
        let z = Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let eig = jacobi_eigenvalues(&z.matmul_t(&z)).unwrap();
        let s: Vec<f64> = eig.iter().map(|&e: &f64| e.max(0.0).sqrt()).collect();
        let t: f64 = s.iter().sum();
        let h: f64 = s.iter().map(|v| v / t).map(|p| -p * p.ln()).sum();
        assert!((effective_rank(&z).unwrap() - h.exp()).abs() < 1e-9);
    }

    #[test]
    fn protocol_and_epsilon_parse() {
        assert_eq!("central".parse::<Protocol>().unwrap(), Protocol::Central);
        assert_eq!("agg:16".parse::<Protocol>().unwrap(), Protocol::Aggregate(16));
        assert!("agg:0".parse::<Protocol>().is_err());
        assert!("crop".parse::<Protocol>().is_err());
        assert_eq!("8/255".parse::<Epsilon>().unwrap(), Epsilon::over_255(8));
        assert!("8/0".parse::<Epsilon>().is_err());
        assert!("0.03".parse::<Epsilon>().is_err());
    }

    fn setup() -> (SslModel, ImageBatch, AugmentSpec) {
        let shape = ImageShape::new(4, 4, 1);
        let spec = EncoderSpec {
            input_dim: 16,
            hidden: vec![8],
            activation: Activation::Relu,
            embed_dim: 3,
        };
        let model = SslModel::init(spec, 2).unwrap();
        let mut rng = seed::rng(1, &[]);
        let px = Matrix::from_fn(12, 16, |_, _| rng.random_range(0.0..1.0));
        let labels = (0..12).map(|i| i % 3).collect();
        let img = ImageBatch::new(shape, px, Some(labels)).unwrap();
        (model, img, AugmentSpec::crops(4, (4, 4)))
    }

    #[test]
    fn single_view_aggregate_is_central() {
        let (model, img, spec) = setup();
        let a = aggregate_embedding(&model, &img, Protocol::Aggregate(1), &spec, 3).unwrap();
        let c = aggregate_embedding(&model, &img, Protocol::Central, &spec, 3).unwrap();
        assert_eq!(a, c);
        let direct = model.features_of(img.pixels()).unwrap();
        for i in 0..img.len() {
            let norm: f64 = direct.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for (x, y) in direct.row(i).iter().zip(c.row(i)) {
                assert!((x / norm - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn aggregate_matches_hand_average() {
        let (model, img, spec) = setup();
        let seed = 9;
        let agg = aggregate_embedding(&model, &img, Protocol::Aggregate(4), &spec, seed).unwrap();
        for g in 0..img.len() {
            let one = img.range(g, 1);
            let family = AugmentSpec { crop_count: 4, ..spec.clone() };
            let views = augment::sample_views(&one, &family, seed::derive(seed, &[g as u64])).unwrap();
            let mut sum = vec![0.0; agg.cols()];
            for v in &views {
                let h = model.features_of(v.pixels()).unwrap();
                for (s, x) in sum.iter_mut().zip(h.row(0)) {
                    *s += x / 4.0;
                }
            }
            let norm: f64 = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (x, y) in sum.iter().zip(agg.row(g)) {
                assert!((x / norm - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_views_aggregate_to_the_view() {
        let (model, img, _) = setup();
        let spec = AugmentSpec::patches(3, (4, 4));
        let spec = AugmentSpec { scales: (1.0, 1.0), ..spec };
        let agg = aggregate_embedding(&model, &img, Protocol::Aggregate(3), &spec, 0).unwrap();
        let central = aggregate_embedding(&model, &img, Protocol::Central, &spec, 0).unwrap();
        assert!(agg.sub(&central).max_abs() < 1e-12);
    }

    #[test]
    fn zero_radius_and_constant_classifier() {
        let (model, img, spec) = setup();
        let probe = LinearProbe::zeros(8, 3);
        let cfg = ProbeConfig::standard(Protocol::Central, 1);
        let rows = evaluate(&model, &probe, &img, &spec, &cfg, &default_epsilons()).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!((r.clean_acc - 1.0 / 3.0).abs() < 1e-12);
            assert_eq!(r.robust_acc, r.clean_acc);
        }
        assert_eq!(rows[0].attack_steps, 0);
    }

    #[test]
    fn zero_budget_robust_probe_equals_standard() {
        let (model, img, spec) = setup();
        let mut std_cfg = ProbeConfig::standard(Protocol::Aggregate(2), 3);
        std_cfg.batch_size = 5;
        let rob_cfg = ProbeConfig {
            robust: true,
            attack: AttackConfig { epsilon: 0.0, ..std_cfg.attack },
            ..std_cfg.clone()
        };
        let a = train_probe(&model, &img, 3, &spec, &std_cfg).unwrap();
        let b = train_probe(&model, &img, 3, &spec, &rob_cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.probe, b.probe);
    }

    #[test]
    fn probe_rejects_bad_labels() {
        let (model, img, spec) = setup();
        let cfg = ProbeConfig::standard(Protocol::Central, 1);
        assert!(matches!(train_probe(&model, &img, 2, &spec, &cfg), Err(Error::LabelMismatch(_))));
        let unlabeled = img.clone().with_labels(None).unwrap();
        assert!(matches!(train_probe(&model, &unlabeled, 3, &spec, &cfg), Err(Error::LabelMismatch(_))));
    }

    #[test]
    fn report_rows_have_fixed_columns() {
        let row = EvalRow {
            protocol: Protocol::Aggregate(4),
            robust_probe: true,
            epsilon: Epsilon::over_255(8),
            clean_acc: 0.5,
            robust_acc: 0.25,
            attack_steps: 20,
            seed: 7,
        };
        let csv = report_csv("run-1", &[row]);
        assert_eq!(csv, format!("{REPORT_HEADER}\nrun-1,agg:4,4,true,8,255,0.500000,0.250000,20,7\n"));
    }
}
