//! Numeric self-checks: finite-difference gradients, closed-form coding rates,
//! the PGD linear optimum, and free-training update accounting.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{pgd, AttackConfig, AttackObjective};
use crate::augment::{AugmentSpec, ImageBatch, ImageShape};
use crate::error::{Error, Result};
use crate::losses::{self, CropEmbeddingSet, EmbeddingBatch, TcrConfig};
use crate::models::{Activation, EncoderSpec, SslModel};
use crate::numerics::{jacobi_eigenvalues, logdet_spd, Matrix, Tape};
use crate::seed;
use crate::training::{train, OptimizerConfig, Scheme, TrainConfig};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const LEMMA_TOL: f64 = 1e-8;
pub const EIGEN_TOL: f64 = 1e-9;
pub const PGD_TOL: f64 = 1e-6;
/// Random instances per gradient family.
pub const GRAD_INSTANCES: usize = 24;

/// Deliberate defects for exercising the checks themselves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    LogdetGradSign,
}

impl FromStr for Fault {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fault::None),
            "logdet-grad-sign" => Ok(Fault::LogdetGradSign),
            _ => Err(Error::Config(format!("unknown fault `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    /// Largest error observed, in the suite's own metric.
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<12} max error {:.3e} (tol {:.0e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance,
            self.detail
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix<f64> {
    Matrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

fn unit_columns(m: Matrix<f64>) -> Matrix<f64> {
    let t = m.transpose();
    let mut out = t.clone();
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in out.row_mut(i) {
            *v /= n;
        }
    }
    out.transpose()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &Matrix<f64>, h: f64, f: impl Fn(&Matrix<f64>) -> Result<f64>) -> Result<Matrix<f64>> {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let up = f(&probe)?;
        probe.as_mut_slice()[k] = orig - h;
        let down = f(&probe)?;
        probe.as_mut_slice()[k] = orig;
        g.as_mut_slice()[k] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with a small floor on the denominator.
pub fn relative_error(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let diff = a.sub(b).frobenius_norm();
    diff / a.frobenius_norm().max(b.frobenius_norm()).max(1e-10)
}

fn faulty_tape(fault: Fault) -> Tape<f64> {
    let mut t = Tape::new();
    if fault == Fault::LogdetGradSign {
        t.inject_logdet_sign_fault();
    }
    t
}

/// Worst relative error of one gradient family over random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyResult {
    pub family: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

type Family = (&'static str, fn(&mut ChaCha8Rng, Fault) -> Result<f64>);

fn tcr_instance(rng: &mut ChaCha8Rng, fault: Fault) -> Result<f64> {
    let (d, b) = (rng.random_range(2..=8), rng.random_range(2..=8));
    let z = uniform(rng, d, b, -1.0, 1.0);
    let cfg = TcrConfig::default();
    let eval = |m: &Matrix<f64>| {
        let mut t = Tape::new();
        let v = t.leaf(m.clone());
        let e = EmbeddingBatch::new(&t, v, false)?;
        let r = losses::tcr(&mut t, &e, &cfg)?;
        Ok(t.value(r).item())
    };
    let mut t = faulty_tape(fault);
    let v = t.leaf(z.clone());
    let e = EmbeddingBatch::new(&t, v, false)?;
    let r = losses::tcr(&mut t, &e, &cfg)?;
    let analytic = t.backward(r)?.wrt(v);
    Ok(relative_error(&analytic, &numeric_gradient(&z, FD_STEP, eval)?))
}

fn invariance_instance(rng: &mut ChaCha8Rng, _fault: Fault) -> Result<f64> {
    let (d, b, c) = (rng.random_range(2..=8), rng.random_range(2..=8), rng.random_range(2..=4));
    let crops: Vec<Matrix<f64>> = (0..c).map(|_| uniform(rng, d, b, -1.0, 1.0)).collect();
    let which = rng.random_range(0..c);
    let eval = |zi: &Matrix<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let mut members = Vec::new();
        for (k, m) in crops.iter().enumerate() {
            let v = t.leaf(if k == which { zi.clone() } else { m.clone() });
            members.push(EmbeddingBatch::new(&t, v, false)?);
        }
        let set = CropEmbeddingSet::new(&mut t, members)?;
        let dv = losses::invariance(&mut t, &set.members[which], set.mean)?;
        Ok(t.value(dv).item())
    };
    let mut t = Tape::new();
    let mut members = Vec::new();
    for m in &crops {
        let v = t.leaf(m.clone());
        members.push(EmbeddingBatch::new(&t, v, false)?);
    }
    let set = CropEmbeddingSet::new(&mut t, members)?;
    let dv = losses::invariance(&mut t, &set.members[which], set.mean)?;
    let analytic = t.backward(dv)?.wrt(set.members[which].var);
    Ok(relative_error(&analytic, &numeric_gradient(&crops[which], FD_STEP, eval)?))
}

fn nt_xent_instance(rng: &mut ChaCha8Rng, _fault: Fault) -> Result<f64> {
    let (d, n) = (rng.random_range(2..=8), rng.random_range(2..=8));
    let first = unit_columns(uniform(rng, d, n, -1.0, 1.0));
    let second = unit_columns(uniform(rng, d, n, -1.0, 1.0));
    let tau = rng.random_range(0.2..1.0);
    let eval = |a: &Matrix<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let va = t.leaf(a.clone());
        let vb = t.leaf(second.clone());
        let ea = EmbeddingBatch::new(&t, va, false)?;
        let eb = EmbeddingBatch::new(&t, vb, false)?;
        let l = losses::nt_xent(&mut t, &ea, &eb, tau)?;
        Ok(t.value(l).item())
    };
    let mut t = Tape::new();
    let va = t.leaf(first.clone());
    let vb = t.leaf(second.clone());
    let ea = EmbeddingBatch::new(&t, va, false)?;
    let eb = EmbeddingBatch::new(&t, vb, false)?;
    let l = losses::nt_xent(&mut t, &ea, &eb, tau)?;
    let analytic = t.backward(l)?.wrt(va);
    Ok(relative_error(&analytic, &numeric_gradient(&first, FD_STEP, eval)?))
}

fn encoder_instance(rng: &mut ChaCha8Rng, fault: Fault) -> Result<f64> {
    let b = rng.random_range(2..=8);
    let d = rng.random_range(2..=8);
    let spec = EncoderSpec {
        input_dim: 8,
        hidden: vec![rng.random_range(3..=8)],
        activation: if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu },
        embed_dim: d,
    };
    let model = SslModel::init(spec, rng.random())?;
    let x = uniform(rng, b, 8, 0.05, 0.95);
    let shape = ImageShape::new(2, 2, 2);
    let cfg = TcrConfig::default();
    let objective = |t: &mut Tape<f64>, xv: &Matrix<f64>| -> Result<(crate::numerics::Var, crate::numerics::Var)> {
        let bound = model.bind(t, false);
        let img = ImageBatch::new(shape, xv.clone(), None)?;
        let (pix, z) = model.forward_embed(t, &bound, &img)?;
        let r = losses::tcr(t, &z, &cfg)?;
        Ok((pix, r))
    };
    let eval = |m: &Matrix<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let (_, r) = objective(&mut t, m)?;
        Ok(t.value(r).item())
    };
    let mut t = faulty_tape(fault);
    let (pix, r) = objective(&mut t, &x)?;
    let analytic = t.backward(r)?.wrt(pix);
    let numeric = numeric_gradient(&x, FD_STEP, eval)?;
    if numeric.frobenius_norm() < 1e-6 {
        // Every hidden unit is dead; the draw checks nothing, so take another.
        return encoder_instance(rng, fault);
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Worst relative error per family over `instances` random cases each.
pub fn gradient_families(fault: Fault, instances: usize, root: u64) -> Result<Vec<FamilyResult>> {
    let families: [Family; 4] = [
        ("tcr", tcr_instance),
        ("invariance", invariance_instance),
        ("nt_xent", nt_xent_instance),
        ("encoder_pixels", encoder_instance),
    ];
    families
        .iter()
        .enumerate()
        .map(|(k, &(family, f))| {
            let mut rng = seed::rng(root, &[k as u64]);
            let mut worst = 0.0f64;
            for _ in 0..instances {
                worst = worst.max(f(&mut rng, fault)?);
            }
            Ok(FamilyResult {
                family,
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}

pub fn gradient_suite(fault: Fault) -> SuiteReport {
    match gradient_families(fault, GRAD_INSTANCES, 0x6772) {
        Ok(fams) => {
            let max_error = fams.iter().map(|f| f.max_rel_error).fold(0.0, f64::max);
            let detail = fams
                .iter()
                .map(|f| format!("{}={:.1e}", f.family, f.max_rel_error))
                .collect::<Vec<_>>()
                .join(" ");
            SuiteReport {
                name: "gradients",
                passed: max_error <= GRAD_TOL,
                max_error,
                tolerance: GRAD_TOL,
                detail,
            }
        }
        Err(e) => failed("gradients", GRAD_TOL, e),
    }
}

fn failed(name: &'static str, tolerance: f64, e: Error) -> SuiteReport {
    SuiteReport {
        name,
        passed: false,
        max_error: f64::INFINITY,
        tolerance,
        detail: format!("error: {e}"),
    }
}

/// `½ ln(1 + c‖u‖²‖v‖²)` against `tcr(u vᵀ)`, and `logdet_spd` against the
/// Jacobi eigenvalue sum. Returns the two worst absolute errors.
pub fn closed_form_errors(instances: usize, root: u64) -> Result<(f64, f64)> {
    let mut rng = seed::rng(root, &[]);
    let cfg = TcrConfig::default();
    let mut lemma = 0.0f64;
    let mut eigen = 0.0f64;
    for _ in 0..instances {
        let (d, b) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let u = uniform(&mut rng, d, 1, -1.0, 1.0);
        let v = uniform(&mut rng, 1, b, -1.0, 1.0);
        let z = u.matmul(&v);
        let mut t = Tape::new();
        let zv = t.leaf(z);
        let e = EmbeddingBatch::new(&t, zv, false)?;
        let rv = losses::tcr(&mut t, &e, &cfg)?;
        let r = t.value(rv).item();
        let c = d as f64 / (b as f64 * cfg.eps_sq);
        let uu: f64 = u.as_slice().iter().map(|x| x * x).sum();
        let vv: f64 = v.as_slice().iter().map(|x| x * x).sum();
        lemma = lemma.max((r - 0.5 * (1.0 + c * uu * vv).ln()).abs());

        let bm = uniform(&mut rng, 6, 6, -1.0, 1.0);
        let spd = bm.matmul_t(&bm).add(&Matrix::identity(6).scale(0.5));
        let oracle: f64 = jacobi_eigenvalues(&spd)?.iter().map(|l| l.ln()).sum();
        eigen = eigen.max((logdet_spd(&spd)? - oracle).abs());
    }
    Ok((lemma, eigen))
}

pub fn closed_form_suite() -> SuiteReport {
    match closed_form_errors(24, 0x6c656d) {
        Ok((lemma, eigen)) => SuiteReport {
            name: "closed_forms",
            passed: lemma <= LEMMA_TOL && eigen <= EIGEN_TOL,
            max_error: lemma.max(eigen),
            tolerance: LEMMA_TOL,
            detail: format!("det-lemma={lemma:.1e} (tol 1e-8) eig-sum={eigen:.1e} (tol 1e-9)"),
        },
        Err(e) => failed("closed_forms", LEMMA_TOL, e),
    }
}

/// Outcome of the linear-objective PGD checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgdCheck {
    /// Worst gap between the closed-form optimum and the loss PGD reaches.
    pub optimum_gap: f64,
    /// Worst `max|δ| − ε` over every step of every attack (≤ 0 when the ball holds).
    pub ball_excess: f64,
    pub attacks: usize,
}

pub fn pgd_check(instances: usize, root: u64) -> Result<PgdCheck> {
    let mut rng = seed::rng(root, &[]);
    let mut gap = 0.0f64;
    let mut excess = f64::NEG_INFINITY;
    let mut attacks = 0;
    for i in 0..instances {
        let (r, c) = (rng.random_range(1..=4), rng.random_range(1..=16));
        let eps = rng.random_range(1.0..=16.0) / 255.0;
        let x = uniform(&mut rng, r, c, 0.1, 0.9);
        let w = uniform(&mut rng, r, c, -1.0, 1.0);
        let loss = |m: &Matrix<f64>| Ok((m.hadamard(&w).sum(), w.clone()));
        let optimum = x.hadamard(&w).sum() + eps * w.as_slice().iter().map(|v| v.abs()).sum::<f64>();
        let steps = rng.random_range(1..=20);
        let exact = AttackConfig {
            epsilon: eps,
            alpha: Some(eps * rng.random_range(1.0..3.0)),
            steps,
            objective: AttackObjective::CrossEntropy,
            random_start: false,
        };
        let random = AttackConfig {
            alpha: None,
            random_start: true,
            ..exact
        };
        for cfg in [exact, random] {
            let out = pgd(&x, &cfg, i as u64, loss)?;
            attacks += 1;
            for m in &out.max_abs {
                excess = excess.max(m - eps);
            }
            if cfg.alpha.is_some() {
                gap = gap.max((optimum - out.adversarial.hadamard(&w).sum()).abs());
            }
        }
    }
    Ok(PgdCheck {
        optimum_gap: gap,
        ball_excess: excess,
        attacks,
    })
}

pub fn pgd_suite() -> SuiteReport {
    match pgd_check(40, 0x706764) {
        Ok(p) => SuiteReport {
            name: "pgd",
            passed: p.optimum_gap <= PGD_TOL && p.ball_excess <= 1e-12,
            max_error: p.optimum_gap,
            tolerance: PGD_TOL,
            detail: format!("{} attacks, max |δ|-ε = {:.1e}", p.attacks, p.ball_excess.max(0.0)),
        },
        Err(e) => failed("pgd", PGD_TOL, e),
    }
}

/// A 20-image, 10-batch free-training config for accounting checks.
pub fn accounting_config(total_epochs: usize, replays: usize) -> (ImageBatch, TrainConfig) {
    let shape = ImageShape::new(2, 2, 1);
    let mut rng = seed::rng(0x61, &[]);
    let data = ImageBatch::new(shape, uniform(&mut rng, 20, 4, 0.0, 1.0), None).expect("pixels in range");
    let cfg = TrainConfig {
        scheme: Scheme::EmpsslFree,
        total_epochs,
        replays,
        batch_size: 2,
        encoder: EncoderSpec {
            input_dim: 4,
            hidden: vec![4],
            activation: Activation::Relu,
            embed_dim: 2,
        },
        augment: AugmentSpec::crops(2, (2, 2)),
        optimizer: OptimizerConfig::default(),
        attack: AttackConfig::training(8.0 / 255.0, 1),
        loss: TcrConfig::default(),
        shared_delta: false,
        simclr_clean_pair: false,
        seed: 1,
    };
    (data, cfg)
}

pub fn accounting_suite() -> SuiteReport {
    let run = |epochs, m| -> Result<(usize, u64, u64, u64)> {
        let (data, cfg) = accounting_config(epochs, m);
        let out = train(&data, None, &cfg)?;
        Ok((
            out.accounting.outer_epochs,
            out.accounting.optimizer_steps,
            out.accounting.delta_updates,
            out.model.store.updates(),
        ))
    };
    match (run(30, 3), run(30, 1)) {
        (Ok(a), Ok(b)) => {
            let ok = a == (10, 300, 300, 300) && b.1 == a.1;
            SuiteReport {
                name: "accounting",
                passed: ok,
                max_error: if ok { 0.0 } else { 1.0 },
                tolerance: 0.0,
                detail: format!(
                    "m=3: {} outer epochs, {} steps, {} delta updates; m=1: {} steps",
                    a.0, a.1, a.2, b.1
                ),
            }
        }
        (Err(e), _) | (_, Err(e)) => failed("accounting", 0.0, e),
    }
}

pub fn run_all(fault: Fault) -> Vec<SuiteReport> {
    vec![gradient_suite(fault), closed_form_suite(), pgd_suite(), accounting_suite()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_build_passes() {
        for r in run_all(Fault::None) {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn injected_fault_fails_the_gradient_suite_only() {
        let reports = run_all(Fault::LogdetGradSign);
        assert!(!reports[0].passed);
        assert!(reports[1..].iter().all(|r| r.passed));
    }
}
