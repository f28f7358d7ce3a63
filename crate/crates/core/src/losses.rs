//! Multi-crop coding-rate objective and the NT-Xent contrastive loss, recorded on a [`Tape`].
//!
//! Sign convention: every function returns a quantity that training
//! *minimizes*. The multi-crop objective is the negated
//! `mean(R + λ·D)`, so an adversary ascends the same scalar the encoder
//! descends.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar, Tape, Var};

/// Column norms must be within this of 1 for a batch flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcrConfig {
    /// Distortion ε² in `d / (b ε²)`.
    pub eps_sq: f64,
    /// Weight λ on the invariance term.
    pub lambda: f64,
    /// NT-Xent temperature τ.
    pub tau: f64,
    /// Weight on the coding-rate term; 0 drops it (invariance-only training).
    pub tcr_weight: f64,
}

impl Default for TcrConfig {
    fn default() -> Self {
        Self {
            eps_sq: 0.2,
            lambda: 200.0,
            tau: 0.5,
            tcr_weight: 1.0,
        }
    }
}

impl TcrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_sq > 0.0 && self.eps_sq.is_finite()) {
            return Err(Error::Config(format!("eps_sq must be positive, got {}", self.eps_sq)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) || !(self.tcr_weight >= 0.0) {
            return Err(Error::Config("lambda and tcr_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A `d × b` embedding matrix on a tape; column `j` belongs to sample `j`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingBatch {
    pub var: Var,
    pub dim: usize,
    pub batch: usize,
    pub normalized: bool,
}

impl EmbeddingBatch {
    /// Wraps a `d × b` node, checking `d ≥ 2`, `b ≥ 2`, and unit columns when `normalized`.
    pub fn new<T: Scalar>(tape: &Tape<T>, var: Var, normalized: bool) -> Result<Self> {
        let (dim, batch) = tape.shape(var);
        if dim < 2 || batch < 2 {
            return Err(Error::shape("EmbeddingBatch", "d >= 2 and b >= 2", format!("{dim} x {batch}")));
        }
        if normalized {
            let z = tape.value(var);
            for j in 0..batch {
                let n = (0..dim).map(|i| z.get(i, j) * z.get(i, j)).sum::<T>().sqrt();
                if (n.as_f64() - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::InvalidSpec(format!("column {j} has norm {n}, expected 1")));
                }
            }
        }
        Ok(Self {
            var,
            dim,
            batch,
            normalized,
        })
    }

    /// Builds the batch from an `n × d` row-per-sample node.
    pub fn from_rows<T: Scalar>(tape: &mut Tape<T>, rows: Var, normalized: bool) -> Result<Self> {
        let t = tape.transpose(rows);
        Self::new(tape, t, normalized)
    }
}

/// Per-crop embedding batches plus their mean `Z̄ = (1/C) Σ Zᵢ`.
#[derive(Clone, Debug)]
pub struct CropEmbeddingSet {
    pub members: Vec<EmbeddingBatch>,
    pub mean: Var,
}

impl CropEmbeddingSet {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, members: Vec<EmbeddingBatch>) -> Result<Self> {
        let first = *members.first().ok_or(Error::EmptySet)?;
        if let Some(bad) = members.iter().find(|m| (m.dim, m.batch) != (first.dim, first.batch)) {
            return Err(Error::shape(
                "CropEmbeddingSet",
                format!("{} x {}", first.dim, first.batch),
                format!("{} x {}", bad.dim, bad.batch),
            ));
        }
        let mut acc = first.var;
        for m in &members[1..] {
            acc = tape.add(acc, m.var);
        }
        let mean = tape.scale(acc, T::one() / T::lit(members.len() as f64));
        Ok(Self { members, mean })
    }

    pub fn crops(&self) -> usize {
        self.members.len()
    }
}

/// `R(Z) = ½ log det(I + d/(b ε²) Z Zᵀ)`.
pub fn tcr<T: Scalar>(tape: &mut Tape<T>, z: &EmbeddingBatch, cfg: &TcrConfig) -> Result<Var> {
    let c = z.dim as f64 / (z.batch as f64 * cfg.eps_sq);
    let zt = tape.transpose(z.var);
    let gram = tape.matmul(z.var, zt);
    let scaled = tape.scale(gram, T::lit(c));
    let eye = tape.constant(Matrix::identity(z.dim));
    let m = tape.add(eye, scaled);
    let ld = tape.logdet_spd(m)?;
    Ok(tape.scale(ld, T::lit(0.5)))
}

/// `D(Zᵢ, Z̄) = tr(Zᵢᵀ Z̄)`.
pub fn invariance<T: Scalar>(tape: &mut Tape<T>, zi: &EmbeddingBatch, zbar: Var) -> Result<Var> {
    let expected = (zi.dim, zi.batch);
    let found = tape.shape(zbar);
    if expected != found {
        return Err(Error::shape("invariance", format!("{expected:?}"), format!("{found:?}")));
    }
    Ok(tape.inner(zi.var, zbar))
}

/// The multi-crop loss and its per-crop diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct EmpSslTerms<T> {
    /// `−(1/C) Σᵢ [w·R(Zᵢ) + λ·D(Zᵢ, Z̄)]`, to be minimized.
    pub loss: Var,
    pub tcr_mean: T,
    pub invariance_mean: T,
}

pub fn empssl_objective<T: Scalar>(
    tape: &mut Tape<T>,
    set: &CropEmbeddingSet,
    cfg: &TcrConfig,
) -> Result<EmpSslTerms<T>> {
    let crops = set.crops();
    if crops == 0 {
        return Err(Error::EmptySet);
    }
    let mut total: Option<Var> = None;
    let mut tcr_sum = T::zero();
    let mut inv_sum = T::zero();
    for z in &set.members {
        let mut term: Option<Var> = None;
        if cfg.tcr_weight > 0.0 {
            let r = tcr(tape, z, cfg)?;
            tcr_sum += tape.value(r).item();
            term = Some(if cfg.tcr_weight == 1.0 { r } else { tape.scale(r, T::lit(cfg.tcr_weight)) });
        }
        let d = invariance(tape, z, set.mean)?;
        inv_sum += tape.value(d).item();
        if cfg.lambda > 0.0 {
            let weighted = tape.scale(d, T::lit(cfg.lambda));
            term = Some(match term {
                Some(t) => tape.add(t, weighted),
                None => weighted,
            });
        }
        if let Some(t) = term {
            total = Some(match total {
                Some(acc) => tape.add(acc, t),
                None => t,
            });
        }
    }
    let c = T::lit(crops as f64);
    let loss = match total {
        Some(acc) => tape.scale(acc, -T::one() / c),
        None => tape.constant(Matrix::scalar(T::zero())),
    };
    Ok(EmpSslTerms {
        loss,
        tcr_mean: tcr_sum / c,
        invariance_mean: inv_sum / c,
    })
}

/// Index of the positive partner of anchor `i` among `2n` stacked embeddings.
pub fn positive_partner(i: usize, n: usize) -> usize {
    if i < n {
        i + n
    } else {
        i - n
    }
}

/// NT-Xent over the `2N` embeddings formed by the columns of `first` then `second`.
///
/// Column `j` of `first` and column `j` of `second` are positives; every other
/// embedding is a negative and the anchor itself is excluded from the denominator.
pub fn nt_xent<T: Scalar>(
    tape: &mut Tape<T>,
    first: &EmbeddingBatch,
    second: &EmbeddingBatch,
    tau: f64,
) -> Result<Var> {
    if (first.dim, first.batch) != (second.dim, second.batch) {
        return Err(Error::shape(
            "nt_xent",
            format!("{} x {}", first.dim, first.batch),
            format!("{} x {}", second.dim, second.batch),
        ));
    }
    let n = first.batch;
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let a = tape.transpose(first.var);
    let b = tape.transpose(second.var);
    let stacked = tape.concat_rows(&[a, b]);
    let st = tape.transpose(stacked);
    let sim = tape.matmul(stacked, st);
    let logits = tape.scale(sim, T::lit(1.0 / tau));
    let lse = tape.logsumexp_rows(logits, true);
    let pos = tape.gather(logits, (0..2 * n).map(|i| (i, positive_partner(i, n))).collect());
    let per_anchor = tape.sub(lse, pos);
    Ok(tape.mean(per_anchor))
}

/// Mean softmax cross-entropy of `n × K` logits against integer labels.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = tape.shape(logits);
    if labels.len() != n {
        return Err(Error::LabelMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelMismatch(format!("label {bad} out of range for {k} classes")));
    }
    let lse = tape.logsumexp_rows(logits, false);
    let picked = tape.gather(logits, labels.iter().copied().enumerate().collect());
    let per_row = tape.sub(lse, picked);
    Ok(tape.mean(per_row))
}
