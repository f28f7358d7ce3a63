//! Preset experiment suites: several runs on one dataset, a joined comparison
//! table and directional claims checked against it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{Dataset, DatasetConfig, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{self, Epsilon, EvalRow, ProbeConfig};
use crate::models::{LinearProbe, SslModel};
use crate::seed::{self, stream};
use crate::training::{self, create_run_dir, RunManifest};

pub const PRESET_NAMES: [&str; 4] = ["vuln_baseline", "pgd_vs_free", "crop_vs_patch", "rle_ablation"];

const PRESETS: [(&str, &str); 4] = [
    ("vuln_baseline", include_str!("../../../configs/presets/vuln_baseline.json")),
    ("pgd_vs_free", include_str!("../../../configs/presets/pgd_vs_free.json")),
    ("crop_vs_patch", include_str!("../../../configs/presets/crop_vs_patch.json")),
    ("rle_ablation", include_str!("../../../configs/presets/rle_ablation.json")),
];

pub const REPORT_FILE: &str = "report.csv";

/// One probe of one member, addressed by member label and probe index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRef {
    pub member: String,
    #[serde(default)]
    pub probe: usize,
}

/// A directional statement about suite results. Accuracies are fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Claim {
    /// robust(at, ε) ≤ chance + margin.
    RobustNearChance { at: ProbeRef, epsilon: Epsilon, margin: f64 },
    /// clean(at) ≥ chance + margin.
    CleanAboveChance { at: ProbeRef, margin: f64 },
    /// robust(better, ε) ≥ robust(baseline, ε) + margin.
    RobustGain {
        better: ProbeRef,
        baseline: ProbeRef,
        epsilon: Epsilon,
        margin: f64,
    },
    /// robust(candidate, ε) ≥ robust(reference, ε) − margin.
    RobustWithin {
        candidate: ProbeRef,
        reference: ProbeRef,
        epsilon: Epsilon,
        margin: f64,
    },
    /// pretrain seconds(fast) ≤ max_ratio × pretrain seconds(slow).
    TimeRatio { fast: String, slow: String, max_ratio: f64 },
    /// Robust accuracy never increases with ε, for every probe in the suite.
    Monotone,
}

/// A member run: patches applied to the preset's base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub label: String,
    /// JSON merge patch over the base [`RunConfig`].
    #[serde(default)]
    pub patch: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub base: Value,
    pub members: Vec<MemberSpec>,
    #[serde(default)]
    pub claims: Vec<Claim>,
}

impl Preset {
    pub fn builtin(name: &str) -> Result<Self> {
        if name.is_empty() {
            return Err(Error::Config("empty preset name".into()));
        }
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Config(format!("unknown preset `{name}` (have {})", PRESET_NAMES.join(", "))))?;
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// The member's full config, seeded with `seed`.
    pub fn member_config(&self, member: &MemberSpec, seed: u64) -> Result<RunConfig> {
        let mut doc = self.base.clone();
        json_patch::merge(&mut doc, &member.patch);
        let mut cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("member `{}`: {e}", member.label)))?;
        cfg.validate()?;
        cfg.reseed(seed);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Config(format!("preset `{}` has no members", self.name)));
        }
        for (i, m) in self.members.iter().enumerate() {
            if self.members[..i].iter().any(|o| o.label == m.label) {
                return Err(Error::Config(format!("duplicate member label `{}`", m.label)));
            }
            self.member_config(m, 0)?;
        }
        Ok(())
    }
}

/// Seed shared by every member of a suite, so comparisons are paired.
pub fn member_seed(suite_seed: u64) -> u64 {
    seed::derive(suite_seed, &[stream::SUITE])
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub config: ProbeConfig,
    pub probe: LinearProbe,
    pub rows: Vec<EvalRow>,
}

impl ProbeResult {
    pub fn at(&self, eps: Epsilon) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.epsilon.value() == eps.value())
    }
}

#[derive(Clone, Debug)]
pub struct MemberResult {
    pub label: String,
    pub manifest: RunManifest,
    pub dir: PathBuf,
    pub model: SslModel,
    pub probes: Vec<ProbeResult>,
    /// Chance accuracy `1 / classes`.
    pub chance: f64,
}

impl MemberResult {
    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn pretrain_seconds(&self) -> f64 {
        self.manifest.wall_clock_seconds.unwrap_or(f64::NAN)
    }
}

/// Pretrains, then fits and evaluates every configured probe. Probe weights go
/// to `probe-<i>.rssl1` and report rows to `report.csv` in the run directory.
pub fn run_member(label: &str, cfg: &RunConfig, data: &Dataset, out_root: &Path) -> Result<MemberResult> {
    let monitor = cfg.monitor(data);
    let (model, manifest, dir) = training::pretrain_as(label, &data.train, monitor.as_ref(), &cfg.train, &data.name, out_root)?;
    let mut probes = Vec::with_capacity(cfg.probes.len());
    for (i, pc) in cfg.probes.iter().enumerate() {
        let fit = evaluation::train_probe(&model, &data.train, data.classes, &cfg.train.augment, pc)?;
        let rows = evaluation::evaluate(&model, &fit.probe, &data.test, &cfg.train.augment, pc, &pc.eval_epsilons)?;
        fit.probe.store.save(&dir.join(format!("probe-{i}.rssl1")))?;
        evaluation::append_report(&dir.join(REPORT_FILE), &manifest.run_id, &rows)?;
        probes.push(ProbeResult {
            config: pc.clone(),
            probe: fit.probe,
            rows,
        });
    }
    Ok(MemberResult {
        label: label.to_string(),
        manifest,
        dir,
        model,
        probes,
        chance: 1.0 / data.classes as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClaimOutcome {
    pub claim: Claim,
    pub passed: bool,
    /// Run ids the claim compares.
    pub run_ids: Vec<String>,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct ComparisonReport {
    pub preset: String,
    pub suite_id: String,
    pub dir: PathBuf,
    pub members: Vec<MemberResult>,
    pub claims: Vec<ClaimOutcome>,
    /// False when a member run failed and the tables cover only earlier members.
    pub complete: bool,
}

impl ComparisonReport {
    pub fn member(&self, label: &str) -> Option<&MemberResult> {
        self.members.iter().find(|m| m.label == label)
    }

    pub fn all_claims_hold(&self) -> bool {
        self.complete && self.claims.iter().all(|c| c.passed)
    }

    /// Every ε appearing in any probe, ascending.
    fn epsilon_grid(&self) -> Vec<Epsilon> {
        let mut grid: Vec<Epsilon> = self
            .members
            .iter()
            .flat_map(|m| m.probes.iter().flat_map(|p| p.rows.iter().map(|r| r.epsilon)))
            .collect();
        grid.sort_by(|a, b| a.value().total_cmp(&b.value()));
        grid.dedup_by(|a, b| a.value() == b.value());
        grid
    }

    /// One row per (member, probe); no timing, so equal inputs give equal bytes.
    pub fn comparison_csv(&self) -> String {
        let grid = self.epsilon_grid();
        let mut s = String::from("run_id,label,scheme,crops,replays,epochs,optimizer_steps,protocol,robust_probe,clean_acc");
        for e in &grid {
            let _ = write!(s, ",robust_{}_{}", e.num, e.den);
        }
        s.push('\n');
        for m in &self.members {
            let t = &m.manifest.config;
            let steps = m.manifest.accounting.map(|a| a.optimizer_steps).unwrap_or(0);
            for p in &m.probes {
                let clean = p.rows.first().map(|r| r.clean_acc).unwrap_or(f64::NAN);
                let _ = write!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{:.6}",
                    m.run_id(),
                    m.label,
                    t.scheme.name(),
                    t.crops(),
                    t.replays,
                    t.total_epochs,
                    steps,
                    p.config.protocol,
                    p.config.robust,
                    clean
                );
                for e in &grid {
                    match p.at(*e) {
                        Some(r) => {
                            let _ = write!(s, ",{:.6}", r.robust_acc);
                        }
                        None => s.push(','),
                    }
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("run_id,label,pretrain_seconds\n");
        for m in &self.members {
            let _ = writeln!(s, "{},{},{:.3}", m.run_id(), m.label, m.pretrain_seconds());
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "suite {} ({}) status: {}\n",
            self.suite_id,
            self.preset,
            if self.complete { "complete" } else { "INCOMPLETE" }
        );
        for m in &self.members {
            let _ = writeln!(s, "  {:<16} {:<24} {:>8.1}s", m.label, m.run_id(), m.pretrain_seconds());
        }
        for c in &self.claims {
            let _ = writeln!(
                s,
                "[{}] {} ({})",
                if c.passed { "PASS" } else { "FAIL" },
                c.detail,
                c.run_ids.join(" vs ")
            );
        }
        s
    }

    fn write(&self) -> Result<()> {
        let put = |name: &str, text: String| {
            let p = self.dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("comparison.csv", self.comparison_csv())?;
        put("timing.csv", self.timing_csv())?;
        put("summary.txt", self.summary())
    }
}

fn lookup<'a>(members: &'a [MemberResult], r: &ProbeRef) -> Result<(&'a MemberResult, &'a ProbeResult)> {
    let m = members
        .iter()
        .find(|m| m.label == r.member)
        .ok_or_else(|| Error::Config(format!("claim names unknown member `{}`", r.member)))?;
    let p = m
        .probes
        .get(r.probe)
        .ok_or_else(|| Error::Config(format!("member `{}` has no probe {}", r.member, r.probe)))?;
    Ok((m, p))
}

fn robust_at<'a>(members: &'a [MemberResult], r: &ProbeRef, eps: Epsilon) -> Result<(&'a str, f64)> {
    let (m, p) = lookup(members, r)?;
    let row = p
        .at(eps)
        .ok_or_else(|| Error::Config(format!("member `{}` probe {} was not evaluated at {eps}", r.member, r.probe)))?;
    Ok((m.run_id(), row.robust_acc))
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

pub fn check_claim(claim: &Claim, members: &[MemberResult]) -> Result<ClaimOutcome> {
    let (passed, run_ids, detail) = match claim {
        Claim::RobustNearChance { at, epsilon, margin } => {
            let (id, r) = robust_at(members, at, *epsilon)?;
            let chance = lookup(members, at)?.0.chance;
            (
                r <= chance + margin,
                vec![id.to_string()],
                format!(
                    "{} robust@{epsilon} {:.2}% <= chance {:.2}% + {:.1}",
                    at.member,
                    pct(r),
                    pct(chance),
                    pct(*margin)
                ),
            )
        }
        Claim::CleanAboveChance { at, margin } => {
            let (m, p) = lookup(members, at)?;
            let clean = p.rows.first().map(|r| r.clean_acc).unwrap_or(f64::NAN);
            (
                clean >= m.chance + margin,
                vec![m.run_id().to_string()],
                format!("{} clean {:.2}% >= chance {:.2}% + {:.1}", at.member, pct(clean), pct(m.chance), pct(*margin)),
            )
        }
        Claim::RobustGain {
            better,
            baseline,
            epsilon,
            margin,
        } => {
            let (a_id, a) = robust_at(members, better, *epsilon)?;
            let (b_id, b) = robust_at(members, baseline, *epsilon)?;
            (
                a >= b + margin,
                vec![a_id.to_string(), b_id.to_string()],
                format!(
                    "{}#{} robust@{epsilon} {:.2}% >= {}#{} {:.2}% + {:.1}",
                    better.member,
                    better.probe,
                    pct(a),
                    baseline.member,
                    baseline.probe,
                    pct(b),
                    pct(*margin)
                ),
            )
        }
        Claim::RobustWithin {
            candidate,
            reference,
            epsilon,
            margin,
        } => {
            let (a_id, a) = robust_at(members, candidate, *epsilon)?;
            let (b_id, b) = robust_at(members, reference, *epsilon)?;
            (
                a >= b - margin,
                vec![a_id.to_string(), b_id.to_string()],
                format!(
                    "{}#{} robust@{epsilon} {:.2}% >= {}#{} {:.2}% - {:.1}",
                    candidate.member,
                    candidate.probe,
                    pct(a),
                    reference.member,
                    reference.probe,
                    pct(b),
                    pct(*margin)
                ),
            )
        }
        Claim::TimeRatio { fast, slow, max_ratio } => {
            let find = |l: &str| {
                members
                    .iter()
                    .find(|m| m.label == l)
                    .ok_or_else(|| Error::Config(format!("claim names unknown member `{l}`")))
            };
            let (f, s) = (find(fast)?, find(slow)?);
            let ratio = f.pretrain_seconds() / s.pretrain_seconds();
            (
                ratio <= *max_ratio,
                vec![f.run_id().to_string(), s.run_id().to_string()],
                format!(
                    "{fast} {:.1}s / {slow} {:.1}s = {ratio:.3} <= {max_ratio}",
                    f.pretrain_seconds(),
                    s.pretrain_seconds()
                ),
            )
        }
        Claim::Monotone => {
            let mut bad = Vec::new();
            for m in members {
                for (i, p) in m.probes.iter().enumerate() {
                    if !robust_is_monotone(&p.rows) {
                        bad.push(format!("{}#{i}", m.label));
                    }
                }
            }
            (
                bad.is_empty(),
                members.iter().map(|m| m.run_id().to_string()).collect(),
                if bad.is_empty() {
                    "robust accuracy non-increasing in epsilon for every probe".to_string()
                } else {
                    format!("robust accuracy increases with epsilon for {}", bad.join(", "))
                },
            )
        }
    };
    Ok(ClaimOutcome {
        claim: claim.clone(),
        passed,
        run_ids,
        detail,
    })
}

/// True when robust accuracy never increases along ascending ε.
pub fn robust_is_monotone(rows: &[EvalRow]) -> bool {
    let mut sorted: Vec<&EvalRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.epsilon.value().total_cmp(&b.epsilon.value()));
    sorted.windows(2).all(|w| w[1].robust_acc <= w[0].robust_acc)
}

/// Runs every member of `preset` in order under `<out_root>/<name>-s<seed>-<k>`
/// and writes `comparison.csv`, `timing.csv` and `summary.txt` there.
///
/// If a member fails, the tables are still written for the members that
/// finished, the summary is marked incomplete, and the member's error is
/// returned.
pub fn run_preset(preset: &Preset, suite_seed: u64, out_root: &Path) -> Result<ComparisonReport> {
    preset.validate()?;
    let (suite_id, dir) = create_run_dir(out_root, &format!("{}-s{suite_seed}", preset.name))?;
    let member_seed = member_seed(suite_seed);
    let mut report = ComparisonReport {
        preset: preset.name.clone(),
        suite_id,
        dir: dir.clone(),
        members: Vec::new(),
        claims: Vec::new(),
        complete: false,
    };
    let mut datasets: Vec<(DatasetConfig, Dataset)> = Vec::new();
    for spec in &preset.members {
        let step = (|| {
            let cfg = preset.member_config(spec, member_seed)?;
            let idx = match datasets.iter().position(|(c, _)| *c == cfg.dataset) {
                Some(i) => i,
                None => {
                    datasets.push((cfg.dataset.clone(), cfg.dataset.load(Path::new("."))?));
                    datasets.len() - 1
                }
            };
            let started = Instant::now();
            let result = run_member(&spec.label, &cfg, &datasets[idx].1, &dir)?;
            eprintln!("  {} done in {:.1}s", spec.label, started.elapsed().as_secs_f64());
            Ok(result)
        })();
        match step {
            Ok(m) => report.members.push(m),
            Err(e) => {
                report.write()?;
                return Err(e);
            }
        }
    }
    report.complete = true;
    report.claims = preset
        .claims
        .iter()
        .map(|c| check_claim(c, &report.members))
        .collect::<Result<_>>()?;
    report.write()?;
    Ok(report)
}

pub fn run_suite(name: &str, suite_seed: u64, out_root: &Path) -> Result<ComparisonReport> {
    run_preset(&Preset::builtin(name)?, suite_seed, out_root)
}
