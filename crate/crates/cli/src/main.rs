use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rssl_core::config::RunConfig;
use rssl_core::evaluation::{self, Epsilon, EvalRow, ProbeConfig, Protocol};
use rssl_core::experiments;
use rssl_core::models::{LinearProbe, ParameterStore, SslModel};
use rssl_core::selfcheck::{self, Fault};
use rssl_core::training::{self, RunManifest, MANIFEST_FILE};
use rssl_core::Error;

#[derive(Parser)]
#[command(name = "rssl", version, about = "Adversarial multi-crop self-supervised learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder; writes manifest.json, metrics.csv and weights.rssl1.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Output root (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a linear probe on frozen weights, evaluate it and append report rows.
    Probe {
        #[command(flatten)]
        common: EvalArgs,
        /// Adversarially train the probe (r-LE).
        #[arg(long)]
        robust: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Where to save the probe (default: next to the weights).
        #[arg(long)]
        probe_out: Option<PathBuf>,
    },
    /// Evaluate a saved probe on frozen weights.
    Eval {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long)]
        probe: PathBuf,
        /// Mark rows as coming from a robust probe.
        #[arg(long)]
        robust: bool,
    },
    /// Run the numeric self-check suites.
    Selfcheck {
        #[arg(long, hide = true, default_value = "none")]
        inject_fault: String,
    },
    /// Run a preset experiment suite.
    Suite {
        /// One of vuln_baseline, pgd_vs_free, crop_vs_patch, rle_ablation.
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// central or agg:n
    #[arg(long)]
    protocol: Option<Protocol>,
    /// Attack radii as a/b, e.g. --eps 4/255 --eps 8/255.
    #[arg(long = "eps", num_args = 1..)]
    eps: Vec<Epsilon>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report CSV to append to (default: report.csv next to the weights).
    #[arg(long)]
    report: Option<PathBuf>,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

fn with_code(code: u8) -> impl Fn(Error) -> Failure {
    move |error| Failure { code, error }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config(_) | Error::InvalidSpec(_) | Error::SchemeMismatch(_) | Error::LabelMismatch(_) => 2,
            Error::NonFiniteLoss { .. } => 3,
            Error::Format(_) => 4,
            _ => 1,
        };
        Failure { code, error }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("RSSL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("RSSL_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Pretrain { config, out, seed } => cmd_pretrain(&config, out, seed),
        Command::Probe {
            common,
            robust,
            epochs,
            probe_out,
        } => cmd_probe(&common, robust, epochs, probe_out),
        Command::Eval { common, probe, robust } => cmd_eval(&common, &probe, robust),
        Command::Selfcheck { inject_fault } => cmd_selfcheck(&inject_fault),
        Command::Suite { preset, seed, out } => cmd_suite(&preset, seed, &out),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path).map_err(with_code(2))?;
    if let Some(s) = seed {
        cfg.reseed(s);
    }
    Ok(cfg)
}

fn config_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn cmd_pretrain(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> CmdResult {
    let cfg = load_config(config, seed)?;
    let data = cfg.dataset.load(config_dir(config)).map_err(with_code(2))?;
    let monitor = cfg.monitor(&data);
    let out_root = out.unwrap_or_else(|| cfg.out_dir.clone());
    let (_, manifest, dir) = training::pretrain(&data.train, monitor.as_ref(), &cfg.train, &data.name, &out_root)?;
    let acc = manifest.accounting.unwrap_or_default();
    println!("run {} -> {}", manifest.run_id, dir.display());
    println!(
        "{} outer epochs, {} optimizer steps, {} delta updates, {:.1}s",
        acc.outer_epochs,
        acc.optimizer_steps,
        acc.delta_updates,
        manifest.wall_clock_seconds.unwrap_or(0.0)
    );
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    data: rssl_core::config::Dataset,
    model: SslModel,
    probe_cfg: ProbeConfig,
    run_id: String,
    report: PathBuf,
}

fn load_for_eval(args: &EvalArgs, robust: bool) -> Result<Loaded, Failure> {
    let cfg = load_config(&args.config, args.seed)?;
    let store = ParameterStore::load(&args.weights).map_err(with_code(4))?;
    let model = SslModel::from_store(cfg.train.encoder.clone(), store).map_err(with_code(4))?;
    let data = cfg.dataset.load(config_dir(&args.config)).map_err(with_code(2))?;
    let mut probe_cfg = cfg
        .probes
        .iter()
        .find(|p| p.robust == robust)
        .cloned()
        .unwrap_or_else(|| ProbeConfig::standard(Protocol::Central, 10));
    probe_cfg.robust = robust;
    if let Some(p) = args.protocol {
        probe_cfg.protocol = p;
    }
    if !args.eps.is_empty() {
        probe_cfg.eval_epsilons = args.eps.clone();
    }
    if let Some(s) = args.seed {
        probe_cfg.seed = s;
    }
    probe_cfg.validate().map_err(with_code(2))?;
    let weights_dir = config_dir(&args.weights).to_path_buf();
    let run_id = RunManifest::load(&weights_dir.join(MANIFEST_FILE))
        .map(|m| m.run_id)
        .unwrap_or_else(|_| {
            args.weights
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
    let report = args
        .report
        .clone()
        .unwrap_or_else(|| weights_dir.join(experiments::REPORT_FILE));
    Ok(Loaded {
        cfg,
        data,
        model,
        probe_cfg,
        run_id,
        report,
    })
}

fn finish(l: &Loaded, rows: &[EvalRow]) -> CmdResult {
    evaluation::append_report(&l.report, &l.run_id, rows)?;
    print!("{}", evaluation::format_table(rows));
    Ok(())
}

fn cmd_probe(args: &EvalArgs, robust: bool, epochs: Option<usize>, probe_out: Option<PathBuf>) -> CmdResult {
    let mut l = load_for_eval(args, robust)?;
    if let Some(e) = epochs {
        l.probe_cfg.epochs = e;
        l.probe_cfg.validate().map_err(with_code(2))?;
    }
    let pc = &l.probe_cfg;
    let fit = evaluation::train_probe(&l.model, &l.data.train, l.data.classes, &l.cfg.train.augment, pc)?;
    let rows = evaluation::evaluate(&l.model, &fit.probe, &l.data.test, &l.cfg.train.augment, pc, &pc.eval_epsilons)?;
    let path = probe_out.unwrap_or_else(|| {
        let tag = pc.protocol.to_string().replace(':', "");
        config_dir(&args.weights).join(format!("probe-{tag}{}.rssl1", if robust { "-rle" } else { "" }))
    });
    fit.probe.store.save(&path)?;
    eprintln!("probe saved to {}", path.display());
    finish(&l, &rows)
}

fn cmd_eval(args: &EvalArgs, probe: &Path, robust: bool) -> CmdResult {
    let l = load_for_eval(args, robust)?;
    let store = ParameterStore::load(probe).map_err(with_code(4))?;
    let probe = LinearProbe::from_store(store).map_err(with_code(4))?;
    let pc = &l.probe_cfg;
    let rows = evaluation::evaluate(&l.model, &probe, &l.data.test, &l.cfg.train.augment, pc, &pc.eval_epsilons)?;
    finish(&l, &rows)
}

fn cmd_selfcheck(fault: &str) -> CmdResult {
    let fault: Fault = fault.parse().map_err(with_code(2))?;
    let reports = selfcheck::run_all(fault);
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            error: Error::Config(format!("self-check failed: {}", failed.join(", "))),
        })
    }
}

fn cmd_suite(preset: &str, seed: u64, out: &Path) -> CmdResult {
    let report = experiments::run_suite(preset, seed, out)?;
    print!("{}", report.summary());
    println!("tables in {}", report.dir.display());
    Ok(())
}
