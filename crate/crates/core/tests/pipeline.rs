use std::fs;

use rand::Rng;

use rssl_core::attacks::AttackConfig;
use rssl_core::augment::{AugmentSpec, ImageBatch, ImageShape};
use rssl_core::config::{DatasetConfig, IdxFiles, RunConfig};
use rssl_core::data::{self, ContentStyleSpec};
use rssl_core::evaluation::{self, AttackMode, Epsilon, ProbeConfig, Protocol};
use rssl_core::experiments::{self, robust_is_monotone, Preset};
use rssl_core::losses::{self, TcrConfig};
use rssl_core::models::{argmax_rows, Activation, EncoderSpec, LinearProbe, ParameterStore, SslModel};
use rssl_core::seed;
use rssl_core::training::{self, optimizer_step, OptimizerConfig, OptimizerState, Scheme, TrainConfig};
use rssl_core::{Error, Matrix64 as Matrix, Tape64 as Tape};

/// Full-batch Adam on a linear softmax classifier; returns train accuracy.
fn fit_linear(x: &Matrix, y: &[usize], classes: usize, steps: usize) -> (LinearProbe, f64) {
    let mut probe = LinearProbe::zeros(x.cols(), classes);
    let mut opt = OptimizerState::new();
    let cfg = OptimizerConfig::Adam {
        lr: 0.05,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    for _ in 0..steps {
        let mut t = Tape::new();
        let b = probe.bind(&mut t, true);
        let h = t.constant(x.clone());
        let logits = probe.forward_classify(&mut t, &b, h).unwrap();
        let ce = losses::cross_entropy(&mut t, logits, y).unwrap();
        let mut g = t.backward(ce).unwrap();
        let grads = [g.take(b.weight), g.take(b.bias)];
        optimizer_step(&mut probe.store, &mut opt, &grads, &cfg).unwrap();
    }
    let acc = accuracy(&probe, x, y);
    (probe, acc)
}

fn accuracy(probe: &LinearProbe, x: &Matrix, y: &[usize]) -> f64 {
    let pred = argmax_rows(&probe.logits_of(x).unwrap());
    pred.iter().zip(y).filter(|(p, l)| p == l).count() as f64 / y.len() as f64
}

#[test]
fn raw_pixels_are_linearly_recoverable() {
    let spec = ContentStyleSpec::default();
    let (train, test) = data::generate_split(&spec).unwrap();
    let (probe, _) = fit_linear(train.pixels(), train.labels().unwrap(), spec.num_classes, 300);
    let acc = accuracy(&probe, test.pixels(), test.labels().unwrap());
    assert!(acc >= 0.95, "raw-pixel probe reaches only {acc}");
}

#[test]
fn separable_cloud_is_fit_within_200_steps() {
    let mut rng = seed::rng(5, &[]);
    let n = 200;
    let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Matrix::from_fn(n, 2, |i, j| {
        let centre = if j == 0 { if y[i] == 0 { -1.0 } else { 1.0 } } else { 0.0 };
        centre + rng.random_range(-0.5..0.5)
    });
    let (_, acc) = fit_linear(&x, &y, 2, 200);
    assert!(acc >= 0.99, "train accuracy {acc}");
}

fn small_train_config(epochs: usize) -> (ContentStyleSpec, TrainConfig) {
    let spec = ContentStyleSpec {
        train_per_class: 120,
        test_per_class: 60,
        ..ContentStyleSpec::default()
    };
    let cfg = TrainConfig {
        scheme: Scheme::EmpsslPgd,
        total_epochs: epochs,
        replays: 1,
        batch_size: 64,
        encoder: EncoderSpec {
            input_dim: spec.shape.dim(),
            hidden: vec![64],
            activation: Activation::Relu,
            embed_dim: 16,
        },
        augment: AugmentSpec::crops(4, (16, 16)),
        optimizer: OptimizerConfig::default(),
        attack: AttackConfig::none(),
        loss: TcrConfig {
            lambda: 0.3,
            ..TcrConfig::default()
        },
        shared_delta: false,
        simclr_clean_pair: false,
        seed: 3,
    };
    (spec, cfg)
}

/// The preset data is separable enough that random features already saturate
/// a well-trained probe, so this pairs a fainter signal with a short probe.
#[test]
fn trained_encoder_beats_random_encoder() {
    let preset = Preset::builtin("vuln_baseline").unwrap();
    let mut cfg = preset.member_config(&preset.members[0], 7).unwrap();
    cfg.train.total_epochs = 4;
    if let DatasetConfig::Synthetic(s) = &mut cfg.dataset {
        s.content.amplitude = 0.05;
    }
    let data = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let trained = training::train(&data.train, None, &cfg.train).unwrap().model;
    let random = SslModel::init(cfg.train.encoder.clone(), cfg.train.seed).unwrap();
    let pc = ProbeConfig {
        eval_epsilons: vec![Epsilon::over_255(0)],
        epochs: 2,
        ..cfg.probes[0].clone()
    };
    let clean = |m: &SslModel| {
        let fit = evaluation::train_probe(m, &data.train, data.classes, &cfg.train.augment, &pc).unwrap();
        evaluation::evaluate(m, &fit.probe, &data.test, &cfg.train.augment, &pc, &pc.eval_epsilons).unwrap()[0].clean_acc
    };
    let (t, r) = (clean(&trained), clean(&random));
    assert!(t >= r, "trained {t} < random {r}");
}

/// Two classes one intensity level apart on a single pixel, read by a
/// hand-built encoder and probe. Any radius above the margin flips every
/// prediction with one attack step.
#[test]
fn one_step_attack_beyond_the_margin_breaks_everything() {
    let shape = ImageShape::new(1, 2, 1);
    let n = 40;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let margin = 1.0 / 255.0;
    let pixels = Matrix::from_fn(n, 2, |i, j| if j == 0 { 0.5 + if labels[i] == 1 { margin } else { -margin } } else { 0.5 });
    let data = ImageBatch::new(shape, pixels, Some(labels)).unwrap();

    let spec = EncoderSpec {
        input_dim: 2,
        hidden: vec![2],
        activation: Activation::Tanh,
        embed_dim: 2,
    };
    let mut store = ParameterStore::new();
    store.insert("encoder.0.weight", Matrix::identity(2));
    store.insert("encoder.0.bias", Matrix::filled(1, 2, -0.5));
    store.insert("projector.weight", Matrix::identity(2));
    store.insert("projector.bias", Matrix::zeros(1, 2));
    let model = SslModel::from_store(spec, store).unwrap();
    let mut ps = ParameterStore::new();
    ps.insert("probe.weight", Matrix::from_rows(&[vec![-1.0, 1.0], vec![0.0, 0.0]]).unwrap());
    ps.insert("probe.bias", Matrix::zeros(1, 2));
    let probe = LinearProbe::from_store(ps).unwrap();

    let cfg = ProbeConfig {
        eval_steps: 1,
        ..ProbeConfig::standard(Protocol::Central, 1)
    };
    let view = AugmentSpec::central((1, 2));
    let eps = [Epsilon::over_255(0), Epsilon::over_255(2)];
    let rows = evaluation::evaluate(&model, &probe, &data, &view, &cfg, &eps).unwrap();
    assert_eq!(rows[0].clean_acc, 1.0);
    assert_eq!(rows[0].robust_acc, 1.0);
    assert_eq!(rows[1].robust_acc, 0.0);
}

#[test]
fn aggregated_protocols_are_monotone_in_both_attack_modes() {
    let (spec, cfg) = small_train_config(2);
    let (train, test) = data::generate_split(&spec).unwrap();
    let model = training::train(&train, None, &cfg).unwrap().model;
    let test = test.range(0, 60);
    for mode in [AttackMode::EndToEnd, AttackMode::PerView] {
        let pc = ProbeConfig {
            attack_mode: mode,
            eval_steps: 5,
            ..ProbeConfig::standard(Protocol::Aggregate(3), 3)
        };
        let fit = evaluation::train_probe(&model, &train, spec.num_classes, &cfg.augment, &pc).unwrap();
        let rows = evaluation::evaluate(&model, &fit.probe, &test, &cfg.augment, &pc, &pc.eval_epsilons).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(robust_is_monotone(&rows), "{mode:?}: {rows:?}");
        assert_eq!(rows[0].clean_acc, rows[0].robust_acc);
    }
}

#[test]
fn idx_files_round_trip_through_a_run_config() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ContentStyleSpec {
        num_classes: 3,
        train_per_class: 6,
        test_per_class: 3,
        shape: ImageShape::new(4, 4, 1),
        ..ContentStyleSpec::default()
    };
    let (train, test) = data::generate_split(&spec).unwrap();
    let p = |s: &str| dir.path().join(s);
    data::write_idx(&train, &p("train-images"), &p("train-labels")).unwrap();
    data::write_idx(&test, &p("test-images"), &p("test-labels")).unwrap();
    let back = data::load_idx(&p("train-images"), &p("train-labels")).unwrap();
    // IDX stores bytes, so pixels come back quantized to 1/255.
    let q = train.pixels().map(|v| (v * 255.0).round() / 255.0);
    assert!(back.pixels().sub(&q).max_abs() < 1e-12);
    assert_eq!(back.labels(), train.labels());

    let ds = DatasetConfig::Idx(IdxFiles {
        train_images: "train-images".into(),
        train_labels: "train-labels".into(),
        test_images: "test-images".into(),
        test_labels: "test-labels".into(),
        num_classes: None,
    });
    let loaded = ds.load(dir.path()).unwrap();
    assert_eq!((loaded.train.len(), loaded.test.len(), loaded.classes), (18, 9, 3));

    fs::write(p("short-labels"), &fs::read(p("test-labels")).unwrap()[..8]).unwrap();
    assert!(data::load_idx(&p("test-images"), &p("short-labels")).is_err());
}

const TINY_PRESET: &str = r#"{
  "name": "tiny",
  "base": {
    "dataset": {"synthetic": {"num_classes": 2, "train_per_class": 16, "test_per_class": 8,
      "shape": {"height": 4, "width": 4, "channels": 1},
      "content": {"amplitude": 0.2, "frequency": 1.0, "phase_jitter": 0.1, "noise": 0.02},
      "style": {"color": 0.05, "texture": 0.0}, "seed": 1}},
    "train": {"scheme": "empssl_free", "total_epochs": 2, "replays": 2, "batch_size": 8,
      "encoder": {"input_dim": 16, "hidden": [8], "activation": "relu", "embed_dim": 4},
      "augment": {"mode": "crop", "scales": [0.3, 1.0], "ratios": [0.75, 1.3], "crop_count": 3, "out_size": [4, 4]},
      "attack": {"epsilon": 0.03, "steps": 1, "objective": "ssl_loss"},
      "loss": {"lambda": 0.3}},
    "probes": [{"protocol": "central", "epochs": 2, "batch_size": 8,
      "attack": {"epsilon": 0.03, "steps": 2, "objective": "cross_entropy"}, "eval_steps": 3}]
  },
  "members": [
    {"label": "free", "patch": {}},
    {"label": "pgd", "patch": {"train": {"scheme": "empssl_pgd", "replays": 1, "attack": {"steps": 2}}}}
  ],
  "claims": [
    {"kind": "robust_within", "candidate": {"member": "free"}, "reference": {"member": "pgd"}, "epsilon": "8/255", "margin": 1.0},
    {"kind": "monotone"}
  ]
}"#;

#[test]
fn suites_are_byte_reproducible() {
    let preset = Preset::from_json(TINY_PRESET).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = experiments::run_preset(&preset, 4, a.path()).unwrap();
    let rb = experiments::run_preset(&preset, 4, b.path()).unwrap();
    assert!(ra.complete && ra.all_claims_hold());
    let read = |dir: &std::path::Path, f: &str| fs::read(dir.join(f)).unwrap();
    assert_eq!(read(&ra.dir, "comparison.csv"), read(&rb.dir, "comparison.csv"));
    for (ma, mb) in ra.members.iter().zip(&rb.members) {
        assert_eq!(ma.run_id(), mb.run_id());
        for f in ["weights.rssl1", "metrics.csv", "report.csv", "probe-0.rssl1"] {
            assert_eq!(read(&ma.dir, f), read(&mb.dir, f), "{f} differs");
        }
    }
    let summary = fs::read_to_string(ra.dir.join("summary.txt")).unwrap();
    assert!(summary.contains("status: complete"));
    assert!(summary.contains("free-1 vs pgd-1"), "{summary}");
}

#[test]
fn failing_member_leaves_an_incomplete_report() {
    let mut preset = Preset::from_json(TINY_PRESET).unwrap();
    preset.members[1].patch = serde_json::json!({"train": {"optimizer": {"kind": "sgd_momentum", "lr": 1e300}}});
    let out = tempfile::tempdir().unwrap();
    let err = experiments::run_preset(&preset, 0, out.path()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    let suite = out.path().join("tiny-s0-1");
    let summary = fs::read_to_string(suite.join("summary.txt")).unwrap();
    assert!(summary.contains("INCOMPLETE"));
    let csv = fs::read_to_string(suite.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "only the finished member is listed");
    let manifests: Vec<_> = fs::read_dir(&suite)
        .unwrap()
        .filter_map(|e| {
            let p = e.ok()?.path().join("manifest.json");
            p.exists().then_some(p)
        })
        .collect();
    let failed = manifests
        .iter()
        .filter(|p| fs::read_to_string(p).unwrap().contains("\"failed\""))
        .count();
    assert_eq!(failed, 1);
}

#[test]
fn run_config_drives_a_pretrain_end_to_end() {
    let preset = Preset::from_json(TINY_PRESET).unwrap();
    let cfg: RunConfig = preset.member_config(&preset.members[0], 11).unwrap();
    let data = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let m = experiments::run_member("check", &cfg, &data, out.path()).unwrap();
    assert_eq!(m.run_id(), "check-1");
    let acc = m.manifest.accounting.unwrap();
    assert_eq!(acc, training::Accounting { max_delta: acc.max_delta, ..training::Accounting::predict(&cfg.train, data.train.len()) });
    assert!(acc.max_delta <= cfg.train.attack.epsilon + 1e-12);
    let report = fs::read_to_string(m.dir.join(experiments::REPORT_FILE)).unwrap();
    assert_eq!(report.lines().next().unwrap(), evaluation::REPORT_HEADER);
    assert_eq!(report.lines().count(), 1 + 4);
}
