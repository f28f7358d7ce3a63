use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rssl_core::attacks::{free_step, pgd_traced, AttackConfig, AttackObjective};
use rssl_core::data::{generate, split, ContentStyleSpec};
use rssl_core::losses::{self, CropEmbeddingSet, EmbeddingBatch, TcrConfig};
use rssl_core::numerics::{logdet_spd, spd_inverse};
use rssl_core::selfcheck::{numeric_gradient, relative_error};
use rssl_core::seed;
use rssl_core::{Matrix64 as Matrix, Tape64 as Tape};

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let b = uniform(rng, n, n);
    b.matmul_t(&b).add(&Matrix::identity(n).scale(0.3))
}

/// Orthonormalizes the rows of a square matrix (Gram-Schmidt).
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let mut q = uniform(rng, n, n);
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..n).map(|k| q.get(i, k) * q.get(j, k)).sum();
            for k in 0..n {
                q.set(i, k, q.get(i, k) - dot * q.get(j, k));
            }
        }
        let norm = q.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in q.row_mut(i) {
            *v /= norm;
        }
    }
    q
}

fn unit_columns(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for j in 0..m.cols() {
        let n = m.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..m.rows() {
            out.set(i, j, m.get(i, j) / n);
        }
    }
    out
}

fn tcr_value(z: &Matrix, cfg: &TcrConfig) -> f64 {
    let mut t = Tape::new();
    let v = t.leaf(z.clone());
    let e = EmbeddingBatch::new(&t, v, false).unwrap();
    let r = losses::tcr(&mut t, &e, cfg).unwrap();
    t.value(r).item()
}

fn nt_xent_value(a: &Matrix, b: &Matrix, tau: f64) -> f64 {
    let mut t = Tape::new();
    let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
    let ea = EmbeddingBatch::new(&t, va, true).unwrap();
    let eb = EmbeddingBatch::new(&t, vb, true).unwrap();
    let l = losses::nt_xent(&mut t, &ea, &eb, tau).unwrap();
    t.value(l).item()
}

fn permute_columns(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, perm[j]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn logdet_scales_with_dimension(s in any::<u64>(), n in 2usize..7, c in 0.05f64..20.0) {
        let m = spd(&mut seed::rng(s, &[]), n);
        let lhs = logdet_spd(&m.scale(c)).unwrap();
        let rhs = n as f64 * c.ln() + logdet_spd(&m).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn logdet_gradient_is_the_inverse(s in any::<u64>()) {
        let m = spd(&mut seed::rng(s, &[]), 4);
        let mut t = Tape::new();
        let v = t.leaf(m.clone());
        let ld = t.logdet_spd(v).unwrap();
        let g = t.backward(ld).unwrap().wrt(v);
        let inv = spd_inverse(&m).unwrap();
        let sym = inv.add(&inv.transpose()).scale(0.5);
        prop_assert!(relative_error(&g, &sym) <= 1e-10);
        let fd = numeric_gradient(&m, 1e-5, |x| {
            let x = x.add(&x.transpose()).scale(0.5);
            logdet_spd(&x)
        }).unwrap();
        prop_assert!(relative_error(&g, &fd) <= 1e-4);
    }

    #[test]
    fn backward_is_linear(s in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = seed::rng(s, &[]);
        let x = uniform(&mut rng, 3, 4);
        let grad = |wf: f64, wg: f64| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let xt = t.transpose(xv);
            let gram = t.matmul(xv, xt);
            let eye = t.constant(Matrix::identity(3));
            let spd = t.add(eye, gram);
            let f = t.logdet_spd(spd).unwrap();
            let th = t.tanh(xv);
            let g = t.sum(th);
            let fs = t.scale(f, wf);
            let gs = t.scale(g, wg);
            let root = t.add(fs, gs);
            t.backward(root).unwrap().wrt(xv)
        };
        let combined = grad(a, b);
        let separate = grad(1.0, 0.0).scale(a).add(&grad(0.0, 1.0).scale(b));
        prop_assert!(combined.sub(&separate).max_abs() <= 1e-12 * (1.0 + separate.max_abs()));
    }

    #[test]
    fn tcr_is_invariant_to_orthogonal_mixing_of_samples(s in any::<u64>(), d in 2usize..9, b in 2usize..9) {
        let mut rng = seed::rng(s, &[]);
        let z = uniform(&mut rng, d, b);
        let q = orthogonal(&mut rng, b);
        let cfg = TcrConfig::default();
        let (r0, r1) = (tcr_value(&z, &cfg), tcr_value(&z.matmul(&q), &cfg));
        prop_assert!((r0 - r1).abs() <= 1e-8, "{r0} vs {r1}");
        prop_assert!(r0 >= 0.0);
    }

    #[test]
    fn tcr_grows_with_a_new_orthogonal_direction(s in any::<u64>()) {
        let mut rng = seed::rng(s, &[]);
        // Columns 0 and 1 random, columns 2 and 3 zero.
        let mut z = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..2 {
                z.set(i, j, rng.random_range(-1.0..1.0));
            }
        }
        // A unit vector orthogonal to span{col0, col1}.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for j in 0..3 {
            let mut v = if j < 2 { z.column(j) } else { (0..4).map(|_| rng.random_range(-1.0..1.0)).collect() };
            for u in &basis {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            basis.push(v.into_iter().map(|a| a / n).collect());
        }
        let mut grown = z.clone();
        for i in 0..4 {
            grown.set(i, 2, basis[2][i]);
        }
        let cfg = TcrConfig::default();
        prop_assert!(tcr_value(&grown, &cfg) > tcr_value(&z, &cfg));
    }

    #[test]
    fn nt_xent_ignores_a_common_permutation(s in any::<u64>(), d in 2usize..7, n in 2usize..7) {
        let mut rng = seed::rng(s, &[]);
        let a = unit_columns(&uniform(&mut rng, d, n));
        let b = unit_columns(&uniform(&mut rng, d, n));
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let l0 = nt_xent_value(&a, &b, 0.5);
        let l1 = nt_xent_value(&permute_columns(&a, &perm), &permute_columns(&b, &perm), 0.5);
        prop_assert!((l0 - l1).abs() <= 1e-12);
    }

    #[test]
    fn empssl_objective_splits_into_its_terms(s in any::<u64>(), c in 1usize..5, lambda in 0.1f64..5.0) {
        let mut rng = seed::rng(s, &[]);
        let crops: Vec<Matrix> = (0..c).map(|_| unit_columns(&uniform(&mut rng, 4, 5))).collect();
        let eval = |cfg: TcrConfig| {
            let mut t = Tape::new();
            let members = crops
                .iter()
                .map(|m| {
                    let v = t.leaf(m.clone());
                    EmbeddingBatch::new(&t, v, true).unwrap()
                })
                .collect();
            let set = CropEmbeddingSet::new(&mut t, members).unwrap();
            let terms = losses::empssl_objective(&mut t, &set, &cfg).unwrap();
            (t.value(terms.loss).item(), terms.tcr_mean, terms.invariance_mean)
        };
        let base = TcrConfig::default();
        let (no_inv, tcr_mean, _) = eval(TcrConfig { lambda: 0.0, ..base });
        prop_assert!((no_inv + tcr_mean).abs() <= 1e-12 * (1.0 + tcr_mean.abs()));
        let (no_tcr, _, inv_mean) = eval(TcrConfig { lambda, tcr_weight: 0.0, ..base });
        prop_assert!((no_tcr + lambda * inv_mean).abs() <= 1e-12 * (1.0 + (lambda * inv_mean).abs()));
    }

    #[test]
    fn pgd_stays_in_the_ball_and_the_box(s in any::<u64>(), steps in 1usize..8, eps_num in 0u32..20, start in any::<bool>()) {
        let mut rng = seed::rng(s, &[]);
        let x = Matrix::from_fn(3, 6, |_, _| rng.random_range(0.0..1.0));
        let w = uniform(&mut rng, 3, 6);
        let eps = eps_num as f64 / 255.0;
        let cfg = AttackConfig { epsilon: eps, alpha: None, steps, objective: AttackObjective::CrossEntropy, random_start: start };
        // Nonlinear objective: Σ w·tanh(3x).
        let out = pgd_traced(&x, &cfg, s, |m| {
            let loss = m.map(|p| (3.0 * p).tanh()).hadamard(&w).sum();
            let grad = m.map(|p| 3.0 * (1.0 - (3.0 * p).tanh().powi(2))).hadamard(&w);
            Ok((loss, grad))
        }).unwrap();
        prop_assert!(out.max_abs.iter().all(|&m| m <= eps + 1e-12));
        prop_assert!(out.adversarial.as_slice().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let again = pgd_traced(&x, &cfg, s, |m| {
            let loss = m.map(|p| (3.0 * p).tanh()).hadamard(&w).sum();
            let grad = m.map(|p| 3.0 * (1.0 - (3.0 * p).tanh().powi(2))).hadamard(&w);
            Ok((loss, grad))
        }).unwrap();
        prop_assert_eq!(out.delta, again.delta);
    }

    #[test]
    fn pgd_on_a_linear_objective_never_loses_ground(s in any::<u64>(), steps in 1usize..10, eps_num in 1u32..20, alpha_frac in 0.05f64..1.5) {
        let mut rng = seed::rng(s, &[]);
        let x = Matrix::from_fn(2, 8, |_, _| rng.random_range(0.0..1.0));
        let w = uniform(&mut rng, 2, 8);
        let eps = eps_num as f64 / 255.0;
        let cfg = AttackConfig { epsilon: eps, alpha: Some(alpha_frac * eps), steps, objective: AttackObjective::CrossEntropy, random_start: false };
        let out = pgd_traced(&x, &cfg, s, |m| Ok((m.hadamard(&w).sum(), w.clone()))).unwrap();
        prop_assert_eq!(out.losses.len(), steps + 1);
        prop_assert!(out.losses.windows(2).all(|p| p[1] >= p[0] - 1e-12));
    }

    #[test]
    fn free_steps_stay_in_the_ball(s in any::<u64>(), k in 1usize..12, eps_num in 0u32..20) {
        let mut rng = seed::rng(s, &[]);
        let eps = eps_num as f64 / 255.0;
        let mut delta = Matrix::zeros(4, 5);
        for _ in 0..k {
            let g = uniform(&mut rng, 4, 5);
            free_step(&mut delta, &g, eps).unwrap();
            prop_assert!(delta.max_abs() <= eps + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn split_is_a_pure_disjoint_partition(s in any::<u64>(), classes in 2usize..5, train in 1usize..6, test in 0usize..4) {
        let spec = ContentStyleSpec {
            num_classes: classes,
            train_per_class: train,
            test_per_class: test,
            shape: rssl_core::augment::ImageShape::new(4, 4, 1),
            seed: s,
            ..ContentStyleSpec::default()
        };
        let all = generate(&spec).unwrap();
        let (tr, te) = split(&spec, &all).unwrap();
        prop_assert_eq!(tr.len() + te.len(), all.len());
        let (tr2, te2) = split(&spec, &all).unwrap();
        prop_assert_eq!(tr.pixels(), tr2.pixels());
        prop_assert_eq!(te.pixels(), te2.pixels());
        // Each class keeps exactly train_per_class training samples.
        let labels = tr.labels().unwrap();
        for c in 0..classes {
            prop_assert_eq!(labels.iter().filter(|&&l| l == c).count(), train);
        }
    }
}

/// With the other embeddings fixed and both negatives placed opposite the
/// positive, the loss-minimizing direction for the free embedding is its
/// positive partner.
#[test]
fn nt_xent_minimizer_points_at_the_positive() {
    let mut rng = seed::rng(77, &[]);
    for _ in 0..5 {
        let p: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let p: Vec<f64> = p.iter().map(|v| v / n).collect();
        let loss_at = |a: [f64; 3]| {
            // first = [a, -p], second = [p, -p]
            let first = Matrix::from_fn(3, 2, |i, j| if j == 0 { a[i] } else { -p[i] });
            let second = Matrix::from_fn(3, 2, |i, j| if j == 0 { p[i] } else { -p[i] });
            nt_xent_value(&first, &second, 0.5)
        };
        let mut best = (f64::INFINITY, [0.0; 3]);
        let (nt, np) = (90, 180);
        for it in 0..=nt {
            let theta = std::f64::consts::PI * it as f64 / nt as f64;
            for ip in 0..np {
                let phi = 2.0 * std::f64::consts::PI * ip as f64 / np as f64;
                let a = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
                let l = loss_at(a);
                if l < best.0 {
                    best = (l, a);
                }
            }
        }
        let cos: f64 = best.1.iter().zip(&p).map(|(a, b)| a * b).sum();
        assert!(cos > (4.0f64).to_radians().cos(), "grid minimizer is {:.2} degrees off", cos.acos().to_degrees());
    }
}
