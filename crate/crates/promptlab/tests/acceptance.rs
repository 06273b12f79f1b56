//! Acceptance gate for the whole crate. Each criterion prints one
//! `criterion N (<label>): pass|FAIL` line; run with `--nocapture` to see
//! them even when everything passes.

use promptlab::bench::{prepare, run_cell, zero_shot};
use promptlab::distill::{ckd_loss, class_relation, ikd_loss};
use promptlab::gradcheck::{run_gradchecks, FD_SEEDS, FD_TOLERANCE};
use promptlab::masking::{apply_mask, build_mask, AttentionMap};
use promptlab::metrics::harmonic_mean;
use promptlab::model::Image;
use promptlab::runcfg::RunConfig;
use promptlab::tensor::{Data, Tape, Var};
use promptlab::topology::{make_triplets, stp_vision_loss, TripletSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn verdict(criterion: usize, label: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} ({label}): {} [{detail}]",
        if pass { "pass" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({label}): {detail}");
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let reports = run_gradchecks("all", FD_SEEDS);
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0_f64, f64::max);
    let all_pass = reports.len() == 6 && reports.iter().all(|r| r.passed);
    let in_time = elapsed.as_secs() < 120;
    verdict(
        1,
        "gradient correctness",
        all_pass && in_time,
        &format!(
            "{} checks, worst rel err {worst:.3e} < {FD_TOLERANCE:e}, {:.1}s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    );
}

fn random_points(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..b).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    loop {
        let mut q: Vec<Vec<f64>> = Vec::new();
        let mut ok = true;
        for _ in 0..d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
        if ok {
            return q;
        }
    }
}

fn leaves<'t>(tape: &'t Tape, points: &[Vec<f64>]) -> Vec<Var<'t>> {
    points.iter().map(|p| tape.leaf(Data::vector(p.clone()))).collect()
}

#[test]
fn criterion_2_similarity_invariance() {
    let (b, d) = (4, 8);
    let mut worst = 0.0_f64;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = random_points(b, d, &mut rng);
        let q = random_orthogonal(d, &mut rng);
        let shift: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let triplets = make_triplets(b, &mut rng);
        for scale in [0.1, 1.0, 10.0] {
            let student: Vec<Vec<f64>> = teacher
                .iter()
                .map(|p| {
                    q.iter()
                        .zip(&shift)
                        .map(|(row, t)| {
                            scale * row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + t
                        })
                        .collect()
                })
                .collect();
            let tape = Tape::new();
            let t = leaves(&tape, &teacher);
            let s = leaves(&tape, &student);
            let (loss, _) = stp_vision_loss(&tape, &t, &s, &triplets).unwrap();
            worst = worst.max(loss.scalar_value());
        }
    }
    verdict(
        2,
        "similarity invariance of the angle loss",
        worst < 1e-9,
        &format!("worst loss under rigid transforms {worst:.3e}"),
    );
}

fn naive_angle_loss(teacher: &[Vec<f64>], student: &[Vec<f64>], triplets: &TripletSet) -> f64 {
    fn cos_at(points: &[Vec<f64>], i: usize, j: usize, k: usize) -> f64 {
        let e1: Vec<f64> = points[i].iter().zip(&points[j]).map(|(a, b)| a - b).collect();
        let e2: Vec<f64> = points[k].iter().zip(&points[j]).map(|(a, b)| a - b).collect();
        let dot: f64 = e1.iter().zip(&e2).map(|(a, b)| a * b).sum();
        let n1 = e1.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n2 = e2.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (n1 * n2 + 1e-12)
    }
    let total: f64 = triplets
        .0
        .iter()
        .map(|&(i, j, k)| (cos_at(teacher, i, j, k) - cos_at(student, i, j, k)).abs())
        .sum();
    total / triplets.0.len() as f64
}

fn random_prob_batch(b: usize, c: usize, rng: &mut ChaCha8Rng) -> Data {
    let mut values = Vec::with_capacity(b * c);
    for _ in 0..b {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        values.extend(raw.iter().map(|v| v / sum));
    }
    Data::matrix(b, c, values)
}

#[test]
fn criterion_3_oracle_equivalence() {
    let mut worst = 0.0_f64;
    // angle loss vs explicit triple loop
    for b in 3..=5 {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 * b as u64 + seed);
            let teacher = random_points(b, 6, &mut rng);
            let student = random_points(b, 6, &mut rng);
            let triplets = make_triplets(b, &mut rng);
            let tape = Tape::new();
            let t = leaves(&tape, &teacher);
            let s = leaves(&tape, &student);
            let (loss, _) = stp_vision_loss(&tape, &t, &s, &triplets).unwrap();
            worst = worst.max(
                (loss.scalar_value() - naive_angle_loss(&teacher, &student, &triplets)).abs(),
            );
        }
    }
    // Gram matrix and its Frobenius distance vs scalar loops
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 900);
        let (b, c) = (rng.gen_range(2..6), rng.gen_range(2..5));
        let pt = random_prob_batch(b, c, &mut rng);
        let ps = random_prob_batch(b, c, &mut rng);
        let gram = |p: &Data| -> Vec<f64> {
            let mut m = vec![0.0; c * c];
            for x in 0..c {
                for y in 0..c {
                    for i in 0..b {
                        m[x * c + y] += p.at(i, x) * p.at(i, y) / b as f64;
                    }
                }
            }
            m
        };
        let (mt, ms) = (gram(&pt), gram(&ps));
        let expected =
            mt.iter().zip(&ms).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / c as f64;
        let tape = Tape::new();
        let vt = class_relation(tape.leaf(pt)).unwrap();
        let vs = class_relation(tape.leaf(ps)).unwrap();
        for (got, want) in vt.value().values.iter().zip(&mt) {
            worst = worst.max((got - want).abs());
        }
        worst = worst.max((ckd_loss(vt, vs).unwrap().scalar_value() - expected).abs());
    }
    verdict(3, "oracle equivalence", worst < 1e-12, &format!("worst deviation {worst:.3e}"));
}

#[test]
fn criterion_4_reported_harmonic_means() {
    let e1 = (harmonic_mean(0.6934, 0.7422) * 100.0 - 71.70).abs();
    let e2 = (harmonic_mean(0.8413, 0.7536) * 100.0 - 79.51).abs();
    verdict(
        4,
        "reported harmonic means",
        e1 <= 0.02 && e2 <= 0.02,
        &format!("deviations {e1:.4} and {e2:.4} points"),
    );
}

#[test]
fn criterion_5_structural_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pass = true;
    let mut detail = String::new();

    // Gram symmetry + PSD via Gershgorin-free power bound: check x^T M x >= -1e-10
    // on the batch rows themselves plus random probes
    let mut min_quad = f64::INFINITY;
    for _ in 0..100 {
        let (b, c) = (rng.gen_range(2..7), rng.gen_range(2..6));
        let p = random_prob_batch(b, c, &mut rng);
        let tape = Tape::new();
        let m = class_relation(tape.leaf(p)).unwrap().value();
        for x in 0..c {
            for y in 0..c {
                if (m.at(x, y) - m.at(y, x)).abs() > 1e-12 {
                    pass = false;
                    detail = format!("asymmetric Gram at ({x}, {y})");
                }
            }
        }
        for _ in 0..20 {
            let v: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut quad = 0.0;
            for x in 0..c {
                for y in 0..c {
                    quad += v[x] * m.at(x, y) * v[y];
                }
            }
            let n2: f64 = v.iter().map(|x| x * x).sum();
            min_quad = min_quad.min(quad / n2);
        }
    }
    if min_quad < -1e-10 {
        pass = false;
        detail = format!("Gram not PSD: Rayleigh quotient {min_quad:.3e}");
    }

    // KL nonnegativity and exact zero at equality
    for seed in 0..50 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (b, c) = (r.gen_range(2..6), r.gen_range(2..6));
        let p = random_prob_batch(b, c, &mut r);
        let q = random_prob_batch(b, c, &mut r);
        let tape = Tape::new();
        let kl = ikd_loss(tape.leaf(p.clone()), tape.leaf(q)).unwrap().scalar_value();
        let self_kl = ikd_loss(tape.leaf(p.clone()), tape.leaf(p)).unwrap().scalar_value();
        if kl < -1e-12 || self_kl.abs() > 1e-12 {
            pass = false;
            detail = format!("KL violated: cross {kl:.3e}, self {self_kl:.3e}");
        }
    }

    // softmax rows sum to one
    for seed in 0..50 {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 300);
        let (rows, cols) = (r.gen_range(1..5), r.gen_range(2..7));
        let raw = Data::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| r.gen_range(-5.0..5.0)).collect(),
        );
        let tape = Tape::new();
        let sm = tape.leaf(raw).softmax_rows(0.07).unwrap().value();
        for row in 0..rows {
            let sum: f64 = sm.row(row).iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                pass = false;
                detail = format!("softmax row sums to {sum}");
            }
        }
    }

    // masking idempotence
    for seed in 0..100 {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 700);
        let side = r.gen_range(2..6usize);
        let image = Image::new(Data::new(
            vec![3, side * 4, side * 4],
            (0..3 * side * side * 16).map(|_| r.gen_range(0.0..1.0)).collect(),
        ));
        let map = AttentionMap {
            grid: Data::matrix(side, side, (0..side * side).map(|_| r.gen_range(0.0..1.0)).collect()),
        };
        let mask = build_mask(&map, r.gen_range(0.0..100.0)).unwrap();
        let once = apply_mask(&mask, &image).unwrap();
        let twice = apply_mask(&mask, &once).unwrap();
        if once.pixels.values != twice.pixels.values {
            pass = false;
            detail = "masking is not idempotent".into();
        }
    }

    if detail.is_empty() {
        detail = format!("Gram PSD (min Rayleigh {min_quad:.2e}), KL, softmax, masking all hold");
    }
    verdict(5, "structural invariants", pass, &detail);
}

struct CellStats {
    base: f64,
    novel: f64,
    hm: f64,
}

fn mean_of(values: &[CellStats]) -> CellStats {
    let n = values.len() as f64;
    CellStats {
        base: values.iter().map(|v| v.base).sum::<f64>() / n,
        novel: values.iter().map(|v| v.novel).sum::<f64>() / n,
        hm: values.iter().map(|v| v.hm).sum::<f64>() / n,
    }
}

#[test]
fn criteria_6_and_7_desk_scale_experiment() {
    let start = Instant::now();
    // the experiment needs enough prompt capacity and a fast enough rate
    // for the baseline to actually exploit the planted shortcut in 20
    // epochs; the quieter library defaults underfit at desk scale
    let mut cfg = RunConfig::default();
    cfg.model.prompt_depth = 4;
    cfg.train.visual_prompts = 8;
    cfg.train.textual_prompts = 8;
    assert_eq!(cfg.data.n_classes, 8);
    assert!((cfg.data.rho - 0.95).abs() < 1e-12);
    assert_eq!(cfg.train.epochs, 20);

    // pathology and recovery show most sharply at a fast rate; the
    // single-regularizer ordering is probed at a gentler one where each
    // term alone trains stably
    const LR_RECOVERY: f64 = 5.0e-2;
    const LR_ORDERING: f64 = 2.0e-2;

    let mut zs_novel = Vec::new();
    let mut baseline = Vec::new();
    let mut full = Vec::new();
    let mut slow_baseline = Vec::new();
    let mut stp_only = Vec::new();
    let mut hld_only = Vec::new();
    for seed in 0..3u64 {
        let (dataset, teacher) = prepare(&cfg, seed).unwrap();
        let zs = zero_shot(&teacher, &dataset).unwrap();
        zs_novel.push(zs.novel_acc);

        for (lr, flags, bucket) in [
            (LR_RECOVERY, (false, false, false), &mut baseline),
            (LR_RECOVERY, (true, true, true), &mut full),
            (LR_ORDERING, (false, false, false), &mut slow_baseline),
            (LR_ORDERING, (false, true, false), &mut stp_only),
            (LR_ORDERING, (false, false, true), &mut hld_only),
        ] {
            let mut options = cfg.train.clone();
            options.seed = seed;
            options.lr = lr;
            options.mask_threshold = 30.0;
            options.fif = flags.0;
            options.stp = flags.1;
            options.hld = flags.2;
            let mut weights = cfg.loss.clone();
            if flags == (false, false, false) {
                weights.lambda = 0.0;
                weights.gamma = 0.0;
            }
            let rec = run_cell(&cfg, &dataset, &teacher, &weights, &options).unwrap();
            bucket.push(CellStats { base: rec.base_acc, novel: rec.novel_acc, hm: rec.hm });
        }
    }

    let zs_novel_mean = zs_novel.iter().sum::<f64>() / zs_novel.len() as f64;
    let b = mean_of(&baseline);
    let f = mean_of(&full);
    let sb = mean_of(&slow_baseline);
    let s = mean_of(&stp_only);
    let h = mean_of(&hld_only);
    let elapsed = start.elapsed();

    let gap = zs_novel_mean - b.novel;
    let pathology = gap >= 0.10;
    let recovery = f.novel >= b.novel + gap / 2.0;
    let base_kept = b.base - f.base <= 0.05;
    let hm_up = f.hm > b.hm;
    let in_time = elapsed.as_secs() < 30 * 60;
    verdict(
        6,
        "pathology and recovery",
        pathology && recovery && base_kept && hm_up && in_time,
        &format!(
            "zero-shot novel {zs_novel_mean:.3}, baseline novel {:.3} (gap {gap:.3}), \
             full novel {:.3}, base {:.3}->{:.3}, hm {:.3}->{:.3}, {:.0}s",
            b.novel, f.novel, b.base, f.base, b.hm, f.hm, elapsed.as_secs_f64()
        ),
    );

    verdict(
        7,
        "ablation ordering",
        s.novel > sb.novel && h.novel > sb.novel,
        &format!(
            "mean novel: baseline {:.3}, +topology {:.3}, +distillation {:.3}",
            sb.novel, s.novel, h.novel
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    // a reduced-size config keeps the double run cheap; determinism is a
    // property of the pipeline, not of the problem size
    let cfg = RunConfig::from_toml_str(
        r#"
        seed = 3
        [model]
        embed_dim = 16
        layers = 2
        heads = 2
        patch_size = 4
        image_size = 16
        vocab_size = 16
        max_text_len = 4
        prompt_depth = 1
        [data]
        n_classes = 4
        train_per_class = 4
        test_per_class = 4
        pretrain_per_class = 8
        image_size = 16
        [pretrain]
        max_epochs = 40
        accuracy_floor = 0.8
        batch_size = 8
        [train]
        epochs = 3
        optimizer = "adam"
        visual_prompts = 2
        textual_prompts = 2
        "#,
    )
    .unwrap();

    let run_once = || {
        let (dataset, teacher) = prepare(&cfg, cfg.seed).unwrap();
        let mut options = cfg.train.clone();
        options.seed = cfg.seed;
        run_cell(&cfg, &dataset, &teacher, &cfg.loss, &options)
            .unwrap()
            .csv_row_timeless()
    };
    let first = run_once();
    let second = run_once();
    verdict(
        8,
        "determinism",
        first == second && !first.is_empty(),
        &format!("timeless csv row: {first}"),
    );
}
