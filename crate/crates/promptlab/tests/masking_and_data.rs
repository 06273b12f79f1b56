//! Properties of attention-guided masking and of the synthetic benchmark
//! splits: idempotence, quantile behavior, and statistical decorrelation of
//! the confound texture on held-out data.

use promptlab::data::{generate_b2n, DataConfig};
use promptlab::masking::{apply_mask, build_mask, extract_attention, AttentionMap, Mask};
use promptlab::model::{DualEncoder, Image, ModelConfig};
use promptlab::tensor::Data;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(Data::new(
        vec![3, size, size],
        (0..3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect(),
    ))
}

fn random_map(side: usize, rng: &mut ChaCha8Rng) -> AttentionMap {
    AttentionMap {
        grid: Data::matrix(side, side, (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect()),
    }
}

#[test]
fn masking_is_idempotent_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..100 {
        let side = rng.gen_range(2..6usize);
        let size = side * 4;
        let image = random_image(size, &mut rng);
        let map = random_map(side, &mut rng);
        let q = rng.gen_range(0.0..100.0);
        let mask = build_mask(&map, q).unwrap();
        let once = apply_mask(&mask, &image).unwrap();
        let twice = apply_mask(&mask, &once).unwrap();
        assert_eq!(once.pixels.values, twice.pixels.values, "trial {trial}");
    }
}

#[test]
fn mask_from_real_attention_erases_the_configured_fraction() {
    let cfg = ModelConfig {
        embed_dim: 16,
        layers: 2,
        heads: 2,
        patch_size: 4,
        image_size: 16,
        vocab_size: 16,
        max_text_len: 4,
        prompt_depth: 1,
        ..ModelConfig::tiny()
    };
    let mut teacher = DualEncoder::new(cfg.clone(), 3);
    teacher.freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let image = random_image(cfg.image_size, &mut rng);
    let attn = extract_attention(&teacher, &image).unwrap();
    assert_eq!(attn.grid.rows(), 4);

    let n = attn.grid.len();
    for q in [0.0, 25.0, 50.0, 100.0] {
        let mask = build_mask(&attn, q).unwrap();
        let dropped = (n as f64 * q / 100.0).floor() / n as f64;
        // ties can only reduce the dropped count, never increase it
        assert!(mask.zero_fraction() <= dropped + 1e-12, "q={q}");
        if q == 0.0 {
            assert_eq!(mask.zero_fraction(), 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_pixels_are_zero_or_untouched(
        seed in 0u64..1000,
        q in 0.0f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = 4usize;
        let image = random_image(side * 4, &mut rng);
        let map = random_map(side, &mut rng);
        let mask = build_mask(&map, q).unwrap();
        let out = apply_mask(&mask, &image).unwrap();
        for (a, b) in image.pixels.values.iter().zip(&out.pixels.values) {
            prop_assert!(*b == 0.0 || b == a);
        }
    }

    #[test]
    fn raising_the_threshold_never_unmasks(
        seed in 0u64..1000,
        q in 0.0f64..90.0,
        dq in 0.0f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(4, &mut rng);
        let low: Mask = build_mask(&map, q).unwrap();
        let high: Mask = build_mask(&map, q + dq).unwrap();
        for (l, h) in low.grid.values.iter().zip(&high.grid.values) {
            prop_assert!(*l == 1.0 || *h == 0.0, "cell unmasked as q grew");
        }
    }

    #[test]
    fn harmonic_mean_stays_between_min_and_arithmetic_mean(
        a in 0.0001f64..1.0,
        b in 0.0001f64..1.0,
    ) {
        let hm = promptlab::metrics::harmonic_mean(a, b);
        prop_assert!(hm <= (a + b) / 2.0 + 1e-12);
        prop_assert!(hm >= a.min(b) - 1e-12);
        let sym = promptlab::metrics::harmonic_mean(b, a);
        prop_assert!((hm - sym).abs() < 1e-12);
    }
}

/// Pearson chi-squared statistic for a label-by-confound contingency table.
fn chi_squared_stat(table: &[Vec<usize>]) -> (f64, usize) {
    let rows = table.len();
    let cols = table[0].len();
    let total: usize = table.iter().flatten().sum();
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let col_sums: Vec<f64> = (0..cols)
        .map(|c| table.iter().map(|r| r[c] as f64).sum())
        .collect();
    let mut stat = 0.0;
    let mut used_rows = 0;
    let mut used_cols = 0;
    for r in 0..rows {
        if row_sums[r] > 0.0 {
            used_rows += 1;
        }
    }
    for c in 0..cols {
        if col_sums[c] > 0.0 {
            used_cols += 1;
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            let expected = row_sums[r] * col_sums[c] / total as f64;
            if expected > 0.0 {
                let diff = table[r][c] as f64 - expected;
                stat += diff * diff / expected;
            }
        }
    }
    (stat, (used_rows - 1) * (used_cols - 1))
}

#[test]
fn held_out_confounds_are_independent_of_labels() {
    let cfg = DataConfig {
        test_per_class: 125,
        ..DataConfig::default()
    };
    let ds = generate_b2n(&cfg, 17).unwrap();
    let c = cfg.n_classes;
    let mut table = vec![vec![0usize; c]; c];
    for s in ds.test_base.iter().chain(&ds.test_novel) {
        table[s.label][s.confound.unwrap()] += 1;
    }
    let n: usize = table.iter().flatten().sum();
    assert_eq!(n, 1000);

    let (stat, df) = chi_squared_stat(&table);
    let p = 1.0 - ChiSquared::new(df as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "confound correlates with labels: chi2={stat:.2}, df={df}, p={p:.4}");
}

#[test]
fn base_training_confounds_do_correlate_at_high_rho() {
    // the complementary check: the confounded training split must fail the
    // same independence test decisively
    let cfg = DataConfig {
        train_per_class: 125,
        rho: 0.95,
        ..DataConfig::default()
    };
    let ds = generate_b2n(&cfg, 17).unwrap();
    let c = cfg.n_classes;
    let mut table = vec![vec![0usize; c]; c];
    for s in &ds.train_base {
        table[s.label][s.confound.unwrap()] += 1;
    }
    let (stat, df) = chi_squared_stat(&table);
    let p = 1.0 - ChiSquared::new(df as f64).unwrap().cdf(stat);
    assert!(p < 1e-6, "training confound unexpectedly independent: p={p}");
}
