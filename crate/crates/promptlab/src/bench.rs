//! Benchmark orchestration: dataset, teacher, prompt tuning, evaluation,
//! and the ablation grid.

use crate::data::{generate_b2n, B2NDataset, DataError};
use crate::metrics::{evaluate, harmonic_mean, MetricsRecord};
use crate::model::pretrain::pretrain_teacher;
use crate::model::{DualEncoder, ModelError};
use crate::runcfg::RunConfig;
use crate::train::{train_prompts, LossWeights, TrainError, TrainOptions, TrainOutcome};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Teacher accuracy without any prompts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroShot {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub teacher: DualEncoder,
    pub outcome: TrainOutcome,
    pub zero_shot: ZeroShot,
}

/// Generate the dataset and pretrain the frozen teacher for one seed.
/// The run's top-level seed drives both.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<(B2NDataset, DualEncoder), BenchError> {
    let dataset = generate_b2n(&cfg.data, seed)?;
    let mut pre = cfg.pretrain.clone();
    pre.seed = seed;
    let teacher = pretrain_teacher(&dataset, &cfg.model, &pre)?;
    Ok((dataset, teacher))
}

/// Prompt-free teacher accuracy on both held-out splits.
pub fn zero_shot(teacher: &DualEncoder, dataset: &B2NDataset) -> Result<ZeroShot, BenchError> {
    let base_acc = evaluate(teacher, None, dataset, &dataset.base_classes, &dataset.test_base)?;
    let novel_acc =
        evaluate(teacher, None, dataset, &dataset.novel_classes, &dataset.test_novel)?;
    Ok(ZeroShot { base_acc, novel_acc, hm: harmonic_mean(base_acc, novel_acc) })
}

/// One training cell against an already prepared teacher. Stamps the record
/// with the hash of the resolved configuration for that cell.
pub fn run_cell(
    cfg: &RunConfig,
    dataset: &B2NDataset,
    teacher: &DualEncoder,
    weights: &LossWeights,
    options: &TrainOptions,
) -> Result<MetricsRecord, BenchError> {
    Ok(run_cell_outcome(cfg, dataset, teacher, weights, options)?.record)
}

fn run_cell_outcome(
    cfg: &RunConfig,
    dataset: &B2NDataset,
    teacher: &DualEncoder,
    weights: &LossWeights,
    options: &TrainOptions,
) -> Result<TrainOutcome, BenchError> {
    let mut outcome = train_prompts(teacher, teacher, dataset, weights, options)?;
    let mut resolved = cfg.clone();
    resolved.loss = *weights;
    resolved.train = options.clone();
    resolved.seed = options.seed;
    outcome.record.config_hash = resolved.config_hash();
    Ok(outcome)
}

/// The full pipeline for one config: dataset, teacher, prompt tuning,
/// evaluation.
pub fn run_pipeline(cfg: &RunConfig) -> Result<BenchOutcome, BenchError> {
    let (dataset, teacher) = prepare(cfg, cfg.seed)?;
    let zs = zero_shot(&teacher, &dataset)?;
    let mut options = cfg.train.clone();
    options.seed = cfg.seed;
    let outcome = run_cell_outcome(cfg, &dataset, &teacher, &cfg.loss, &options)?;
    Ok(BenchOutcome { teacher, outcome, zero_shot: zs })
}

/// The ablation grid: a cross product over mask thresholds and the two loss
/// weights, plus (optionally) a component ladder at the run config's
/// settings: bare cross-entropy, each distillation term alone, both
/// together, and the full method with masking.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub qs: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub components: bool,
    pub seeds: Vec<u64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            qs: vec![0.0, 15.0, 30.0, 50.0],
            lambdas: vec![1.0],
            gammas: vec![3.0],
            components: true,
            seeds: vec![0, 1, 2],
        }
    }
}

/// One point of the grid: a label plus the exact settings to train with.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub label: String,
    pub weights: LossWeights,
    pub options: TrainOptions,
}

/// The component ladder, ordered from nothing to everything.
pub const COMPONENT_LADDER: [(&str, bool, bool, bool); 5] = [
    ("baseline", false, false, false),
    ("stp", false, true, false),
    ("hld", false, false, true),
    ("stp+hld", false, true, true),
    ("full", true, true, true),
];

pub fn ablation_cells(cfg: &RunConfig, spec: &AblationSpec) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    let base_w = cfg.loss;
    let base_o = cfg.train.clone();
    for &q in &spec.qs {
        for &lambda in &spec.lambdas {
            for &gamma in &spec.gammas {
                let mut o = base_o.clone();
                o.mask_threshold = q;
                cells.push(AblationCell {
                    label: format!("q={q},lambda={lambda},gamma={gamma}"),
                    weights: LossWeights { lambda, gamma },
                    options: o,
                });
            }
        }
    }
    if spec.components {
        for (label, fif, stp, hld) in COMPONENT_LADDER {
            let mut o = base_o.clone();
            o.fif = fif;
            o.stp = stp;
            o.hld = hld;
            cells.push(AblationCell { label: label.to_string(), weights: base_w, options: o });
        }
    }
    cells
}

/// One grid outcome; failures are recorded, not fatal.
#[derive(Debug)]
pub struct AblationResult {
    pub label: String,
    pub seed: u64,
    pub result: Result<MetricsRecord, String>,
}

/// Run the grid. Teachers are pretrained once per seed and shared across
/// cells; cells run concurrently but results come back in a deterministic
/// order (cell-major, then seed).
pub fn run_ablation(cfg: &RunConfig, spec: &AblationSpec) -> Result<Vec<AblationResult>, BenchError> {
    let prepared: Vec<(u64, (B2NDataset, DualEncoder))> = spec
        .seeds
        .par_iter()
        .map(|&seed| Ok((seed, prepare(cfg, seed)?)))
        .collect::<Result<_, BenchError>>()?;
    let cells = ablation_cells(cfg, spec);

    let mut jobs = Vec::new();
    for cell in &cells {
        for &(seed, _) in &prepared {
            jobs.push((cell, seed));
        }
    }
    let mut results: Vec<AblationResult> = jobs
        .par_iter()
        .map(|(cell, seed)| {
            let (dataset, teacher) = &prepared
                .iter()
                .find(|(s, _)| s == seed)
                .expect("prepared seed")
                .1;
            let mut options = cell.options.clone();
            options.seed = *seed;
            let result = run_cell(cfg, dataset, teacher, &cell.weights, &options)
                .map_err(|e| e.to_string());
            AblationResult { label: cell.label.clone(), seed: *seed, result }
        })
        .collect();
    // par_iter preserves order, but make the contract explicit
    results.sort_by_key(|r| {
        (cells.iter().position(|c| c.label == r.label).unwrap_or(usize::MAX), r.seed)
    });
    Ok(results)
}

/// Mean and sample standard deviation of the headline metric per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub label: String,
    pub n: usize,
    pub failures: usize,
    pub mean_base: f64,
    pub mean_novel: f64,
    pub mean_hm: f64,
    pub std_hm: f64,
}

pub fn summarize(results: &[AblationResult]) -> Vec<AblationSummary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&AblationResult> =
                results.iter().filter(|r| r.label == label).collect();
            let ok: Vec<&MetricsRecord> =
                group.iter().filter_map(|r| r.result.as_ref().ok()).collect();
            let n = ok.len();
            let failures = group.len() - n;
            let mean = |f: fn(&MetricsRecord) -> f64| {
                if n == 0 { 0.0 } else { ok.iter().map(|r| f(r)).sum::<f64>() / n as f64 }
            };
            let mean_hm = mean(|r| r.hm);
            let std_hm = if n > 1 {
                (ok.iter().map(|r| (r.hm - mean_hm).powi(2)).sum::<f64>() / (n - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            AblationSummary {
                label: label.to_string(),
                n,
                failures,
                mean_base: mean(|r| r.base_acc),
                mean_novel: mean(|r| r.novel_acc),
                mean_hm,
                std_hm,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_config() -> RunConfig {
        RunConfig::default()
    }

    #[test]
    fn cells_cover_every_axis_and_are_labelled() {
        let spec = AblationSpec::default();
        let cells = ablation_cells(&grid_config(), &spec);
        assert_eq!(cells.len(), 4 * 1 * 1 + 5);
        assert!(cells.iter().any(|c| c.label == "q=15,lambda=1,gamma=3"));
        let baseline = cells.iter().find(|c| c.label == "baseline").unwrap();
        assert!(!baseline.options.fif && !baseline.options.stp && !baseline.options.hld);
        let stp = cells.iter().find(|c| c.label == "stp").unwrap();
        assert!(!stp.options.fif && stp.options.stp && !stp.options.hld);
        let full = cells.iter().find(|c| c.label == "full").unwrap();
        assert!(full.options.fif && full.options.stp && full.options.hld);
    }

    #[test]
    fn weight_grid_is_a_cross_product() {
        // 2 lambdas x 2 gammas, components off -> 4 cells; with 3 seeds the
        // grid yields 12 records
        let spec = AblationSpec {
            qs: vec![30.0],
            lambdas: vec![0.0, 1.0],
            gammas: vec![0.0, 3.0],
            components: false,
            seeds: vec![0, 1, 2],
        };
        let cells = ablation_cells(&grid_config(), &spec);
        assert_eq!(cells.len() * spec.seeds.len(), 12);
    }

    #[test]
    fn component_ladder_runs_from_nothing_to_everything() {
        let labels: Vec<&str> = COMPONENT_LADDER.iter().map(|(l, ..)| *l).collect();
        assert_eq!(labels, ["baseline", "stp", "hld", "stp+hld", "full"]);
        for window in COMPONENT_LADDER.windows(2) {
            let on = |c: &(&str, bool, bool, bool)| c.1 as u8 + c.2 as u8 + c.3 as u8;
            assert!(on(&window[0]) <= on(&window[1]));
        }
    }

    #[test]
    fn summarize_handles_failures_and_spread() {
        fn rec(hm: f64) -> MetricsRecord {
            MetricsRecord {
                config_hash: "x".into(),
                seed: 0,
                q: 30.0,
                lambda: 1.0,
                gamma: 3.0,
                fif: true,
                stp: true,
                hld: true,
                base_acc: 0.8,
                novel_acc: 0.6,
                hm,
                epochs: 1,
                wall_ms: 0,
                losses: Vec::new(),
            }
        }
        let results = vec![
            AblationResult { label: "a".into(), seed: 0, result: Ok(rec(0.6)) },
            AblationResult { label: "a".into(), seed: 1, result: Ok(rec(0.8)) },
            AblationResult { label: "a".into(), seed: 2, result: Err("boom".into()) },
            AblationResult { label: "b".into(), seed: 0, result: Ok(rec(0.5)) },
        ];
        let summary = summarize(&results);
        assert_eq!(summary.len(), 2);
        let a = &summary[0];
        assert_eq!((a.n, a.failures), (2, 1));
        assert!((a.mean_hm - 0.7).abs() < 1e-12);
        // sample std of {0.6, 0.8}
        assert!((a.std_hm - (0.02_f64).sqrt()).abs() < 1e-12);
        assert_eq!(summary[1].n, 1);
        assert_eq!(summary[1].std_hm, 0.0);
    }
}
