//! Command-line front end: run one experiment, sweep the ablation grid,
//! verify gradients, or build a report from metrics CSVs.

use clap::{Args, Parser, Subcommand};
use promptlab::bench::{run_ablation, run_pipeline, AblationSpec};
use promptlab::data::dump_snapshot;
use promptlab::gradcheck::{run_gradchecks, FD_SEEDS, FD_TOLERANCE};
use promptlab::metrics::CSV_HEADER;
use promptlab::model::{save_checkpoint, save_prompts};
use promptlab::report::report_from_files;
use promptlab::runcfg::{default_out_root, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "promptlab", about = "Desk-scale prompt-tuning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the mask threshold q.
    #[arg(long)]
    mask_threshold: Option<f64>,
    /// Override the instance/class distillation weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the topology weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// Disable attention-guided input masking.
    #[arg(long)]
    no_fif: bool,
    /// Disable the topology loss.
    #[arg(long)]
    no_stp: bool,
    /// Disable logit distillation.
    #[arg(long)]
    no_hld: bool,
    /// Output directory (default: $PROMPTLAB_OUT or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or reuse) a teacher, tune prompts, evaluate, write artifacts.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also dump the dataset as raw arrays plus a JSON manifest.
        #[arg(long)]
        dump_data: bool,
    },
    /// Verify every registered loss against central finite differences.
    Gradcheck {
        /// all, model, topology, distill, or train.
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Build SVG sweep plots and tables from metrics CSV files.
    Report {
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Input CSV paths.
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
    /// Run the ablation grid and write one CSV row per (cell, seed).
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Comma-separated mask thresholds.
        #[arg(long)]
        qs: Option<String>,
        /// Comma-separated lambda values.
        #[arg(long)]
        lambdas: Option<String>,
        /// Comma-separated gamma values.
        #[arg(long)]
        gammas: Option<String>,
        /// Skip the component ladder.
        #[arg(long)]
        no_components: bool,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, String> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(q) = args.mask_threshold {
        cfg.train.mask_threshold = q;
    }
    if let Some(lambda) = args.lambda {
        cfg.loss.lambda = lambda;
    }
    if let Some(gamma) = args.gamma {
        cfg.loss.gamma = gamma;
    }
    if args.no_fif {
        cfg.train.fif = false;
    }
    if args.no_stp {
        cfg.train.stp = false;
    }
    if args.no_hld {
        cfg.train.hld = false;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn out_dir(args: &ConfigArgs, cfg: &RunConfig, kind: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| {
        default_out_root().join(format!("{kind}-{}-s{}", cfg.config_hash(), cfg.seed))
    })
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, String> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("bad {what} value: {s}")))
        .collect()
}

fn cmd_run(args: &ConfigArgs, dump_data: bool) -> Result<(), String> {
    let cfg = load_config(args)?;
    let dir = out_dir(args, &cfg, "run");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;

    let outcome = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let record = &outcome.outcome.record;

    cfg.save(&dir.join("config.toml")).map_err(|e| e.to_string())?;
    std::fs::write(
        dir.join("metrics.csv"),
        format!("{CSV_HEADER}\n{}\n", record.csv_row()),
    )
    .map_err(|e| e.to_string())?;
    let mut losses = String::from("epoch,l_cls,l_hld,l_stp,total\n");
    for e in &record.losses {
        losses.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.l_cls, e.l_hld, e.l_stp, e.total
        ));
    }
    std::fs::write(dir.join("losses.csv"), losses).map_err(|e| e.to_string())?;
    save_checkpoint(&outcome.teacher, &dir.join("teacher.json")).map_err(|e| e.to_string())?;
    save_prompts(&outcome.outcome.prompts, &dir.join("prompts.json"))
        .map_err(|e| e.to_string())?;
    if dump_data {
        let dataset = promptlab::data::generate_b2n(&cfg.data, cfg.seed)
            .map_err(|e| e.to_string())?;
        dump_snapshot(&dataset, &dir.join("data")).map_err(|e| e.to_string())?;
    }

    println!(
        "zero-shot base {:.4} novel {:.4} hm {:.4}",
        outcome.zero_shot.base_acc, outcome.zero_shot.novel_acc, outcome.zero_shot.hm
    );
    println!(
        "tuned     base {:.4} novel {:.4} hm {:.4}  ({} ms)",
        record.base_acc, record.novel_acc, record.hm, record.wall_ms
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_gradcheck(scope: &str) -> Result<(), String> {
    let reports = run_gradchecks(scope, FD_SEEDS);
    if reports.is_empty() {
        return Err(format!("no gradient checks matched scope \"{scope}\""));
    }
    let mut failing = Vec::new();
    for r in &reports {
        println!(
            "{:<20} {:<10} worst rel err {:>10.3e}  {}",
            r.name,
            r.module,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failing.push(r.name);
        }
    }
    if failing.is_empty() {
        println!("all {} checks below {FD_TOLERANCE:e}", reports.len());
        Ok(())
    } else {
        Err(format!("gradient check failed for: {}", failing.join(", ")))
    }
}

fn cmd_report(out: Option<PathBuf>, csv: &[PathBuf]) -> Result<(), String> {
    let report = report_from_files(csv).map_err(|e| e.to_string())?;
    let dir = out.unwrap_or_else(|| default_out_root().join("report"));
    report.write_to(&dir).map_err(|e| e.to_string())?;
    print!("{}", report.summary);
    println!("report in {}", dir.display());
    Ok(())
}

fn cmd_ablate(
    args: &ConfigArgs,
    seeds: &str,
    qs: Option<&str>,
    lambdas: Option<&str>,
    gammas: Option<&str>,
    no_components: bool,
) -> Result<(), String> {
    let cfg = load_config(args)?;
    let mut spec = AblationSpec::default();
    spec.seeds = parse_list(seeds, "seed")?;
    if let Some(qs) = qs {
        spec.qs = parse_list(qs, "q")?;
    }
    if let Some(ls) = lambdas {
        spec.lambdas = parse_list(ls, "lambda")?;
    }
    if let Some(gs) = gammas {
        spec.gammas = parse_list(gs, "gamma")?;
    }
    spec.components = !no_components;
    if spec.seeds.is_empty() || spec.qs.is_empty() || spec.lambdas.is_empty() || spec.gammas.is_empty()
    {
        return Err("ablation grid is empty".into());
    }

    let dir = out_dir(args, &cfg, "ablate");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    cfg.save(&dir.join("config.toml")).map_err(|e| e.to_string())?;

    let results = run_ablation(&cfg, &spec).map_err(|e| e.to_string())?;
    let mut csv = format!("{CSV_HEADER}\n");
    let mut failures = 0;
    for r in &results {
        match &r.result {
            Ok(rec) => csv.push_str(&format!("{}\n", rec.csv_row())),
            Err(e) => {
                failures += 1;
                eprintln!("warning: cell {} seed {} failed: {e}", r.label, r.seed);
            }
        }
    }
    std::fs::write(dir.join("ablation.csv"), csv).map_err(|e| e.to_string())?;

    for s in promptlab::bench::summarize(&results) {
        println!(
            "{:<28} n={} hm {:.4} +/- {:.4} (base {:.4}, novel {:.4})",
            s.label, s.n, s.mean_hm, s.std_hm, s.mean_base, s.mean_novel
        );
    }
    if failures > 0 {
        eprintln!("{failures} cells failed; see warnings above");
    }
    println!("grid results in {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { cfg, dump_data } => cmd_run(cfg, *dump_data),
        Command::Gradcheck { scope } => cmd_gradcheck(scope),
        Command::Report { out, csv } => cmd_report(out.clone(), csv),
        Command::Ablate { cfg, seeds, qs, lambdas, gammas, no_components } => cmd_ablate(
            cfg,
            seeds,
            qs.as_deref(),
            lambdas.as_deref(),
            gammas.as_deref(),
            *no_components,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
