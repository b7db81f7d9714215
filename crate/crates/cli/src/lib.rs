//! Argument parsing and subcommand dispatch for the `suml` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use suml_core::datagen::{read_dataset, write_dataset};
use suml_core::gradcheck::{loss_gradient_suite, model_gradient_suite, CheckResult};
use suml_core::mining::{
    apply_selection, default_bucket_edges, mine_pseudo_pairs, read_pairs_csv, similarity_histogram,
    write_pairs_csv,
};
use suml_core::model::Checkpoint;
use suml_core::pipeline::{
    build_corpus, evaluate_fpv, run_ablation_grid, run_experiment, write_experiment, GridSpec,
};
use suml_core::{atomic_write, parse_config, ExperimentConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] suml_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "suml", version, about = "Unpaired multiview learning with semantic pseudo-pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON config file; absent keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dotted-path override, e.g. `--set loss.theta=0.8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GridPreset {
    /// FPV-only, weighted alignment only, full objective, unweighted variant.
    Tasks,
    /// Trainable, frozen, shared-weight and same-init third-person stacks.
    TpvEncoder,
    /// FPV-only, typical contrastive, triplet and the full method.
    Baselines,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the four datasets of an experiment as JSONL.
    Synth(Common),
    /// Mine pseudo-pairs and write them, with the selection mask, as CSV.
    Mine {
        #[command(flatten)]
        common: Common,
        /// FPV dataset; defaults to the config's synthetic training set.
        #[arg(long, requires = "tpv")]
        fpv: Option<PathBuf>,
        #[arg(long, requires = "fpv")]
        tpv: Option<PathBuf>,
    },
    /// Similarity histogram CSV for a pair file (or freshly mined pairs).
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Comma-separated ascending bucket edges covering [-1, 1].
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        edges: Option<Vec<f64>>,
    },
    /// Full two-stage training run with metrics and checkpoints.
    Train(Common),
    /// Top-1 accuracy of a first-person checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Analytic-vs-numerical gradient suite; exits nonzero on failure.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid and write per-seed and aggregated CSVs.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "tasks")]
        grid: GridPreset,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let overrides = common
        .overrides
        .iter()
        .map(|s| suml_core::config::parse_override(s))
        .collect::<suml_core::Result<Vec<_>>>()?;
    Ok(parse_config(common.config.as_deref(), &overrides)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, |w| {
        w.write_all(text.as_bytes()).map_err(|e| suml_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    Ok(())
}

/// Effective config next to every command's outputs.
fn write_effective_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| suml_core::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_text(&out.join("config.json"), &(cfg.to_json() + "\n"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    write_text(path, &text)
}

#[derive(Serialize)]
struct GradcheckReport {
    checks: Vec<CheckResult>,
    passed: bool,
}

/// Runs one command. Outputs are computed before anything is written, and
/// every file goes through a temp-file rename.
pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let cfg = load(&common)?;
            let corpus = build_corpus(&cfg)?;
            write_effective_config(&cfg, &common.out)?;
            write_dataset(&corpus.fpv_train, &common.out.join("fpv_train.jsonl"))?;
            write_dataset(&corpus.fpv_test, &common.out.join("fpv_test.jsonl"))?;
            write_dataset(&corpus.tpv_train, &common.out.join("tpv_train.jsonl"))?;
            write_dataset(&corpus.tpv_test, &common.out.join("tpv_test.jsonl"))?;
            println!(
                "wrote {} fpv / {} tpv training samples to {}",
                corpus.fpv_train.len(),
                corpus.tpv_train.len(),
                common.out.display()
            );
        }
        Command::Mine { common, fpv, tpv } => {
            let cfg = load(&common)?;
            let (f, t) = match (fpv, tpv) {
                (Some(f), Some(t)) => (read_dataset(&f)?, read_dataset(&t)?),
                _ => {
                    let c = build_corpus(&cfg)?;
                    (c.fpv_train, c.tpv_train)
                }
            };
            let pairs = mine_pseudo_pairs(&f, &t)?;
            let batch = apply_selection(&pairs, cfg.train.selection, cfg.loss.theta)?;
            write_effective_config(&cfg, &common.out)?;
            write_pairs_csv(&batch, &common.out.join("pairs.csv"))?;
            println!(
                "mined {} pairs, {} selected (gate {})",
                batch.pairs.len(),
                batch.selected_count(),
                batch.gate
            );
        }
        Command::Stats {
            common,
            pairs,
            edges,
        } => {
            let cfg = load(&common)?;
            let pairs = match pairs {
                Some(p) => read_pairs_csv(&p)?,
                None => {
                    let c = build_corpus(&cfg)?;
                    mine_pseudo_pairs(&c.fpv_train, &c.tpv_train)?
                }
            };
            let edges = edges.unwrap_or_else(default_bucket_edges);
            let hist = similarity_histogram(&pairs, &edges)?;
            write_effective_config(&cfg, &common.out)?;
            hist.write_csv(&common.out.join("histogram.csv"))?;
            for (i, f) in hist.fractions.iter().enumerate() {
                println!("[{}, {}) {:.4}", hist.bucket_edges[i], hist.bucket_edges[i + 1], f);
            }
        }
        Command::Train(common) => {
            let cfg = load(&common)?;
            let result = run_experiment(&cfg)?;
            write_effective_config(&cfg, &common.out)?;
            write_experiment(&result, &common.out)?;
            println!(
                "{} / {}: final fpv test acc {}",
                result.summary.method.name(),
                result.summary.tpv_mode.name(),
                result.summary.final_fpv_test_acc
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let samples = read_dataset(&dataset)?;
            let acc = evaluate_fpv(&ck.stack, &samples)?;
            println!("{}", serde_json::json!({ "accuracy": acc, "samples": samples.len() }));
        }
        Command::Gradcheck {
            instances,
            seed,
            out,
        } => {
            let mut checks = loss_gradient_suite(instances, seed);
            checks.extend(model_gradient_suite(instances, seed));
            let passed = checks.iter().all(|c| c.passed);
            for c in &checks {
                println!(
                    "{:<28} {:>4} instances  max rel err {:.3e}  tol {:.0e}  {}",
                    c.name,
                    c.instances,
                    c.max_rel_error,
                    c.tolerance,
                    if c.passed { "PASS" } else { "FAIL" }
                );
            }
            if let Some(dir) = out {
                write_json(&dir.join("gradcheck.json"), &GradcheckReport { checks: checks.clone(), passed })?;
            }
            if !passed {
                let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                return Err(CliError::GradcheckFailed(failed.join(", ")));
            }
        }
        Command::Ablate { common, grid, seeds } => {
            let cfg = load(&common)?;
            if seeds.is_empty() {
                return Err(CliError::Usage("--seeds needs at least one seed".into()));
            }
            let spec = match grid {
                GridPreset::Tasks => GridSpec::task_combinations(seeds),
                GridPreset::TpvEncoder => GridSpec::tpv_encoder_variants(seeds),
                GridPreset::Baselines => GridSpec::baselines(seeds),
            };
            let result = run_ablation_grid(&cfg, &spec)?;
            write_effective_config(&cfg, &common.out)?;
            result.write_summary_csv(&common.out.join("summary.csv"))?;
            result.write_table_csv(&common.out.join("table.csv"))?;
            for r in &result.rows {
                println!(
                    "{:<22} {:<15} {:.4} ± {:.4}",
                    r.method.name(),
                    r.tpv_mode.name(),
                    r.mean_fpv_acc,
                    r.std_fpv_acc
                );
            }
        }
    }
    Ok(())
}
