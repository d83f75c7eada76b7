//! Command-line front end for the watermarking toolkit.
//!
//! Every subcommand reads a single JSON experiment config (see the README
//! for the schema) except `verify`, which works directly on two
//! probability-column CSVs. Exit codes: 0 success, 1 config error,
//! 2 runtime or partial failure.

use cfwatermark::data::bootstrap;
use cfwatermark::error::Error;
use cfwatermark::explain;
use cfwatermark::extract::{self, AttackKind, DefenderService};
use cfwatermark::harness::{self, ExperimentConfig};
use cfwatermark::mlp::{self, ModelDocument};
use cfwatermark::rng;
use cfwatermark::verify::{paired_t_test, PairedSample};
use cfwatermark::watermark;
use clap::{Parser, Subcommand};
use rand::Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cfwatermark",
    version,
    about = "Watermark counterfactual explanations, simulate extraction attacks, and verify model ownership"
)]
struct Cli {
    /// JSON experiment configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's master seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the proprietary model and save it as JSON
    Train,
    /// Generate counterfactuals for the test split and export them as CSV
    Explain,
    /// Serve one watermarked CF session: theta, loss trace, watermarked CFs
    Watermark,
    /// Run a single extraction attack on the first bootstrap subset
    Attack {
        #[arg(long, value_enum)]
        kind: AttackChoice,
    },
    /// Paired t-test over two probability-column CSV files
    Verify {
        /// suspect probabilities on watermarked CFs
        #[arg(long)]
        wm: PathBuf,
        /// suspect probabilities on unwatermarked CFs
        #[arg(long)]
        unwm: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Full evaluation protocol: attacks x bootstrap subsets, report files
    Evaluate,
    /// 3x3 poison-form x validity-form ablation grid
    AblateLosses,
    /// Regularization-weight sweep
    AblateReg {
        /// comma-separated lambda values
        #[arg(long, default_value = "0.0,0.5,1.0", value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
    /// Fine-tuning and pruning robustness sweeps
    Robustness,
}

#[derive(clap::ValueEnum, Clone, Copy, PartialEq)]
enum AttackChoice {
    Querying,
    Mrce,
    Dualcf,
}

impl From<AttackChoice> for AttackKind {
    fn from(value: AttackChoice) -> Self {
        match value {
            AttackChoice::Querying => AttackKind::Querying,
            AttackChoice::Mrce => AttackKind::Mrce,
            AttackChoice::Dualcf => AttackKind::Dualcf,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            eprintln!("error: failed to size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let config_error = matches!(
                e,
                Error::InvalidConfig(_) | Error::Json(_) | Error::MissingColumn { .. }
            );
            ExitCode::from(if config_error { 1 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli) -> cfwatermark::Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("--config <path> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> cfwatermark::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn derive_seed(master: u64, purpose: &str) -> u64 {
    rng::stream(master, purpose).gen()
}

/// Train the proprietary model exactly as the evaluation harness would.
fn trained_service(
    cfg: &ExperimentConfig,
) -> cfwatermark::Result<(DefenderService, cfwatermark::data::TabularDataset)> {
    let (train, test) = harness::load_dataset(cfg)?;
    let mask = train.immutable_mask();
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = derive_seed(cfg.master_seed, "fw/train");
    let fw = mlp::train(&train.x, &train.y_matrix(), &model_cfg)?;
    Ok((
        DefenderService::new(fw, cfg.explainer.clone(), cfg.watermark.clone(), train, mask),
        test,
    ))
}

fn read_probability_column(path: &Path) -> cfwatermark::Result<Vec<f64>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match trimmed.parse::<f64>() {
            Ok(v) => values.push(v),
            Err(_) if i == 0 => continue, // header row
            Err(_) => {
                return Err(Error::NonNumericValue {
                    row: i + 1,
                    column: path.display().to_string(),
                    value: trimmed.to_string(),
                })
            }
        }
    }
    Ok(values)
}

fn run(cli: Cli) -> cfwatermark::Result<ExitCode> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(&cli)?;
            let (service, test) = trained_service(&cfg)?;
            let doc = ModelDocument::new(service.fw.clone(), Some(&cfg.model));
            doc.save(&cli.out.join("model.json"))?;
            let labels = mlp::predict_labels(&service.fw, &test.x)?;
            let hits = labels.iter().zip(&test.y).filter(|(&a, &b)| a == b).count();
            let accuracy = hits as f64 / test.n().max(1) as f64;
            println!("{{\"model\":\"model.json\",\"test_accuracy\":{accuracy}}}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Explain => {
            let cfg = load_config(&cli)?;
            let (service, test) = trained_service(&cfg)?;
            let mut explainer = cfg.explainer.clone();
            explainer.seed = derive_seed(cfg.master_seed, "cli/explain");
            let batch = explain::generate_batch(&service.fw, &test.x, service.mask(), &explainer)?;
            std::fs::create_dir_all(&cli.out)
                .map_err(|e| Error::io(cli.out.display().to_string(), e))?;
            explain::export_csv(&batch, &cli.out.join("cfs.csv"))?;
            let validity = explain::validity(&batch, &service.fw)?;
            let proximity = explain::proximity(&batch);
            println!("{{\"cfs\":\"cfs.csv\",\"validity\":{validity},\"proximity\":{proximity}}}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Watermark => {
            let cfg = load_config(&cli)?;
            let (service, test) = trained_service(&cfg)?;
            let m = cfg.bootstrap.size;
            let rows: Vec<usize> = (0..(m / 2).min(test.n())).collect();
            let attack_x = test.x.gather_rows(&rows);
            let session_seed = derive_seed(cfg.master_seed, "cli/watermark/session");
            let session = service.open_session(&attack_x, false, session_seed, "cli")?;
            std::fs::create_dir_all(&cli.out)
                .map_err(|e| Error::io(cli.out.display().to_string(), e))?;
            session.theta.save(&cli.out.join("theta.json"))?;
            watermark::write_trace(&session.trace, &cli.out.join("trace.jsonl"))?;
            let wm_batch = session.round1_watermarked_batch();
            explain::export_csv(&wm_batch, &cli.out.join("watermarked_cfs.csv"))?;
            println!(
                "{{\"theta\":\"theta.json\",\"trace\":\"trace.jsonl\",\"rows\":{},\"max_abs\":{}}}",
                session.theta.theta.rows(),
                session.theta.theta.max_abs()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack { kind } => {
            let cfg = load_config(&cli)?;
            let kind: AttackKind = (*kind).into();
            let (service, test) = trained_service(&cfg)?;
            let pool = bootstrap(&test, 1, cfg.bootstrap.size, cfg.master_seed)?;
            let subset_x = test.x.gather_rows(&pool.subsets[0]);
            let mut train_cfg = cfg.surrogate.clone();
            train_cfg.seed = derive_seed(cfg.master_seed, "cli/attack/train");
            let m = cfg.bootstrap.size;
            let transcript = match kind {
                AttackKind::Querying => {
                    extract::querying_attack(&service, &subset_x, m, &train_cfg)?
                }
                _ => {
                    let half: Vec<usize> = (0..m / 2).collect();
                    let half_x = subset_x.gather_rows(&half);
                    let session_seed = derive_seed(cfg.master_seed, "cli/attack/session");
                    let session = service.open_session(
                        &half_x,
                        kind == AttackKind::Dualcf,
                        session_seed,
                        "cli",
                    )?;
                    match kind {
                        AttackKind::Mrce => extract::mrce_attack(&session, m, &train_cfg)?,
                        _ => extract::dualcf_attack(&session, m, &train_cfg)?,
                    }
                }
            };
            write_json(&cli.out.join("transcript.json"), &transcript.summary())?;
            let doc = ModelDocument::new(transcript.surrogate.clone(), Some(&train_cfg));
            doc.save(&cli.out.join("surrogate.json"))?;
            let agreement = mlp::agreement(&transcript.surrogate, &service.fw, &test.x)?;
            println!(
                "{{\"transcript\":\"transcript.json\",\"surrogate\":\"surrogate.json\",\"agreement\":{agreement}}}"
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { wm, unwm, tau, alpha } => {
            let p_wm = read_probability_column(wm)?;
            let p_unwm = read_probability_column(unwm)?;
            let sample = PairedSample::new(p_wm, p_unwm)?;
            let result = paired_t_test(&sample, *tau, *alpha)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
            write_json(&cli.out.join("verification.json"), &result)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate => {
            let cfg = load_config(&cli)?;
            let report = harness::run_evaluation(&cfg)?;
            harness::emit_report(&report, &cfg, &cli.out)?;
            println!(
                "{{\"report\":\"report.json\",\"f1\":{},\"failures\":{}}}",
                report.f1,
                report.failures.len()
            );
            if report.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(2))
            }
        }
        Command::AblateLosses => {
            let cfg = load_config(&cli)?;
            let cells = harness::run_ablation_losses(&cfg)?;
            write_json(&cli.out.join("ablation_losses.json"), &cells)?;
            let mut csv =
                String::from("poison_form,validity_form,f1,validity_change_pct,proximity_change_pct\n");
            for c in &cells {
                csv.push_str(&format!(
                    "{:?},{:?},{:?},{:?},{:?}\n",
                    c.poison_form, c.validity_form, c.f1, c.validity_change_pct,
                    c.proximity_change_pct
                ));
            }
            std::fs::write(cli.out.join("ablation_losses.csv"), csv)
                .map_err(|e| Error::io(cli.out.display().to_string(), e))?;
            println!("{{\"cells\":{}}}", cells.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::AblateReg { lambdas } => {
            let cfg = load_config(&cli)?;
            let cells = harness::run_ablation_regularization(&cfg, lambdas)?;
            write_json(&cli.out.join("ablation_reg.json"), &cells)?;
            println!("{{\"cells\":{}}}", cells.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Robustness => {
            let cfg = load_config(&cli)?;
            let report = harness::run_robustness(&cfg)?;
            write_json(&cli.out.join("robustness.json"), &report)?;
            println!(
                "{{\"finetune_points\":{},\"prune_points\":{}}}",
                report.finetune.len(),
                report.prune.len()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
