//! `disn` — reproducible environment-disentanglement runs.
//!
//! Subcommands: `synth` (generate the synthetic benchmark), `train`, `eval`,
//! `gradcheck` (finite-difference verification suite), `report` (summarize a
//! run). Every command takes `--config`, repeatable `--set key=value`
//! overrides, `--out` and `--seed`; the resolved configuration is written
//! next to the artifacts it produced.
//!
//! Exit codes: 0 success, 1 validation/config error, 2 runtime/numeric
//! error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::RunConfig;
use disn::diffcore::gradcheck::run_suite;
use disn::error::{Error, Result};
use disn::eval::{
    build_mismatch_trials, det_curve, encode_dataset_codes, load_trials, lookup_from_rows,
    lookup_from_store, metrics_report, probe_disentanglement, score_trials, MetricsReport,
    OperatingPoint, ProbeReport, Trial,
};
use disn::rng::{stream_rng, Stream};
use disn::sampler::{synth_generate, Dataset};
use disn::trainer::{expect_model_config, fit, load_checkpoint, write_loss_csv, Precision, TrainerState};

#[derive(Parser)]
#[command(name = "disn", version, about = "Environment-disentangled speaker embedding runs")]
struct Cli {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration value, e.g. --set train.epochs=5
    /// (repeatable; values parse as JSON, falling back to strings).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory; relative paths in the config resolve against it.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Master seed feeding all named random streams.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic factor-world dataset with ground truth.
    Synth,
    /// Train the disentanglement framework on a dataset.
    Train,
    /// Score verification trials on raw embeddings and speaker codes.
    Eval,
    /// Run the finite-difference gradient verification suite at 64-bit.
    Gradcheck {
        /// Deliberately corrupt one gradient; the suite must then fail.
        #[arg(long)]
        inject_bug: bool,
    },
    /// Print a human-readable summary of a run's metrics and losses.
    Report,
}

/// Combined eval output: metrics on raw embeddings and on the disentangled
/// speaker codes, plus optional probe accuracies.
#[derive(Debug, Serialize, Deserialize)]
struct EvalOutput {
    n_trials: usize,
    raw: MetricsReport,
    disentangled: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    probes: Option<ProbeReport>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.set, cli.seed)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg, &cli.out),
        Command::Train => cmd_train(&cfg, &cli.out),
        Command::Eval => cmd_eval(&cfg, &cli.out),
        Command::Gradcheck { inject_bug } => cmd_gradcheck(&cfg, inject_bug),
        Command::Report => cmd_report(&cfg, &cli.out),
    }
}

fn ensure_dir(dir: &Path, create: bool) -> Result<()> {
    if dir.exists() {
        return Ok(());
    }
    if create {
        std::fs::create_dir_all(dir)?;
        Ok(())
    } else {
        Err(Error::Config(format!(
            "directory {} does not exist (paths.create_dirs is false)",
            dir.display()
        )))
    }
}

/// Thread cap for parallel trial scoring.
fn scoring_threads() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("DISN_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => n.min(available),
            _ => {
                log::warn!("ignoring invalid DISN_THREADS={v:?}");
                available
            }
        },
        Err(_) => available,
    }
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out, cfg.paths.create_dirs)?;
    let world = cfg.world.clone().with_seed(cfg.seed);
    let dataset = synth_generate(&world)?;
    let dir = cfg.resolve_path(out, &cfg.paths.dataset_dir);
    ensure_dir(&dir, cfg.paths.create_dirs)?;
    dataset.save(&dir)?;
    cfg.echo(out, "synth")?;
    println!(
        "wrote {} utterances ({} speakers x {} sessions x {} per session, dim {}) to {}",
        dataset.n_utterances(),
        world.n_speakers,
        world.sessions_per_speaker,
        world.utterances_per_session,
        world.embedding_dim,
        dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out, cfg.paths.create_dirs)?;
    let dataset_dir = cfg.resolve_path(out, &cfg.paths.dataset_dir);
    let dataset = Dataset::load(&dataset_dir)?;
    if dataset.dim() != cfg.model.input_dim {
        return Err(Error::Config(format!(
            "dataset embedding dimension {} does not match model.input_dim {}",
            dataset.dim(),
            cfg.model.input_dim
        )));
    }
    let n_speakers = dataset.speakers().len();
    let model_cfg = cfg.model.to_model_config(n_speakers);
    let checkpoint = cfg.resolve_path(out, &cfg.paths.checkpoint);

    let mut state = if cfg.train.resume && checkpoint.exists() {
        let state = load_checkpoint(&checkpoint)?;
        expect_model_config(&state, &model_cfg)?;
        if state.seed != cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {} but the run seed is {}",
                state.seed, cfg.seed
            )));
        }
        log::info!("resuming from {} at epoch {}", checkpoint.display(), state.epoch);
        state
    } else {
        TrainerState::<f32>::new(model_cfg, cfg.seed)?
    };

    let history = match cfg.train.precision {
        Precision::F32 => fit(&dataset, &cfg.train, &mut state, Some(&checkpoint))?,
        Precision::F64 => {
            // checkpoints are stored at f32 either way; the loop itself runs
            // at f64 when asked
            let mut wide = TrainerState::<f64> {
                model: state.model.cast::<f64>(),
                adam_main: state.adam_main.clone(),
                adam_es: state.adam_es.clone(),
                epoch: state.epoch,
                seed: state.seed,
                sampler_word_pos: state.sampler_word_pos,
            };
            fit(&dataset, &cfg.train, &mut wide, Some(&checkpoint))?
        }
    };
    let loss_csv = cfg.resolve_path(out, &cfg.paths.loss_csv);
    write_loss_csv(&history, &loss_csv)?;
    cfg.echo(out, "train")?;
    match history.last() {
        Some(last) => println!(
            "epoch {}: L_total {:.4} (spk {:.4}, recons {:.4}, env {:.4}, adv {:.4}, corr {:.4}) -> {}",
            last.epoch,
            last.l_total,
            last.l_spk,
            last.l_recons,
            last.l_env_env,
            last.l_env_spk,
            last.l_corr,
            checkpoint.display()
        ),
        None => println!("nothing to train: checkpoint already at epoch {}", state.epoch),
    }
    Ok(())
}

fn write_det_csv(points: &[OperatingPoint], path: &Path) -> Result<()> {
    let mut text = String::from("threshold,FAR,FRR\n");
    for p in points {
        text.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.frr));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out, cfg.paths.create_dirs)?;
    let dataset_dir = cfg.resolve_path(out, &cfg.paths.dataset_dir);
    let dataset = Dataset::load(&dataset_dir)?;
    let checkpoint = cfg.resolve_path(out, &cfg.paths.checkpoint);
    if !checkpoint.exists() {
        return Err(Error::Config(format!("checkpoint {} not found", checkpoint.display())));
    }
    let state = load_checkpoint(&checkpoint)?;
    if dataset.dim() != state.model.cfg.input_dim {
        return Err(Error::Config(format!(
            "dataset embedding dimension {} does not match the checkpoint's input_dim {}",
            dataset.dim(),
            state.model.cfg.input_dim
        )));
    }

    let trials: Vec<Trial> = match &cfg.paths.trials {
        Some(rel) => load_trials(&cfg.resolve_path(out, rel))?,
        None => {
            let mut rng = stream_rng(cfg.seed, Stream::Trials);
            build_mismatch_trials(&dataset.metadata, cfg.eval.n_trials, &mut rng)?
        }
    };
    let threads = scoring_threads();

    let raw_lookup = lookup_from_store(&dataset.embeddings);
    let raw_scores = score_trials(&raw_lookup, &trials, threads)?;
    let raw = metrics_report(&raw_scores, cfg.eval.p_target, cfg.eval.c_miss, cfg.eval.c_fa)?;

    let codes = encode_dataset_codes(&state.model, &dataset)?;
    let spk_lookup = lookup_from_rows(&dataset.metadata, &codes.spk)?;
    let spk_scores = score_trials(&spk_lookup, &trials, threads)?;
    let disentangled = metrics_report(&spk_scores, cfg.eval.p_target, cfg.eval.c_miss, cfg.eval.c_fa)?;

    let probes = if cfg.eval.probes {
        let mut rng = stream_rng(cfg.seed, Stream::Probe);
        Some(probe_disentanglement(&codes, &dataset.metadata, &cfg.eval.probe, &mut rng)?)
    } else {
        None
    };

    if cfg.eval.det_curve {
        write_det_csv(&det_curve(&raw_scores)?, &out.join("det_raw.csv"))?;
        write_det_csv(&det_curve(&spk_scores)?, &out.join("det_disentangled.csv"))?;
    }

    let output = EvalOutput {
        n_trials: trials.len(),
        raw,
        disentangled,
        probes,
    };
    let metrics_path = cfg.resolve_path(out, &cfg.paths.metrics);
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&output)?)?;
    cfg.echo(out, "eval")?;
    println!(
        "{} trials: raw EER {:.4} / minDCF {:.4}; disentangled EER {:.4} / minDCF {:.4} -> {}",
        output.n_trials,
        output.raw.eer,
        output.raw.min_dcf,
        output.disentangled.eer,
        output.disentangled.min_dcf,
        metrics_path.display()
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, inject_bug: bool) -> Result<()> {
    let results = run_suite(cfg.seed, inject_bug)?;
    let name_width = results.iter().map(|r| r.name.len()).max().unwrap_or(10);
    let mut all_pass = true;
    for r in &results {
        println!(
            "{:<width$}  worst rel err {:>12.3e}  (threshold {:>8.0e})  {}",
            r.name,
            r.max_rel_err,
            r.threshold,
            if r.pass { "PASS" } else { "FAIL" },
            width = name_width
        );
        all_pass &= r.pass;
    }
    if all_pass {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(Error::Numeric("gradient verification failed".into()))
    }
}

fn cmd_report(cfg: &RunConfig, out: &Path) -> Result<()> {
    let metrics_path = cfg.resolve_path(out, &cfg.paths.metrics);
    let text = std::fs::read_to_string(&metrics_path)?;
    let output: EvalOutput = serde_json::from_str(&text)
        .map_err(|e| Error::format(metrics_path.display().to_string(), e.to_string()))?;

    println!("verification metrics ({} trials)", output.n_trials);
    let row = |name: &str, m: &MetricsReport| {
        println!(
            "  {:<13} EER {:6.2}%  (thr {:+.4})   minDCF {:.4}  (thr {:+.4})   [{} target / {} nontarget]",
            name,
            m.eer * 100.0,
            m.eer_threshold,
            m.min_dcf,
            m.dcf_threshold,
            m.n_target,
            m.n_nontarget
        );
    };
    row("raw", &output.raw);
    row("disentangled", &output.disentangled);
    if output.raw.eer > 0.0 {
        let rel = (output.raw.eer - output.disentangled.eer) / output.raw.eer * 100.0;
        println!("  EER relative improvement over raw: {rel:+.1}%");
    }
    if let Some(p) = &output.probes {
        println!("probes (held out {} of {} utterances)", p.n_test, p.n_test + p.n_train);
        println!(
            "  speaker identity: {:5.1}% from speaker codes, {:5.1}% from environment codes",
            p.speaker_from_spk * 100.0,
            p.speaker_from_env * 100.0
        );
        println!(
            "  session identity: {:5.1}% from speaker codes, {:5.1}% from environment codes",
            p.session_from_spk * 100.0,
            p.session_from_env * 100.0
        );
        println!("  residual speaker/environment correlation: {:.4}", p.mapc);
    }

    let loss_csv = cfg.resolve_path(out, &cfg.paths.loss_csv);
    if loss_csv.exists() {
        let history = disn::trainer::read_loss_csv(&loss_csv)?;
        if let (Some(first), Some(last)) = (history.first(), history.last()) {
            println!("training ({} epochs, lr {} -> {})", history.len(), first.lr, last.lr);
            println!(
                "  L_total {:.4} -> {:.4}   L_recons {:.4} -> {:.4}   L_spk {:.4} -> {:.4}",
                first.l_total, last.l_total, first.l_recons, last.l_recons, first.l_spk, last.l_spk
            );
        }
    }
    Ok(())
}
