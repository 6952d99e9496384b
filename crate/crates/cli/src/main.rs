//! `elicitflow` command-line driver.
//!
//! Layout under the output directory:
//!
//! ```text
//! <out>/<study>/expert.json
//! <out>/<study>/<seed>/{trajectory.csv, result.json, checkpoint.bin}
//! <out>/<study>/{slopes,weights,comparison,sensitivity}.csv
//! <out>/<study>/averaged_prior.csv
//! <out>/<study>/manifest_<command>.json
//! ```

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use elicitflow::diagnostics::{
    average_prior_sample, averaging_weights, comparison_table, default_grids, sensitivity_analysis,
    slope_report, write_rows, SLOPE_WINDOW,
};
use elicitflow::oracle::{simulate_expert, ExpertData};
use elicitflow::study::{parse_seeds, Manifest, StudyConfig, StudyId};
use elicitflow::trainer::{run_replications, stream_rng, ResultSummary, TrainingTrajectory, STREAM_EVAL};
use elicitflow::{Error, JointPriorFlow, Result};

#[derive(Parser, Debug)]
#[command(name = "elicitflow", version, about = "Learn joint priors from elicited statistics")]
struct Cli {
    /// Study configuration (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in study preset, used when no --config is given.
    #[arg(long, global = true)]
    preset: Option<StudyId>,
    /// Desk-scale overrides (smaller flow, batch and epoch counts, 5 seeds).
    #[arg(long, global = true)]
    reduced: bool,
    /// Single seed.
    #[arg(long, global = true, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seed list: `7`, `1,4,9` or `1..30`.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Output root (defaults to the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the number of training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate expert statistics from the oracle prior.
    Expert,
    /// Train one flow per seed against expert.json.
    Train {
        /// Expert file (default <out>/<study>/expert.json, simulated if missing).
        #[arg(long)]
        expert: Option<PathBuf>,
    },
    /// Convergence slopes, averaging weights, comparison table and mixture samples.
    Evaluate {
        /// Averaging scale.
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Draws from the averaged prior.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// One-at-a-time sweep over the oracle hyperparameters.
    Sensitivity {
        /// Oracle draws per grid point.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Print the resolved configuration as TOML.
    Config,
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    Diverged,
}

fn load_config(cli: &Cli) -> Result<StudyConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)?;
            if path.extension().is_some_and(|e| e == "json") {
                let cfg: StudyConfig = serde_json::from_str(&text)?;
                cfg.validate()?;
                cfg
            } else {
                StudyConfig::from_toml(&text)?
            }
        }
        (None, Some(id)) => StudyConfig::preset(id),
        (None, None) => return Err(Error::Config("pass --preset M1..M4 or --config FILE".into())),
    };
    if cli.reduced {
        cfg = cfg.reduced();
    }
    if let Some(e) = cli.epochs {
        cfg.train.epochs = e;
        cfg.overrides.push(format!("epochs={e}"));
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    } else if let Some(list) = &cli.seeds {
        cfg.seeds = parse_seeds(list)?;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn study_dir(cfg: &StudyConfig) -> PathBuf {
    cfg.output_dir.join(cfg.study.to_string())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_manifest(cfg: &StudyConfig, command: &str, seeds: Vec<u64>, warnings: Vec<String>) -> Result<()> {
    let mut m = Manifest::new(command, cfg, seeds);
    m.warnings = warnings;
    write_json(&study_dir(cfg).join(format!("manifest_{command}.json")), &m)
}

fn expert_for(cfg: &StudyConfig, seed: u64) -> Result<ExpertData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = simulate_expert(&cfg.prior, &cfg.model, &cfg.plan, cfg.expert_samples, &mut rng)?;
    e.provenance.seed = Some(seed);
    Ok(e)
}

fn cmd_expert(cfg: &StudyConfig) -> Result<Status> {
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let dir = study_dir(cfg);
    fs::create_dir_all(&dir)?;
    let e = expert_for(cfg, seed)?;
    fs::write(dir.join("expert.json"), e.to_json()?)?;
    write_manifest(cfg, "expert", vec![seed], Vec::new())?;
    println!("wrote {} statistics to {}", e.statistics.len(), dir.join("expert.json").display());
    Ok(Status::Ok)
}

fn cmd_train(cfg: &StudyConfig, expert: Option<&Path>) -> Result<Status> {
    let dir = study_dir(cfg);
    fs::create_dir_all(&dir)?;
    let mut warnings = Vec::new();
    let expert_path = expert.map_or_else(|| dir.join("expert.json"), Path::to_path_buf);
    let expert = if expert_path.exists() {
        ExpertData::from_json(&fs::read_to_string(&expert_path)?)?
    } else if expert.is_none() {
        let e = expert_for(cfg, 0)?;
        fs::write(&expert_path, e.to_json()?)?;
        warnings.push(format!("{} missing; simulated with seed 0", expert_path.display()));
        e
    } else {
        return Err(Error::Config(format!("expert file {} not found", expert_path.display())));
    };
    elicitflow::trainer::check_expert_matches(&expert, &cfg.plan, &cfg.model)?;
    let batch = run_replications(&cfg.flow, &cfg.model, &cfg.plan, &expert, &cfg.train, &cfg.seeds);
    warnings.extend(batch.warnings.iter().cloned());
    for r in &batch.results {
        let run = dir.join(r.seed.to_string());
        fs::create_dir_all(&run)?;
        r.trajectory.write_csv(BufWriter::new(File::create(run.join("trajectory.csv"))?))?;
        r.flow.save(&run.join("checkpoint.bin"))?;
        write_json(&run.join("result.json"), &r.summary(PathBuf::from("checkpoint.bin")))?;
        println!("seed {}: final loss {:.5}", r.seed, r.final_loss);
    }
    let mut diverged = false;
    for (seed, e) in &batch.failures {
        diverged |= matches!(e, Error::Divergence { .. });
        eprintln!("seed {seed}: {e}");
    }
    write_manifest(cfg, "train", cfg.seeds.clone(), warnings)?;
    if diverged {
        return Ok(Status::Diverged);
    }
    if let Some((_, e)) = batch.failures.into_iter().next() {
        return Err(e);
    }
    Ok(Status::Ok)
}

struct LoadedRun {
    summary: ResultSummary,
    losses: Vec<f64>,
    flow: JointPriorFlow,
}

fn load_run(run: &Path) -> Result<LoadedRun> {
    let summary: ResultSummary = serde_json::from_str(&fs::read_to_string(run.join("result.json"))?)?;
    let traj = TrainingTrajectory::read_csv(File::open(run.join("trajectory.csv"))?)?;
    let flow = JointPriorFlow::load(&run.join(&summary.checkpoint))?;
    Ok(LoadedRun {
        losses: traj.losses(),
        summary,
        flow,
    })
}

fn cmd_evaluate(cfg: &StudyConfig, gamma: f64, samples: usize) -> Result<Status> {
    let dir = study_dir(cfg);
    let expert = ExpertData::from_json(&fs::read_to_string(dir.join("expert.json"))?)?;
    let mut warnings = Vec::new();
    let mut entries: Vec<(u64, PathBuf)> = Vec::new();
    if dir.is_dir() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let seed = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<u64>().ok());
            if let (Some(seed), true) = (seed, path.is_dir()) {
                entries.push((seed, path));
            }
        }
    }
    entries.sort();
    let mut runs = Vec::new();
    for (seed, path) in entries {
        match load_run(&path) {
            Ok(r) => runs.push(r),
            Err(e) => {
                let msg = format!("skipped seed {seed}: {e}");
                log::warn!("{msg}");
                eprintln!("{msg}");
                warnings.push(msg);
            }
        }
    }
    if runs.is_empty() {
        return Err(Error::Config(format!("no completed runs under {}", dir.display())));
    }
    let seeds: Vec<u64> = runs.iter().map(|r| r.summary.seed).collect();
    let shortest = runs.iter().map(|r| r.losses.len()).min().unwrap_or(0);
    let window = SLOPE_WINDOW.min(shortest);
    if window < SLOPE_WINDOW {
        warnings.push(format!("trajectories shorter than {SLOPE_WINDOW}; slope window {window}"));
    }
    let slopes = if window >= 2 {
        let series: Vec<(u64, Vec<f64>)> = runs.iter().map(|r| (r.summary.seed, r.losses.clone())).collect();
        Some(slope_report(&series, window)?)
    } else {
        warnings.push("trajectories too short for a slope".into());
        None
    };
    let losses: Vec<f64> = runs.iter().map(|r| r.summary.final_loss).collect();
    let weights = averaging_weights(&losses, gamma)?;
    let stats: Vec<_> = runs.iter().map(|r| (r.summary.seed, &r.summary.statistics)).collect();
    let comparison = comparison_table(&stats, &expert)?;

    if let Some(s) = &slopes {
        s.write_csv(File::create(dir.join("slopes.csv"))?)?;
    }
    write_rows(File::create(dir.join("weights.csv"))?, &weights.rows(&seeds, &losses))?;
    write_rows(File::create(dir.join("comparison.csv"))?, &comparison)?;

    let mut rng = stream_rng(seeds[0], STREAM_EVAL);
    let names = runs[0].summary.param_names.clone();
    let flows = runs.into_iter().map(|r| r.flow).collect();
    let theta = average_prior_sample(flows, &weights, samples, &mut rng)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("averaged_prior.csv"))?));
    w.write_record(&names)?;
    for row in theta.data().chunks(names.len().max(1)) {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush()?;
    write_manifest(cfg, "evaluate", seeds.clone(), warnings)?;
    println!("evaluated {} runs in {}", seeds.len(), dir.display());
    Ok(Status::Ok)
}

fn cmd_sensitivity(cfg: &StudyConfig, samples: usize) -> Result<Status> {
    let dir = study_dir(cfg);
    fs::create_dir_all(&dir)?;
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let mut rng = stream_rng(seed, STREAM_EVAL);
    let grids = default_grids(&cfg.prior);
    let (rows, warnings) = sensitivity_analysis(&cfg.prior, &cfg.model, &cfg.plan, &grids, samples, &mut rng)?;
    write_rows(File::create(dir.join("sensitivity.csv"))?, &rows)?;
    write_manifest(cfg, "sensitivity", vec![seed], warnings)?;
    println!("wrote {} rows to {}", rows.len(), dir.join("sensitivity.csv").display());
    Ok(Status::Ok)
}

fn run(cli: &Cli) -> Result<Status> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Expert => cmd_expert(&cfg),
        Command::Train { expert } => cmd_train(&cfg, expert.as_deref()),
        Command::Evaluate { gamma, samples } => cmd_evaluate(&cfg, *gamma, *samples),
        Command::Sensitivity { samples } => cmd_sensitivity(&cfg, *samples),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(Status::Ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Diverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Divergence { .. }) { 2 } else { 1 })
        }
    }
}
