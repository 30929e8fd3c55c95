use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use drivecot_core::config::{BackendModeSetting, StrategySetting, TaskSetting};
use drivecot_core::run::{append_run_log, run_config, RecordPolicy};
use drivecot_core::scene::{load_camera_dir, write_png};
use drivecot_core::{merge_panorama, PromptStrategy, RunConfig, RunOutcome, RunStatus};

#[derive(Parser)]
#[command(name = "drivecot", version, about = "Prompting and evaluation harness for multimodal driving agents")]
struct Cli {
    /// Log progress to stderr (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge six camera images into front/back panoramas plus seams.json.
    Merge { cameras_dir: PathBuf, out_dir: PathBuf },
    /// Run the configured task and write reports.
    Run(RunArgs),
    /// Run against the live backend, saving every exchange to the transcript file.
    Record {
        #[command(flatten)]
        run: RunArgs,
        /// Replace transcript entries that already exist.
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    task: Option<TaskSetting>,
    /// One strategy, or a comma-separated list for ablation.
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<PromptStrategy>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend_mode: Option<Mode>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Live,
    Replay,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(task) = self.task {
            config.task.kind = task;
        }
        match self.strategy.as_slice() {
            [] => {}
            [one] => config.task.strategy = StrategySetting::One(*one),
            many => config.task.strategy = StrategySetting::Many(many.to_vec()),
        }
        if let Some(manifest) = &self.manifest {
            config.paths.manifest = manifest.clone();
        }
        if let Some(mode) = self.backend_mode {
            config.backend.mode = match mode {
                Mode::Live => BackendModeSetting::Live,
                Mode::Replay => BackendModeSetting::Replay,
            };
        }
        if let Some(out) = &self.out {
            config.paths.out_dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn merge(cameras_dir: &Path, out_dir: &Path) -> Result<()> {
    let cameras = load_camera_dir(cameras_dir)?;
    let pair = merge_panorama(&cameras)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_png(&out_dir.join("front.png"), &pair.front_panorama)?;
    write_png(&out_dir.join("back.png"), &pair.back_panorama)?;
    let seams = serde_json::to_string(&pair.seam_offsets)?;
    fs::write(out_dir.join("seams.json"), seams + "\n")?;
    println!(
        "front {}x{}, back {}x{} -> {}",
        pair.front_panorama.width(),
        pair.front_panorama.height(),
        pair.back_panorama.width(),
        pair.back_panorama.height(),
        out_dir.display()
    );
    Ok(())
}

fn summarize(outcome: &RunOutcome) -> ExitCode {
    for row in &outcome.report.rows {
        let acc = row.accuracy.map_or("-".to_string(), |p| p.to_string());
        let flags = if row.flags.is_empty() { String::new() } else { format!(" [{}]", row.flags.join("; ")) };
        println!("{:<16} {:>4}/{:<4} {acc}{flags}", row.group, row.correct, row.total);
    }
    if let Some(overall) = outcome.report.overall {
        println!("overall {overall}");
    }
    for w in &outcome.report.warnings {
        eprintln!("warning: {w}");
    }
    for f in &outcome.files {
        log::info!("wrote {}", f.display());
    }
    match outcome.status {
        RunStatus::Complete => ExitCode::SUCCESS,
        RunStatus::Partial => {
            eprintln!("run is partial: some samples were unscored or failed");
            ExitCode::from(2)
        }
    }
}

fn run(args: &RunArgs, record: Option<bool>) -> Result<ExitCode> {
    let config = args.load()?;
    let policy = match record {
        Some(overwrite) => {
            let problem = if config.backend.mode != BackendModeSetting::Live {
                Some("record needs backend mode live")
            } else if config.paths.transcripts.is_none() {
                Some("record needs paths.transcripts")
            } else {
                None
            };
            if let Some(problem) = problem {
                append_run_log(&config.paths.out_dir, &format!("error: {problem}"));
                bail!(problem);
            }
            if overwrite {
                RecordPolicy::Overwrite
            } else {
                RecordPolicy::Refuse
            }
        }
        None => RecordPolicy::Overwrite,
    };
    let outcome = run_config(&config, policy)?;
    Ok(summarize(&outcome))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Merge { cameras_dir, out_dir } => merge(cameras_dir, out_dir).map(|()| ExitCode::SUCCESS),
        Command::Run(args) => run(args, None),
        Command::Record { run: args, overwrite } => run(args, Some(*overwrite)),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
