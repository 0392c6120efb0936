//! Command-line entry point: scenario runs, run-directory comparison,
//! standalone ATE evaluation, and vocabulary build/inspect.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coslam::eval::{self, FrameLabel, DEFAULT_MAX_DT};
use coslam::placerec::VocabularyTree;
use coslam::runner;
use coslam::scenario::{RunMode, Scenario};
use coslam::worldsim;

#[derive(Parser)]
#[command(name = "coslam", about = "Collaborative monocular SLAM on synthetic worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (a TOML file or a preset name) and write all artifacts.
    Run {
        /// Scenario TOML path or preset name (single-zone, overlap-pair, four-zone).
        scenario: String,
        /// Output directory for trajectories, snapshots and reports.
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the run mode.
        #[arg(long)]
        mode: Option<RunMode>,
        /// Override the repetition count (mean report over repetitions).
        #[arg(long)]
        repeat: Option<u32>,
    },
    /// Compare two run directories produced with the same seeds.
    Compare { dir_a: PathBuf, dir_b: PathBuf },
    /// Absolute trajectory error between an estimated and a ground-truth CSV.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Association tolerance in seconds.
        #[arg(long, default_value_t = DEFAULT_MAX_DT)]
        max_dt: f64,
    },
    /// Vocabulary utilities.
    Vocab {
        #[command(subcommand)]
        command: VocabCommand,
    },
}

#[derive(Subcommand)]
enum VocabCommand {
    /// Build a vocabulary from the landmark descriptors of a scenario's world.
    Build {
        /// Scenario TOML path or preset name providing the world.
        scenario: String,
        /// Output file for the binary vocabulary.
        #[arg(long)]
        out: PathBuf,
        /// Branching factor; defaults to the scenario's algo setting.
        #[arg(long)]
        branching: Option<u32>,
        /// Tree depth; defaults to the scenario's algo setting.
        #[arg(long)]
        levels: Option<u32>,
        /// Build seed; defaults to the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the shape of a stored vocabulary.
    Inspect { file: PathBuf },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run { scenario, out, seed, mode, repeat } => {
            let mut sc = Scenario::load(&scenario).map_err(|e| e.to_string())?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            if let Some(m) = mode {
                sc.mode = m;
            }
            if let Some(r) = repeat {
                sc.repeat = r;
            }
            sc.validate().map_err(|e| e.to_string())?;
            let report = runner::run(&sc, &out).map_err(|e| e.to_string())?;
            print!("{}", runner::render_table(&report));
            Ok(())
        }
        Command::Compare { dir_a, dir_b } => {
            let report = runner::compare(&dir_a, &dir_b).map_err(|e| e.to_string())?;
            print!("{}", runner::render_comparison(&report));
            Ok(())
        }
        Command::Eval { est, gt, max_dt } => {
            let est_text = fs::read_to_string(&est)
                .map_err(|e| format!("reading {}: {e}", est.display()))?;
            let gt_text =
                fs::read_to_string(&gt).map_err(|e| format!("reading {}: {e}", gt.display()))?;
            let est_traj = eval::trajectory_from_csv(&est_text, FrameLabel::MapLocal)
                .map_err(|e| format!("{}: {e}", est.display()))?;
            let gt_traj = eval::trajectory_from_csv(&gt_text, FrameLabel::World)
                .map_err(|e| format!("{}: {e}", gt.display()))?;
            let report = eval::evaluate(&est_traj, &gt_traj, max_dt).map_err(|e| e.to_string())?;
            println!("{}", report.to_json());
            Ok(())
        }
        Command::Vocab { command } => match command {
            VocabCommand::Build { scenario, out, branching, levels, seed } => {
                let sc = Scenario::load(&scenario).map_err(|e| e.to_string())?;
                let world = worldsim::generate_world(sc.seed, &sc.zones);
                let training: Vec<_> = world.landmarks.iter().map(|l| l.descriptor).collect();
                let vocab = VocabularyTree::build(
                    &training,
                    branching.unwrap_or(sc.algo.vocab_branching),
                    levels.unwrap_or(sc.algo.vocab_levels),
                    seed.unwrap_or(sc.seed),
                )
                .map_err(|e| e.to_string())?;
                let mut file = fs::File::create(&out)
                    .map_err(|e| format!("creating {}: {e}", out.display()))?;
                vocab
                    .write_to(&mut file)
                    .map_err(|e| format!("writing {}: {e}", out.display()))?;
                println!(
                    "vocabulary: branching {} levels {} words {} -> {}",
                    vocab.branching(),
                    vocab.levels(),
                    vocab.word_count(),
                    out.display()
                );
                Ok(())
            }
            VocabCommand::Inspect { file } => {
                let mut f = fs::File::open(&file)
                    .map_err(|e| format!("opening {}: {e}", file.display()))?;
                let vocab = VocabularyTree::read_from(&mut f)
                    .map_err(|e| format!("{}: {e}", file.display()))?;
                println!(
                    "vocabulary: branching {} levels {} words {}",
                    vocab.branching(),
                    vocab.levels(),
                    vocab.word_count()
                );
                Ok(())
            }
        },
    }
}
