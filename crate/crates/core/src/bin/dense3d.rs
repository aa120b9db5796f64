use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dense3d::config::KeyValues;
use dense3d::data::{generate_phantom, normalize, read_labels, read_volume, write_labels, write_volume, SynthConfig};
use dense3d::infer::{predict_volume, rf_probe};
use dense3d::metrics::{evaluate, format_report};
use dense3d::train::{run_training, OutputDir, TrainConfig, TrainState};
use dense3d::{Checkpoint, Error, Result};

#[derive(Parser)]
#[command(version, about = "Hierarchical dense 3D CNN for tumor segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom volumes from a key=value config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every .mvol file in a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment one volume.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Receptive-field perturbation probe; exits non-zero on failure.
    RfCheck {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        voxels: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dice report. `--pred` and `--truth` are files or directories of
    /// files paired by name.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Synth { config, out } => {
            let cfg = SynthConfig::from_key_values(&KeyValues::read(&config)?)?;
            create_dir(&out)?;
            for (i, spec) in cfg.specs().iter().enumerate() {
                let path = out.join(format!("phantom_{i:03}.mvol"));
                write_volume(&path, &generate_phantom(spec)?)?;
                println!("{}", path.display());
            }
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = TrainConfig::read(&config)?;
            let files = mvol_files(&data)?;
            let volumes = files
                .iter()
                .map(|p| normalize(&read_volume(p)?))
                .collect::<Result<Vec<_>>>()?;
            let mut state = match resume {
                Some(p) => TrainState::from_checkpoint(Checkpoint::read(&p)?, &cfg)?,
                None => TrainState::new(&cfg)?,
            };
            let refs: Vec<_> = volumes.iter().collect();
            let dir = OutputDir { dir: out };
            run_training(&refs, &cfg, &mut state, Some(&dir), |row| println!("{row}"))?;
            println!("wrote {}", dir.final_path().display());
        }
        Command::Predict { checkpoint, input, out } => {
            let model = Checkpoint::read(&checkpoint)?.model;
            let volume = normalize(&read_volume(&input)?)?;
            write_labels(&out, &predict_volume(&volume, &model)?)?;
        }
        Command::RfCheck {
            checkpoint,
            voxels,
            trials,
            seed,
        } => {
            let model = Checkpoint::read(&checkpoint)?.model;
            let report = rf_probe(&model, voxels, trials, seed)?;
            println!("{report}");
            return Ok(report.passed());
        }
        Command::Evaluate { pred, truth, report } => {
            let pairs = if pred.is_dir() {
                mvol_files(&pred)?
                    .into_iter()
                    .map(|p| {
                        let t = truth.join(p.file_name().unwrap());
                        (p, t)
                    })
                    .collect()
            } else {
                vec![(pred, truth)]
            };
            let mut rows = Vec::new();
            for (p, t) in pairs {
                let id = p.file_stem().unwrap().to_string_lossy().into_owned();
                rows.push((id, evaluate(&read_labels(&p)?, &read_labels(&t)?)?));
            }
            let text = format_report(&rows);
            std::fs::write(&report, &text).map_err(|e| Error::io(&report, e))?;
            print!("{text}");
        }
    }
    Ok(true)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `.mvol` files of a directory in name order.
fn mvol_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mvol"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no .mvol files in {}", dir.display())));
    }
    Ok(files)
}
