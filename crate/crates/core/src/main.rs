use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use motionvod::checkpoint::Checkpoint;
use motionvod::config::PipelineConfig;
use motionvod::datagen::{read_dataset, write_dataset};
use motionvod::model::Variant;
use motionvod::pipeline::{ablate, evaluate_checkpoint, plot_file, split, write_json};
use motionvod::train::{prepare_all, train, PreparedVideo, TrainOptions};
use motionvod::Result;

#[derive(Parser)]
#[command(name = "motionvod", about = "Synthetic-video object detection: data, training, evaluation, ablation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic video dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured variant; checkpoints and logs go to `out_dir`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a detection dump and report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seq_nms: bool,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Output directory; defaults to `eval` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate several variants under one seed.
    Ablate {
        #[arg(long, default_value = "a,b,c,d,e,f")]
        variants: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<out_dir>/ablation`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bar chart of a report or ablation table.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_split(dir: &Path, cfg: &PipelineConfig, which: Split) -> Result<Vec<PreparedVideo>> {
    let videos = prepare_all(&read_dataset(dir)?);
    let (tr, val) = split(&videos, cfg.train.val_fraction);
    Ok(match which {
        Split::Train => tr.to_vec(),
        Split::Val => val.to_vec(),
        Split::All => videos,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let samples = motionvod::datagen::generate_dataset(&cfg.data, cfg.num_videos)?;
            let m = write_dataset(&samples, &out)?;
            println!("wrote {} videos, {} frame files to {}", m.videos.len(), m.frame_files, out.display());
        }
        Cmd::Train { config, resume } => {
            let cfg = PipelineConfig::load(&config)?;
            let videos = prepare_all(&read_dataset(&cfg.data_dir)?);
            let (tr, val) = split(&videos, cfg.train.val_fraction);
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let opts = TrainOptions { out_dir: Some(cfg.out_dir.clone()), resume, verbose: true, ..Default::default() };
            let out = train(&cfg, tr, val, opts)?;
            println!("trained {} steps; checkpoint at {}", out.checkpoint.iteration, cfg.out_dir.join("checkpoint.bin").display());
        }
        Cmd::Eval { checkpoint, data, seq_nms, split, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let videos = load_split(&data, &ck.config, split)?;
            let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
            let report = evaluate_checkpoint(&ck, &videos, seq_nms, &out)?;
            print!("{}", report.to_text());
            println!("report written to {}", out.join("report.json").display());
        }
        Cmd::Ablate { variants, config, out } => {
            let cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            let list = Variant::parse_list(&variants)?;
            let videos = prepare_all(&read_dataset(&cfg.data_dir)?);
            let (tr, val) = split(&videos, cfg.train.val_fraction);
            let out = out.unwrap_or_else(|| cfg.out_dir.join("ablation"));
            let table = ablate(&cfg, &list, tr, val, Some(&out), true);
            write_json(&out.join("ablation.json"), &table)?;
            let md = table.to_markdown();
            let p = out.join("ablation.md");
            std::fs::write(&p, &md).map_err(|e| motionvod::Error::io(&p, e))?;
            print!("{md}");
        }
        Cmd::Plot { report, out } => {
            plot_file(&report, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
