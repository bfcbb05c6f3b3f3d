use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stagan::error::Error;
use stagan::synthdata::{generate_clips, write_dataset, DatasetManifest};
use stagan::trainkit::{
    evaluate_split, load_checkpoint, load_input_clip, load_networks_as, synthesize, train, Ablation, TrainConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "stagan", version, about = "Exocentric-to-egocentric video synthesis")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON training configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Ablation setting, A to F.
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    #[arg(long, global = true)]
    image_size: Option<usize>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training clips.
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long, default_value_t = 2)]
        test_clips: usize,
        /// Frames per clip; defaults to the configured clip length.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train on a dataset and write checkpoints.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Checkpoint directory; the final state goes to `<out>/final`.
        #[arg(long, default_value = "checkpoints")]
        out: PathBuf,
        /// JSON-lines loss log; defaults to `<out>/train_log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Synthesize the ego frames of one clip directory (with `exo/` and `sem/`).
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the four attention maps of every frame.
        #[arg(long)]
        attention: bool,
    },
}

fn base_config(common: &Common) -> Result<TrainConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::desk(),
    };
    apply_overrides(&mut cfg, common);
    Ok(cfg)
}

fn apply_overrides(cfg: &mut TrainConfig, common: &Common) {
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.scene.seed = s;
    }
    if let Some(a) = common.ablation {
        cfg.ablation = a;
    }
    if let Some(size) = common.image_size {
        cfg.set_image_size(size);
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let common = &cli.common;
    match cli.command {
        Command::GenData { out, clips, test_clips, frames } => {
            let cfg = base_config(common)?;
            let mut scene = cfg.scene;
            scene.image_size = cfg.image_size();
            scene.clip_length = frames.unwrap_or(cfg.clip_length);
            scene.validate()?;
            let first = scene.seed.wrapping_mul(100_000);
            let train_clips = generate_clips(&scene, first, clips)?;
            let test = generate_clips(&scene, first + clips as u64, test_clips)?;
            for (split, samples) in [(&cfg.train_split, &train_clips), (&cfg.test_split, &test)] {
                if !samples.is_empty() {
                    write_dataset(samples, &DatasetManifest::describe(samples, split, &scene), &out)?;
                }
            }
            println!("wrote {clips} train and {test_clips} test clips to {}", out.display());
        }
        Command::Train { data, steps, batch_size, out, log, checkpoint_every } => {
            let mut cfg = base_config(common)?;
            if data.is_some() {
                cfg.data_root = data;
            }
            cfg.steps = steps.or(cfg.steps);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.checkpoint_every = checkpoint_every.unwrap_or(cfg.checkpoint_every);
            cfg.log_path = Some(log.unwrap_or_else(|| out.join("train_log.jsonl")));
            cfg.checkpoint_dir = Some(out.clone());
            let outcome = train(cfg)?;
            let last = outcome.reports.last().map_or(f64::NAN, |r| r.total);
            println!(
                "trained {} steps, final generator loss {last:.4}, checkpoint {}",
                outcome.state.step,
                out.join("final").display()
            );
        }
        Command::Eval { checkpoint, data, split, json } => {
            let state = load_checkpoint(&checkpoint)?;
            let mut cfg = state.config.clone();
            apply_overrides(&mut cfg, common);
            let nets = match cfg.ablation == state.config.ablation && cfg.image_size() == state.config.image_size() {
                true => state.nets,
                false => load_networks_as(&checkpoint, &cfg)?,
            };
            let report = evaluate_split(&nets, cfg.ablation, &data, &split, &cfg.train_split, cfg.seed)?;
            print!("{}", report.table(&format!("STA-GAN/{}", cfg.ablation)));
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            match json {
                Some(p) => std::fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })?,
                None => println!("{text}"),
            }
        }
        Command::Synth { checkpoint, input, out, attention } => {
            let state = load_checkpoint(&checkpoint)?;
            let mut cfg = state.config.clone();
            apply_overrides(&mut cfg, common);
            let nets = match cfg.ablation == state.config.ablation && cfg.image_size() == state.config.image_size() {
                true => state.nets,
                false => load_networks_as(&checkpoint, &cfg)?,
            };
            let (exo, sem) = load_input_clip(&input)?;
            let files = synthesize(&nets, cfg.ablation, &exo, &sem, &out, attention)?;
            println!("wrote {} frames to {}", files.frames.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
