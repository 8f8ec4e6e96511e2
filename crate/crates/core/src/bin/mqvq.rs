//! Command-line surface for the two-stage masked VQ pipeline.
//!
//! Exit codes: 0 success, 1 usage error (bad flag, unknown config key),
//! 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mqvq_core::config::RunConfig;
use mqvq_core::data::generate_synthetic;
use mqvq_core::image::{tensor_to_image, write_image};
use mqvq_core::train;
use mqvq_core::Error;

#[derive(Parser)]
#[command(
    name = "mqvq",
    about = "Masked vector quantization: train, reconstruct, sample, evaluate",
    version
)]
struct Cli {
    /// Flat key = value config file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset into the output directory
    GenData,
    /// Train the stage-1 masked VQ autoencoder
    TrainVae,
    /// Train the stage-2 code/position transformer on a frozen stage 1
    TrainAr,
    /// Push one image through mask -> quantize -> de-mask -> decode and
    /// write the reconstruction plus the importance heatmap
    Reconstruct {
        /// Input PGM/PPM image
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
    /// Sample images from trained checkpoints
    Sample {
        /// Class token for conditional models (-1 = unconditional)
        #[arg(long, value_name = "ID")]
        class_id: Option<i64>,
        #[arg(long, value_name = "K")]
        top_k: Option<usize>,
        #[arg(long, value_name = "P")]
        top_p: Option<f64>,
        #[arg(long, value_name = "T")]
        temperature: Option<f64>,
        /// Argmax decoding (excludes top-k/top-p)
        #[arg(long)]
        greedy: bool,
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Reconstruction MSE, codebook usage, and the codebook PCA export
    Eval,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
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

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::UnknownConfigKey { .. } | Error::InvalidConfigValue { .. } => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = RunConfig::from_sources(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::TrainVae => {
            let out = train::train_stage1::<f32>(&cfg)?;
            println!(
                "stage 1 done: {} steps, eval MSE {:.6}",
                out.steps_run, out.final_eval_mse
            );
            println!("checkpoint: {}", out.checkpoint.display());
            println!("metrics:    {}", out.metrics.display());
            Ok(())
        }
        Command::TrainAr => {
            let out = train::train_stage2::<f32>(&cfg)?;
            println!(
                "stage 2 done: {} steps, joint NLL {:.6}",
                out.steps_run, out.final_joint_nll
            );
            println!("checkpoint: {}", out.checkpoint.display());
            println!("metrics:    {}", out.metrics.display());
            Ok(())
        }
        Command::Reconstruct { input } => {
            let (recon, heatmap) = train::reconstruct_file::<f32>(&cfg, &input)?;
            println!("reconstruction: {}", recon.display());
            println!("importance map: {}", heatmap.display());
            Ok(())
        }
        Command::Sample {
            class_id,
            top_k,
            top_p,
            temperature,
            greedy,
            seed,
            count,
        } => {
            if let Some(v) = class_id {
                cfg.class_id = v;
            }
            if let Some(v) = top_k {
                cfg.top_k = v;
            }
            if let Some(v) = top_p {
                cfg.top_p = v;
            }
            if let Some(v) = temperature {
                cfg.temperature = v;
            }
            if greedy {
                cfg.greedy = true;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = count {
                cfg.count = v;
            }
            let paths = train::sample_to_files::<f32>(&cfg)?;
            for p in paths {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Eval => {
            let report = train::evaluate::<f32>(&cfg)?;
            println!("recon MSE:      {:.6}", report.mse);
            println!("codebook usage: {:.4}%", report.usage);
            println!("pca csv:        {}", report.pca_path.display());
            println!("metrics:        {}", report.metrics_path.display());
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig) -> Result<(), Error> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ds = generate_synthetic::<f32>(cfg.data_count, cfg.resolution, cfg.channels, cfg.seed);
    let ext = if cfg.channels == 1 { "pgm" } else { "ppm" };
    let mut labels = vec!["file,label".to_string()];
    for (i, img) in ds.images.iter().enumerate() {
        let name = format!("gen_{i:04}.{ext}");
        write_image(&cfg.out_dir.join(&name), &tensor_to_image(img)?)?;
        labels.push(format!("{name},{}", ds.labels.as_ref().unwrap()[i]));
    }
    std::fs::write(cfg.out_dir.join("labels.csv"), labels.join("\n"))?;
    println!(
        "wrote {} {}x{} images to {}",
        ds.images.len(),
        cfg.resolution,
        cfg.resolution,
        cfg.out_dir.display()
    );
    Ok(())
}
