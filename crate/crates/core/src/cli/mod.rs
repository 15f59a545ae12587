//! Command-line frontend.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::data::{load_dataset, normalize_samplewise, write_pgm, ImageDataset, OcclusionSpec};
use crate::error::SpnError;
use crate::graph::{check_validity, compile, parse_structure, ExecutionPlan};
use crate::inference::batch_log_likelihood;
use crate::leaves::EvidenceMask;
use crate::parallel::{set_threads, Exec};
use crate::pipeline::{classify_dataset, init_discriminative, init_generative, inpaint_dataset};
use crate::training::{train_discriminative, train_generative, Progress, TrainConfig, TrainMode};

#[derive(Debug, Parser)]
#[command(name = "dgcspn", version, about = "Convolutional sum-product networks on images")]
struct Cli {
    /// Worker threads for batch evaluation (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Evaluate batches on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check completeness and decomposability of a structure file.
    Validate {
        #[arg(long)]
        structure: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Complete occluded test images with a generative checkpoint.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Repeat for several occlusions; one summary line each.
        #[arg(long, required = true)]
        occlusion: Vec<OcclusionSpec>,
        /// Directory for the completed images.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify labelled images with a discriminative checkpoint.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Score a checkpoint: log-likelihood and inpainting MSE, or accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        occlusion: Vec<OcclusionSpec>,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    /// IDX (optionally .gz) or SPNT image file.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    structure: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    mode: TrainMode,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    product_dropout: Option<f64>,
    #[arg(long)]
    input_dropout: Option<f64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

fn print_progress(p: &Progress) {
    println!("{p}");
}

fn load_data(args: &DataArgs) -> anyhow::Result<ImageDataset> {
    let d = load_dataset(&args.images, args.labels.as_deref())
        .with_context(|| format!("loading {}", args.images.display()))?;
    Ok(match args.limit {
        Some(n) => d.take(n),
        None => d,
    })
}

fn check_grid(plan: &ExecutionPlan, d: &ImageDataset) -> anyhow::Result<()> {
    if (plan.height(), plan.width()) != (d.height, d.width) {
        bail!(
            "structure expects {}x{} images, dataset has {}x{}",
            plan.height(),
            plan.width(),
            d.height,
            d.width
        );
    }
    Ok(())
}

fn cmd_validate(path: &Path) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    let spec = match parse_structure(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    match check_validity(&spec) {
        Ok(report) => {
            print!("{report}");
            if report.valid {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_train(args: &TrainArgs, exec: Exec) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.structure).with_context(|| args.structure.display().to_string())?;
    let spec = parse_structure(&text)?;
    let plan = compile(&spec)?;
    let data = load_data(&args.data)?;
    check_grid(&plan, &data)?;
    let mut config = TrainConfig::for_mode(args.mode);
    config.seed = args.seed;
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(b) = args.batch {
        config.batch_size = b;
    }
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    if let Some(p) = args.product_dropout {
        config.product_dropout = p;
    }
    if let Some(p) = args.input_dropout {
        config.input_dropout = p;
    }
    config.validate()?;
    let (normalized, _) = normalize_samplewise(&data);
    let params = if args.mode.is_generative() {
        let mut params = init_generative(&plan, &normalized, config.seed)?;
        train_generative(&plan, &mut params, &normalized, &config, exec, &mut print_progress)?;
        params
    } else {
        let labels = data.labels_usize().context("adam training needs --labels")?;
        let mut params = init_discriminative(&plan, config.seed, config.init_std)?;
        train_discriminative(
            &plan,
            &mut params,
            &normalized,
            &labels,
            &config,
            exec,
            &mut print_progress,
        )?;
        params
    };
    Checkpoint {
        spec,
        params,
        seed: config.seed,
        mode: args.mode,
    }
    .save(&args.out)?;
    Ok(())
}

fn cmd_inpaint(
    ckpt: &Path,
    data: &DataArgs,
    occlusions: &[OcclusionSpec],
    out: Option<&Path>,
    exec: Exec,
) -> anyhow::Result<()> {
    let (ck, plan) = Checkpoint::load(ckpt)?;
    if !ck.mode.is_generative() || plan.class_op().is_some() {
        bail!(
            "inpainting needs a generative checkpoint, {} was trained with {}",
            ckpt.display(),
            ck.mode
        );
    }
    let d = load_data(data)?;
    check_grid(&plan, &d)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    for &occ in occlusions {
        let summary = inpaint_dataset(&plan, &ck.params, &d, occ, exec)?;
        if let Some(dir) = out {
            for (i, img) in summary.completions.iter().enumerate() {
                write_pgm(&dir.join(format!("{i:05}_{occ}.pgm")), d.height, d.width, img)?;
            }
        }
        println!("occlusion={occ} images={} mse={:.4}", d.n, summary.mse);
    }
    Ok(())
}

fn cmd_classify(ckpt: &Path, data: &DataArgs, exec: Exec) -> anyhow::Result<()> {
    let (ck, plan) = Checkpoint::load(ckpt)?;
    if ck.mode.is_generative() || plan.class_op().is_none() {
        bail!("classification needs a discriminative checkpoint");
    }
    if data.labels.is_none() {
        bail!("classification needs --labels");
    }
    let d = load_data(data)?;
    check_grid(&plan, &d)?;
    let c = classify_dataset(&plan, &ck.params, &d, exec)?;
    println!("accuracy={:.4}", c.accuracy);
    for (k, row) in c.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        println!("class={k} counts={}", cells.join(","));
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &DataArgs, occlusions: &[OcclusionSpec], exec: Exec) -> anyhow::Result<()> {
    let (ck, plan) = Checkpoint::load(ckpt)?;
    let d = load_data(data)?;
    check_grid(&plan, &d)?;
    if plan.class_op().is_some() {
        if d.labels.is_some() {
            let c = classify_dataset(&plan, &ck.params, &d, exec)?;
            println!("metric=accuracy:{:.4}", c.accuracy);
        } else {
            bail!("evaluating a discriminative checkpoint needs --labels");
        }
        return Ok(());
    }
    let (normalized, _) = normalize_samplewise(&d);
    let mask = EvidenceMask::all_observed(d.height, d.width);
    let ll = batch_log_likelihood(&plan, &ck.params, &normalized, &mask, exec)?;
    println!("metric=loglik:{:.6}", ll.iter().sum::<f64>() / ll.len().max(1) as f64);
    for &occ in occlusions {
        let s = inpaint_dataset(&plan, &ck.params, &d, occ, exec)?;
        println!("metric=mse_{occ}:{:.4}", s.mse);
    }
    Ok(())
}

/// Parses the process arguments and runs one subcommand. Exit codes: 0 on
/// success, 1 for an invalid structure or a failed run, 2 for usage and
/// structure-file syntax errors.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        set_threads(t);
    }
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let result = match &cli.command {
        Command::Validate { structure } => return cmd_validate(structure),
        Command::Train(args) => cmd_train(args, exec),
        Command::Inpaint {
            checkpoint,
            data,
            occlusion,
            out,
        } => cmd_inpaint(checkpoint, data, occlusion, out.as_deref(), exec),
        Command::Classify { checkpoint, data } => cmd_classify(checkpoint, data, exec),
        Command::Eval {
            checkpoint,
            data,
            occlusion,
        } => cmd_eval(checkpoint, data, occlusion, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<SpnError>() {
                Some(SpnError::Parse { .. }) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
