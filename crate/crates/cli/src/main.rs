use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cpnet::checkpoint::Checkpoint;
use cpnet::config::TrainConfig;
use cpnet::{data, eval, gradcheck, io, rng, train, Error};

/// Train and inspect the context prior segmentation network.
#[derive(Parser)]
#[command(name = "cpnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export the training and validation scenes of a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on an exported dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated scales; defaults to the checkpoint's eval scales.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        #[arg(long)]
        flip: bool,
    },
    /// Compare analytic and numeric gradients.
    GradCheck(GradCheckArgs),
    /// Write prior, reversed prior and ideal affinity images for one scene.
    DumpPrior {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
        /// Exported dataset to read the scene from; without it the scene is
        /// regenerated from the checkpoint's validation stream.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GradCheckArgs {
    /// Check a single op (see `--list`).
    #[arg(long, conflicts_with_all = ["full", "list"])]
    op: Option<String>,
    /// Check the whole network's training loss.
    #[arg(long, conflicts_with = "list")]
    full: bool,
    /// Print the op names and exit.
    #[arg(long)]
    list: bool,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long)]
    seed: Option<u64>,
}

/// Usage errors 1, numeric failures 2, I/O and file-format errors 3.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format(_) => 3,
        Error::NonFinite(_) | Error::Degenerate(_) => 2,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape { .. } | Error::LabelOutOfRange { .. } => 1,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("CPNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("CPNET_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn gen_data(config: &Path, out: &Path) -> cpnet::Result<()> {
    let cfg = TrainConfig::load(config)?;
    let train = data::gen_dataset(cfg.data_seed, cfg.train_scenes, &cfg.scene())?;
    let val = data::gen_dataset(cfg.val_seed(), cfg.val_scenes, &cfg.scene())?;
    io::export_dataset(&out.join("train"), &train)?;
    io::export_dataset(&out.join("val"), &val)?;
    println!("wrote {} training and {} validation scenes to {}", train.len(), val.len(), out.display());
    Ok(())
}

fn run_train(config: &Path, out: &Path) -> cpnet::Result<()> {
    let cfg = TrainConfig::load(config)?;
    let iterations = cfg.iterations;
    let summary = train::train_to_dir(cfg, out)?;
    if let Some(last) = summary.records.last() {
        println!("step {} total loss {:.4}", last.step, last.total);
    }
    for (step, r) in &summary.evals {
        println!("eval step {step}: pixAcc {:.4} mIoU {:.4}", r.pix_acc, r.mean_iou);
    }
    println!(
        "{} iterations, checkpoint in {}",
        iterations,
        out.join(train::layout::FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn run_eval(ckpt: &Path, data_dir: &Path, scales: Option<Vec<f64>>, flip: bool) -> cpnet::Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (net, store) = ck.network()?;
    let scenes = io::import_dataset(data_dir)?;
    let scales = scales.unwrap_or_else(|| ck.config.eval_scales.clone());
    let report = eval::evaluate(&net, &store, &scenes, &scales, flip)?;
    println!("scenes {}", scenes.len());
    println!("pixAcc {:.6}", report.pix_acc);
    println!("mIoU {:.6}", report.mean_iou);
    for (c, iou) in report.confusion.class_iou().into_iter().enumerate() {
        match iou {
            Some(iou) => println!("class {c} IoU {iou:.6}"),
            None => println!("class {c} IoU n/a"),
        }
    }
    Ok(())
}

fn run_grad_check(args: &GradCheckArgs) -> cpnet::Result<bool> {
    if args.list {
        for name in gradcheck::OP_NAMES {
            println!("{name}");
        }
        return Ok(true);
    }
    let mut reports = Vec::new();
    if args.full {
        let seed = args.seed.unwrap_or(gradcheck::FULL_MODEL_SEED);
        reports.push(gradcheck::check_full_model(seed, usize::MAX)?);
    } else {
        let names: Vec<&str> = match &args.op {
            Some(op) => vec![op.as_str()],
            None => gradcheck::OP_NAMES.to_vec(),
        };
        for name in names {
            reports.push(gradcheck::check_op(name, args.trials, args.seed.unwrap_or(gradcheck::OP_SEED))?);
        }
    }
    let mut ok = true;
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{verdict} {}: max rel err {:.3e} over {} entries ({} skipped at kinks)",
            r.name, r.max_rel_err, r.entries, r.skipped
        );
    }
    Ok(ok)
}

fn run_dump_prior(ckpt: &Path, scene: usize, out: &Path, data_dir: Option<&Path>) -> cpnet::Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (net, store) = ck.network()?;
    let s = match data_dir {
        Some(d) => io::import_scene(d, scene)?,
        None => data::gen_synthetic_scene(rng::item_seed(ck.config.val_seed(), scene as u64), &ck.config.scene())?,
    };
    eval::dump_prior(&net, &store, &s, out)?;
    for f in eval::DUMP_FILES {
        println!("{}", out.join(f).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::GenData { config, out } => gen_data(config, out),
        Command::Train { config, out } => run_train(config, out),
        Command::Eval { ckpt, data, scales, flip } => run_eval(ckpt, data, scales.clone(), *flip),
        Command::GradCheck(args) => match run_grad_check(args) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
        Command::DumpPrior { ckpt, scene, out, data } => run_dump_prior(ckpt, *scene, out, data.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
