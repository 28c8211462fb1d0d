use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use centerseg::checkpoint::Checkpoint;
use centerseg::config::RunConfig;
use centerseg::data::{class_palette, generate_dataset, load_manifest, load_sample, DatasetSpec};
use centerseg::data::render_prediction;
use centerseg::interpret::{
    exemplars_to_csv, find_exemplars, pca_project, projection_to_csv, scan_centers,
};
use centerseg::train::{evaluate, grad_check_report, predict_sample, train};
use centerseg::{Error, Result};

#[derive(Parser)]
#[command(name = "centerseg", about = "Center-guided prototype segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Voronoi-mosaic dataset
    GenerateData(GenerateArgs),
    /// Train a model and write checkpoints + loss log
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split
    Eval(EvalArgs),
    /// Predict one sample and write the rendered label map
    Predict(PredictArgs),
    /// Write prototype exemplar and 2-D projection reports
    InspectPrototypes(InspectArgs),
    /// Audit every loss gradient against finite differences
    GradCheck,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    modes: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 20)]
    val: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 0.03)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file; flags below override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    grid_rows: Option<usize>,
    #[arg(long)]
    grid_cols: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lambda_pp: Option<f64>,
    #[arg(long)]
    lambda_fp: Option<f64>,
    #[arg(long)]
    lambda_dice: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    baseline: bool,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        apply!(
            dataset,
            num_classes,
            per_class,
            feature_dim,
            grid_rows,
            grid_cols,
            momentum,
            alpha,
            temperature,
            lambda_pp,
            lambda_fp,
            lambda_dice,
            margin,
            lr,
            weight_decay,
            epochs,
            batch_size,
            seed
        );
        if self.baseline {
            cfg.baseline = true;
            cfg.per_class = 1;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for the checkpoint and loss log
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for metrics.csv and rendered predictions
    #[arg(long)]
    out: PathBuf,
    /// Override the dataset path stored in the checkpoint
    #[arg(long)]
    dataset: Option<String>,
    /// Skip writing rendered prediction images
    #[arg(long)]
    no_render: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dataset: Option<String>,
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let spec = DatasetSpec {
        num_classes: args.classes,
        modes_per_class: args.modes,
        height: args.height,
        width: args.width,
        train_count: args.train,
        val_count: args.val,
        test_count: args.test,
        noise_sigma: args.sigma,
        seed: args.seed,
    };
    let manifest = generate_dataset(&spec, &args.out)?;
    println!(
        "wrote {} ({} modes, {}/{}/{} samples)",
        args.out.display(),
        manifest.modes.len(),
        spec.train_count,
        spec.val_count,
        spec.test_count
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.build()?;
    let (ck, artifacts) = train::<f32>(&cfg, &args.out, args.resume.as_deref())?;
    println!(
        "trained {} epochs; checkpoint at {}",
        ck.epoch,
        artifacts.checkpoint_path.display()
    );
    if let Some((epoch, miou)) = artifacts.val_history.last() {
        println!("epoch {} val mIoU {:.4}", epoch, miou);
    }
    Ok(())
}

fn load_ck_and_manifest(
    checkpoint: &PathBuf,
    dataset: &Option<String>,
) -> Result<(Checkpoint<f32>, centerseg::data::Manifest)> {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let root = dataset.clone().unwrap_or_else(|| ck.config.dataset.clone());
    let manifest = load_manifest(std::path::Path::new(&root))?;
    if manifest.spec.num_classes != ck.config.num_classes {
        return Err(Error::Config(format!(
            "checkpoint expects {} classes, dataset has {}",
            ck.config.num_classes, manifest.spec.num_classes
        )));
    }
    Ok((ck, manifest))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (ck, manifest) = load_ck_and_manifest(&args.checkpoint, &args.dataset)?;
    std::fs::create_dir_all(&args.out)?;
    let (cm, report) = evaluate(&ck.backbone, &ck.bank, &manifest, &args.split)?;
    std::fs::write(args.out.join("metrics.csv"), cm.to_csv()?)?;
    if !args.no_render {
        let palette = class_palette(ck.config.num_classes);
        for idx in 0..manifest.split(&args.split)?.len() {
            let sample = load_sample::<f32>(&manifest, &args.split, idx)?;
            let pred = predict_sample(&ck.backbone, &ck.bank, &sample)?;
            render_prediction(
                &args.out.join(format!("pred_{}.ppm", idx)),
                &pred,
                sample.height,
                sample.width,
                &palette,
            )?;
        }
    }
    println!(
        "split {}: mIoU {:.4} OA {:.4} macro-F1 {:.4}",
        args.split, report.miou, report.oa, report.macro_f1
    );
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let (ck, manifest) = load_ck_and_manifest(&args.checkpoint, &args.dataset)?;
    let sample = load_sample::<f32>(&manifest, &args.split, args.index)?;
    let pred = predict_sample(&ck.backbone, &ck.bank, &sample)?;
    let palette = class_palette(ck.config.num_classes);
    render_prediction(&args.out, &pred, sample.height, sample.width, &palette)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let (ck, manifest) = load_ck_and_manifest(&args.checkpoint, &args.dataset)?;
    std::fs::create_dir_all(&args.out)?;
    let centers = scan_centers(
        &ck.backbone,
        &manifest,
        "train",
        ck.config.grid_rows,
        ck.config.grid_cols,
    )?;
    let exemplars = find_exemplars(&ck.bank, &centers);
    std::fs::write(args.out.join("exemplars.csv"), exemplars_to_csv(&exemplars))?;
    // 2-D projection of all scanned centers, tagged by class
    let c = ck.bank.feature_dim;
    let flat: Vec<f64> = centers.iter().flat_map(|sc| sc.center.iter().copied()).collect();
    let classes: Vec<usize> = centers.iter().map(|sc| sc.class).collect();
    let (coords, warned) = pca_project(&flat, centers.len(), c)?;
    if warned {
        eprintln!("warning: rank-0 feature data, projection is all zeros");
    }
    std::fs::write(args.out.join("projection.csv"), projection_to_csv(&coords, &classes))?;
    let matched = exemplars
        .iter()
        .filter(|e| !e.missing && e.dominant_class == Some(e.class))
        .count();
    println!(
        "{} exemplars ({} dominant-class matches) -> {}",
        exemplars.len(),
        matched,
        args.out.display()
    );
    Ok(())
}

fn cmd_grad_check() -> Result<bool> {
    let report = grad_check_report()?;
    let mut ok = true;
    for (name, err) in &report {
        let pass = *err <= 1e-3;
        ok &= pass;
        println!("{:<6} rel_err {:.3e} {}", name, err, if pass { "PASS" } else { "FAIL" });
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // usage errors exit with code 2
    let result = match &cli.command {
        Command::GenerateData(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::InspectPrototypes(args) => cmd_inspect(args),
        Command::GradCheck => {
            return match cmd_grad_check() {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(1),
                Err(e) => {
                    eprintln!("error: {}", e);
                    ExitCode::from(1)
                }
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(1)
        }
    }
}
