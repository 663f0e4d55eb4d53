use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use focusad::backbone::{load_backbone, Backbone, STUB_ID};
use focusad::config::RunConfig;
use focusad::dataset::{load_dataset, Layout, Sample, Split};
use focusad::eval::{evaluate_few_shot, evaluate_zero_shot, EvalSource, FewShotPlan};
use focusad::fewshot::{build_banks, fewshot_infer, select_shots, MemoryBanks};
use focusad::imageio::{heatmap_image, write_npy, ImageTensor};
use focusad::synthetic::{generate, write_flat_layout, SyntheticConfig};
use focusad::trainer::{train, write_loss_log, zero_shot_infer, Checkpoint, TrainingSample};
use focusad::{par, Error, Result};

#[derive(Parser)]
#[command(name = "focusad", version, about = "Zero- and few-shot anomaly detection and localisation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; defaults apply to anything it leaves out
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.epochs=4` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Use the bundled 32 px stub backbone instead of pretrained weights
    #[arg(long)]
    stub_backbone: bool,
    /// Dataset root (data.root)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset layout: mvtec, visa-csv or flat-synthetic (data.layout)
    #[arg(long)]
    layout: Option<Layout>,
    /// Parent directory for run outputs (output_dir)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the adapter and prompts on a labelled auxiliary dataset
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Zero-shot evaluation of a checkpoint
    EvalZero {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Few-shot evaluation over several shot draws
    EvalFewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Normal shots per category (fewshot.shots); 0 runs zero-shot
        #[arg(long)]
        k: Option<usize>,
        /// Comma-separated shot seeds (fewshot.seeds)
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Build and save memory banks for one category
    BuildBanks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Category to draw shots from; required when the dataset has several
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score one image and export its heatmap
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Memory banks; the fused few-shot map is exported instead
        #[arg(long)]
        banks: Option<PathBuf>,
    },
    /// Write a synthetic defect dataset in the flat layout
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        category: String,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0.5)]
        anomaly_fraction: f64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the fully resolved configuration
    ShowConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if common.stub_backbone {
        cfg.backbone.id = STUB_ID.into();
        cfg.train.image_size = focusad::backbone::BackboneSpec::stub().input_size;
    }
    if let Some(root) = &common.data {
        cfg.data.root = Some(root.clone());
    }
    if let Some(layout) = common.layout {
        cfg.data.layout = layout;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let cfg = cfg.with_overrides(&common.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the run directory and records the resolved config in it.
fn open_run(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.run_dir(command)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.save(&dir.join("config.toml"))?;
    let argv: Vec<String> = std::env::args().collect();
    let inv = dir.join("invocation.txt");
    std::fs::write(&inv, argv.join(" ") + "\n").map_err(|e| Error::io(&inv, e))?;
    Ok(dir)
}

fn backbone_for(cfg: &RunConfig) -> Result<Box<dyn Backbone>> {
    load_backbone(&cfg.backbone.id, cfg.backbone.weights_dir.as_deref())
}

fn samples_for(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let root = cfg.dataset_root()?;
    let mut samples = load_dataset(root, cfg.data.layout)?;
    if !cfg.data.categories.is_empty() {
        samples.retain(|s| cfg.data.categories.contains(&s.category));
        if samples.is_empty() {
            return Err(Error::config(format!(
                "none of the categories {:?} exist under {}",
                cfg.data.categories,
                root.display()
            )));
        }
    }
    Ok(samples)
}

fn cmd_train(common: &Common) -> Result<PathBuf> {
    let cfg = resolve(common)?;
    let samples = samples_for(&cfg)?;
    let backbone = backbone_for(&cfg)?;
    let dir = open_run(&cfg, "train")?;
    let labelled: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Test).collect();
    info!("loading {} labelled images", labelled.len());
    let size = cfg.train.image_size;
    let training = par::try_map_slice(&labelled, |s| -> Result<TrainingSample> {
        let (image, mask) = s.load(size, size)?;
        Ok(TrainingSample {
            image,
            label: s.label,
            mask,
        })
    })?;
    let dataset_id = format!("{}:{}", cfg.data.layout, cfg.dataset_root()?.display());
    let outcome = train(backbone.as_ref(), &training, &cfg.model, &cfg.train, &cfg.loss, &dataset_id)?;
    write_loss_log(&dir.join("loss.log"), &outcome.log)?;
    let ckpt = dir.join("checkpoint.ckpt");
    outcome.checkpoint.save(&ckpt)?;
    if let Some(last) = outcome.log.last() {
        info!("final step {}: {}", last.step, last.log_line());
    }
    println!("{}", ckpt.display());
    Ok(ckpt)
}

fn cmd_eval_zero(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let backbone = backbone_for(&cfg)?;
    let samples = samples_for(&cfg)?;
    let dir = open_run(&cfg, "eval-zero")?;
    let report = evaluate_zero_shot(
        backbone.as_ref(),
        &ckpt,
        samples.as_slice(),
        cfg.eval.aupro_fpr_limit,
        &cfg.hash()?,
    )?;
    let path = dir.join("report.json");
    report.save(&path)?;
    print!("{}", report.table());
    println!("{}", path.display());
    Ok(())
}

fn cmd_eval_fewshot(common: &Common, checkpoint: &Path, k: Option<usize>, seeds: Option<Vec<u64>>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(k) = k {
        cfg.fewshot.shots = k;
    }
    if let Some(seeds) = seeds {
        cfg.fewshot.seeds = seeds;
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let backbone = backbone_for(&cfg)?;
    let samples = samples_for(&cfg)?;
    let dir = open_run(&cfg, "eval-fewshot")?;
    let plan = FewShotPlan {
        shots: cfg.fewshot.shots,
        seeds: cfg.fewshot.seeds.clone(),
        fusion: cfg.fusion,
        source: cfg.fewshot.bank_source,
    };
    let report = evaluate_few_shot(
        backbone.as_ref(),
        &ckpt,
        samples.as_slice(),
        &plan,
        cfg.eval.aupro_fpr_limit,
        &cfg.hash()?,
    )?;
    let path = dir.join("report.json");
    report.save(&path)?;
    print!("{}", report.table());
    println!("{}", path.display());
    Ok(())
}

fn cmd_build_banks(common: &Common, checkpoint: &Path, category: Option<&str>, k: Option<usize>, seed: u64) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(k) = k {
        cfg.fewshot.shots = k;
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let backbone = backbone_for(&cfg)?;
    ckpt.verify_backbone(backbone.as_ref())?;
    let samples = samples_for(&cfg)?;
    let cats = focusad::dataset::categories(&samples);
    let category = match category {
        Some(c) if cats.iter().any(|x| x == c) => c.to_string(),
        Some(c) => return Err(Error::config(format!("category `{c}` not in dataset ({})", cats.join(", ")))),
        None if cats.len() == 1 => cats[0].clone(),
        None => return Err(Error::config(format!("dataset has several categories; pass --category ({})", cats.join(", ")))),
    };
    let pool: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].category == category && samples.as_slice().is_shot_candidate(i))
        .collect();
    let picks = select_shots(pool.len(), cfg.fewshot.shots, seed)?;
    let size = backbone.spec().input_size;
    let shots: Vec<ImageTensor> = picks
        .iter()
        .map(|&p| samples[pool[p]].load(size, size).map(|(img, _)| img))
        .collect::<Result<_>>()?;
    let banks = build_banks(&ckpt.detector, backbone.as_ref(), &shots, &category, cfg.fewshot.bank_source)?;
    let dir = open_run(&cfg, "banks")?;
    let path = dir.join(format!("banks-{category}-k{}-s{seed}.json", cfg.fewshot.shots));
    banks.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_predict(common: &Common, checkpoint: &Path, image: &Path, banks: Option<&Path>) -> Result<()> {
    let cfg = resolve(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let backbone = backbone_for(&cfg)?;
    let img = ImageTensor::load(image)?.resized(backbone.spec().input_size);
    let (mode, score, map, full_scale) = match banks {
        Some(path) => {
            let banks = MemoryBanks::load(path)?;
            ckpt.verify_backbone(backbone.as_ref())?;
            let fused = fewshot_infer(&ckpt.detector, backbone.as_ref(), &banks, &cfg.fusion, &img)?;
            ("few-shot", fused.image_score, fused.pixel_map, 1.0 + cfg.fusion.beta)
        }
        None => {
            let r = zero_shot_infer(backbone.as_ref(), &ckpt, &img)?;
            ("zero-shot", r.image_score, r.pixel_map, 1.0)
        }
    };
    let dir = open_run(&cfg, "predict")?;
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let png = dir.join(format!("{stem}_heatmap.png"));
    heatmap_image(&map, full_scale)
        .save(&png)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", png.display())))?;
    write_npy(&dir.join(format!("{stem}_map.npy")), &map)?;
    let record = serde_json::json!({
        "image": image.display().to_string(),
        "mode": mode,
        "image_score": score,
        "max_pixel_score": map.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        "checkpoint": checkpoint.display().to_string(),
    });
    let score_path = dir.join(format!("{stem}_score.json"));
    std::fs::write(&score_path, format!("{record}\n")).map_err(|e| Error::io(&score_path, e))?;
    println!("{record}");
    Ok(())
}

fn cmd_synth(out: &Path, category: &str, config: SyntheticConfig) -> Result<()> {
    if !(0.0..=1.0).contains(&config.anomaly_fraction) || config.count == 0 || config.size < 8 {
        return Err(Error::config("need count ≥ 1, size ≥ 8 and an anomaly fraction in [0, 1]"));
    }
    let samples = generate(&config);
    write_flat_layout(out, category, &samples)?;
    println!("{}", out.join(category).display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => cmd_train(&common).map(|_| ()),
        Command::EvalZero { common, checkpoint } => cmd_eval_zero(&common, &checkpoint),
        Command::EvalFewshot {
            common,
            checkpoint,
            k,
            seeds,
        } => cmd_eval_fewshot(&common, &checkpoint, k, seeds),
        Command::BuildBanks {
            common,
            checkpoint,
            category,
            k,
            seed,
        } => cmd_build_banks(&common, &checkpoint, category.as_deref(), k, seed),
        Command::Predict {
            common,
            checkpoint,
            image,
            banks,
        } => cmd_predict(&common, &checkpoint, &image, banks.as_deref()),
        Command::Synth {
            out,
            category,
            count,
            anomaly_fraction,
            size,
            seed,
        } => cmd_synth(
            &out,
            &category,
            SyntheticConfig {
                count,
                anomaly_fraction,
                size,
                seed,
            },
        ),
        Command::ShowConfig { common } => {
            let cfg = resolve(&common)?;
            print!("{}", cfg.to_toml()?);
            println!("# hash {}", cfg.hash()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
