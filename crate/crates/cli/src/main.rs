use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sdmim_core::autodiff::check::GradCheckReport;
use sdmim_core::data::{generate_synthetic, load_dataset, write_labeled, LabeledImage};
use sdmim_core::gradcheck::{check_end_to_end, check_primitives, END_TO_END_TOL, PRIMITIVE_TOL};
use sdmim_core::imaging::GrayImage;
use sdmim_core::model::ModelParams;
use sdmim_core::objective::{variant, VARIANTS};
use sdmim_core::probe::{fine_tune_probe, probe_model, ProbeResult, CSV_HEADER};
use sdmim_core::reconstruct::reconstruct_seeded;
use sdmim_core::training::{Checkpoint, Trainer, FINAL_CHECKPOINT, METRICS_FILE};
use sdmim_core::{Error, RunConfig};

#[derive(Parser)]
#[command(
    name = "sdmim",
    version,
    about = "Self-distillation masked image modeling at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model from a key=value config file.
    Pretrain(PretrainArgs),
    /// Dump original / masked / reconstructed triptychs as PGM.
    Reconstruct(ReconstructArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Linear-probe frozen encoders on a synthetic labeled corpus.
    Probe(ProbeArgs),
    /// Write a synthetic labeled corpus (PGM plus label CSV sidecars).
    GenerateData(GenerateArgs),
}

#[derive(Args)]
struct PretrainArgs {
    config: PathBuf,
    /// Override a config key, applied after the file and the variant.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Apply a named preset (sd-simmim, simmim, sd-simmim-whole, simmim-whole).
    #[arg(long)]
    variant: Option<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    checkpoint: PathBuf,
    /// An image file, or a directory of PGM/PNG images.
    image: PathBuf,
    out_dir: PathBuf,
    /// Defaults to the checkpoint's mask ratio.
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resize inputs to the checkpoint's image size instead of rejecting them.
    #[arg(long)]
    resize: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    /// Seed of the synthetic probe corpus.
    #[arg(long)]
    data_seed: u64,
    #[arg(long, default_value_t = 64)]
    n_images: usize,
    #[arg(long, default_value_t = 7)]
    split_seed: u64,
    /// Also probe a randomly initialized encoder of the first checkpoint's shape.
    #[arg(long)]
    include_random_init: bool,
    /// Results CSV, appended to.
    #[arg(long, default_value = "probe_results.csv")]
    out: PathBuf,
    /// Fine-tune the encoder for this many steps instead of freezing it.
    #[arg(long, value_name = "STEPS")]
    fine_tune: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    out_dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    n_images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    patch: usize,
}

enum Failure {
    Core(Error),
    Usage(String),
    GradCheck(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Probe(a) => probe(a),
        Command::GenerateData(a) => generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::GradCheck(failed)) => {
            eprintln!("gradient check failed for: {}", failed.join(", "));
            ExitCode::from(1)
        }
    }
}

fn pretrain(a: PretrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(v) = &a.variant {
        variant(v)?.configure(&mut cfg);
    }
    cfg.apply_overrides(&a.overrides)?;
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    let out = PathBuf::from(&cfg.out_dir);
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            ckpt.check_compatible(&cfg)?;
            ckpt.config = cfg.clone();
            log::info!(
                "resuming from {} after epoch {}",
                path.display(),
                ckpt.epoch
            );
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(&cfg)?,
    };
    let t0 = Instant::now();
    trainer.fit(&data, Some(&out))?;
    println!(
        "trained {} epochs ({} steps) in {:.1}s; wrote {} and {}",
        trainer.epoch,
        trainer.step,
        t0.elapsed().as_secs_f64(),
        out.join(METRICS_FILE).display(),
        out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn image_paths(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("{} does not exist", path.display())));
    }
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let rd =
        std::fs::read_dir(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Failure::Usage(format!(
            "no PGM/PNG images in {}",
            path.display()
        )));
    }
    Ok(out)
}

fn reconstruct(a: ReconstructArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = &ckpt.config;
    let ratio = a.mask_ratio.unwrap_or(cfg.mask_ratio);
    for (i, path) in image_paths(&a.image)?.iter().enumerate() {
        let mut img = GrayImage::read(path)?;
        if a.resize {
            img = img.resize_bilinear(cfg.image_height, cfg.image_width)?;
        } else if (img.height(), img.width()) != (cfg.image_height, cfg.image_width) {
            return Err(Failure::Usage(format!(
                "{} is {}x{}, checkpoint expects {}x{} (use --resize)",
                path.display(),
                img.height(),
                img.width(),
                cfg.image_height,
                cfg.image_width
            )));
        }
        let t = reconstruct_seeded(
            &ckpt.model,
            &img,
            ratio,
            cfg.target_eps as f32,
            a.seed,
            i as u64,
        )?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let written = t.write(&a.out_dir, stem)?;
        println!(
            "{}: {} masked patches, masked-pixel error {:.4} -> {}",
            path.display(),
            t.masked_idx.len(),
            t.masked_error(),
            written[0].display()
        );
    }
    Ok(())
}

fn gradcheck(seed: u64) -> CmdResult {
    let mut failed = Vec::new();
    let mut report = |r: &GradCheckReport, tol: f64| {
        let ok = r.passes(tol);
        println!(
            "{:<40} worst rel err {:.3e} (tol {tol:.0e}, {} entries) {}",
            r.name,
            r.worst_rel_err,
            r.checked,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    };
    for r in check_primitives(seed)? {
        report(&r, PRIMITIVE_TOL);
    }
    for r in check_end_to_end(seed)? {
        report(&r, END_TO_END_TOL);
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::GradCheck(failed))
    }
}

/// Preset name whose settings match `cfg`, else a short description.
fn variant_label(cfg: &RunConfig) -> String {
    for v in VARIANTS {
        let mut c = cfg.clone();
        v.configure(&mut c);
        if c.distill == cfg.distill
            && c.loss_mode == cfg.loss_mode
            && (cfg.distill || cfg.alpha == 1.0)
        {
            return format!("{}(alpha={})", v.name(), cfg.alpha);
        }
    }
    format!("custom(alpha={},distill={})", cfg.alpha, cfg.distill)
}

fn probe(a: ProbeArgs) -> CmdResult {
    let mut models: Vec<(String, RunConfig, ModelParams)> = Vec::new();
    for path in &a.checkpoints {
        if !path.exists() {
            return Err(Failure::Usage(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        let ckpt = Checkpoint::load(path)?;
        models.push((variant_label(&ckpt.config), ckpt.config, ckpt.model));
    }
    let (h, w, p) = {
        let c = &models[0].1;
        (c.image_height, c.image_width, c.patch_size)
    };
    if let Some((_, c, _)) = models
        .iter()
        .find(|(_, c, _)| (c.image_height, c.image_width, c.patch_size) != (h, w, p))
    {
        return Err(Failure::Usage(format!(
            "checkpoints disagree on image geometry: {h}x{w}/{p} vs {}x{}/{}",
            c.image_height, c.image_width, c.patch_size
        )));
    }
    if a.include_random_init {
        let cfg = models[0].1.clone();
        let model = ModelParams::init(&cfg)?;
        models.insert(0, ("random-init".to_string(), cfg, model));
    }
    let corpus: Vec<LabeledImage> = generate_synthetic(a.data_seed, h, w, p, a.n_images)?;

    let mut rows: Vec<ProbeResult> = Vec::new();
    for (label, cfg, model) in &models {
        let r = match a.fine_tune {
            Some(steps) => fine_tune_probe(
                &format!("{label}+ft"),
                &corpus,
                model,
                cfg,
                a.split_seed,
                steps,
            )?,
            None => probe_model(label, &corpus, model, a.split_seed)?,
        };
        rows.push(r);
    }

    println!(
        "{:<32} {:>8} {:>10} {:>10} {:>10} {:>10}",
        "variant", "overall", "class0", "class1", "class2", "class3"
    );
    for r in &rows {
        let cls: Vec<String> = r
            .per_class
            .iter()
            .map(|c| c.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}")))
            .collect();
        println!(
            "{:<32} {:>8.4} {:>10} {:>10} {:>10} {:>10}",
            r.variant, r.overall, cls[0], cls[1], cls[2], cls[3]
        );
    }

    let fresh = !a.out.exists();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    }
    let write_err = |e: std::io::Error| Failure::Usage(format!("{}: {e}", a.out.display()));
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&a.out)
        .map_err(write_err)?;
    if fresh {
        writeln!(f, "{CSV_HEADER}").map_err(write_err)?;
    }
    for r in &rows {
        writeln!(f, "{}", r.csv_row()).map_err(write_err)?;
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> CmdResult {
    let imgs = generate_synthetic(a.seed, a.height, a.width, a.patch, a.n_images)?;
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| Failure::Usage(format!("{}: {e}", a.out_dir.display())))?;
    for (i, img) in imgs.iter().enumerate() {
        write_labeled(img, &a.out_dir, &format!("synth{i:04}"))?;
    }
    println!("wrote {} images to {}", imgs.len(), a.out_dir.display());
    Ok(())
}
