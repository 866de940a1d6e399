//! Command-line front end: dataset generation, training, prediction,
//! evaluation and cross-validated comparison.

pub mod config;

use std::path::{Path, PathBuf};

use angioseg_core::data::io::{load_image, save_image, save_mask, save_pmap, write_dataset, Manifest};
use angioseg_core::data::{generate_dataset, split, GrayImage, Sample, SplitPlan};
use angioseg_core::metrics::{MetricsReport, TABLE_COLUMNS};
use angioseg_core::postproc::otsu_mask;
use angioseg_core::train::{
    evaluate_checkpoint, evaluate_masks, load_pretrained, predict, run_ablation, select, train_on,
    AblationEntry, AblationResult, Checkpoint, Control, LoadMode, TrainOutcome,
};
use angioseg_core::{BinaryMask, Error, Network, Result, Spacing};
use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "angioseg", version, about = "Coronary-artery segmentation engine")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the configured one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for per-image parallel work.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its manifest.
    Gen {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on a manifest; writes best.vnck, last.vnck, history.csv and split.toml.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Segment one PGM image.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// Also write the image with the predicted vessels at full intensity.
        #[arg(long)]
        overlay: bool,
    },
    /// Score a checkpoint (or the ground truth itself) on a manifest.
    Eval {
        #[arg(long, conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Use each ground-truth mask as its own prediction.
        #[arg(long)]
        oracle: bool,
        /// Restrict to the test ids of a split file written by `train`.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Model label in the report.
        #[arg(long)]
        model: Option<String>,
    },
    /// Cross-validate several run configurations on one dataset.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Dataset; defaults to the first configuration's manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

/// 0 success, 1 usage or configuration, 2 data or format, 3 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Build(_) => 1,
        Error::Numerical(_) => 3,
        Error::Dimension { .. }
        | Error::Format(_)
        | Error::Load { .. }
        | Error::Split(_)
        | Error::EmptySet(_)
        | Error::Io { .. } => 2,
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(Error::Usage(format!("manifest {} does not exist", path.display())));
    }
    Manifest::load(path)
}

/// Write `count` synthetic samples under `out_dir`.
pub fn cmd_gen(cfg: &RunConfig, count: usize, out_dir: &Path) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Usage("count must be at least 1".into()));
    }
    let samples = generate_dataset(&cfg.synth_config(), count, cfg.gen.images_per_patient)?;
    write_dataset(out_dir, &samples)
}

fn initial_network(cfg: &RunConfig) -> Result<Option<Network>> {
    let Some(path) = &cfg.paths.init_checkpoint else {
        return Ok(None);
    };
    let ck = Checkpoint::load(path)?;
    let mut net = Network::build(&cfg.arch, cfg.seed)?;
    load_pretrained(&ck, &mut net, LoadMode::ByName)?;
    Ok(Some(net))
}

/// Split the manifest, train, and write the artifacts under `out_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    manifest: &Path,
    out_dir: &Path,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(manifest)?;
    let plan = split(&manifest.patient_items(), cfg.split.ratios, cfg.seed)?;
    let samples = manifest.load_all()?;
    let tr = select(&samples, &plan.train)?;
    let va = if cfg.split.validate_on_train {
        tr.clone()
    } else {
        select(&samples, &plan.val)?
    };
    let tc = cfg.train_config();
    let out = train_on(&tc, initial_network(cfg)?, &tr, &va, |row, _| {
        on_epoch(row.epoch, row.train_loss, row.val_dsc);
        Control::Continue
    })?;
    out.best.save(&out_dir.join("best.vnck"))?;
    let last_epoch = out.history.rows.last().map_or(0, |r| r.epoch) as u64;
    Checkpoint::from_network(&out.network, last_epoch, None, None).save(&out_dir.join("last.vnck"))?;
    out.history.save(&out_dir.join("history.csv"))?;
    write_file(
        &out_dir.join("split.toml"),
        toml::to_string(&plan).expect("split plan serializes"),
    )?;
    write_file(&out_dir.join("config.toml"), cfg.to_toml())?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictFiles {
    pub probability: PathBuf,
    pub mask: PathBuf,
    pub overlay: Option<PathBuf>,
}

/// Probability map, Otsu mask and optional overlay of one image.
pub fn cmd_predict(checkpoint: &Path, image: &Path, out_dir: &Path, overlay: bool) -> Result<PredictFiles> {
    let net = Checkpoint::load(checkpoint)?.to_network()?;
    let img = load_image(image)?;
    let size = net.config().input_size;
    if (img.height(), img.width()) != (size, size) {
        return Err(Error::Dimension {
            op: "predict",
            detail: format!(
                "{} is {}x{}, checkpoint expects {size}x{size}",
                image.display(),
                img.height(),
                img.width()
            ),
        });
    }
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let blank = BinaryMask::zeros(size, size, Spacing::default());
    let sample = Sample::new(&stem, img.clone(), blank, "", "")?;
    let map = predict(&net, &[&sample])?.remove(0);
    let (mask, _) = otsu_mask(&map, Spacing::default())?;
    let files = PredictFiles {
        probability: out_dir.join(format!("{stem}.pmap")),
        mask: out_dir.join(format!("{stem}_mask.pgm")),
        overlay: overlay.then(|| out_dir.join(format!("{stem}_overlay.pgm"))),
    };
    save_pmap(&files.probability, &map)?;
    save_mask(&files.mask, &mask)?;
    if let Some(path) = &files.overlay {
        let pixels = img
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| if m == 1 { 1.0 } else { v })
            .collect();
        save_image(path, &GrayImage::new(size, size, pixels)?)?;
    }
    Ok(files)
}

pub enum EvalSource<'a> {
    Checkpoint(&'a Path),
    /// Ground truth scored against itself.
    Oracle,
}

/// Per-image metrics (`metrics.csv`) and their summary (`summary.csv`).
pub fn cmd_eval(
    source: EvalSource,
    manifest: &Path,
    split_file: Option<&Path>,
    model: &str,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let manifest = load_manifest(manifest)?;
    let ids = match split_file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let plan: SplitPlan =
                toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            Some(plan.test)
        }
        None => None,
    };
    let report = match source {
        EvalSource::Checkpoint(path) => {
            evaluate_checkpoint(&Checkpoint::load(path)?, &manifest, ids.as_deref(), model)?
        }
        EvalSource::Oracle => {
            let pairs = manifest
                .entries
                .iter()
                .filter(|e| ids.as_ref().is_none_or(|ids| ids.contains(&e.id)))
                .map(|e| {
                    let s = manifest.load_sample(e)?;
                    Ok((s.id, s.mask.clone(), s.mask))
                })
                .collect::<Result<Vec<_>>>()?;
            evaluate_masks(model, &pairs)?
        }
    };
    write_file(&out_dir.join("metrics.csv"), report.to_csv())?;
    write_file(&out_dir.join("summary.csv"), report.summary_csv())?;
    Ok(report)
}

/// File name of the per-fold series of a table column.
pub fn series_file_name(column: &str) -> String {
    let stem: String = column
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    format!("folds_{stem}.csv")
}

/// `table.csv` plus one per-fold series file per metric column.
pub fn cmd_compare(
    configs: &[RunConfig],
    manifest: &Path,
    folds: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<AblationResult> {
    let entries = configs
        .iter()
        .map(|c| {
            c.validate()?;
            let init = c.paths.init_checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            Ok(AblationEntry {
                name: c.name.clone(),
                config: c.train_config(),
                init,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let samples = load_manifest(manifest)?.load_all()?;
    let result = run_ablation(&entries, &samples, folds, seed)?;
    write_file(&out_dir.join("table.csv"), result.table_csv())?;
    for col in TABLE_COLUMNS {
        write_file(&out_dir.join(series_file_name(col)), result.fold_series_csv(col)?)?;
    }
    Ok(result)
}

fn load_config(global: &Global) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Execute one parsed command line, reporting progress on stderr.
pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    let cfg = load_config(g)?;
    match cli.command {
        Command::Gen { count } => {
            let dir = g.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
            let m = cmd_gen(&cfg, count.unwrap_or(cfg.gen.count), &dir)?;
            eprintln!("wrote {} samples to {}", m.entries.len(), dir.display());
        }
        Command::Train { manifest } => {
            let dir = g.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
            let manifest = manifest.unwrap_or_else(|| cfg.paths.manifest.clone());
            let out = cmd_train(&cfg, &manifest, &dir, |epoch, loss, dsc| {
                eprintln!("epoch {epoch:4}  loss {loss:.6}  val_dsc {dsc:.4}");
            })?;
            eprintln!("best epoch {} written to {}", out.best_epoch, dir.join("best.vnck").display());
        }
        Command::Predict {
            checkpoint,
            image,
            overlay,
        } => {
            let dir = g.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
            let ck = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            let files = cmd_predict(&ck, &image, &dir, overlay)?;
            eprintln!("wrote {}", files.probability.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            oracle,
            split,
            model,
        } => {
            let dir = g.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
            let manifest = manifest.unwrap_or_else(|| cfg.paths.manifest.clone());
            let ck = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            let (source, default_name) = if oracle {
                (EvalSource::Oracle, "oracle")
            } else {
                (EvalSource::Checkpoint(&ck), "model")
            };
            let name = model.unwrap_or_else(|| default_name.to_string());
            let report = cmd_eval(source, &manifest, split.as_deref(), &name, &dir)?;
            print!("{}", report.summary_csv());
        }
        Command::Compare {
            configs,
            folds,
            manifest,
        } => {
            let mut runs = configs
                .iter()
                .map(|p| RunConfig::load(p))
                .collect::<Result<Vec<_>>>()?;
            if let Some(s) = g.seed {
                for r in &mut runs {
                    r.seed = s;
                }
            }
            let dir = g.out.clone().unwrap_or_else(|| runs[0].paths.out_dir.clone());
            let manifest = manifest.unwrap_or_else(|| runs[0].paths.manifest.clone());
            let result = cmd_compare(&runs, &manifest, folds, runs[0].seed, &dir)?;
            print!("{}", result.table_csv());
        }
    }
    Ok(())
}
