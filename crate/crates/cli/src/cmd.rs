use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gradcamo::features::extract_features;
use gradcamo::gradcam::gradcam_for_cell;
use gradcamo::gradcamo::{audit, DEFAULT_CUTOFF};
use gradcamo::manifest::{write_crop, Manifest, Split};
use gradcamo::model::{load_checkpoint, save_checkpoint, Architecture, MiniCnn3d};
use gradcamo::render::{mask_slice, overlay, slice_xy};
use gradcamo::synth::{self, describe, SynthConfig, StackManifest};
use gradcamo::train::{preprocess_all, train, write_history, TrainConfig};
use gradcamo::volume::{extract_crops, SegmentationMask, StackMeta, ZStack};
use gradcamo::whitening::{pca2, whiten_features, GroupKey};
use gradcamo::{report, tbf};

#[derive(Debug, Parser)]
#[command(name = "gradcamo", version, about = "Grad-CAMO audit pipeline for single-cell 3D classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic z-stacks with instance masks
    Synth(SynthArgs),
    /// Cut single-cell crops out of stacks
    Crop(CropArgs),
    /// Train the classifier
    Train(TrainArgs),
    /// Grad-CAMO scores for one split
    Score(ScoreArgs),
    /// Per-cell feature vectors, optionally whitened
    Features(FeaturesArgs),
    /// Static report from scores and features
    Report(ReportArgs),
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("'{p}' is not a whole number")))
        .collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|_| "expected X,Y,Z".to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub doses: usize,
    #[arg(long, default_value_t = 2)]
    pub wells: usize,
    #[arg(long, default_value_t = 4)]
    pub sites: usize,
    #[arg(long, default_value_t = 18)]
    pub cells_per_site: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Stack extents X,Y,Z
    #[arg(long, value_parser = parse_dims, default_value = "192,192,16")]
    pub volume: [usize; 3],
    #[arg(long, default_value_t = 13.0)]
    pub cell_radius: f64,
    /// Confounder strength in [0, 1]
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Crop settings used for the printed summary table
    #[arg(long, default_value_t = 32)]
    pub crop_xy: usize,
    #[arg(long, default_value_t = 200)]
    pub min_voxels: usize,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct CropArgs {
    /// Directory holding the stacks and their manifest.json
    #[arg(long)]
    pub stacks: PathBuf,
    /// Directory holding one `<stack_id>.tbf` label volume per stack
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub crop_xy: usize,
    #[arg(long, default_value_t = 200)]
    pub min_voxels: usize,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Grad-CAMO regularizer weight
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model input shape X,Y,Z; crops are resized to it
    #[arg(long, value_parser = parse_dims, default_value = "32,32,16")]
    pub input: [usize; 3],
    /// Number of classes; defaults to the largest manifest label + 1
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    /// Checkpoint directory
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    pub cutoff: f64,
    /// Scores CSV; the summary is written next to it
    #[arg(long)]
    pub out: PathBuf,
    /// Export every map as TBF plus a mid-slice PNG overlay
    #[arg(long)]
    pub maps: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Control label used to fit the whitening transform
    #[arg(long)]
    pub whiten: Option<usize>,
    /// Control pooling for whitening: global or site
    #[arg(long, default_value = "global")]
    pub group: GroupKey,
    #[arg(long)]
    pub out: PathBuf,
    /// Two-component PCA projection CSV
    #[arg(long)]
    pub pca2: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    pub cutoff: f64,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Crop(a) => cmd_crop(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Features(a) => cmd_features(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    if !force && dir.is_dir() && fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some() {
        bail!("output directory {} is not empty; pass --force to overwrite", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn fresh_file(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn parent_of(path: &Path) -> PathBuf {
    path.parent().filter(|d| !d.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
}

#[derive(Serialize)]
struct Provenance<'a, A: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a A,
}

/// Writes `<command>_config.json` describing the resolved flags.
fn write_config<A: Serialize>(dir: &Path, command: &str, args: &A) -> Result<()> {
    let p = Provenance { command, version: env!("CARGO_PKG_VERSION"), args };
    report::write_json(&dir.join(format!("{command}_config.json")), &p)?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_doses: a.doses,
        wells_per_dose: a.wells,
        sites_per_well: a.sites,
        cells_per_site: a.cells_per_site,
        channels: a.channels,
        volume: a.volume,
        cell_radius: a.cell_radius,
        confound_strength: a.gamma,
        neighbor_density: a.density,
        seed: a.seed,
    };
    cfg.validate()?;
    fresh_dir(&a.out, a.force)?;
    let ds = synth::generate(&cfg)?;
    ds.write(&a.out)?;
    write_config(&a.out, "synth", a)?;
    let summary = describe(&ds, a.crop_xy, a.min_voxels)?;
    report::write_json(&a.out.join("summary.json"), &summary)?;
    println!("{} stacks written to {}", ds.stacks.len(), a.out.display());
    print!("{}", summary.to_table());
    Ok(())
}

fn cmd_crop(a: &CropArgs) -> Result<()> {
    let manifest_path = a.stacks.join("manifest.json");
    let stacks = StackManifest::load(&manifest_path)?;
    fresh_dir(&a.out, a.force)?;
    let mut records = Vec::new();
    let (mut boundary, mut small, mut instances) = (0usize, 0usize, 0usize);
    for rec in &stacks.stacks {
        let image = tbf::read_f32(&a.stacks.join(&rec.stack))?;
        let mask_path = a.masks.join(format!("{}.tbf", rec.stack_id));
        if !mask_path.is_file() {
            return Err(gradcamo::Error::Io {
                path: mask_path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing mask for stack {}", rec.stack_id)),
            }
            .into());
        }
        let mask = SegmentationMask::from_tensor(&tbf::read_f32(&mask_path)?)?;
        let stack = ZStack::new(image, stacks.channels.clone(), stacks.spacing)?;
        let meta = StackMeta { stack_id: rec.stack_id.clone(), label: rec.label, well: rec.well.clone(), site: rec.site };
        let ex = extract_crops(&stack, &mask, &meta, a.crop_xy, a.min_voxels)?;
        boundary += ex.dropped_boundary.len();
        small += ex.dropped_small.len();
        instances += ex.crops.len() + ex.dropped_boundary.len() + ex.dropped_small.len();
        for crop in &ex.crops {
            records.push(write_crop(&a.out, crop, rec.split)?);
        }
    }
    let manifest = Manifest { records };
    manifest.validate()?;
    manifest.save(&a.out.join("manifest.json"))?;
    write_config(&a.out, "crop", a)?;
    println!(
        "{} crops from {} instances in {} stacks; dropped {boundary} boundary and {small} small cells",
        manifest.records.len(),
        instances,
        stacks.stacks.len()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    for split in [Split::Train, Split::Val] {
        if !manifest.has_split(split) {
            bail!("manifest {} has no {split} split", a.manifest.display());
        }
    }
    let cfg = TrainConfig {
        lr: a.lr,
        batch: a.batch,
        epochs: a.epochs,
        patience: a.patience,
        lambda: a.lambda,
        seed: a.seed,
        augment: !a.no_augment,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let train_crops = manifest.load_crops(&a.manifest, Split::Train)?;
    let val_crops = manifest.load_crops(&a.manifest, Split::Val)?;
    let classes = a.classes.unwrap_or_else(|| manifest.records.iter().map(|r| r.label).max().unwrap_or(0) + 1);
    let channels = train_crops[0].volume.shape()[0];
    let arch = Architecture::new(channels, classes, a.input);
    arch.validate()?;
    fresh_dir(&a.out, a.force)?;
    let model = MiniCnn3d::new(arch, a.seed)?;
    let out = train(model, &train_crops, &val_crops, &cfg, |e| {
        let s = e.mean_gradcamo.map(|s| format!(" gradcamo {s:.3}")).unwrap_or_default();
        println!("epoch {:>2}  loss {:.4}  train {:.3}  val {:.3}{s}", e.epoch, e.loss, e.train_acc, e.val_acc);
    })?;
    save_checkpoint(&a.out, &out.model, &out.stats, Some(serde_json::to_value(&cfg)?))?;
    write_history(&a.out.join("history.csv"), &out.history)?;
    write_config(&a.out, "train", a)?;
    let last = out.history.last().expect("at least one epoch");
    println!(
        "final train accuracy {:.3}, val accuracy {:.3}; kept epoch {} (val {:.3})",
        last.train_acc, last.val_acc, out.best_epoch, out.best_val_acc
    );
    Ok(())
}

fn load_split(model_dir: &Path, manifest_path: &Path, split: Split) -> Result<(MiniCnn3d<f32>, Vec<gradcamo::volume::CellCrop>)> {
    let (model, meta) = load_checkpoint(model_dir)?;
    let manifest = Manifest::load(manifest_path)?;
    if !manifest.has_split(split) {
        bail!("manifest {} has no {split} split", manifest_path.display());
    }
    let crops = manifest.load_crops(manifest_path, split)?;
    let crops = preprocess_all(&crops, model.arch.input, &meta.stats)?;
    Ok((model, crops))
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.cutoff) {
        bail!("cutoff must lie in [0, 1], got {}", a.cutoff);
    }
    let (model, crops) = load_split(&a.model, &a.manifest, a.split)?;
    fresh_file(&a.out, a.force)?;
    let (records, summary) = audit(&model, &crops, a.cutoff)?;
    report::write_scores(&a.out, &records)?;
    let dir = parent_of(&a.out);
    let stem = stem_of(&a.out);
    report::write_json(&dir.join(format!("{stem}_summary.json")), &summary)?;
    write_config(&dir, "score", a)?;
    if let Some(maps) = &a.maps {
        fresh_dir(maps, a.force)?;
        for crop in &crops {
            let map = gradcam_for_cell(&model, &crop.volume, None)?;
            tbf::write_f32(&maps.join(format!("{}.tbf", crop.cell_id)), &map.full)?;
            let [x, y, z] = crop.dims();
            let mid = z / 2;
            let base = slice_xy(&crop.volume, 0, mid)?;
            let heat = slice_xy(&map.full, 0, mid)?;
            let mask = mask_slice(&crop.mask, mid)?;
            let rgba = overlay(&base, &heat, None, 0.6, Some(&mask), y)?;
            let img = image::RgbaImage::from_raw(y as u32, x as u32, rgba).context("overlay buffer size")?;
            let path = maps.join(format!("{}.png", crop.cell_id));
            img.save(&path).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    let o = &summary.overall;
    println!(
        "{} cells: mean Grad-CAMO {:.4} ± {:.4}, {:.1}% ≥ {}, accuracy {:.3}",
        o.count,
        o.mean,
        o.std,
        100.0 * o.frac_kept,
        a.cutoff,
        o.accuracy
    );
    Ok(())
}

fn cmd_features(a: &FeaturesArgs) -> Result<()> {
    let (model, crops) = load_split(&a.model, &a.manifest, a.split)?;
    fresh_file(&a.out, a.force)?;
    if let Some(p) = &a.pca2 {
        fresh_file(p, a.force)?;
    }
    let raw = extract_features(&model, &crops)?;
    let dir = parent_of(&a.out);
    let stem = stem_of(&a.out);
    let fm = match a.whiten {
        None => raw,
        Some(control) => {
            if !raw.labels.contains(&control) {
                bail!("control label {control} has no cells in the {} split", a.split);
            }
            let (white, transforms) = whiten_features(&raw, control, a.group)?;
            for (name, t) in &transforms {
                t.save(&dir, &format!("{stem}_whitening_{}", name.replace('=', "")))?;
            }
            white
        }
    };
    report::write_features(&a.out, &fm)?;
    if let Some(p) = &a.pca2 {
        let proj = pca2(&fm.values, fm.d)?;
        report::write_pca(p, &fm, &proj)?;
    }
    write_config(&dir, "features", a)?;
    println!("{} cells × {} features written to {}", fm.rows(), fm.d, a.out.display());
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut records = report::read_scores(&a.scores)?;
    let features = report::read_features(&a.features)?;
    report::attach_metadata(&mut records, &features)?;
    fresh_dir(&a.out, a.force)?;
    let summary = report::write_report(&a.out, &records, a.cutoff)?;
    write_config(&a.out, "report", a)?;
    println!(
        "overall mean Grad-CAMO ŝ = {:.4} over {} cells ({} dose/site groups)",
        summary.overall.mean,
        summary.overall.count,
        summary.by_dose_site.len()
    );
    Ok(())
}
