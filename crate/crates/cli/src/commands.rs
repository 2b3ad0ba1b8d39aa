use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fundus_guide::data::{
    generate_corpus, load_dataset, merge_annotations, preprocess, read_annotations, tensor_to_rgb,
    write_cases, Dataset, Verdict,
};
use fundus_guide::geometry::{
    rasterize, regions_to_mask, Landmarks, Point, RegionLabelMap, RegionPartition, RegionSet,
};
use fundus_guide::model::GuidedNet;
use fundus_guide::train::{compare_guided_unguided, evaluate, render_activation, train};
use fundus_guide::{Error, Result};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "fundus-guide", version, about = "Regionally guided fundus finding classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic annotated corpus into a dataset directory
    Generate(GenerateArgs),
    /// Rasterize the eight-region partition for a pair of landmarks
    Regions(RegionsArgs),
    /// Downsample selected regions to a feature-grid cue mask
    Masks(MasksArgs),
    /// Train one model on the train split of a dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Train guided and unguided models from one seed and report both
    Compare(CompareArgs),
    /// Overlay a model's activation map on an image
    Viz(VizArgs),
    /// Serve the annotation HTTP API
    Serve(ServeArgs),
    /// Merge three-annotator records into consensus labels
    MergeAnnotations(MergeArgs),
}

/// Options shared by commands that read a run config.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run config file (flat TOML); defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed, overriding the config file
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one config key, e.g. --set max_epochs=20 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    /// Resolve the effective config and echo it to stderr.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        eprintln!("# effective config\n{}", cfg.to_toml());
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LandmarkArgs {
    /// Optic disc centre as X,Y pixels
    #[arg(long, value_parser = parse_point)]
    pub od: Point,
    /// Fovea centre as X,Y pixels
    #[arg(long, value_parser = parse_point)]
    pub fovea: Point,
    /// Image side in pixels
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    /// Image height when it differs from --size
    #[arg(long)]
    pub height: Option<usize>,
}

impl LandmarkArgs {
    fn label_map(&self) -> Result<RegionLabelMap> {
        let h = self.height.unwrap_or(self.size);
        let lm = Landmarks::new(self.od, self.fovea, self.size, h)?;
        rasterize(&RegionPartition::derive(lm)?, self.size, h)
    }
}

#[derive(Debug, Args)]
pub struct RegionsArgs {
    #[command(flatten)]
    pub landmarks: LandmarkArgs,
    /// Label-map PNG (gray values 1..=8)
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a colour overlay PNG
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// Fundus image to blend under the overlay
    #[arg(long, requires = "overlay")]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MasksArgs {
    #[command(flatten)]
    pub landmarks: LandmarkArgs,
    /// Selected region ids, e.g. 3,5
    #[arg(long, value_delimiter = ',')]
    pub regions: Vec<u8>,
    /// Side of the feature grid
    #[arg(long)]
    pub feature_size: usize,
    /// Write the mask as JSON here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory written by `generate`
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history (JSON lines)
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset split to score
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Write the metrics report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory; a synthetic corpus is generated in memory when omitted
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for reports, checkpoints and histories
    #[arg(long, default_value = "compare-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fundus image (PNG)
    #[arg(long)]
    pub image: PathBuf,
    /// Overlay output (PNG)
    #[arg(long)]
    pub out: PathBuf,
    /// Side of the rendered overlay
    #[arg(long, default_value_t = 512)]
    pub display_size: u32,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Dataset directory whose manifest lists the images
    #[arg(long)]
    pub data: PathBuf,
    /// Annotation file appended to by POST /api/annotations
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Directory of static UI assets served at /
    #[arg(long)]
    pub assets: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Annotation file (JSON lines)
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub finding: String,
    /// Marks needed for a positive label
    #[arg(long, default_value_t = 2)]
    pub min_marks: usize,
    /// Count partially marked images as absent instead of excluding them
    #[arg(long)]
    pub keep_partial: bool,
    /// Write consensus labels (JSON lines) here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_point(s: &str) -> std::result::Result<Point, String> {
    let (x, y) = s
        .split_once(',')
        .ok_or_else(|| format!("expected X,Y, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok(Point::new(p(x)?, p(y)?))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::from(other),
    })
}

fn open_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::from(other),
        })?
        .to_rgb8())
}

fn dataset(cfg: &RunConfig, dir: &Path, split: &str) -> Result<Dataset> {
    load_dataset(dir, Some(split), cfg.input_size, &cfg.finding, cfg.rule())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Regions(a) => regions(a),
        Command::Masks(a) => masks(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Compare(a) => compare(a),
        Command::Viz(a) => viz(a),
        Command::Serve(a) => crate::serve::serve_blocking(a),
        Command::MergeAnnotations(a) => merge(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let train = generate_corpus(&cfg.corpus(cfg.count, "train", 0))?;
    write_cases(&a.out, &train, "train")?;
    if cfg.test_count > 0 {
        let test = generate_corpus(&cfg.corpus(cfg.test_count, "test", 1))?;
        write_cases(&a.out, &test, "test")?;
    }
    println!(
        "wrote {} train and {} test images to {}",
        cfg.count,
        cfg.test_count,
        a.out.display()
    );
    Ok(())
}

fn regions(a: RegionsArgs) -> Result<()> {
    let map = a.landmarks.label_map()?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    map.save_png(&a.out)?;
    if let Some(path) = &a.overlay {
        let base = match &a.image {
            Some(p) => {
                let img = open_rgb(p)?;
                if (img.width() as usize, img.height() as usize) != (map.width, map.height) {
                    return Err(Error::contract(format!(
                        "image is {}x{} but the label map is {}x{}",
                        img.width(),
                        img.height(),
                        map.width,
                        map.height
                    )));
                }
                Some(img)
            }
            None => None,
        };
        save_png(&map.overlay(base.as_ref(), 0.4), path)?;
    }
    let counts = map.counts();
    let by_label: serde_json::Map<String, serde_json::Value> =
        (1..=8).map(|l| (l.to_string(), counts[l].into())).collect();
    println!("{}", serde_json::json!({ "width": map.width, "height": map.height, "counts": by_label }));
    Ok(())
}

fn masks(a: MasksArgs) -> Result<()> {
    let map = a.landmarks.label_map()?;
    let set = RegionSet::from_raw(&a.regions)?;
    let mask = regions_to_mask(set, &map, a.feature_size, a.feature_size)?;
    let rows: Vec<String> = (0..mask.height)
        .map(|y| {
            (0..mask.width)
                .map(|x| if mask.get(x, y) { '1' } else { '0' })
                .collect()
        })
        .collect();
    let doc = serde_json::json!({
        "regions": set.to_vec(),
        "width": mask.width,
        "height": mask.height,
        "rows": rows,
    });
    emit(a.out.as_deref(), &format!("{doc}\n"))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let all = dataset(&cfg, &a.data, "train")?;
    let (der, val) = all.split(1.0 - cfg.validation_fraction, cfg.seed)?;
    log::info!("derivation {} / validation {}", der.len(), val.len());
    let outcome = train(&cfg.model(), &cfg.train(), &der, &val)?;
    outcome.net.save(&a.out)?;
    if let Some(h) = &a.history {
        write_file(h, outcome.history.to_jsonl())?;
    }
    println!(
        "best epoch {} of {}; checkpoint {}",
        outcome.history.best_epoch,
        outcome.history.epochs.len(),
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let net = GuidedNet::load(&a.checkpoint)?;
    let ds = load_dataset(
        &a.data,
        Some(&a.split),
        net.config().input_size,
        &cfg.finding,
        cfg.rule(),
    )?;
    let report = evaluate(&net, &ds)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    emit(a.out.as_deref(), &text)
}

fn compare(a: CompareArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let (train_all, test) = match &a.data {
        Some(dir) => (dataset(&cfg, dir, "train")?, dataset(&cfg, dir, "test")?),
        None => {
            let rule = cfg.rule();
            let train = generate_corpus(&cfg.corpus(cfg.count, "train", 0))?;
            let test = generate_corpus(&cfg.corpus(cfg.test_count, "test", 1))?;
            (
                Dataset::from_cases(&train, &cfg.finding, rule)?,
                Dataset::from_cases(&test, &cfg.finding, rule)?,
            )
        }
    };
    let (der, val) = train_all.split(1.0 - cfg.validation_fraction, cfg.seed)?;
    let out = compare_guided_unguided(&cfg.model(), &cfg.train(), &der, &val, &test)?;
    let dir = &a.out;
    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    write_file(&dir.join("report.json"), out.report.to_json())?;
    write_file(&dir.join("report.txt"), out.report.to_table())?;
    write_file(&dir.join("guided.ckpt"), out.guided.net.to_checkpoint_bytes())?;
    write_file(&dir.join("unguided.ckpt"), out.unguided.net.to_checkpoint_bytes())?;
    write_file(
        &dir.join("guided.history.jsonl"),
        out.guided.history.without_timing().to_jsonl(),
    )?;
    write_file(
        &dir.join("unguided.history.jsonl"),
        out.unguided.history.without_timing().to_jsonl(),
    )?;
    print!("{}", out.report.to_table());
    Ok(())
}

fn viz(a: VizArgs) -> Result<()> {
    let net = GuidedNet::load(&a.checkpoint)?;
    let img = open_rgb(&a.image)?;
    let pre = preprocess(&img, net.config().input_size)?;
    let side = net.config().input_size;
    let batch = pre.tensor.clone().reshape(vec![1, 3, side, side])?;
    let pred = net.predict(&batch)?;
    let shown = image::imageops::resize(
        &tensor_to_rgb(&pre.tensor)?,
        a.display_size,
        a.display_size,
        image::imageops::FilterType::Triangle,
    );
    let overlay = render_activation(&shown, &pred.activation)?;
    save_png(&overlay, &a.out)?;
    println!("y_pred {:.6}", pred.y_pred[0]);
    Ok(())
}

fn merge(a: MergeArgs) -> Result<()> {
    fundus_guide::data::check_finding(&a.finding)?;
    let rule = fundus_guide::data::ConsensusRule {
        min_marks: a.min_marks,
        exclude_partial: !a.keep_partial,
    };
    let labels = merge_annotations(&read_annotations(&a.annotations)?, &a.finding, rule)?;
    let mut text = String::new();
    for l in &labels {
        text.push_str(&serde_json::to_string(l).expect("label serializes"));
        text.push('\n');
    }
    emit(a.out.as_deref(), &text)?;
    let count = |v: Verdict| labels.iter().filter(|l| l.verdict == v).count();
    eprintln!(
        "present {} absent {} excluded {}",
        count(Verdict::Present),
        count(Verdict::Absent),
        count(Verdict::Excluded)
    );
    Ok(())
}
