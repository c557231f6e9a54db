use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use dhpf::checkpoint::{load_checkpoint, save_checkpoint};
use dhpf::evaluation::{
    evaluate, histogram_csv, match_dump, selection_csv, time_pairs, EvalConfig, PckBasis, TimingSource,
};
use dhpf::matching::HoughConfig;
use dhpf::pyramid::{
    load_raw_image, save_pair_list, save_pyramid, save_raw_image, synth_dataset, RgbImage, SynthDatasetConfig,
    SynthSettings, ToyBackboneConfig, WarpKind,
};
use dhpf::training::{
    gradcheck, save_metrics_csv, train, GradcheckConfig, ModelParams, OptimizerConfig, OptimizerKind, PairDataset,
    PipelineConfig, Supervision, SyntheticSource, TrainConfig, TrainData,
};
use dhpf::util::write_atomic;
use dhpf::Error;

#[derive(Parser, Debug)]
#[command(name = "dhpf", version, about = "Dynamic hyperpixel flow matching engine")]
pub struct Cli {
    /// Worker threads for per-pair work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Flat key=value file with defaults for any long option.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Log progress at info level.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train gating and transform parameters.
    Train(TrainArgs),
    /// Compute PCK, layer-selection statistics and timing.
    Eval(EvalArgs),
    /// Write dense matches and transferred keypoints per pair.
    Match(MatchArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a toy dataset of images, pyramids and a pair list.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// Target selection rate.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Channel reduction ratio.
    #[arg(long)]
    pub rho: Option<usize>,
    /// Hough bins per axis.
    #[arg(long)]
    pub bins: Option<usize>,
    /// gumbel, sigmoid, sigmoid_mu or sigmoid_l1.
    #[arg(long)]
    pub variant: Option<String>,
    /// Weight of the l1 gate penalty (sigmoid_l1).
    #[arg(long)]
    pub l1: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Pair list JSON.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Directory holding `<image id>.dhpf` pyramids.
    #[arg(long)]
    pub pyramids: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Raw images for self-supervised training.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// strong, weak or self_supervised.
    #[arg(long)]
    pub mode: Option<String>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, env = "DHPF_SEED")]
    pub seed: Option<u64>,
    /// Disable horizontal-flip augmentation.
    #[arg(long)]
    pub no_flip: bool,
    /// Disable source/target swap augmentation.
    #[arg(long)]
    pub no_swap: bool,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Resume from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for model.dhpc and metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Without a checkpoint: `random` or `identity` initialization.
    #[arg(long, default_value = "random")]
    pub init: String,
    #[arg(long, env = "DHPF_SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub init: InitArgs,
    /// Comma-separated PCK thresholds.
    #[arg(long)]
    pub alpha: Option<String>,
    /// img or bbox.
    #[arg(long)]
    pub basis: Option<String>,
    /// Untimed pairs before the timing pass.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Time with pyramids re-read from disk for every pair.
    #[arg(long)]
    pub time_from_disk: bool,
    /// Output directory for report.json, selection.csv and histogram.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub init: InitArgs,
    /// Output directory for `<src>__<trg>.json` dumps.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, env = "DHPF_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub keypoints: Option<usize>,
    /// Number of pairs in the checked batch.
    #[arg(long)]
    pub batch: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory; receives images/, pyramids/ and pairs.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Base images per category.
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub categories: Option<usize>,
    /// Warped pairs per base image.
    #[arg(long)]
    pub pairs_per_image: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub keypoints: Option<usize>,
    /// Comma-separated toy backbone channels per layer.
    #[arg(long)]
    pub channels: Option<String>,
    /// Comma-separated toy backbone strides per layer.
    #[arg(long)]
    pub strides: Option<String>,
    /// Use identity warps.
    #[arg(long)]
    pub identity: bool,
    /// Use thin-plate warps instead of affine ones.
    #[arg(long)]
    pub tps: bool,
    #[arg(long, env = "DHPF_SEED")]
    pub seed: Option<u64>,
}

/// Values from a `key = value` file; `#` starts a comment.
#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

const CONFIG_KEYS: &[&str] = &[
    "mu", "rho", "bins", "variant", "l1", "mode", "optimizer", "lr", "beta1", "beta2", "eps", "batch_size",
    "iterations", "seed", "flip", "swap", "log_every", "alpha", "basis", "warmup", "init", "pairs", "pyramids",
    "images",
];

impl ConfigFile {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key = value", n + 1))?;
            let key = k.trim().replace('-', "_");
            if !CONFIG_KEYS.contains(&key.as_str()) {
                bail!("config line {}: unknown key '{key}'", n + 1);
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config key '{key}': {e}")))
            .transpose()
    }

    /// CLI value if given, else the config value, else `default`.
    fn pick<T: FromStr>(&self, cli: Option<T>, key: &str, default: T) -> anyhow::Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match cli {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    fn pick_parsed<T: FromStr>(&self, cli: Option<&str>, key: &str, default: T) -> anyhow::Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match cli {
            Some(s) => s.parse::<T>().map_err(|e| anyhow!("--{}: {e}", key.replace('_', "-"))),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    fn path(&self, cli: &Option<PathBuf>, key: &str) -> Option<PathBuf> {
        cli.clone().or_else(|| self.values.get(key).map(PathBuf::from))
    }
}

fn pipeline_config(m: &ModelArgs, cfg: &ConfigFile) -> anyhow::Result<PipelineConfig> {
    let d = PipelineConfig::default();
    let c = PipelineConfig {
        rho: cfg.pick(m.rho, "rho", d.rho)?,
        mu: cfg.pick(m.mu, "mu", d.mu)?,
        hough: HoughConfig {
            bins_per_axis: cfg.pick(m.bins, "bins", d.hough.bins_per_axis)?,
            ..d.hough
        },
        variant: cfg.pick_parsed(m.variant.as_deref(), "variant", d.variant)?,
        l1_lambda: cfg.pick(m.l1, "l1", d.l1_lambda)?,
    };
    c.validate()?;
    Ok(c)
}

fn load_dataset(d: &DataArgs, cfg: &ConfigFile) -> anyhow::Result<PairDataset> {
    let pairs = cfg.path(&d.pairs, "pairs").ok_or_else(|| anyhow!("--pairs is required"))?;
    let dir = cfg.path(&d.pyramids, "pyramids").ok_or_else(|| anyhow!("--pyramids is required"))?;
    Ok(PairDataset::load(&pairs, &dir)?)
}

fn load_images(dir: &Path) -> anyhow::Result<Vec<RgbImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rgb"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .rgb images in {}", dir.display());
    }
    paths.iter().map(|p| Ok(load_raw_image(p)?)).collect()
}

fn model_for(init: &InitArgs, channels: &[usize], cfg: &ConfigFile) -> anyhow::Result<ModelParams> {
    if let Some(path) = &init.checkpoint {
        let m = load_checkpoint(path)?;
        if m.channels() != channels {
            bail!("checkpoint channels {:?} do not match the data's {:?}", m.channels(), channels);
        }
        return Ok(m);
    }
    let pc = pipeline_config(&init.model, cfg)?;
    let seed = cfg.pick(init.seed, "seed", 0)?;
    let kind: String = cfg.pick(None, "init", init.init.clone())?;
    let kind = if init.init != "random" { init.init.clone() } else { kind };
    Ok(match kind.as_str() {
        "random" => ModelParams::new(channels, pc, seed)?,
        "identity" => ModelParams::identity_friendly(channels, pc, seed)?,
        other => bail!("unknown --init '{other}' (random or identity)"),
    })
}

fn run_train(a: &TrainArgs, cfg: &ConfigFile) -> anyhow::Result<()> {
    let d = TrainConfig::default();
    let mode: Supervision = cfg.pick_parsed(a.mode.as_deref(), "mode", d.mode)?;
    let optimizer = OptimizerConfig {
        kind: cfg.pick_parsed(a.optimizer.as_deref(), "optimizer", OptimizerKind::Adam)?,
        lr: cfg.pick(a.lr, "lr", d.optimizer.lr)?,
        beta1: cfg.pick(None, "beta1", d.optimizer.beta1)?,
        beta2: cfg.pick(None, "beta2", d.optimizer.beta2)?,
        eps: cfg.pick(None, "eps", d.optimizer.eps)?,
    };
    let tc = TrainConfig {
        optimizer,
        batch_size: cfg.pick(a.batch_size, "batch_size", d.batch_size)?,
        iterations: cfg.pick(a.iterations, "iterations", d.iterations)?,
        seed: cfg.pick(a.seed, "seed", d.seed)?,
        mode,
        flip: !a.no_flip && cfg.pick(None, "flip", d.flip)?,
        swap: !a.no_swap && cfg.pick(None, "swap", d.swap)?,
        log_every: cfg.pick(a.log_every, "log_every", d.log_every)?,
    };
    tc.validate()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let dataset;
    let source;
    let (data, channels) = if mode == Supervision::SelfSupervised {
        let dir = cfg
            .path(&a.images, "images")
            .ok_or_else(|| anyhow!("self-supervised training needs --images"))?;
        let images = load_images(&dir)?;
        let backbone = ToyBackboneConfig::default();
        let channels = backbone.channels.clone();
        source = SyntheticSource {
            images,
            backbone,
            backbone_seed: 0,
            settings: SynthSettings::default(),
            keypoints: 16,
            tps: false,
        };
        (TrainData::Synthetic(&source), channels)
    } else {
        dataset = load_dataset(&a.data, cfg)?;
        let channels = dataset.channels().ok_or_else(|| anyhow!("dataset has no pyramids"))?;
        (TrainData::Pairs(&dataset), channels)
    };
    let params = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => ModelParams::new(&channels, pipeline_config(&a.model, cfg)?, tc.seed)?,
    };
    let model_path = a.out.join("model.dhpc");
    match train(params, data, &tc) {
        Ok(out) => {
            save_checkpoint(&model_path, &out.params)?;
            save_metrics_csv(a.out.join("metrics.csv"), &out.metrics)?;
            if let Some(last) = out.metrics.last() {
                println!("final loss {:.6}, layer frequencies {:?}", last.total_loss, last.layer_freq);
            }
            println!("wrote {}", model_path.display());
            Ok(())
        }
        Err(Error::Diverged { iteration, last_finite }) => {
            save_checkpoint(&model_path, &last_finite)?;
            bail!(
                "training diverged at iteration {iteration}; last finite parameters written to {}",
                model_path.display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

fn parse_list<T: FromStr>(s: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| anyhow!("bad list entry '{x}': {e}")))
        .collect()
}

fn run_eval(a: &EvalArgs, cfg: &ConfigFile) -> anyhow::Result<()> {
    let ds = load_dataset(&a.data, cfg)?;
    let channels = ds.channels().ok_or_else(|| anyhow!("dataset has no pyramids"))?;
    let params = model_for(&a.init, &channels, cfg)?;
    let d = EvalConfig::default();
    let alphas = match a.alpha.as_deref().map(str::to_string).or_else(|| cfg.values.get("alpha").cloned()) {
        Some(s) => parse_list(&s)?,
        None => d.alphas,
    };
    let ec = EvalConfig {
        alphas,
        basis: cfg.pick_parsed(a.basis.as_deref(), "basis", PckBasis::Img)?,
    };
    let mut report = evaluate(&params, &ds, &ec)?;
    let warmup = cfg.pick(a.warmup, "warmup", 2)?;
    let source = if a.time_from_disk {
        TimingSource::Disk {
            pairs: &ds.pairs,
            dir: a.data.pyramids.as_deref().unwrap_or(Path::new(".")),
        }
    } else {
        TimingSource::Preloaded(&ds)
    };
    report.mean_pair_ms = time_pairs(&params, source, warmup)?;
    std::fs::create_dir_all(&a.out)?;
    report.save_json(a.out.join("report.json"))?;
    let stats = report.selection_stats();
    write_atomic(&a.out.join("selection.csv"), selection_csv(&stats)?.as_bytes())?;
    write_atomic(&a.out.join("histogram.csv"), histogram_csv(&stats).as_bytes())?;
    for (alpha, v) in &report.pck_per_alpha {
        println!("PCK@{alpha}: {v:.4}");
    }
    println!("mean selected layers {:.2}, {:.3} ms/pair", report.mean_selected_layers, report.mean_pair_ms);
    Ok(())
}

fn run_match(a: &MatchArgs, cfg: &ConfigFile) -> anyhow::Result<()> {
    let ds = load_dataset(&a.data, cfg)?;
    let channels = ds.channels().ok_or_else(|| anyhow!("dataset has no pyramids"))?;
    let params = model_for(&a.init, &channels, cfg)?;
    std::fs::create_dir_all(&a.out)?;
    for ann in &ds.pairs {
        let dump = match_dump(&params, ds.pyramid(&ann.src_id)?, ds.pyramid(&ann.trg_id)?, ann)?;
        let path = a.out.join(format!("{}__{}.json", ann.src_id, ann.trg_id));
        write_atomic(&path, serde_json::to_string(&dump)?.as_bytes())?;
    }
    println!("wrote {} match dumps to {}", ds.pairs.len(), a.out.display());
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs, cfg: &ConfigFile) -> anyhow::Result<bool> {
    let d = GradcheckConfig::default();
    let pc = pipeline_config(&a.model, cfg)?;
    let gc = GradcheckConfig {
        layers: a.layers.unwrap_or(d.layers),
        channels: a.channels.unwrap_or(d.channels),
        pairs: a.batch.unwrap_or(d.pairs),
        keypoints: a.keypoints.unwrap_or(d.keypoints),
        seed: cfg.pick(a.seed, "seed", d.seed)?,
        pipeline: pc,
        ..d
    };
    let report = gradcheck(&gc)?;
    print!("{}", report.table());
    let ok = report.passed();
    println!(
        "{}: max relative error {:.3e} (tolerance {:.0e})",
        if ok { "PASS" } else { "FAIL" },
        report.max_rel_err,
        report.tolerance
    );
    Ok(ok)
}

fn run_synth(a: &SynthArgs, cfg: &ConfigFile) -> anyhow::Result<()> {
    let d = SynthDatasetConfig::default();
    let mut backbone = ToyBackboneConfig::default();
    if let Some(s) = &a.channels {
        backbone.channels = parse_list(s)?;
    }
    if let Some(s) = &a.strides {
        backbone.strides = parse_list(s)?;
    }
    let sc = SynthDatasetConfig {
        categories: a.categories.unwrap_or(d.categories),
        images_per_category: a.images.unwrap_or(d.images_per_category),
        pairs_per_image: a.pairs_per_image.unwrap_or(d.pairs_per_image),
        size: a.size.unwrap_or(d.size),
        keypoints: a.keypoints.unwrap_or(d.keypoints),
        warp: match (a.identity, a.tps) {
            (true, true) => bail!("--identity and --tps are exclusive"),
            (true, false) => WarpKind::Identity,
            (false, true) => WarpKind::Tps,
            (false, false) => WarpKind::Affine,
        },
        backbone,
        seed: cfg.pick(a.seed, "seed", d.seed)?,
        ..d
    };
    let data = synth_dataset(&sc)?;
    let img_dir = a.out.join("images");
    let pyr_dir = a.out.join("pyramids");
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&pyr_dir)?;
    for (id, img) in &data.images {
        save_raw_image(img_dir.join(format!("{id}.rgb")), img)?;
    }
    for (id, p) in &data.pyramids {
        save_pyramid(pyr_dir.join(format!("{id}.dhpf")), p)?;
    }
    save_pair_list(a.out.join("pairs.json"), &data.pairs)?;
    println!("wrote {} pairs to {}", data.pairs.len(), a.out.display());
    Ok(())
}

/// Runs a parsed command; `Ok(false)` marks a completed run whose check failed.
pub fn run(cli: &Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match &cli.command {
        Command::Train(a) => run_train(a, &cfg).map(|_| true),
        Command::Eval(a) => run_eval(a, &cfg).map(|_| true),
        Command::Match(a) => run_match(a, &cfg).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a, &cfg),
        Command::Synth(a) => run_synth(a, &cfg).map(|_| true),
    }
}
