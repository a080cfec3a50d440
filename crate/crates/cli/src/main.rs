use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use polymatch::formats::{self, Checkpoint, PipelineConfig};
use polymatch::pipeline::{self, Dataset};
use polymatch::svg;
use polymatch_core::miner::{self, MinerConfig, PairManifest};
use polymatch_core::simulator::{self, GroundTruth, NUM_CLASSES};
use polymatch_core::ssl::{self, Method, Regime};

/// Footprint projection, polygon matching and self-supervised training
/// over simulated robot trajectories.
#[derive(Parser)]
#[command(name = "polymatch", version, max_term_width = 100)]
struct Cli {
    /// Config file (TOML or JSON); defaults to $POLYMATCH_CONFIG when set.
    #[arg(long, global = true, env = "POLYMATCH_CONFIG")]
    config: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes: observations, ground truth and view features.
    Simulate(SimulateArgs),
    /// Project bounding boxes to floor footprints and mine positive pairs.
    Match(MatchArgs),
    /// Sweep the max-depth cutoff and report pair count, precision, recall.
    SweepDepth(SweepDepthArgs),
    /// Pretrain one encoder and write a checkpoint.
    Train(TrainArgs),
    /// Run the method x positives grid and print the accuracy tables.
    Eval(EvalArgs),
    /// Export a bird's-eye SVG map of trajectory, footprints and pairs.
    Viz(VizArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of scenes to generate.
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// First scene index. A held-out split should reuse the seed (the
    /// seed fixes the feature synthesis, so features transfer across
    /// splits) but start past the training scenes.
    #[arg(long, default_value_t = 0)]
    scene_offset: usize,
    /// First instance id; keep splits disjoint so no object leaks
    /// between them.
    #[arg(long, default_value_t = 0)]
    instance_base: u32,
    /// Output directory for observations.jsonl, groundtruth.jsonl, features.bin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatchArgs {
    /// Observations JSONL.
    obs: PathBuf,
    /// Footprint distance cutoff, meters.
    #[arg(long)]
    max_depth: Option<f64>,
    /// Minimum overlap area, square meters.
    #[arg(long)]
    min_overlap: Option<f64>,
    /// Minimum intersection-over-union; 0 disables.
    #[arg(long)]
    min_iou: Option<f64>,
    /// Output manifest JSONL.
    #[arg(long)]
    out: PathBuf,
    /// Optional rejection log JSONL.
    #[arg(long)]
    rejections: Option<PathBuf>,
}

#[derive(Args)]
struct SweepDepthArgs {
    /// Observations JSONL.
    obs: PathBuf,
    /// Ground-truth JSONL.
    gt: PathBuf,
    /// Depth range as start:end:step, meters.
    #[arg(long, default_value = "0.5:1.0:0.1")]
    depths: String,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also train and probe at each depth (needs --features).
    #[arg(long)]
    train: bool,
    /// Feature tensor file, required with --train.
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Feature tensor file.
    #[arg(long)]
    features: PathBuf,
    /// Pair manifest JSONL; required with --positives polygon.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// simclr | simsiam | triplet
    #[arg(long)]
    method: String,
    /// standard | polygon
    #[arg(long)]
    positives: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoint.json and loss_curve.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory from `simulate` holding the training scenes.
    #[arg(long)]
    train_dir: PathBuf,
    /// Directory from `simulate` holding the held-out scenes.
    #[arg(long)]
    test_dir: PathBuf,
    /// Pair manifest JSONL mined from the training observations.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated subset of simclr,simsiam,triplet.
    #[arg(long, default_value = "simclr,simsiam,triplet")]
    methods: String,
    /// Comma-separated subset of standard,polygon.
    #[arg(long, default_value = "standard,polygon")]
    positives: String,
    /// Comma-separated label fractions in (0, 1].
    #[arg(long)]
    fractions: Option<String>,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    /// Optional JSON report output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    /// Observations JSONL.
    obs: PathBuf,
    /// Optional manifest JSONL for pair links.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Optional ground-truth JSONL for instance colors.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    max_depth: Option<f64>,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
}

/// Usage and config problems exit 2, runtime failures exit 1.
enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn usage(e: anyhow::Error) -> CliError {
    CliError::Usage(e)
}

fn runtime(e: anyhow::Error) -> CliError {
    CliError::Runtime(e)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(path) => formats::load_config(path),
        None => Ok(PipelineConfig::default()),
    }
}

fn run(cli: &Cli, config: &PipelineConfig) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(usage(anyhow!("--threads must be at least 1")));
    }
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args, config),
        Command::Match(args) => cmd_match(args, config),
        Command::SweepDepth(args) => cmd_sweep_depth(args, config),
        Command::Train(args) => cmd_train(args, config),
        Command::Eval(args) => cmd_eval(args, config, cli.threads),
        Command::Viz(args) => cmd_viz(args, config),
    }
}

fn parse_method(s: &str) -> Result<Method> {
    match s {
        "simclr" => Ok(Method::Simclr),
        "simsiam" => Ok(Method::Simsiam),
        "triplet" => Ok(Method::Triplet),
        other => bail!("unknown method `{other}` (expected simclr, simsiam or triplet)"),
    }
}

fn parse_regime(s: &str) -> Result<Regime> {
    match s {
        "standard" => Ok(Regime::Standard),
        "polygon" => Ok(Regime::Polygon),
        other => bail!("unknown positives `{other}` (expected standard or polygon)"),
    }
}

fn parse_list<T>(s: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(parse)
        .collect()
}

// ---------------------------------------------------------------------------

fn cmd_simulate(args: &SimulateArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let mut ds_cfg = config.dataset.clone();
    if let Some(seed) = args.seed {
        ds_cfg.seed = seed;
    }
    let scenes = args.scenes.unwrap_or(ds_cfg.train_scenes);
    if scenes == 0 {
        return Err(usage(anyhow!("--scenes must be at least 1")));
    }

    let mut scene_index = args.scene_offset;
    let mut next_instance = args.instance_base;
    let mut observations = Vec::new();
    let mut gt = GroundTruth::default();
    pipeline::collect_scenes(&ds_cfg, scenes, &mut scene_index, &mut next_instance, &mut observations, &mut gt)
        .map_err(runtime)?;
    pipeline::enforce_view_range(
        &mut observations,
        &mut gt,
        ds_cfg.min_views_per_object,
        ds_cfg.max_views_per_object,
    );
    let features = simulator::synth_views(&gt, &observations, &ds_cfg.synth, ds_cfg.seed);

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("create {}", args.out.display()))
        .map_err(runtime)?;
    formats::write_observations(&args.out.join("observations.jsonl"), &observations).map_err(runtime)?;
    formats::write_ground_truth(&args.out.join("groundtruth.jsonl"), &gt).map_err(runtime)?;
    formats::write_features(&args.out.join("features.bin"), &features).map_err(runtime)?;

    let mut per_class = [0usize; NUM_CLASSES];
    for &(_, class) in gt.labels.values() {
        per_class[class as usize] += 1;
    }
    println!("scenes {scenes} detections {} seed {}", observations.len(), ds_cfg.seed);
    for (c, n) in per_class.iter().enumerate() {
        println!("class {c}: {n} detections");
    }
    Ok(())
}

fn miner_config(config: &PipelineConfig, max_depth: Option<f64>, min_overlap: Option<f64>, min_iou: Option<f64>) -> Result<MinerConfig> {
    let mut cfg = config.dataset.miner.clone();
    if let Some(v) = max_depth {
        cfg.max_depth = v;
    }
    if let Some(v) = min_overlap {
        cfg.min_overlap_area = v;
    }
    if let Some(v) = min_iou {
        cfg.min_iou = v;
    }
    cfg.validate().map_err(|e| anyhow!("bad matcher settings: {e}"))?;
    Ok(cfg)
}

fn cmd_match(args: &MatchArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let cfg = miner_config(config, args.max_depth, args.min_overlap, args.min_iou).map_err(usage)?;
    let observations = formats::read_observations(&args.obs).map_err(usage)?;
    let batch = miner::build_footprints(&observations, &cfg);
    let manifest = miner::mine_pairs(&batch.footprints, &cfg);
    formats::write_manifest(&args.out, &manifest).map_err(runtime)?;
    if let Some(path) = &args.rejections {
        let mut lines = String::new();
        for r in &batch.rejections {
            lines.push_str(&serde_json::to_string(r).map_err(|e| runtime(e.into()))?);
            lines.push('\n');
        }
        std::fs::write(path, lines).map_err(|e| runtime(e.into()))?;
    }
    let pairs = manifest.pair_count();
    println!(
        "footprints accepted {} rejected {} pairs {}",
        batch.footprints.len(),
        batch.rejections.len(),
        pairs
    );
    if pairs == 0 {
        eprintln!("warning: no pairs mined; manifest is empty");
    }
    Ok(())
}

fn parse_depth_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, end, step] = parts.as_slice() else {
        bail!("depth range must be start:end:step, got `{spec}`");
    };
    let (start, end, step): (f64, f64, f64) = (
        start.parse().context("bad range start")?,
        end.parse().context("bad range end")?,
        step.parse().context("bad range step")?,
    );
    if !(step > 0.0 && start > 0.0 && end >= start) {
        bail!("depth range must satisfy 0 < start <= end with positive step");
    }
    let mut depths = Vec::new();
    let mut i = 0usize;
    loop {
        let d = start + step * i as f64;
        if d > end + 1e-9 {
            break;
        }
        depths.push((d * 1e9).round() / 1e9);
        i += 1;
    }
    Ok(depths)
}

fn cmd_sweep_depth(args: &SweepDepthArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let depths = parse_depth_range(&args.depths).map_err(usage)?;
    if args.train && args.features.is_none() {
        return Err(usage(anyhow!("--train requires --features")));
    }
    let observations = formats::read_observations(&args.obs).map_err(usage)?;
    let gt = formats::read_ground_truth(&args.gt).map_err(usage)?;
    let features = match &args.features {
        Some(p) => Some(formats::read_features(p).map_err(usage)?),
        None => None,
    };

    let mut csv = String::from(if args.train {
        "depth_m,pairs,precision,recall,probe_top1\n"
    } else {
        "depth_m,pairs,precision,recall\n"
    });
    for &depth in &depths {
        let mut cfg = config.dataset.miner.clone();
        cfg.max_depth = depth;
        let batch = miner::build_footprints(&observations, &cfg);
        let manifest = miner::mine_pairs(&batch.footprints, &cfg);
        let score = simulator::score_manifest(&manifest, &gt);
        let mut row = format!(
            "{depth},{},{},{}",
            manifest.pair_count(),
            score.precision,
            score.recall
        );
        if args.train {
            let top1 = probe_at_depth(features.as_ref().unwrap(), &gt, &manifest, config).map_err(runtime)?;
            row.push_str(&format!(",{top1}"));
        }
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    std::fs::write(&args.out, csv).map_err(|e| runtime(e.into()))?;
    Ok(())
}

/// Quick quality signal for the sweep: polygon-positive pretraining on
/// the mined manifest, then a probe on a stratified tenth of the same
/// features, scored on all of them.
fn probe_at_depth(
    features: &BTreeMap<miner::BoxKey, Vec<f64>>,
    gt: &GroundTruth,
    manifest: &PairManifest,
    config: &PipelineConfig,
) -> Result<f64> {
    let labels: BTreeMap<miner::BoxKey, u8> = features
        .keys()
        .map(|k| (k.clone(), gt.labels[k].1))
        .collect();
    let dataset = Dataset {
        train_features: features.clone(),
        train_labels: labels.clone(),
        test_features: features.clone(),
        test_labels: labels,
        manifest: manifest.clone(),
        observations: Vec::new(),
        ground_truth: gt.clone(),
    };
    let mut probe_cfg = config.probe.clone();
    probe_cfg.label_fractions = vec![0.10];
    let cell = pipeline::run_cell(&dataset, config.train.method, Regime::Polygon, &config.train, &probe_cfg)?;
    Ok(cell.probes[0].1)
}

fn cmd_train(args: &TrainArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let method = parse_method(&args.method).map_err(usage)?;
    let positives = parse_regime(&args.positives).map_err(usage)?;
    if positives == Regime::Polygon && args.manifest.is_none() {
        return Err(usage(anyhow!("--positives polygon requires --manifest")));
    }
    let features = formats::read_features(&args.features).map_err(usage)?;
    let manifest = match &args.manifest {
        Some(p) => formats::read_manifest(p).map_err(usage)?,
        None => PairManifest::default(),
    };

    let mut cfg = config.train.clone();
    cfg.method = method;
    cfg.positives = positives;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let result = ssl::train(&features, &manifest, &cfg)
        .map_err(|e| runtime(anyhow!("training failed: {e}")))?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("create {}", args.out.display()))
        .map_err(runtime)?;
    let ckpt = Checkpoint {
        version: 1,
        seed: cfg.seed,
        config: cfg,
        encoder: result.encoder,
    };
    formats::write_checkpoint(&args.out.join("checkpoint.json"), &ckpt).map_err(runtime)?;
    formats::write_loss_curve(&args.out.join("loss_curve.csv"), &result.loss_curve).map_err(runtime)?;
    println!(
        "trained {method} {positives} seed {} final loss {:.6}",
        ckpt.seed,
        result.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn load_split(dir: &Path) -> Result<(BTreeMap<miner::BoxKey, Vec<f64>>, BTreeMap<miner::BoxKey, u8>, GroundTruth)> {
    let features = formats::read_features(&dir.join("features.bin"))?;
    let gt = formats::read_ground_truth(&dir.join("groundtruth.jsonl"))?;
    let labels = features
        .keys()
        .map(|k| {
            gt.labels
                .get(k)
                .map(|&(_, class)| (k.clone(), class))
                .ok_or_else(|| anyhow!("feature key {k:?} missing from ground truth"))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok((features, labels, gt))
}

fn cmd_eval(args: &EvalArgs, config: &PipelineConfig, threads: usize) -> Result<(), CliError> {
    let methods = parse_list(&args.methods, parse_method).map_err(usage)?;
    let regimes = parse_list(&args.positives, parse_regime).map_err(usage)?;
    let seeds = parse_list(&args.seeds, |s| s.parse::<u64>().context("bad seed")).map_err(usage)?;
    if methods.is_empty() || regimes.is_empty() || seeds.is_empty() {
        return Err(usage(anyhow!("methods, positives and seeds must be non-empty")));
    }
    if regimes.contains(&Regime::Polygon) && args.manifest.is_none() {
        return Err(usage(anyhow!("--positives polygon requires --manifest")));
    }
    let mut probe_cfg = config.probe.clone();
    if let Some(spec) = &args.fractions {
        probe_cfg.label_fractions =
            parse_list(spec, |s| s.parse::<f64>().context("bad fraction")).map_err(usage)?;
        if probe_cfg.label_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(usage(anyhow!("fractions must lie in (0, 1]")));
        }
    }

    let (train_features, train_labels, ground_truth) = load_split(&args.train_dir).map_err(usage)?;
    let (test_features, test_labels, _) = load_split(&args.test_dir).map_err(usage)?;
    let manifest = match &args.manifest {
        Some(p) => formats::read_manifest(p).map_err(usage)?,
        None => PairManifest::default(),
    };
    let dataset = Dataset {
        train_features,
        train_labels,
        test_features,
        test_labels,
        manifest,
        observations: Vec::new(),
        ground_truth,
    };

    let report = pipeline::run_grid_threaded(
        &dataset,
        &methods,
        &regimes,
        &seeds,
        &config.train,
        &probe_cfg,
        threads,
    )
    .map_err(runtime)?;
    print!("{}", report.format_table(&probe_cfg.label_fractions));
    if let Some(path) = &args.out {
        let json = serde_json::to_string(&report).map_err(|e| runtime(e.into()))?;
        std::fs::write(path, json + "\n").map_err(|e| runtime(e.into()))?;
    }
    Ok(())
}

fn cmd_viz(args: &VizArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let observations = formats::read_observations(&args.obs).map_err(usage)?;
    let manifest = match &args.manifest {
        Some(p) => Some(formats::read_manifest(p).map_err(usage)?),
        None => None,
    };
    let gt = match &args.gt {
        Some(p) => Some(formats::read_ground_truth(p).map_err(usage)?),
        None => None,
    };
    let cfg = miner_config(config, args.max_depth, None, None).map_err(usage)?;
    let batch = miner::build_footprints(&observations, &cfg);
    let map = svg::render_map(&observations, &batch, manifest.as_ref(), gt.as_ref());
    std::fs::write(&args.out, map).map_err(|e| runtime(e.into()))?;
    println!(
        "wrote {} ({} footprints, {} trajectory observations)",
        args.out.display(),
        batch.footprints.len(),
        observations.len()
    );
    Ok(())
}
