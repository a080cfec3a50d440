//! End-to-end orchestration: reference dataset construction from
//! simulated scenes, the train/probe grid over methods, regimes, label
//! fractions and seeds, and report assembly.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use polymatch_core::eval::{self, ProbeConfig};
use polymatch_core::miner::{self, BoxKey, MinerConfig, Observation, PairManifest};
use polymatch_core::simulator::{
    self, FeatureSynth, GroundTruth, SceneParams, SceneSpec, NUM_CLASSES,
};
use polymatch_core::ssl::{self, FeatureMap, Method, Regime, TrainConfig};

/// Everything the trainer and prober need, split into train scenes and
/// held-out test scenes (distinct agents and seeds).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train_features: FeatureMap,
    pub train_labels: BTreeMap<BoxKey, u8>,
    pub test_features: FeatureMap,
    pub test_labels: BTreeMap<BoxKey, u8>,
    pub manifest: PairManifest,
    pub observations: Vec<Observation>,
    pub ground_truth: GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneParams,
    pub miner: MinerConfig,
    pub synth: FeatureSynth,
    /// Objects detected fewer times than this are dropped entirely.
    pub min_views_per_object: usize,
    /// Extra detections of one object beyond this are discarded, oldest
    /// kept first. Zero disables the cap.
    pub max_views_per_object: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 1,
            train_scenes: 16,
            test_scenes: 8,
            scene: SceneParams::default(),
            miner: MinerConfig::default(),
            synth: FeatureSynth::default(),
            min_views_per_object: 3,
            max_views_per_object: 0,
        }
    }
}

fn labels_of(gt: &GroundTruth, features: &FeatureMap) -> BTreeMap<BoxKey, u8> {
    features
        .keys()
        .map(|k| (k.clone(), gt.labels[k].1))
        .collect()
}

/// Simulate train and test scenes, synthesize view features, and mine
/// the train manifest.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let synth = cfg.synth.clone();
    let mut next_instance = 0u32;
    let mut scene_index = 0usize;
    let mut train_obs = Vec::new();
    let mut train_gt = GroundTruth::default();
    collect_scenes(cfg, cfg.train_scenes, &mut scene_index, &mut next_instance, &mut train_obs, &mut train_gt)?;
    let mut test_obs = Vec::new();
    let mut test_gt = GroundTruth::default();
    collect_scenes(cfg, cfg.test_scenes, &mut scene_index, &mut next_instance, &mut test_obs, &mut test_gt)?;
    enforce_view_range(&mut train_obs, &mut train_gt, cfg.min_views_per_object, cfg.max_views_per_object);
    enforce_view_range(&mut test_obs, &mut test_gt, cfg.min_views_per_object, cfg.max_views_per_object);

    let train_features = simulator::synth_views(&train_gt, &train_obs, &synth, cfg.seed);
    let test_features = simulator::synth_views(&test_gt, &test_obs, &synth, cfg.seed);
    let batch = miner::build_footprints(&train_obs, &cfg.miner);
    let manifest = miner::mine_pairs(&batch.footprints, &cfg.miner);

    Ok(Dataset {
        train_labels: labels_of(&train_gt, &train_features),
        test_labels: labels_of(&test_gt, &test_features),
        train_features,
        test_features,
        manifest,
        observations: train_obs,
        ground_truth: train_gt,
    })
}

/// Draw scene indices until `want` scenes each yield at least one
/// detection; scenes whose trajectory never sees an object are skipped,
/// deterministically.
pub fn collect_scenes(
    cfg: &DatasetConfig,
    want: usize,
    scene_index: &mut usize,
    next_instance: &mut u32,
    obs_out: &mut Vec<Observation>,
    gt_out: &mut GroundTruth,
) -> Result<()> {
    let mut got = 0usize;
    let mut attempts = 0usize;
    while got < want {
        if attempts > 10 * want + 20 {
            bail!("too many empty scenes; check scene parameters");
        }
        attempts += 1;
        let spec = SceneSpec::sample(*scene_index, &cfg.scene, cfg.seed, next_instance);
        *scene_index += 1;
        match simulator::generate_scene(&spec) {
            Ok((obs, gt)) => {
                obs_out.extend(obs);
                gt_out.labels.extend(gt.labels);
                gt_out.positions.extend(gt.positions);
                got += 1;
            }
            Err(simulator::SimulatorError::EmptyScene) => continue,
        }
    }
    Ok(())
}

/// Keep between `min` and `max` views of each object: extra views are
/// dropped newest-first, and objects left with fewer than `min` views
/// are removed along with their labels. `max == 0` disables the cap.
pub fn enforce_view_range(obs: &mut Vec<Observation>, gt: &mut GroundTruth, min: usize, max: usize) {
    let max = if max == 0 { usize::MAX } else { max };
    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    // observations arrive in trajectory order, so truncation keeps the
    // earliest views
    obs.retain(|o| {
        let key = (o.image_id.clone(), o.box_id);
        let (inst, _) = gt.labels[&key];
        let n = seen.entry(inst).or_insert(0);
        if *n >= max {
            gt.labels.remove(&key);
            return false;
        }
        *n += 1;
        true
    });
    let keep: std::collections::BTreeSet<u32> = seen
        .iter()
        .filter(|(_, &n)| n >= min)
        .map(|(&inst, _)| inst)
        .collect();
    obs.retain(|o| {
        let key = (o.image_id.clone(), o.box_id);
        let (inst, _) = gt.labels[&key];
        if keep.contains(&inst) {
            true
        } else {
            gt.labels.remove(&key);
            false
        }
    });
    gt.positions.retain(|inst, _| keep.contains(inst));
}

/// One grid cell: SSL pretraining followed by linear probes at each
/// label fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub regime: Regime,
    pub seed: u64,
    /// (fraction, top1 %, balanced top1 %)
    pub probes: Vec<(f64, f64, f64)>,
}

pub fn run_cell(
    dataset: &Dataset,
    method: Method,
    regime: Regime,
    train_cfg: &TrainConfig,
    probe_cfg: &ProbeConfig,
) -> Result<CellResult> {
    let mut cfg = train_cfg.clone();
    cfg.method = method;
    cfg.positives = regime;
    let trained = ssl::train(&dataset.train_features, &dataset.manifest, &cfg)
        .map_err(|e| anyhow::anyhow!("training failed: {e}"))?;
    let enc = &trained.encoder;

    // frozen features for probe train and test sets
    let keys: Vec<&BoxKey> = dataset.train_features.keys().collect();
    let feats: Vec<Vec<f64>> = keys.iter().map(|k| enc.features(&dataset.train_features[*k])).collect();
    let labels: Vec<u8> = keys.iter().map(|k| dataset.train_labels[*k]).collect();
    let test_feats: Vec<Vec<f64>> = dataset.test_features.values().map(|x| enc.features(x)).collect();
    let test_labels: Vec<u8> = dataset.test_features.keys().map(|k| dataset.test_labels[k]).collect();

    let mut probes = Vec::new();
    for &fraction in &probe_cfg.label_fractions {
        let idx = eval::stratified_subset(&labels, fraction, probe_cfg.seed)
            .map_err(|e| anyhow::anyhow!("stratified subset: {e}"))?;
        let sub_feats: Vec<Vec<f64>> = idx.iter().map(|&i| feats[i].clone()).collect();
        let sub_labels: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let probe = eval::train_probe(&sub_feats, &sub_labels, NUM_CLASSES, probe_cfg)
            .map_err(|e| anyhow::anyhow!("probe: {e}"))?;
        let preds = eval::predict(&probe, &test_feats);
        let m = eval::compute_metrics(&preds, &test_labels, NUM_CLASSES)
            .map_err(|e| anyhow::anyhow!("metrics: {e}"))?;
        probes.push((fraction, m.top1, m.balanced_top1));
    }
    Ok(CellResult {
        method,
        regime,
        seed: cfg.seed,
        probes,
    })
}

/// Full method x regime x seed grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<CellResult>,
}

impl EvalReport {
    /// Mean (top1, balanced) over seeds for one (method, regime, fraction).
    pub fn mean(&self, method: Method, regime: Regime, fraction: f64) -> Option<(f64, f64)> {
        let mut top = 0.0;
        let mut bal = 0.0;
        let mut n = 0usize;
        for cell in &self.cells {
            if cell.method != method || cell.regime != regime {
                continue;
            }
            for &(f, t, b) in &cell.probes {
                if (f - fraction).abs() < 1e-12 {
                    top += t;
                    bal += b;
                    n += 1;
                }
            }
        }
        if n == 0 {
            None
        } else {
            Some((top / n as f64, bal / n as f64))
        }
    }

    /// Text table in the two-table layout: rows method x regime, columns
    /// label fractions.
    pub fn format_table(&self, fractions: &[f64]) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for (title, pick) in [("Top-1 Accuracy", 0usize), ("Balanced Top-1 Accuracy", 1)] {
            writeln!(out, "== {title} ==").unwrap();
            write!(out, "{:<10}{:<18}", "Method", "Positives").unwrap();
            for f in fractions {
                write!(out, "{:>8}", format!("{:.0}%", f * 100.0)).unwrap();
            }
            writeln!(out).unwrap();
            for method in [Method::Simclr, Method::Simsiam, Method::Triplet] {
                for regime in [Regime::Standard, Regime::Polygon] {
                    let regime_name = match regime {
                        Regime::Standard => "Standard",
                        Regime::Polygon => "Polygon Matching",
                    };
                    write!(out, "{:<10}{:<18}", method.to_string(), regime_name).unwrap();
                    for &f in fractions {
                        match self.mean(method, regime, f) {
                            Some(pair) => {
                                let v = if pick == 0 { pair.0 } else { pair.1 };
                                write!(out, "{v:>8.1}").unwrap();
                            }
                            None => write!(out, "{:>8}", "-").unwrap(),
                        }
                    }
                    writeln!(out).unwrap();
                }
            }
            writeln!(out).unwrap();
        }
        out
    }
}

pub fn run_grid(
    dataset: &Dataset,
    methods: &[Method],
    regimes: &[Regime],
    seeds: &[u64],
    train_cfg: &TrainConfig,
    probe_cfg: &ProbeConfig,
) -> Result<EvalReport> {
    run_grid_threaded(dataset, methods, regimes, seeds, train_cfg, probe_cfg, 1)
}

/// Grid over method x regime x seed, at most `threads` cells in flight.
/// Cells are independent, so the report is identical for any thread
/// count; output order is fixed.
#[allow(clippy::too_many_arguments)]
pub fn run_grid_threaded(
    dataset: &Dataset,
    methods: &[Method],
    regimes: &[Regime],
    seeds: &[u64],
    train_cfg: &TrainConfig,
    probe_cfg: &ProbeConfig,
    threads: usize,
) -> Result<EvalReport> {
    let mut jobs = Vec::new();
    for &method in methods {
        for &regime in regimes {
            for &seed in seeds {
                jobs.push((method, regime, seed));
            }
        }
    }
    let threads = threads.max(1).min(jobs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<CellResult>>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&(method, regime, seed)) = jobs.get(i) else {
                    return;
                };
                let mut cfg = train_cfg.clone();
                cfg.seed = seed;
                let res = run_cell(dataset, method, regime, &cfg, probe_cfg);
                *slots[i].lock().unwrap() = Some(res);
            });
        }
    });
    let mut report = EvalReport::default();
    for slot in slots {
        report.cells.push(slot.into_inner().unwrap().expect("worker finished")?);
    }
    Ok(report)
}
