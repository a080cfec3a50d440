//! On-disk interchange: observations / ground-truth / manifest JSONL,
//! the feature tensor binary, training checkpoints, loss-curve CSV and
//! the pipeline configuration file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use polymatch_core::eval::ProbeConfig;
use polymatch_core::geometry::{CameraExtrinsics, CameraIntrinsics, PixelBox, RobotPose};
use polymatch_core::miner::{BoxKey, Candidate, Observation, PairManifest};
use polymatch_core::simulator::GroundTruth;
use polymatch_core::ssl::{EncoderStack, Method, Regime, TrainConfig};

use crate::pipeline::DatasetConfig;

// ---------------------------------------------------------------------------
// observations JSONL

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WirePose {
    x_m: f64,
    y_m: f64,
    heading_rad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireCamera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(default)]
    skew: f64,
    #[serde(rename = "mount_R")]
    mount_r: [f64; 9],
    mount_t: [f64; 3],
    height_m: f64,
}

/// One detection per line; geometry invariants are enforced at ingest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationRecord {
    agent_id: String,
    episode_id: String,
    image_id: String,
    box_id: u32,
    timestamp_s: f64,
    /// [xmin, ymin, xmax, ymax] pixels
    bbox: [f64; 4],
    pose: WirePose,
    camera: WireCamera,
}

impl From<&Observation> for ObservationRecord {
    fn from(o: &Observation) -> Self {
        let r = &o.extrinsics.rotation;
        ObservationRecord {
            agent_id: o.agent_id.clone(),
            episode_id: o.episode_id.clone(),
            image_id: o.image_id.clone(),
            box_id: o.box_id,
            timestamp_s: o.timestamp_s,
            bbox: [o.bbox.xmin, o.bbox.ymin, o.bbox.xmax, o.bbox.ymax],
            pose: WirePose {
                x_m: o.pose.x,
                y_m: o.pose.y,
                heading_rad: o.pose.heading,
            },
            camera: WireCamera {
                fx: o.intrinsics.fx,
                fy: o.intrinsics.fy,
                cx: o.intrinsics.cx,
                cy: o.intrinsics.cy,
                skew: o.intrinsics.skew,
                mount_r: [
                    r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1],
                    r[2][2],
                ],
                mount_t: o.extrinsics.translation,
                height_m: o.pose.camera_height,
            },
        }
    }
}

impl ObservationRecord {
    fn into_observation(self) -> Result<Observation> {
        let [xmin, ymin, xmax, ymax] = self.bbox;
        if !(xmin < xmax && ymin < ymax) {
            bail!("degenerate bbox [{xmin}, {ymin}, {xmax}, {ymax}]");
        }
        let intrinsics = CameraIntrinsics {
            fx: self.camera.fx,
            fy: self.camera.fy,
            cx: self.camera.cx,
            cy: self.camera.cy,
            skew: self.camera.skew,
        };
        intrinsics
            .validate()
            .map_err(|e| anyhow::anyhow!("bad intrinsics: {e}"))?;
        let m = &self.camera.mount_r;
        let extrinsics = CameraExtrinsics {
            rotation: [
                [m[0], m[1], m[2]],
                [m[3], m[4], m[5]],
                [m[6], m[7], m[8]],
            ],
            translation: self.camera.mount_t,
        };
        extrinsics
            .validate()
            .map_err(|e| anyhow::anyhow!("bad mount rotation: {e}"))?;
        if self.camera.height_m <= 0.0 {
            bail!("camera height must be positive, got {}", self.camera.height_m);
        }
        Ok(Observation {
            agent_id: self.agent_id,
            episode_id: self.episode_id,
            image_id: self.image_id,
            box_id: self.box_id,
            timestamp_s: self.timestamp_s,
            bbox: PixelBox::new(xmin, ymin, xmax, ymax),
            pose: RobotPose::new(
                self.pose.x_m,
                self.pose.y_m,
                self.pose.heading_rad,
                self.camera.height_m,
            ),
            intrinsics,
            extrinsics,
        })
    }
}

pub fn write_observations(path: &Path, observations: &[Observation]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for obs in observations {
        serde_json::to_writer(&mut w, &ObservationRecord::from(obs))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_observations(path: &Path) -> Result<Vec<Observation>> {
    let r = BufReader::new(fs::File::open(path).with_context(|| format!("open {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ObservationRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed observation", path.display(), i + 1))?;
        out.push(
            rec.into_observation()
                .with_context(|| format!("{}:{}: invalid observation", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// ground truth JSONL

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthRecord {
    image_id: String,
    box_id: u32,
    instance_id: u32,
    class_id: u8,
    /// Object floor position, meters.
    position: [f64; 2],
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ((image_id, box_id), &(instance_id, class_id)) in &gt.labels {
        let rec = GroundTruthRecord {
            image_id: image_id.clone(),
            box_id: *box_id,
            instance_id,
            class_id,
            position: gt.positions[&instance_id],
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let r = BufReader::new(fs::File::open(path).with_context(|| format!("open {}", path.display()))?);
    let mut gt = GroundTruth::default();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GroundTruthRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed ground truth", path.display(), i + 1))?;
        gt.labels
            .insert((rec.image_id, rec.box_id), (rec.instance_id, rec.class_id));
        gt.positions.insert(rec.instance_id, rec.position);
    }
    Ok(gt)
}

// ---------------------------------------------------------------------------
// manifest JSONL

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    image_id: String,
    box_id: u32,
    candidates: Vec<Candidate>,
}

pub fn write_manifest(path: &Path, manifest: &PairManifest) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ((image_id, box_id), candidates) in &manifest.entries {
        let rec = ManifestRecord {
            image_id: image_id.clone(),
            box_id: *box_id,
            candidates: candidates.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<PairManifest> {
    let r = BufReader::new(fs::File::open(path).with_context(|| format!("open {}", path.display()))?);
    let mut manifest = PairManifest::default();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed manifest record", path.display(), i + 1))?;
        manifest
            .entries
            .insert((rec.image_id, rec.box_id), rec.candidates);
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// feature tensor binary
//
// Little-endian layout:
//   magic "PMFT" | u32 version (1) | u32 record count | u32 feature dim
//   then per record:
//   u32 image_id byte length | image_id utf-8 | u32 box_id | dim f64 values

const FEATURES_MAGIC: &[u8; 4] = b"PMFT";
const FEATURES_VERSION: u32 = 1;

pub fn write_features(path: &Path, features: &BTreeMap<BoxKey, Vec<f64>>) -> Result<()> {
    let dim = features.values().next().map_or(0, |v| v.len());
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FEATURES_MAGIC)?;
    w.write_all(&FEATURES_VERSION.to_le_bytes())?;
    w.write_all(&(features.len() as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for ((image_id, box_id), values) in features {
        if values.len() != dim {
            bail!("inconsistent feature width: {} vs {dim}", values.len());
        }
        w.write_all(&(image_id.len() as u32).to_le_bytes())?;
        w.write_all(image_id.as_bytes())?;
        w.write_all(&box_id.to_le_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<BTreeMap<BoxKey, Vec<f64>>> {
    let mut r = BufReader::new(fs::File::open(path).with_context(|| format!("open {}", path.display()))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURES_MAGIC {
        bail!("{}: not a feature tensor file", path.display());
    }
    let version = read_u32(&mut r)?;
    if version != FEATURES_VERSION {
        bail!("{}: unsupported feature file version {version}", path.display());
    }
    let count = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let image_id = String::from_utf8(name).context("feature key is not utf-8")?;
        let box_id = read_u32(&mut r)?;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        out.insert((image_id, box_id), values);
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

// ---------------------------------------------------------------------------
// checkpoints and loss curves

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub seed: u64,
    pub encoder: EncoderStack,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, ckpt)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read_to_string(path).with_context(|| format!("open {}", path.display()))?;
    serde_json::from_str(&data).with_context(|| format!("{}: malformed checkpoint", path.display()))
}

pub fn write_loss_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "epoch,mean_loss")?;
    for (epoch, loss) in curve.iter().enumerate() {
        writeln!(w, "{epoch},{loss}")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// pipeline configuration

/// Top-level config file, TOML or JSON by extension. Unknown keys are
/// rejected; every field has a documented default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: DatasetConfig::default(),
            train: TrainConfig::desk_scale(Method::Simclr, Regime::Polygon, 16),
            probe: ProbeConfig::default(),
        }
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let data = fs::read_to_string(path).with_context(|| format!("open {}", path.display()))?;
    let cfg: PipelineConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&data)
            .with_context(|| format!("{}: invalid JSON config", path.display()))?,
        _ => toml::from_str(&data)
            .with_context(|| format!("{}: invalid TOML config", path.display()))?,
    };
    cfg.train
        .validate()
        .map_err(|e| anyhow::anyhow!("{}: bad train config: {e}", path.display()))?;
    cfg.dataset
        .miner
        .validate()
        .map_err(|e| anyhow::anyhow!("{}: bad miner config: {e}", path.display()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use polymatch_core::simulator::{SceneParams, SceneSpec};

    fn sample_observations() -> (Vec<Observation>, GroundTruth) {
        let mut next = 0;
        let spec = SceneSpec::sample(0, &SceneParams::default(), 5, &mut next);
        polymatch_core::simulator::generate_scene(&spec).unwrap()
    }

    #[test]
    fn observations_round_trip_byte_identical() {
        let (obs, _) = sample_observations();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write_observations(&p1, &obs).unwrap();
        let back = read_observations(&p1).unwrap();
        assert_eq!(back, obs);
        write_observations(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn malformed_observation_reports_line_number() {
        let (obs, _) = sample_observations();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.jsonl");
        write_observations(&path, &obs[..2]).unwrap();
        let mut data = fs::read_to_string(&path).unwrap();
        data.push_str("{\"not\": \"an observation\"}\n");
        fs::write(&path, data).unwrap();
        let err = format!("{:#}", read_observations(&path).unwrap_err());
        assert!(err.contains(":3:"), "missing line number: {err}");
    }

    #[test]
    fn bad_geometry_rejected_at_ingest() {
        let (mut obs, _) = sample_observations();
        obs.truncate(1);
        obs[0].bbox.xmax = obs[0].bbox.xmin; // zero-width box
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.jsonl");
        write_observations(&path, &obs).unwrap();
        assert!(read_observations(&path).is_err());
    }

    #[test]
    fn ground_truth_round_trip() {
        let (_, mut gt) = sample_observations();
        // the file stores one record per detection, so positions of
        // objects that were never detected are not representable
        let seen: std::collections::BTreeSet<u32> =
            gt.labels.values().map(|&(inst, _)| inst).collect();
        gt.positions.retain(|inst, _| seen.contains(inst));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.jsonl");
        write_ground_truth(&path, &gt).unwrap();
        assert_eq!(read_ground_truth(&path).unwrap(), gt);
    }

    #[test]
    fn manifest_round_trip() {
        let (obs, _) = sample_observations();
        let cfg = polymatch_core::miner::MinerConfig::default();
        let batch = polymatch_core::miner::build_footprints(&obs, &cfg);
        let manifest = polymatch_core::miner::mine_pairs(&batch.footprints, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &manifest).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), manifest);
    }

    #[test]
    fn features_round_trip_exact_bits() {
        let mut features = BTreeMap::new();
        features.insert(("img0".to_string(), 0u32), vec![1.5, -2.25, 1e-300]);
        features.insert(("img1".to_string(), 3u32), vec![f64::MIN_POSITIVE, 0.1 + 0.2, 7.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.bin");
        write_features(&path, &features).unwrap();
        let back = read_features(&path).unwrap();
        for (k, v) in &features {
            let b = &back[k];
            assert!(v.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn features_magic_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.bin");
        fs::write(&path, b"NOPE....").unwrap();
        assert!(read_features(&path).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        use polymatch_core::rng::Srng;
        use polymatch_core::ssl::EncoderStack;
        let cfg = TrainConfig::desk_scale(Method::Triplet, Regime::Polygon, 16);
        let encoder = EncoderStack::init(16, &cfg, &mut Srng::seed_from_u64(1));
        let ckpt = Checkpoint { version: 1, seed: 9, config: cfg, encoder };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        write_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        fs::write(&path, "[dataset]\nseed = 3\n").unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.dataset.seed, 3);
        assert_eq!(cfg.dataset.miner.max_depth, 0.7);

        fs::write(&path, "[dataset]\nseeed = 3\n").unwrap();
        assert!(load_config(&path).is_err(), "unknown key must be rejected");

        let json = dir.path().join("cfg.json");
        fs::write(&json, "{\"dataset\": {\"seed\": 4}}").unwrap();
        assert_eq!(load_config(&json).unwrap().dataset.seed, 4);
    }
}
