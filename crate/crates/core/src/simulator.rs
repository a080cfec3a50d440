//! Synthetic ground truth: rooms with labeled cylinder objects, robot
//! trajectories, pinhole-rendered detections and per-view feature
//! synthesis. Everything is deterministic given the scene seed.
//!
//! Objects are upright cylinders rendered independently (no occlusion);
//! a detection is the pixel AABB of the projected silhouette samples,
//! clipped to the image frame. Features stand in for pixels: each view
//! is the instance latent rotated by a viewpoint-dependent angle plus
//! noise, so views of one instance from nearby angles are nearby.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{
    self, CameraExtrinsics, CameraIntrinsics, PixelBox, RobotPose,
};
use crate::math;
use crate::miner::{BoxKey, Observation, PairManifest};
use crate::rng::{fnv1a, Srng};
use crate::ssl::FeatureMap;

pub const NUM_CLASSES: usize = 12;
pub const FEATURE_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class_id: u8,
    pub instance_id: u32,
    pub position: [f64; 2],
    pub footprint_radius: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub intrinsics: CameraIntrinsics,
    /// Downward pitch of the mounted camera, radians.
    pub pitch: f64,
    pub mount_height: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec {
            intrinsics: CameraIntrinsics {
                fx: 400.0,
                fy: 400.0,
                cx: 320.0,
                cy: 240.0,
                skew: 0.0,
            },
            pitch: 0.8,
            mount_height: 0.5,
            image_width: 640.0,
            image_height: 480.0,
        }
    }
}

impl CameraSpec {
    pub fn extrinsics(&self) -> CameraExtrinsics {
        CameraExtrinsics::pitched_down(self.pitch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub agent_id: String,
    pub episode_id: String,
    /// Room is the axis-aligned box [0, extent_x] x [0, extent_y].
    pub room_extent: [f64; 2],
    pub objects: Vec<ObjectSpec>,
    pub trajectory: Vec<RobotPose>,
    pub camera: CameraSpec,
    pub seed: u64,
    /// Additive pose noise applied at render time; 0 disables.
    pub pose_jitter: f64,
}

/// Parameters for sampling random scenes. Room scale and object size
/// defaults are assumptions, not reported values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub room_min: f64,
    pub room_max: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub height_min: f64,
    pub height_max: f64,
    /// Trajectory poses per scene, sampled at ~10 Hz.
    pub poses: usize,
    pub speed_mps: f64,
    /// Geometric class-frequency parameter; smaller means more balanced.
    pub class_skew: f64,
    pub pose_jitter: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            room_min: 4.0,
            room_max: 8.0,
            objects_min: 8,
            objects_max: 16,
            radius_min: 0.05,
            radius_max: 0.3,
            height_min: 0.05,
            height_max: 0.3,
            poses: 240,
            speed_mps: 0.3,
            class_skew: 0.08,
            pose_jitter: 0.0,
        }
    }
}

/// Draw a class id from the geometric distribution p(c) ~ (1-q)^c.
fn sample_class(rng: &mut Srng, skew: f64) -> u8 {
    let mut weights = [0.0f64; NUM_CLASSES];
    let mut total = 0.0;
    for (c, w) in weights.iter_mut().enumerate() {
        *w = math::pow(1.0 - skew, c as f64);
        total += *w;
    }
    let mut u = rng.uniform() * total;
    for (c, w) in weights.iter().enumerate() {
        if u < *w {
            return c as u8;
        }
        u -= *w;
    }
    (NUM_CLASSES - 1) as u8
}

impl SceneSpec {
    /// Random room, objects and wall-bouncing trajectory. `next_instance`
    /// keeps instance ids unique across scenes.
    pub fn sample(scene_index: usize, params: &SceneParams, seed: u64, next_instance: &mut u32) -> Self {
        let mut rng = Srng::seed_from_u64(seed ^ fnv1a(format!("scene{scene_index}").as_bytes()));
        let ex = rng.uniform_in(params.room_min, params.room_max);
        let ey = rng.uniform_in(params.room_min, params.room_max);
        let n_objects = params.objects_min + rng.index(params.objects_max - params.objects_min + 1);
        let mut objects = Vec::with_capacity(n_objects);
        for _ in 0..n_objects {
            let radius = rng.uniform_in(params.radius_min, params.radius_max);
            objects.push(ObjectSpec {
                class_id: sample_class(&mut rng, params.class_skew),
                instance_id: {
                    let id = *next_instance;
                    *next_instance += 1;
                    id
                },
                position: [
                    rng.uniform_in(radius, ex - radius),
                    rng.uniform_in(radius, ey - radius),
                ],
                footprint_radius: radius,
                height: rng.uniform_in(params.height_min, params.height_max),
            });
        }
        // wandering walk with wall bounces, 10 Hz
        let dt = 0.1;
        let mut x = rng.uniform_in(0.5, ex - 0.5);
        let mut y = rng.uniform_in(0.5, ey - 0.5);
        let mut heading = rng.uniform_in(-math::PI, math::PI);
        let camera = CameraSpec::default();
        let mut trajectory = Vec::with_capacity(params.poses);
        for _ in 0..params.poses {
            trajectory.push(RobotPose::new(x, y, heading, camera.mount_height));
            heading = math::wrap_angle(heading + rng.uniform_in(-0.35, 0.35));
            let nx = x + params.speed_mps * dt * math::cos(heading);
            let ny = y + params.speed_mps * dt * math::sin(heading);
            if nx < 0.3 || nx > ex - 0.3 || ny < 0.3 || ny > ey - 0.3 {
                heading = math::wrap_angle(heading + math::PI + rng.uniform_in(-0.5, 0.5));
            } else {
                x = nx;
                y = ny;
            }
        }
        SceneSpec {
            scene_id: format!("scene{scene_index}"),
            agent_id: format!("agent{scene_index}"),
            episode_id: "ep0".into(),
            room_extent: [ex, ey],
            objects,
            trajectory,
            camera,
            seed,
            pose_jitter: params.pose_jitter,
        }
    }
}

/// Instance and class labels for every emitted detection.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: BTreeMap<BoxKey, (u32, u8)>,
    /// Object floor positions per instance, for geometric checks.
    pub positions: BTreeMap<u32, [f64; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimulatorError {
    /// No detection was produced by any trajectory pose.
    EmptyScene,
}

impl core::fmt::Display for SimulatorError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SimulatorError::EmptyScene => write!(f, "scene produced no detections"),
        }
    }
}

/// Pixel AABB of the cylinder silhouette, or None when the object is
/// outside the frustum or behind the camera.
fn render_cylinder(
    camera: &CameraSpec,
    pose: &RobotPose,
    obj: &ObjectSpec,
) -> Option<PixelBox> {
    let proj = geometry::build_projection_matrix(&camera.intrinsics, &camera.extrinsics(), pose).ok()?;
    const SAMPLES: usize = 24;
    let mut bb = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for ring in 0..2 {
        let z = if ring == 0 { 0.0 } else { obj.height };
        for k in 0..SAMPLES {
            let a = math::TAU * k as f64 / SAMPLES as f64;
            let xw = [
                obj.position[0] + obj.footprint_radius * math::cos(a),
                obj.position[1] + obj.footprint_radius * math::sin(a),
                z,
                1.0,
            ];
            let xi = proj.project(&xw);
            if xi[2] <= 1e-9 {
                return None; // point at or behind the camera plane
            }
            let u = xi[0] / xi[2];
            let v = xi[1] / xi[2];
            bb[0] = bb[0].min(u);
            bb[1] = bb[1].min(v);
            bb[2] = bb[2].max(u);
            bb[3] = bb[3].max(v);
        }
    }
    // the whole silhouette must land inside the frame; partially visible
    // objects produce no detection
    if bb[0] < 0.0 || bb[1] < 0.0 || bb[2] > camera.image_width || bb[3] > camera.image_height {
        return None;
    }
    if bb[2] - bb[0] < 2.0 || bb[3] - bb[1] < 2.0 {
        return None;
    }
    Some(PixelBox::new(bb[0], bb[1], bb[2], bb[3]))
}

/// Render every trajectory pose against every object.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Vec<Observation>, GroundTruth), SimulatorError> {
    let mut rng = Srng::seed_from_u64(spec.seed ^ fnv1a(spec.scene_id.as_bytes()));
    let mut observations = Vec::new();
    let mut gt = GroundTruth::default();
    for obj in &spec.objects {
        gt.positions.insert(obj.instance_id, obj.position);
    }
    for (t, pose) in spec.trajectory.iter().enumerate() {
        let pose = if spec.pose_jitter > 0.0 {
            RobotPose::new(
                pose.x + spec.pose_jitter * rng.normal(),
                pose.y + spec.pose_jitter * rng.normal(),
                pose.heading + spec.pose_jitter * rng.normal(),
                pose.camera_height,
            )
        } else {
            *pose
        };
        let image_id = format!("{}_t{:04}", spec.scene_id, t);
        let mut box_id = 0u32;
        for obj in &spec.objects {
            if let Some(bbox) = render_cylinder(&spec.camera, &pose, obj) {
                observations.push(Observation {
                    agent_id: spec.agent_id.clone(),
                    episode_id: spec.episode_id.clone(),
                    image_id: image_id.clone(),
                    box_id,
                    timestamp_s: t as f64 * 0.1,
                    bbox,
                    pose,
                    intrinsics: spec.camera.intrinsics,
                    extrinsics: spec.camera.extrinsics(),
                });
                gt.labels
                    .insert((image_id.clone(), box_id), (obj.instance_id, obj.class_id));
                box_id += 1;
            }
        }
    }
    if observations.is_empty() {
        return Err(SimulatorError::EmptyScene);
    }
    Ok((observations, gt))
}

/// View-feature synthesis model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSynth {
    pub dim: usize,
    /// Scale of the shared class direction.
    pub class_scale: f64,
    /// Scale of the per-instance offset from its class center.
    pub instance_scale: f64,
    /// Radians of latent-space rotation per radian of viewing angle.
    pub rotation_gain: f64,
    /// Noise applied to every view regardless of angle.
    pub noise_floor: f64,
}

impl Default for FeatureSynth {
    fn default() -> Self {
        FeatureSynth {
            dim: FEATURE_DIM,
            class_scale: 3.0,
            instance_scale: 0.6,
            rotation_gain: 3.0,
            noise_floor: 0.05,
        }
    }
}

impl FeatureSynth {
    /// Nominal perturbation scale between views separated by `d_angle`;
    /// exactly the noise floor at zero angular difference.
    pub fn perturbation_magnitude(&self, d_angle: f64) -> f64 {
        self.noise_floor + self.rotation_gain * d_angle.abs()
    }

    fn unit_vector(&self, rng: &mut Srng) -> Vec<f64> {
        let v: Vec<f64> = (0..self.dim).map(|_| rng.normal()).collect();
        let n = math::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        v.into_iter().map(|x| x / n).collect()
    }

    pub fn instance_latent(&self, seed: u64, instance_id: u32, class_id: u8) -> Vec<f64> {
        let mut class_rng =
            Srng::seed_from_u64(seed ^ fnv1a(format!("class{class_id}").as_bytes()));
        let center = self.unit_vector(&mut class_rng);
        let mut inst_rng =
            Srng::seed_from_u64(seed ^ fnv1a(format!("inst{instance_id}").as_bytes()));
        let offset = self.unit_vector(&mut inst_rng);
        (0..self.dim)
            .map(|d| self.class_scale * center[d] + self.instance_scale * offset[d])
            .collect()
    }

    /// Rotate in consecutive coordinate planes by `angle`.
    fn rotate(&self, v: &mut [f64], angle: f64) {
        let (s, c) = (math::sin(angle), math::cos(angle));
        let mut d = 0;
        while d + 1 < self.dim {
            let (a, b) = (v[d], v[d + 1]);
            v[d] = c * a - s * b;
            v[d + 1] = s * a + c * b;
            d += 2;
        }
    }

    /// Feature for one view. Deterministic in (seed, instance, pose):
    /// identical poses of one instance give identical features.
    pub fn view_feature(
        &self,
        seed: u64,
        instance_id: u32,
        class_id: u8,
        object_pos: [f64; 2],
        pose: &RobotPose,
    ) -> Vec<f64> {
        let mut feat = self.instance_latent(seed, instance_id, class_id);
        // bearing from the object to the robot selects the perspective
        let view_angle = math::atan2(pose.y - object_pos[1], pose.x - object_pos[0]);
        self.rotate(&mut feat, self.rotation_gain * view_angle);
        let mut noise_rng = Srng::seed_from_u64(
            seed ^ fnv1a(
                format!(
                    "view{instance_id}:{:x}:{:x}:{:x}",
                    pose.x.to_bits(),
                    pose.y.to_bits(),
                    pose.heading.to_bits()
                )
                .as_bytes(),
            ),
        );
        for f in feat.iter_mut() {
            *f += self.noise_floor * noise_rng.normal();
        }
        feat
    }
}

/// Raw feature vectors for every detection covered by the ground truth.
pub fn synth_views(
    gt: &GroundTruth,
    observations: &[Observation],
    synth: &FeatureSynth,
    seed: u64,
) -> FeatureMap {
    let mut features = FeatureMap::new();
    for obs in observations {
        let key = (obs.image_id.clone(), obs.box_id);
        let (instance_id, class_id) = gt.labels[&key];
        let pos = gt.positions[&instance_id];
        features.insert(
            key,
            synth.view_feature(seed, instance_id, class_id, pos, &obs.pose),
        );
    }
    features
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManifestScore {
    pub precision: f64,
    pub recall: f64,
    pub mined_pairs: usize,
    pub true_pairs: usize,
    /// Precision had no mined pairs to judge; reported as 1.0.
    pub zero_pair_flag: bool,
}

/// Precision: mined pairs whose boxes share an instance. Recall: fraction
/// of same-instance pairs among accepted footprints that were mined.
pub fn score_manifest(manifest: &PairManifest, gt: &GroundTruth) -> ManifestScore {
    let mined = manifest.pair_set();
    let mut correct = 0usize;
    for (a, b) in &mined {
        if let (Some((ia, _)), Some((ib, _))) = (gt.labels.get(a), gt.labels.get(b)) {
            if ia == ib {
                correct += 1;
            }
        }
    }
    // ground-truth positives among boxes that survived projection
    let keys: Vec<&BoxKey> = manifest.entries.keys().collect();
    let mut true_pairs = 0usize;
    let mut recalled = 0usize;
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            if let (Some((ia, _)), Some((ib, _))) = (gt.labels.get(keys[i]), gt.labels.get(keys[j]))
            {
                if ia == ib {
                    true_pairs += 1;
                    let pair = if keys[i] <= keys[j] {
                        (keys[i].clone(), keys[j].clone())
                    } else {
                        (keys[j].clone(), keys[i].clone())
                    };
                    if mined.contains(&pair) {
                        recalled += 1;
                    }
                }
            }
        }
    }
    let zero_pair_flag = mined.is_empty();
    ManifestScore {
        precision: if zero_pair_flag {
            1.0
        } else {
            correct as f64 / mined.len() as f64
        },
        recall: if true_pairs == 0 {
            0.0
        } else {
            recalled as f64 / true_pairs as f64
        },
        mined_pairs: mined.len(),
        true_pairs,
        zero_pair_flag,
    }
}
