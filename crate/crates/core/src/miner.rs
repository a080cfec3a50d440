//! Footprint matching: group detections per agent and episode, index the
//! projected footprints on a uniform floor grid, and record every pair
//! whose floor polygons overlap as mutual positive candidates.
//!
//! The grid index is an accelerator only; its output is required to be
//! identical to the quadratic brute-force scan, and the tests hold it to
//! that.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{
    self, CameraExtrinsics, CameraIntrinsics, FootprintRejection, PixelBox, RobotPose,
};
use crate::polygon::{self, FloorPolygon, SourceId};
use crate::rng::Srng;

/// One detected bounding box with everything needed to project it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent_id: String,
    pub episode_id: String,
    pub image_id: String,
    pub box_id: u32,
    pub timestamp_s: f64,
    pub bbox: PixelBox,
    pub pose: RobotPose,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

impl Observation {
    pub fn source(&self) -> SourceId {
        SourceId {
            agent_id: self.agent_id.clone(),
            episode_id: self.episode_id.clone(),
            image_id: self.image_id.clone(),
            box_id: self.box_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinerConfig {
    /// Maximum distance (meters) from the robot center to a footprint.
    pub max_depth: f64,
    /// Overlap areas below this never form a pair, square meters.
    pub min_overlap_area: f64,
    /// Optional IoU gate; 0 disables it.
    pub min_iou: f64,
    /// Uniform grid cell size, meters.
    pub grid_cell: f64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            max_depth: 0.7,
            min_overlap_area: polygon::EPS_AREA,
            min_iou: 0.0,
            grid_cell: 0.25,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.max_depth > 0.0) {
            return Err("max_depth must be > 0");
        }
        if !(0.0..=1.0).contains(&self.min_iou) {
            return Err("min_iou must be in [0, 1]");
        }
        if !(self.grid_cell > 0.0) {
            return Err("grid_cell must be > 0");
        }
        Ok(())
    }
}

/// Key used for manifest lookups: (image_id, box_id).
pub type BoxKey = (String, u32);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub image_id: String,
    pub box_id: u32,
    pub overlap_m2: f64,
    pub iou: f64,
}

/// Per-query candidate lists, symmetric and free of self-pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub entries: BTreeMap<BoxKey, Vec<Candidate>>,
}

impl PairManifest {
    pub fn candidates(&self, query: &BoxKey) -> Option<&[Candidate]> {
        self.entries.get(query).map(|v| v.as_slice())
    }

    pub fn pair_count(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum::<usize>() / 2
    }

    /// The set of unordered matched pairs, for oracle comparison.
    pub fn pair_set(&self) -> BTreeSet<(BoxKey, BoxKey)> {
        let mut set = BTreeSet::new();
        for (q, cands) in &self.entries {
            for c in cands {
                let k = (c.image_id.clone(), c.box_id);
                let pair = if *q <= k { (q.clone(), k) } else { (k, q.clone()) };
                set.insert(pair);
            }
        }
        set
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub image_id: String,
    pub box_id: u32,
    pub reason: FootprintRejection,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FootprintBatch {
    pub footprints: Vec<FloorPolygon>,
    pub rejections: Vec<RejectionRecord>,
}

/// Project every observation's bbox to a floor footprint. Rejections are
/// logged, never fatal: one bad detection must not abort a batch.
pub fn build_footprints(observations: &[Observation], cfg: &MinerConfig) -> FootprintBatch {
    let mut batch = FootprintBatch::default();
    for obs in observations {
        let proj = match geometry::build_projection_matrix(&obs.intrinsics, &obs.extrinsics, &obs.pose)
        {
            Ok(p) => p,
            Err(_) => {
                batch.rejections.push(RejectionRecord {
                    image_id: obs.image_id.clone(),
                    box_id: obs.box_id,
                    reason: FootprintRejection::Degenerate,
                });
                continue;
            }
        };
        let hom = match geometry::floor_homography(&proj) {
            Ok(h) => h,
            Err(_) => {
                batch.rejections.push(RejectionRecord {
                    image_id: obs.image_id.clone(),
                    box_id: obs.box_id,
                    reason: FootprintRejection::AboveHorizon,
                });
                continue;
            }
        };
        match geometry::project_bbox_footprint(&hom, &obs.bbox, &obs.pose, cfg.max_depth, obs.source())
        {
            Ok(fp) => batch.footprints.push(fp),
            Err(reason) => batch.rejections.push(RejectionRecord {
                image_id: obs.image_id.clone(),
                box_id: obs.box_id,
                reason,
            }),
        }
    }
    batch
}

/// Uniform grid over footprint AABBs. Each footprint id is stored in
/// every cell its AABB touches.
#[derive(Clone, Debug, Default)]
pub struct SpatialIndex {
    cell: f64,
    cells: BTreeMap<(i64, i64), Vec<usize>>,
}

impl SpatialIndex {
    pub fn build(footprints: &[FloorPolygon], cell: f64) -> Self {
        let mut index = SpatialIndex {
            cell,
            cells: BTreeMap::new(),
        };
        for (id, fp) in footprints.iter().enumerate() {
            let bb = polygon::aabb(&fp.vertices);
            let (x0, y0) = index.cell_of(bb[0], bb[1]);
            let (x1, y1) = index.cell_of(bb[2], bb[3]);
            for cx in x0..=x1 {
                for cy in y0..=y1 {
                    index.cells.entry((cx, cy)).or_default().push(id);
                }
            }
        }
        index
    }

    fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        (
            crate::math::floor(x / self.cell) as i64,
            crate::math::floor(y / self.cell) as i64,
        )
    }

    /// Ids of footprints whose AABB-cells intersect the query AABB.
    pub fn query(&self, bb: &[f64; 4], out: &mut BTreeSet<usize>) {
        out.clear();
        let (x0, y0) = self.cell_of(bb[0], bb[1]);
        let (x1, y1) = self.cell_of(bb[2], bb[3]);
        for cx in x0..=x1 {
            for cy in y0..=y1 {
                if let Some(ids) = self.cells.get(&(cx, cy)) {
                    out.extend(ids.iter().copied());
                }
            }
        }
    }
}

fn passes_gates(a: &FloorPolygon, b: &FloorPolygon, cfg: &MinerConfig) -> Option<(f64, f64)> {
    let overlap = polygon::overlap_area(a, b);
    if overlap < cfg.min_overlap_area || overlap == 0.0 {
        return None;
    }
    let iou = overlap / (polygon::area(a) + polygon::area(b) - overlap);
    if cfg.min_iou > 0.0 && iou < cfg.min_iou {
        return None;
    }
    Some((overlap, iou))
}

fn insert_pair(manifest: &mut PairManifest, a: &FloorPolygon, b: &FloorPolygon, overlap: f64, iou: f64) {
    let ka = (a.source.image_id.clone(), a.source.box_id);
    let kb = (b.source.image_id.clone(), b.source.box_id);
    manifest.entries.entry(ka).or_default().push(Candidate {
        image_id: b.source.image_id.clone(),
        box_id: b.source.box_id,
        overlap_m2: overlap,
        iou,
    });
    manifest.entries.entry(kb).or_default().push(Candidate {
        image_id: a.source.image_id.clone(),
        box_id: a.source.box_id,
        overlap_m2: overlap,
        iou,
    });
}

fn sort_candidates(manifest: &mut PairManifest) {
    for cands in manifest.entries.values_mut() {
        cands.sort_by(|x, y| {
            y.overlap_m2
                .partial_cmp(&x.overlap_m2)
                .expect("finite overlap")
                .then_with(|| x.image_id.cmp(&y.image_id))
                .then_with(|| x.box_id.cmp(&y.box_id))
        });
    }
}

/// True when two footprints may pair at all: same agent, same episode,
/// different source box.
fn pairable(a: &SourceId, b: &SourceId) -> bool {
    a.agent_id == b.agent_id
        && a.episode_id == b.episode_id
        && !(a.image_id == b.image_id && a.box_id == b.box_id)
}

/// Grid-accelerated pair mining. Output is exactly the brute-force
/// all-pairs result; every query key present in `footprints` gets an
/// entry, possibly empty.
pub fn mine_pairs(footprints: &[FloorPolygon], cfg: &MinerConfig) -> PairManifest {
    let mut manifest = PairManifest::default();
    for fp in footprints {
        manifest
            .entries
            .entry((fp.source.image_id.clone(), fp.source.box_id))
            .or_default();
    }
    let index = SpatialIndex::build(footprints, cfg.grid_cell);
    let mut hits = BTreeSet::new();
    for (i, a) in footprints.iter().enumerate() {
        let bb = polygon::aabb(&a.vertices);
        index.query(&bb, &mut hits);
        for &j in hits.iter() {
            if j <= i {
                continue;
            }
            let b = &footprints[j];
            if !pairable(&a.source, &b.source) {
                continue;
            }
            if let Some((overlap, iou)) = passes_gates(a, b, cfg) {
                insert_pair(&mut manifest, a, b, overlap, iou);
            }
        }
    }
    sort_candidates(&mut manifest);
    manifest
}

/// Reference O(n^2) scan; the correctness oracle for [`mine_pairs`].
pub fn mine_pairs_brute_force(footprints: &[FloorPolygon], cfg: &MinerConfig) -> PairManifest {
    let mut manifest = PairManifest::default();
    for fp in footprints {
        manifest
            .entries
            .entry((fp.source.image_id.clone(), fp.source.box_id))
            .or_default();
    }
    for (i, a) in footprints.iter().enumerate() {
        for b in footprints.iter().skip(i + 1) {
            if !pairable(&a.source, &b.source) {
                continue;
            }
            if let Some((overlap, iou)) = passes_gates(a, b, cfg) {
                insert_pair(&mut manifest, a, b, overlap, iou);
            }
        }
    }
    sort_candidates(&mut manifest);
    manifest
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MinerError {
    UnknownQuery,
}

impl core::fmt::Display for MinerError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MinerError::UnknownQuery => write!(f, "query box not present in manifest"),
        }
    }
}

/// Uniform draw among a query's candidates; `None` when the list is
/// empty (caller falls back to self-augmentation).
pub fn sample_positive(
    manifest: &PairManifest,
    query: &BoxKey,
    rng: &mut Srng,
) -> Result<Option<BoxKey>, MinerError> {
    let cands = manifest.entries.get(query).ok_or(MinerError::UnknownQuery)?;
    if cands.is_empty() {
        return Ok(None);
    }
    let c = &cands[rng.index(cands.len())];
    Ok(Some((c.image_id.clone(), c.box_id)))
}
