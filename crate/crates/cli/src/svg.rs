//! Static bird's-eye SVG export: robot trajectory, accepted floor
//! footprints colored by ground-truth instance, and matched-pair links.

use std::collections::BTreeMap;
use std::fmt::Write;

use polymatch_core::miner::{BoxKey, FootprintBatch, Observation, PairManifest};
use polymatch_core::polygon::FloorPolygon;
use polymatch_core::simulator::GroundTruth;

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
];

const CANVAS: f64 = 800.0;
const PAD: f64 = 30.0;

struct Frame {
    min: [f64; 2],
    scale: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = [f64; 2]>) -> Frame {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        if !min[0].is_finite() {
            min = [0.0, 0.0];
            max = [1.0, 1.0];
        }
        let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-6);
        Frame {
            min,
            scale: (CANVAS - 2.0 * PAD) / span,
        }
    }

    // y flipped: world +y is up, SVG +y is down
    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        (
            PAD + (p[0] - self.min[0]) * self.scale,
            CANVAS - PAD - (p[1] - self.min[1]) * self.scale,
        )
    }
}

fn centroid(poly: &FloorPolygon) -> [f64; 2] {
    let n = poly.vertices.len().max(1) as f64;
    let mut c = [0.0, 0.0];
    for v in &poly.vertices {
        c[0] += v[0];
        c[1] += v[1];
    }
    [c[0] / n, c[1] / n]
}

/// Render the map. Footprints take their fill from the ground-truth
/// instance when labels are supplied; manifest pairs are drawn as
/// dashed links between footprint centroids.
pub fn render_map(
    observations: &[Observation],
    batch: &FootprintBatch,
    manifest: Option<&PairManifest>,
    gt: Option<&GroundTruth>,
) -> String {
    // one trajectory point per image, in observation order
    let mut trajectory: Vec<[f64; 2]> = Vec::new();
    let mut seen_image: Option<&str> = None;
    for obs in observations {
        if seen_image != Some(&obs.image_id) {
            trajectory.push([obs.pose.x, obs.pose.y]);
            seen_image = Some(&obs.image_id);
        }
    }

    let frame = Frame::fit(
        trajectory
            .iter()
            .copied()
            .chain(batch.footprints.iter().flat_map(|f| f.vertices.iter().copied())),
    );

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CANVAS}\" height=\"{CANVAS}\" viewBox=\"0 0 {CANVAS} {CANVAS}\">"
    )
    .unwrap();
    writeln!(svg, "<rect width=\"{CANVAS}\" height=\"{CANVAS}\" fill=\"white\"/>").unwrap();

    if trajectory.len() > 1 {
        let pts: Vec<String> = trajectory
            .iter()
            .map(|&p| {
                let (x, y) = frame.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        writeln!(
            svg,
            "<polyline class=\"trajectory\" points=\"{}\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1.5\"/>",
            pts.join(" ")
        )
        .unwrap();
    } else if let Some(&p) = trajectory.first() {
        let (x, y) = frame.map(p);
        writeln!(
            svg,
            "<circle class=\"trajectory\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"#333333\"/>"
        )
        .unwrap();
    }

    let mut centroids: BTreeMap<BoxKey, [f64; 2]> = BTreeMap::new();
    for fp in &batch.footprints {
        let key = (fp.source.image_id.clone(), fp.source.box_id);
        centroids.insert(key.clone(), centroid(fp));
        let color = match gt.and_then(|g| g.labels.get(&key)) {
            Some(&(instance, _)) => PALETTE[instance as usize % PALETTE.len()],
            None => "#1f77b4",
        };
        let pts: Vec<String> = fp
            .vertices
            .iter()
            .map(|&v| {
                let (x, y) = frame.map(v);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        writeln!(
            svg,
            "<polygon class=\"footprint\" points=\"{}\" fill=\"{color}\" fill-opacity=\"0.35\" stroke=\"{color}\" stroke-width=\"0.8\"/>",
            pts.join(" ")
        )
        .unwrap();
    }

    if let Some(manifest) = manifest {
        for (a, b) in manifest.pair_set() {
            let (Some(&ca), Some(&cb)) = (centroids.get(&a), centroids.get(&b)) else {
                continue;
            };
            let (x1, y1) = frame.map(ca);
            let (x2, y2) = frame.map(cb);
            writeln!(
                svg,
                "<line class=\"pair-link\" x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"#d62728\" stroke-width=\"0.5\" stroke-dasharray=\"3 2\"/>"
            )
            .unwrap();
        }
    }

    writeln!(svg, "</svg>").unwrap();
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use polymatch_core::miner::MinerConfig;
    use polymatch_core::simulator::{self, SceneParams, SceneSpec};

    fn fixture() -> (Vec<Observation>, FootprintBatch, PairManifest, GroundTruth) {
        let mut next = 0;
        let spec = SceneSpec::sample(0, &SceneParams::default(), 5, &mut next);
        let (obs, gt) = simulator::generate_scene(&spec).unwrap();
        let cfg = MinerConfig::default();
        let batch = polymatch_core::miner::build_footprints(&obs, &cfg);
        let manifest = polymatch_core::miner::mine_pairs(&batch.footprints, &cfg);
        (obs, batch, manifest, gt)
    }

    #[test]
    fn one_polygon_per_accepted_footprint() {
        let (obs, batch, manifest, gt) = fixture();
        let svg = render_map(&obs, &batch, Some(&manifest), Some(&gt));
        let polys = svg.matches("<polygon class=\"footprint\"").count();
        assert_eq!(polys, batch.footprints.len());
        assert!(svg.contains("class=\"trajectory\""));
    }

    #[test]
    fn pair_links_match_manifest() {
        let (obs, batch, manifest, gt) = fixture();
        let svg = render_map(&obs, &batch, Some(&manifest), Some(&gt));
        let links = svg.matches("<line class=\"pair-link\"").count();
        assert_eq!(links, manifest.pair_set().len());
        let no_pairs = render_map(&obs, &batch, None, Some(&gt));
        assert_eq!(no_pairs.matches("pair-link").count(), 0);
    }

    #[test]
    fn no_footprints_still_draws_trajectory() {
        let (obs, _, _, _) = fixture();
        let empty = FootprintBatch::default();
        let svg = render_map(&obs, &empty, None, None);
        assert_eq!(svg.matches("<polygon").count(), 0);
        assert!(svg.contains("class=\"trajectory\""));
    }
}
