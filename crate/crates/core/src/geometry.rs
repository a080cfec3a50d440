//! Pinhole camera algebra and the image <-> floor-plane mapping.
//!
//! Conventions: world frame is right-handed, z-up, floor is z = 0. The
//! camera frame is +z forward, +x right, +y down. The robot pose is
//! planar (x, y, heading) with the camera mount origin at a fixed height
//! above the floor; camera world extrinsics are the mount extrinsics
//! composed with the pose lifted to SE(3).
//!
//! The floor plane embeds into world homogeneous coordinates through the
//! fixed map (x, y, 1) -> (x, y, 0, 1), so the composition of projection
//! and embedding is an invertible 3x3 homography whenever the camera is
//! not parallel-degenerate with respect to the floor.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::polygon::{self, FloorPolygon, SourceId};

/// Homogeneous w below this is treated as at-horizon.
pub const EPS_W: f64 = 1e-8;
/// Forward homography determinants below this are degenerate.
pub const EPS_DET: f64 = 1e-12;
/// Footprint hulls with area below this are degenerate, square meters.
pub const EPS_AREA: f64 = polygon::EPS_AREA;

pub type Mat3 = [[f64; 3]; 3];
pub type Mat34 = [[f64; 4]; 3];

pub const MAT3_IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_mul_vec(a: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat3_det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Inverse via the adjugate; caller checks the determinant first.
pub fn mat3_inverse(a: &Mat3, det: f64) -> Mat3 {
    let inv = 1.0 / det;
    [
        [
            (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv,
            (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv,
            (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv,
        ],
        [
            (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * inv,
            (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv,
            (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv,
        ],
        [
            (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * inv,
            (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv,
            (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv,
        ],
    ]
}

/// Camera-internal parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn matrix(&self) -> Mat3 {
        [
            [self.fx, self.skew, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ]
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite() {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics)
        }
    }
}

/// Rigid transform from the mount frame into the camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        CameraExtrinsics {
            rotation: MAT3_IDENTITY,
            translation: [0.0; 3],
        }
    }

    /// Camera pitched down from horizontal-forward by `pitch` radians;
    /// `pitch = pi/2` looks straight at the floor. Mount frame: +x
    /// forward (robot heading), +y left, +z up.
    pub fn pitched_down(pitch: f64) -> Self {
        let (s, c) = (math::sin(pitch), math::cos(pitch));
        // rows are the camera axes (right, down, forward) in mount coordinates
        CameraExtrinsics {
            rotation: [[0.0, -1.0, 0.0], [-s, 0.0, -c], [c, 0.0, -s]],
            translation: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let r = &self.rotation;
        let rt_r = mat3_mul(&mat3_transpose(r), r);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (rt_r[i][j] - expected).abs() > 1e-9 {
                    return Err(GeometryError::InvalidExtrinsics);
                }
            }
        }
        if (mat3_det(r) - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidExtrinsics);
        }
        Ok(())
    }
}

/// Planar robot pose plus the camera mount height above the floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotPose {
    pub x: f64,
    pub y: f64,
    /// Radians, counterclockwise from world +x, normalized to (-pi, pi].
    pub heading: f64,
    pub camera_height: f64,
}

impl RobotPose {
    pub fn new(x: f64, y: f64, heading: f64, camera_height: f64) -> Self {
        RobotPose {
            x,
            y,
            heading: math::wrap_angle(heading),
            camera_height,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = self.x.is_finite()
            && self.y.is_finite()
            && self.heading.is_finite()
            && self.camera_height.is_finite();
        if finite && self.camera_height > 0.0 {
            Ok(())
        } else {
            Err(GeometryError::InvalidPose)
        }
    }
}

/// 3x4 world-to-image projection, K * [R | t].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMatrix(pub Mat34);

impl ProjectionMatrix {
    pub fn project(&self, xw: &[f64; 4]) -> [f64; 3] {
        let p = &self.0;
        [
            p[0][0] * xw[0] + p[0][1] * xw[1] + p[0][2] * xw[2] + p[0][3] * xw[3],
            p[1][0] * xw[0] + p[1][1] * xw[1] + p[1][2] * xw[2] + p[1][3] * xw[3],
            p[2][0] * xw[0] + p[2][1] * xw[1] + p[2][2] * xw[2] + p[2][3] * xw[3],
        ]
    }
}

/// Invertible 3x3 map between the floor plane and the image plane.
///
/// `forward` is the projection composed with the canonical z = 0
/// embedding; its third row gives camera-frame depth of floor points,
/// which is what the front-of-camera checks use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorHomography {
    pub forward: Mat3,
    pub inverse: Mat3,
}

impl FloorHomography {
    /// Camera-frame depth of the floor point (x, y, 0).
    pub fn depth_of(&self, f: &FloorPoint) -> f64 {
        let r = &self.forward[2];
        r[0] * f.x + r[1] * f.y + r[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorPoint {
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeometryError {
    InvalidIntrinsics,
    InvalidExtrinsics,
    InvalidPose,
    /// Floor-to-image map is singular (camera parallel to the floor).
    DegenerateHomography,
    /// Back-projected ray does not meet the floor in front of the camera.
    AboveHorizon,
    /// Floor point has non-positive camera-frame depth.
    BehindCamera,
}

impl core::fmt::Display for GeometryError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let msg = match self {
            GeometryError::InvalidIntrinsics => "focal lengths must be positive and finite",
            GeometryError::InvalidExtrinsics => "extrinsic rotation is not special orthogonal",
            GeometryError::InvalidPose => "robot pose must be finite with camera height > 0",
            GeometryError::DegenerateHomography => "floor-to-image homography is singular",
            GeometryError::AboveHorizon => "pixel ray does not intersect the floor ahead",
            GeometryError::BehindCamera => "floor point is behind the camera",
        };
        write!(f, "{msg}")
    }
}

/// Rotation about world +z by `heading`.
fn heading_rotation(heading: f64) -> Mat3 {
    let (s, c) = (math::sin(heading), math::cos(heading));
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// World-to-camera rigid transform for a mounted camera on a posed robot.
pub fn world_to_camera(extr: &CameraExtrinsics, pose: &RobotPose) -> (Mat3, [f64; 3]) {
    // X_cam = R_e * Rz(h)^T * (X_w - p) + t_e
    let r_wc = mat3_mul(&extr.rotation, &mat3_transpose(&heading_rotation(pose.heading)));
    let p = [pose.x, pose.y, pose.camera_height];
    let rp = mat3_mul_vec(&r_wc, &p);
    let t_wc = [
        extr.translation[0] - rp[0],
        extr.translation[1] - rp[1],
        extr.translation[2] - rp[2],
    ];
    (r_wc, t_wc)
}

pub fn build_projection_matrix(
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    pose: &RobotPose,
) -> Result<ProjectionMatrix, GeometryError> {
    intr.validate()?;
    extr.validate()?;
    let (r_wc, t_wc) = world_to_camera(extr, pose);
    let k = intr.matrix();
    let kr = mat3_mul(&k, &r_wc);
    let kt = mat3_mul_vec(&k, &t_wc);
    Ok(ProjectionMatrix([
        [kr[0][0], kr[0][1], kr[0][2], kt[0]],
        [kr[1][0], kr[1][1], kr[1][2], kt[1]],
        [kr[2][0], kr[2][1], kr[2][2], kt[2]],
    ]))
}

/// Restrict the projection to the floor plane and invert it.
///
/// The z = 0 embedding keeps columns 0, 1 and 3 of P, so the forward map
/// is 3x3. Singular forward maps (camera optical plane containing the
/// floor normal direction degenerately) are rejected.
pub fn floor_homography(p: &ProjectionMatrix) -> Result<FloorHomography, GeometryError> {
    let m = &p.0;
    let forward: Mat3 = [
        [m[0][0], m[0][1], m[0][3]],
        [m[1][0], m[1][1], m[1][3]],
        [m[2][0], m[2][1], m[2][3]],
    ];
    let det = mat3_det(&forward);
    if det.abs() <= EPS_DET {
        return Err(GeometryError::DegenerateHomography);
    }
    Ok(FloorHomography {
        forward,
        inverse: mat3_inverse(&forward, det),
    })
}

pub fn image_to_floor(h: &FloorHomography, p: &PixelPoint) -> Result<FloorPoint, GeometryError> {
    let xf = mat3_mul_vec(&h.inverse, &[p.u, p.v, 1.0]);
    if xf[2].abs() <= EPS_W {
        return Err(GeometryError::AboveHorizon);
    }
    let f = FloorPoint {
        x: xf[0] / xf[2],
        y: xf[1] / xf[2],
    };
    if h.depth_of(&f) <= 0.0 {
        return Err(GeometryError::AboveHorizon);
    }
    Ok(f)
}

pub fn floor_to_image(h: &FloorHomography, f: &FloorPoint) -> Result<PixelPoint, GeometryError> {
    let xi = mat3_mul_vec(&h.forward, &[f.x, f.y, 1.0]);
    // third component is camera-frame depth
    if xi[2] <= 0.0 {
        return Err(GeometryError::BehindCamera);
    }
    Ok(PixelPoint {
        u: xi[0] / xi[2],
        v: xi[1] / xi[2],
    })
}

/// Pixel-space axis-aligned bounding box, [xmin, ymin, xmax, ymax].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl PixelBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        PixelBox { xmin, ymin, xmax, ymax }
    }

    pub fn corners(&self) -> [PixelPoint; 4] {
        [
            PixelPoint { u: self.xmin, v: self.ymin },
            PixelPoint { u: self.xmax, v: self.ymin },
            PixelPoint { u: self.xmax, v: self.ymax },
            PixelPoint { u: self.xmin, v: self.ymax },
        ]
    }

    pub fn is_valid(&self) -> bool {
        self.xmax > self.xmin && self.ymax > self.ymin
    }
}

/// Why a bounding box produced no footprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FootprintRejection {
    /// A corner's back-projected ray missed the floor ahead of the camera.
    AboveHorizon,
    /// Footprint lies farther from the robot center than the depth cutoff.
    TooFar,
    /// Projected hull collapsed below the area floor.
    Degenerate,
}

impl core::fmt::Display for FootprintRejection {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let msg = match self {
            FootprintRejection::AboveHorizon => "above-horizon",
            FootprintRejection::TooFar => "too-far",
            FootprintRejection::Degenerate => "degenerate",
        };
        write!(f, "{msg}")
    }
}

/// Project the four bbox corners to the floor and take their convex hull.
///
/// Depth is the minimum distance from the robot's (x, y) to the hull;
/// hulls past `max_depth` are rejected so distant, poorly-localized
/// footprints never enter matching.
pub fn project_bbox_footprint(
    h: &FloorHomography,
    bbox: &PixelBox,
    pose: &RobotPose,
    max_depth: f64,
    source: SourceId,
) -> Result<FloorPolygon, FootprintRejection> {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(4);
    for c in bbox.corners() {
        match image_to_floor(h, &c) {
            Ok(f) => pts.push([f.x, f.y]),
            Err(_) => return Err(FootprintRejection::AboveHorizon),
        }
    }
    let hull = polygon::convex_hull(&pts, source).map_err(|_| FootprintRejection::Degenerate)?;
    if polygon::area(&hull) < EPS_AREA {
        return Err(FootprintRejection::Degenerate);
    }
    let dist = polygon::distance_to_point(&hull.vertices, [pose.x, pose.y]);
    if dist > max_depth {
        return Err(FootprintRejection::TooFar);
    }
    Ok(hull)
}
