//! Synthetic camera trajectories and pinhole optical-flow rendering.
//!
//! Fifteen atomic motion primitives drive closed-form camera pose sequences.
//! Scenes are randomized 3D point clouds (optionally with independently
//! moving distractor points); features are per-cell averaged flow vectors on
//! a fixed image grid. Conventions: x right, y up, z forward (into the
//! scene); `rotation` maps world to camera coordinates, so a point projects
//! through `rotation * (p - translation)`. Signs are chosen so the image
//! flow direction matches the label word (pan-left flows leftward, pedestal-
//! up flows upward, dolly-in flows outward).

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Points with camera-frame depth at or below this are treated as invisible.
pub const BEHIND_CAMERA_EPS: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("trajectory needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("magnitude must be positive, got {0}")]
    NonPositiveMagnitude(f64),
    #[error("focal length must be positive, got {0}")]
    NonPositiveFocal(f64),
    #[error("rotation is not orthonormal with unit determinant (max deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("all {count} scene points are behind the camera at frame {frame}")]
    DegenerateScene { frame: usize, count: usize },
    #[error("scene has no points")]
    EmptyScene,
}

/// The 15 atomic ego-motion classes: 6 translations, 2 focal zooms,
/// 6 rotations, and the static camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MotionPrimitive {
    DollyIn,
    DollyOut,
    PedestalUp,
    PedestalDown,
    TruckLeft,
    TruckRight,
    ZoomIn,
    ZoomOut,
    PanLeft,
    PanRight,
    TiltUp,
    TiltDown,
    RollCw,
    RollCcw,
    Static,
}

/// Coarse motion family; reasoning traces name the family, and the
/// consistency filter checks the named family against the answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionFamily {
    Translation,
    Zoom,
    Rotation,
    Static,
}

use MotionPrimitive::*;

impl MotionPrimitive {
    pub const ALL: [MotionPrimitive; 15] = [
        DollyIn, DollyOut, PedestalUp, PedestalDown, TruckLeft, TruckRight, ZoomIn, ZoomOut,
        PanLeft, PanRight, TiltUp, TiltDown, RollCw, RollCcw, Static,
    ];

    /// Canonical two-word surface phrase (also the serialized form).
    pub fn phrase(self) -> &'static str {
        match self {
            DollyIn => "dolly in",
            DollyOut => "dolly out",
            PedestalUp => "pedestal up",
            PedestalDown => "pedestal down",
            TruckLeft => "truck left",
            TruckRight => "truck right",
            ZoomIn => "zoom in",
            ZoomOut => "zoom out",
            PanLeft => "pan left",
            PanRight => "pan right",
            TiltUp => "tilt up",
            TiltDown => "tilt down",
            RollCw => "roll cw",
            RollCcw => "roll ccw",
            Static => "static",
        }
    }

    pub fn from_phrase(s: &str) -> Option<MotionPrimitive> {
        Self::ALL.iter().copied().find(|p| p.phrase() == s)
    }

    pub fn family(self) -> MotionFamily {
        match self {
            DollyIn | DollyOut | PedestalUp | PedestalDown | TruckLeft | TruckRight => {
                MotionFamily::Translation
            }
            ZoomIn | ZoomOut => MotionFamily::Zoom,
            PanLeft | PanRight | TiltUp | TiltDown | RollCw | RollCcw => MotionFamily::Rotation,
            Static => MotionFamily::Static,
        }
    }

    /// Stable position in [`Self::ALL`].
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&p| p == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<MotionPrimitive> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for MotionPrimitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phrase())
    }
}

impl Serialize for MotionPrimitive {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(self.phrase())
    }
}

impl<'de> Deserialize<'de> for MotionPrimitive {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        MotionPrimitive::from_phrase(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown motion label {s:?}")))
    }
}

/// World-to-camera extrinsics plus the intrinsic focal length for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera position in world coordinates.
    pub translation: Vector3<f64>,
    /// Focal length in pixels.
    pub focal: f64,
}

impl CameraPose {
    pub fn identity(focal: f64) -> CameraPose {
        CameraPose { rotation: Matrix3::identity(), translation: Vector3::zeros(), focal }
    }

    /// Checks orthonormality, unit determinant, and a positive focal.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.focal <= 0.0 {
            return Err(GeometryError::NonPositiveFocal(self.focal));
        }
        let gram = self.rotation * self.rotation.transpose();
        let mut dev: f64 = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                dev = dev.max((gram[(r, c)] - want).abs());
            }
        }
        dev = dev.max((self.rotation.determinant() - 1.0).abs());
        if dev > ORTHONORMAL_TOL {
            return Err(GeometryError::NotOrthonormal(dev));
        }
        Ok(())
    }
}

/// A labeled pose sequence; one pose per frame.
#[derive(Debug, Clone)]
pub struct CameraTrajectory {
    pub label: MotionPrimitive,
    pub poses: Vec<CameraPose>,
    /// Per-frame radians (rotations), per-frame world units (translations),
    /// or total focal log-ratio (zooms). Ignored for the static label.
    pub magnitude: f64,
}

fn axis_rotation(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Builds the pose sequence for one primitive. Frame k carries k times the
/// per-frame increment; zooms scale the focal geometrically so the final
/// frame reaches `base_focal * exp(magnitude)`.
pub fn make_trajectory(
    label: MotionPrimitive,
    frames: usize,
    magnitude: f64,
    base_focal: f64,
) -> Result<CameraTrajectory, GeometryError> {
    if frames < 2 {
        return Err(GeometryError::TooFewFrames(frames));
    }
    if !(magnitude > 0.0) {
        return Err(GeometryError::NonPositiveMagnitude(magnitude));
    }
    if !(base_focal > 0.0) {
        return Err(GeometryError::NonPositiveFocal(base_focal));
    }
    let mut poses = Vec::with_capacity(frames);
    for k in 0..frames {
        let t = k as f64 * magnitude;
        let pose = match label {
            Static => CameraPose::identity(base_focal),
            PanLeft => CameraPose {
                rotation: axis_rotation(*Vector3::y_axis(), -t),
                translation: Vector3::zeros(),
                focal: base_focal,
            },
            PanRight => CameraPose {
                rotation: axis_rotation(*Vector3::y_axis(), t),
                translation: Vector3::zeros(),
                focal: base_focal,
            },
            TiltUp => CameraPose {
                rotation: axis_rotation(*Vector3::x_axis(), -t),
                translation: Vector3::zeros(),
                focal: base_focal,
            },
            TiltDown => CameraPose {
                rotation: axis_rotation(*Vector3::x_axis(), t),
                translation: Vector3::zeros(),
                focal: base_focal,
            },
            RollCw => CameraPose {
                rotation: axis_rotation(*Vector3::z_axis(), -t),
                translation: Vector3::zeros(),
                focal: base_focal,
            },
            RollCcw => CameraPose {
                rotation: axis_rotation(*Vector3::z_axis(), t),
                translation: Vector3::zeros(),
                focal: base_focal,
            },
            TruckLeft => CameraPose {
                rotation: Matrix3::identity(),
                translation: Vector3::new(t, 0.0, 0.0),
                focal: base_focal,
            },
            TruckRight => CameraPose {
                rotation: Matrix3::identity(),
                translation: Vector3::new(-t, 0.0, 0.0),
                focal: base_focal,
            },
            PedestalUp => CameraPose {
                rotation: Matrix3::identity(),
                translation: Vector3::new(0.0, -t, 0.0),
                focal: base_focal,
            },
            PedestalDown => CameraPose {
                rotation: Matrix3::identity(),
                translation: Vector3::new(0.0, t, 0.0),
                focal: base_focal,
            },
            DollyIn => CameraPose {
                rotation: Matrix3::identity(),
                translation: Vector3::new(0.0, 0.0, t),
                focal: base_focal,
            },
            DollyOut => CameraPose {
                rotation: Matrix3::identity(),
                translation: Vector3::new(0.0, 0.0, -t),
                focal: base_focal,
            },
            ZoomIn | ZoomOut => {
                let sign = if label == ZoomIn { 1.0 } else { -1.0 };
                let log_ratio = sign * magnitude * k as f64 / (frames - 1) as f64;
                CameraPose {
                    rotation: Matrix3::identity(),
                    translation: Vector3::zeros(),
                    focal: base_focal * log_ratio.exp(),
                }
            }
        };
        poses.push(pose);
    }
    Ok(CameraTrajectory { label, poses, magnitude })
}

/// Scene geometry and rendering defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Base focal length in pixels.
    pub focal: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Frames per episode; features cover `frames - 1` consecutive pairs.
    pub frames: usize,
    /// Static scene points.
    pub num_points: usize,
    /// Independently moving distractor points (when enabled).
    pub num_distractors: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Max per-frame distractor speed along each axis, world units.
    pub distractor_speed: f64,
    /// Per-frame radians for rotations.
    pub rot_magnitude: [f64; 2],
    /// Per-frame world units for translations.
    pub trans_magnitude: [f64; 2],
    /// Total focal log-ratio for zooms.
    pub zoom_magnitude: [f64; 2],
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            focal: 100.0,
            image_width: 128.0,
            image_height: 128.0,
            grid_rows: 4,
            grid_cols: 4,
            frames: 8,
            num_points: 256,
            num_distractors: 32,
            depth_min: 2.0,
            depth_max: 20.0,
            distractor_speed: 0.05,
            rot_magnitude: [0.01, 0.05],
            trans_magnitude: [0.02, 0.1],
            zoom_magnitude: [0.05, 0.2],
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field} must be positive")]
    NonPositive { field: &'static str },
    #[error("depth_min must be < depth_max and positive")]
    BadDepthRange,
    #[error("magnitude range {field} must satisfy 0 < lo <= hi")]
    BadMagnitudeRange { field: &'static str },
}

impl GeometryConfig {
    /// Flattened feature length: rows * cols * (frames - 1) * 2.
    pub fn feature_len(&self) -> usize {
        self.grid_rows * self.grid_cols * (self.frames - 1) * 2
    }

    pub fn grid_dims(&self) -> (usize, usize, usize) {
        (self.grid_rows, self.grid_cols, self.frames - 1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (v, field) in [
            (self.focal, "focal"),
            (self.image_width, "image_width"),
            (self.image_height, "image_height"),
            (self.distractor_speed, "distractor_speed"),
        ] {
            if !(v > 0.0) {
                return Err(ConfigError::NonPositive { field });
            }
        }
        for (v, field) in [
            (self.grid_rows, "grid_rows"),
            (self.grid_cols, "grid_cols"),
            (self.num_points, "num_points"),
        ] {
            if v == 0 {
                return Err(ConfigError::NonPositive { field });
            }
        }
        if self.frames < 2 {
            return Err(ConfigError::NonPositive { field: "frames" });
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return Err(ConfigError::BadDepthRange);
        }
        for (r, field) in [
            (self.rot_magnitude, "rot_magnitude"),
            (self.trans_magnitude, "trans_magnitude"),
            (self.zoom_magnitude, "zoom_magnitude"),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(ConfigError::BadMagnitudeRange { field });
            }
        }
        Ok(())
    }
}

/// Draws a magnitude from the family's configured range.
pub fn sample_magnitude<R: Rng>(label: MotionPrimitive, cfg: &GeometryConfig, rng: &mut R) -> f64 {
    let [lo, hi] = match label.family() {
        MotionFamily::Rotation => cfg.rot_magnitude,
        MotionFamily::Zoom => cfg.zoom_magnitude,
        // Static episodes ignore the value but draw one anyway so the rng
        // stream advances identically for every label.
        MotionFamily::Translation | MotionFamily::Static => cfg.trans_magnitude,
    };
    rng.gen_range(lo..=hi)
}

/// Randomized 3D points; distractors carry a constant per-frame velocity.
#[derive(Debug, Clone)]
pub struct ScenePointCloud {
    pub points: Vec<Vector3<f64>>,
    pub dynamic_mask: Vec<bool>,
    /// Per-frame world-space velocity; zero wherever the mask is false.
    pub dynamic_velocity: Vec<Vector3<f64>>,
}

impl ScenePointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Point i's world position at frame k.
    fn position(&self, i: usize, frame: usize) -> Vector3<f64> {
        self.points[i] + self.dynamic_velocity[i] * frame as f64
    }
}

/// Samples points log-uniform in depth, uniform across the base-focal view
/// frustum at each depth. Distractor points are appended when enabled.
pub fn sample_scene<R: Rng>(
    cfg: &GeometryConfig,
    distractors: bool,
    rng: &mut R,
) -> ScenePointCloud {
    let n_dyn = if distractors { cfg.num_distractors } else { 0 };
    let total = cfg.num_points + n_dyn;
    let mut points = Vec::with_capacity(total);
    let mut dynamic_mask = Vec::with_capacity(total);
    let mut dynamic_velocity = Vec::with_capacity(total);
    let (ln_min, ln_max) = (cfg.depth_min.ln(), cfg.depth_max.ln());
    for i in 0..total {
        let z = (rng.gen_range(ln_min..=ln_max)).exp();
        let half_w = z * (cfg.image_width / 2.0) / cfg.focal;
        let half_h = z * (cfg.image_height / 2.0) / cfg.focal;
        let x = rng.gen_range(-half_w..=half_w);
        let y = rng.gen_range(-half_h..=half_h);
        points.push(Vector3::new(x, y, z));
        let dynamic = i >= cfg.num_points;
        dynamic_mask.push(dynamic);
        dynamic_velocity.push(if dynamic {
            let s = cfg.distractor_speed;
            Vector3::new(rng.gen_range(-s..=s), rng.gen_range(-s..=s), rng.gen_range(-s..=s))
        } else {
            Vector3::zeros()
        });
    }
    ScenePointCloud { points, dynamic_mask, dynamic_velocity }
}

/// Pinhole projection of a world point; `None` when the point sits at or
/// behind the near-plane epsilon.
pub fn project(point: &Vector3<f64>, pose: &CameraPose) -> Option<Vector2<f64>> {
    let cam = pose.rotation * (point - pose.translation);
    if cam.z <= BEHIND_CAMERA_EPS {
        return None;
    }
    Some(Vector2::new(pose.focal * cam.x / cam.z, pose.focal * cam.y / cam.z))
}

/// Grid-pooled flow features: per-cell mean displacement for each
/// consecutive frame pair, flattened pair-major, then row-major, then the
/// (dx, dy) channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowFeatures {
    pub values: Vec<f64>,
    /// (rows, cols, frame pairs).
    pub grid_dims: (usize, usize, usize),
}

impl FlowFeatures {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mean absolute flow component, a cheap overall-strength statistic.
    pub fn mean_abs(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|v| v.abs()).sum::<f64>() / self.values.len() as f64
    }
}

fn cell_of(p: &Vector2<f64>, cfg: &GeometryConfig) -> Option<(usize, usize)> {
    let (hw, hh) = (cfg.image_width / 2.0, cfg.image_height / 2.0);
    if p.x.abs() > hw || p.y.abs() > hh {
        return None;
    }
    let col = (((p.x + hw) / cfg.image_width) * cfg.grid_cols as f64) as usize;
    let row = (((hh - p.y) / cfg.image_height) * cfg.grid_rows as f64) as usize;
    Some((row.min(cfg.grid_rows - 1), col.min(cfg.grid_cols - 1)))
}

/// Renders per-cell mean flow over every consecutive frame pair. A point
/// contributes to the cell under its first-frame pixel when it projects in
/// front of the camera in both frames and inside the image in the first.
/// Cells nobody hits stay zero. Errors when the scene is empty or every
/// point is behind the camera in some frame.
pub fn render_flow(
    scene: &ScenePointCloud,
    traj: &CameraTrajectory,
    cfg: &GeometryConfig,
) -> Result<FlowFeatures, GeometryError> {
    if scene.is_empty() {
        return Err(GeometryError::EmptyScene);
    }
    let frames = traj.poses.len();
    if frames < 2 {
        return Err(GeometryError::TooFewFrames(frames));
    }
    for (frame, pose) in traj.poses.iter().enumerate() {
        let any_visible = (0..scene.len()).any(|i| {
            let cam = pose.rotation * (scene.position(i, frame) - pose.translation);
            cam.z > BEHIND_CAMERA_EPS
        });
        if !any_visible {
            return Err(GeometryError::DegenerateScene { frame, count: scene.len() });
        }
    }
    let (rows, cols) = (cfg.grid_rows, cfg.grid_cols);
    let pairs = frames - 1;
    let mut values = vec![0.0; rows * cols * pairs * 2];
    let mut counts = vec![0usize; rows * cols * pairs];
    for k in 0..pairs {
        let (pose_a, pose_b) = (&traj.poses[k], &traj.poses[k + 1]);
        for i in 0..scene.len() {
            let a = match project(&scene.position(i, k), pose_a) {
                Some(p) => p,
                None => continue,
            };
            let b = match project(&scene.position(i, k + 1), pose_b) {
                Some(p) => p,
                None => continue,
            };
            let (row, col) = match cell_of(&a, cfg) {
                Some(rc) => rc,
                None => continue,
            };
            let cell = (k * rows + row) * cols + col;
            values[cell * 2] += b.x - a.x;
            values[cell * 2 + 1] += b.y - a.y;
            counts[cell] += 1;
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        if n > 0 {
            values[cell * 2] /= n as f64;
            values[cell * 2 + 1] /= n as f64;
        }
    }
    Ok(FlowFeatures { values, grid_dims: (rows, cols, pairs) })
}
