//! Analytic ray-cast RGBD scenes and the scripted reach task.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decoders::ActionChunk;
use crate::error::{Error, Result};
use crate::geometry::{CameraCalibration, CameraFrame, CameraIntrinsics, Proprioception, RigidTransform};
use crate::tensor_io;

/// Smallest ray parameter counted as a hit.
const MIN_HIT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Box rotated by `yaw` about the vertical axis through its center.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        #[serde(default)]
        yaw: f64,
    },
    /// Horizontal plane `z = height`.
    Plane { height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProprioRecord {
    /// Row-major 4×4 EE → base transform.
    pub ee_pose: [f64; 16],
    pub gripper: f64,
}

impl ProprioRecord {
    pub fn new(p: &Proprioception) -> Self {
        Self {
            ee_pose: p.ee_pose.to_row_major(),
            gripper: p.gripper,
        }
    }

    pub fn proprioception(&self) -> Result<Proprioception> {
        if !(0.0..=1.0).contains(&self.gripper) {
            return Err(Error::InvalidInput(format!(
                "gripper state {} outside [0, 1]",
                self.gripper
            )));
        }
        Ok(Proprioception {
            ee_pose: RigidTransform::from_row_major(&self.ee_pose)?,
            gripper: self.gripper,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub cameras: Vec<CameraCalibration>,
    pub proprio: ProprioRecord,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of additive Gaussian depth noise (meters).
    #[serde(default)]
    pub depth_noise: Option<f64>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::InvalidInput("scene needs at least one camera".into()));
        }
        for c in &self.cameras {
            c.intrinsics()?;
            c.extrinsic()?;
        }
        for p in &self.primitives {
            let ok = match p.shape {
                Shape::Sphere { center, radius } => finite(&center) && radius > 0.0 && radius.is_finite(),
                Shape::Box {
                    center,
                    half_extents,
                    yaw,
                } => finite(&center) && half_extents.iter().all(|h| *h > 0.0 && h.is_finite()) && yaw.is_finite(),
                Shape::Plane { height } => height.is_finite(),
            };
            if !ok {
                return Err(Error::InvalidInput(format!("invalid primitive {:?}", p.shape)));
            }
        }
        if let Some(s) = self.depth_noise {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidInput(format!("depth noise {s} must be non-negative")));
            }
        }
        self.proprio.proprioception()?;
        Ok(())
    }

    /// Same scene seen from cameras moved by `t` (applied in the base frame).
    pub fn with_cameras_moved(&self, t: &RigidTransform) -> Result<Self> {
        let mut out = self.clone();
        for c in &mut out.cameras {
            let moved = t.compose(&c.extrinsic()?);
            c.extrinsic = moved.to_row_major();
        }
        Ok(out)
    }

    /// Scene, cameras and end effector all moved by `t`.
    pub fn transformed(&self, t: &RigidTransform) -> Result<Self> {
        let mut out = self.with_cameras_moved(t)?;
        let ee = out.proprio.proprioception()?.ee_pose;
        out.proprio.ee_pose = t.compose(&ee).to_row_major();
        let rotate = |p: [f64; 3]| {
            let v = t.apply(&Vector3::from(p));
            [v[0], v[1], v[2]]
        };
        for p in &mut out.primitives {
            p.shape = match p.shape {
                Shape::Sphere { center, radius } => Shape::Sphere {
                    center: rotate(center),
                    radius,
                },
                Shape::Box {
                    center,
                    half_extents,
                    yaw,
                } => {
                    let tilt = (t.rotation * Vector3::z() - Vector3::z()).norm();
                    if tilt > 1e-9 {
                        return Err(Error::InvalidInput("boxes only support rotations about z".into()));
                    }
                    let dx = t.rotation * Vector3::x();
                    Shape::Box {
                        center: rotate(center),
                        half_extents,
                        yaw: yaw + dx[1].atan2(dx[0]),
                    }
                }
                Shape::Plane { height } => {
                    let tilt = (t.rotation * Vector3::z() - Vector3::z()).norm();
                    if tilt > 1e-9 {
                        return Err(Error::InvalidInput("planes only support rotations about z".into()));
                    }
                    Shape::Plane {
                        height: height + t.translation[2],
                    }
                }
            };
        }
        Ok(out)
    }
}

fn finite(v: &[f64; 3]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Smallest positive ray parameter `t` with `origin + t·dir` on the shape.
pub fn intersect(shape: &Shape, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    match *shape {
        Shape::Sphere { center, radius } => {
            let oc = origin - Vector3::from(center);
            let a = dir.norm_squared();
            let b = oc.dot(dir);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            [(-b - sq) / a, (-b + sq) / a].into_iter().find(|t| *t > MIN_HIT)
        }
        Shape::Box {
            center,
            half_extents,
            yaw,
        } => {
            let r = yaw_matrix(yaw).transpose();
            let o = r * (origin - Vector3::from(center));
            let d = r * dir;
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..3 {
                if d[k].abs() < 1e-15 {
                    if o[k].abs() > half_extents[k] {
                        return None;
                    }
                    continue;
                }
                let a = (-half_extents[k] - o[k]) / d[k];
                let b = (half_extents[k] - o[k]) / d[k];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
            if t0 > t1 {
                return None;
            }
            [t0, t1].into_iter().find(|t| *t > MIN_HIT)
        }
        Shape::Plane { height } => {
            if dir[2].abs() < 1e-15 {
                return None;
            }
            let t = (height - origin[2]) / dir[2];
            (t > MIN_HIT).then_some(t)
        }
    }
}

/// Unsigned distance from `p` to the shape's surface.
pub fn surface_distance(shape: &Shape, p: &Vector3<f64>) -> f64 {
    match *shape {
        Shape::Sphere { center, radius } => ((p - Vector3::from(center)).norm() - radius).abs(),
        Shape::Box {
            center,
            half_extents,
            yaw,
        } => {
            let q = yaw_matrix(yaw).transpose() * (p - Vector3::from(center));
            let d = q.abs() - Vector3::from(half_extents);
            let outside = d.map(|v| v.max(0.0)).norm();
            let inside = d.max().min(0.0);
            (outside + inside).abs()
        }
        Shape::Plane { height } => (p[2] - height).abs(),
    }
}

/// Distance from `p` to the closest primitive surface.
pub fn scene_distance(primitives: &[Primitive], p: &Vector3<f64>) -> f64 {
    primitives
        .iter()
        .map(|q| surface_distance(&q.shape, p))
        .fold(f64::INFINITY, f64::min)
}

/// Ray-casts every camera. Depth is the camera-frame z of the first hit;
/// pixels that hit nothing get NaN depth and black colour.
pub fn render(spec: &SceneSpec) -> Result<Vec<CameraFrame>> {
    spec.validate()?;
    spec.cameras
        .iter()
        .enumerate()
        .map(|(ci, cam)| {
            let intrinsics = cam.intrinsics()?;
            let extrinsic = cam.extrinsic()?;
            let (h, w) = (intrinsics.height, intrinsics.width);
            let mut depth = Array2::from_elem((h, w), f64::NAN);
            let mut rgb = Array3::zeros((h, w, 3));
            let origin = extrinsic.translation;
            for v in 0..h {
                for u in 0..w {
                    // z component 1, so the ray parameter is the z-depth.
                    let dir = extrinsic.rotation * intrinsics.ray(u as f64, v as f64);
                    let hit = spec
                        .primitives
                        .iter()
                        .filter_map(|p| intersect(&p.shape, &origin, &dir).map(|t| (t, p)))
                        .min_by(|a, b| a.0.total_cmp(&b.0));
                    if let Some((t, p)) = hit {
                        depth[(v, u)] = t;
                        for k in 0..3 {
                            rgb[(v, u, k)] = p.albedo[k].clamp(0.0, 1.0);
                        }
                    }
                }
            }
            if let Some(sigma) = spec.depth_noise.filter(|s| *s > 0.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(ci as u64));
                let normal = Normal::new(0.0, sigma).expect("validated sigma");
                depth.mapv_inplace(|d| if d.is_finite() { d + normal.sample(&mut rng) } else { d });
            }
            Ok(CameraFrame {
                rgb,
                depth,
                intrinsics,
                extrinsic,
            })
        })
        .collect()
}

pub const RED: [f64; 3] = [0.9, 0.1, 0.1];
pub const BLUE: [f64; 3] = [0.1, 0.2, 0.9];
const TABLE: [f64; 3] = [0.6, 0.6, 0.55];
const GREEN: [f64; 3] = [0.15, 0.7, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReachConfig {
    pub image_size: usize,
    pub hfov_deg: f64,
    pub camera_eyes: Vec<[f64; 3]>,
    pub look_target: [f64; 3],
    pub sphere_radius: f64,
    /// Half width of the square region spheres are placed in.
    pub placement_half: f64,
    pub chunk_len: usize,
    /// Meters per unit action.
    pub step: f64,
    pub ee_height: [f64; 2],
    pub ee_yaw_range: f64,
    pub distractor: bool,
    pub depth_noise: Option<f64>,
}

impl Default for ReachConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            hfov_deg: 60.0,
            camera_eyes: vec![[0.9, -0.2, 0.8], [-0.2, 0.9, 0.8]],
            look_target: [0.0, 0.0, 0.1],
            sphere_radius: 0.05,
            placement_half: 0.3,
            chunk_len: 8,
            step: 0.05,
            ee_height: [0.2, 0.4],
            ee_yaw_range: 0.0,
            distractor: true,
            depth_noise: None,
        }
    }
}

impl ReachConfig {
    pub fn cameras(&self) -> Result<Vec<CameraCalibration>> {
        let k = CameraIntrinsics::from_fov(self.image_size, self.image_size, self.hfov_deg.to_radians());
        self.camera_eyes
            .iter()
            .map(|eye| {
                let ext = RigidTransform::look_at(Vector3::from(*eye), Vector3::from(self.look_target), Vector3::z())?;
                Ok(CameraCalibration::new(&k, &ext))
            })
            .collect()
    }
}

/// Straight-line expert: each step moves `step` meters toward the target
/// (less on the final step). Columns are the normalized delta and the
/// gripper command, which closes once the target is reached.
pub fn expert_chunk(ee: [f64; 3], target: [f64; 3], chunk_len: usize, step: f64) -> ActionChunk {
    let mut pos = Vector3::from(ee);
    let goal = Vector3::from(target);
    let mut actions = Array2::zeros((chunk_len, 4));
    for k in 0..chunk_len {
        let delta = goal - pos;
        let dist = delta.norm();
        if dist > 0.0 {
            let scale = dist.min(step) / step;
            let dir = delta / dist;
            for j in 0..3 {
                actions[(k, j)] = dir[j] * scale;
            }
            pos += dir * dist.min(step);
        }
        if (goal - pos).norm() <= 1e-12 {
            actions[(k, 3)] = 1.0;
        }
    }
    ActionChunk { actions }
}

#[derive(Debug, Clone)]
pub struct ReachSample {
    pub spec: SceneSpec,
    pub frames: Vec<CameraFrame>,
    pub proprio: Proprioception,
    pub instruction: String,
    pub target: [f64; 3],
    pub chunk: ActionChunk,
}

fn sample_spec(cfg: &ReachConfig, cameras: &[CameraCalibration], rng: &mut ChaCha8Rng, seed: u64) -> (SceneSpec, [f64; 3], [f64; 3]) {
    let r = cfg.sphere_radius;
    let half = cfg.placement_half;
    let red = [rng.random_range(-half..half), rng.random_range(-half..half), r];
    let mut blue;
    loop {
        blue = [rng.random_range(-half..half), rng.random_range(-half..half), r];
        if (blue[0] - red[0]).hypot(blue[1] - red[1]) > 4.0 * r {
            break;
        }
    }
    let mut primitives = vec![
        Primitive {
            shape: Shape::Plane { height: 0.0 },
            albedo: TABLE,
        },
        Primitive {
            shape: Shape::Sphere { center: red, radius: r },
            albedo: RED,
        },
        Primitive {
            shape: Shape::Sphere { center: blue, radius: r },
            albedo: BLUE,
        },
    ];
    if cfg.distractor {
        let c = [rng.random_range(-half..half), rng.random_range(-half..half), 0.03];
        primitives.push(Primitive {
            shape: Shape::Box {
                center: c,
                half_extents: [0.04, 0.04, 0.03],
                yaw: rng.random_range(0.0..std::f64::consts::PI),
            },
            albedo: GREEN,
        });
    }
    let ee = [
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(cfg.ee_height[0]..cfg.ee_height[1]),
    ];
    let yaw = if cfg.ee_yaw_range > 0.0 {
        rng.random_range(-cfg.ee_yaw_range..cfg.ee_yaw_range)
    } else {
        0.0
    };
    // Gripper pointing down: EE z axis along base -z.
    let down = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
    let ee_pose = RigidTransform {
        rotation: yaw_matrix(yaw) * down,
        translation: Vector3::from(ee),
    };
    let spec = SceneSpec {
        primitives,
        cameras: cameras.to_vec(),
        proprio: ProprioRecord {
            ee_pose: ee_pose.to_row_major(),
            gripper: 0.0,
        },
        seed,
        depth_noise: cfg.depth_noise,
    };
    (spec, red, blue)
}

/// `n` independent episodes; half the instructions ask for each sphere on
/// average. Deterministic in `seed`.
pub fn make_reach_task(cfg: &ReachConfig, n: usize, seed: u64) -> Result<Vec<ReachSample>> {
    if n == 0 {
        return Err(Error::InvalidInput("reach task needs at least one episode".into()));
    }
    let cameras = cfg.cameras()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (spec, red, blue) = sample_spec(cfg, &cameras, &mut rng, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            let (instruction, target) = if rng.random_bool(0.5) {
                ("reach red sphere", red)
            } else {
                ("reach blue sphere", blue)
            };
            let proprio = spec.proprio.proprioception()?;
            let t = proprio.ee_pose.translation;
            let chunk = expert_chunk([t[0], t[1], t[2]], target, cfg.chunk_len, cfg.step);
            let frames = render(&spec)?;
            Ok(ReachSample {
                spec,
                frames,
                proprio,
                instruction: instruction.to_string(),
                target,
                chunk,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub instruction: String,
    pub proprio: ProprioRecord,
    pub target: [f64; 3],
    pub calibration: Vec<CameraCalibration>,
    pub frames: Vec<FrameFiles>,
    pub actions: String,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFiles {
    pub rgb: String,
    pub depth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub episodes: Vec<EpisodeRecord>,
}

pub const MANIFEST: &str = "manifest.json";

fn write_tensor<D: ndarray::Dimension>(dir: &Path, name: &str, a: &ndarray::Array<f64, D>) -> Result<String> {
    tensor_io::save(&dir.join(name), a)?;
    Ok(name.to_string())
}

/// Frames as `cam{i}_rgb.a3rt` / `cam{i}_depth.a3rt` under `dir`, with a
/// file-name prefix.
pub fn save_frames(dir: &Path, prefix: &str, frames: &[CameraFrame]) -> Result<Vec<FrameFiles>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            Ok(FrameFiles {
                rgb: write_tensor(dir, &format!("{prefix}cam{i}_rgb.a3rt"), &f.rgb)?,
                depth: write_tensor(dir, &format!("{prefix}cam{i}_depth.a3rt"), &f.depth)?,
            })
        })
        .collect()
}

pub fn load_frames(dir: &Path, files: &[FrameFiles], calib: &[CameraCalibration]) -> Result<Vec<CameraFrame>> {
    if files.len() != calib.len() {
        return Err(Error::dims("camera count", calib.len(), files.len()));
    }
    files
        .iter()
        .zip(calib)
        .map(|(f, c)| {
            let rgb = tensor_io::decode_float(&read(&dir.join(&f.rgb))?)?
                .into_dimensionality()
                .map_err(|e| Error::Shape(format!("{}: {e}", f.rgb)))?;
            let depth = tensor_io::decode_float(&read(&dir.join(&f.depth))?)?
                .into_dimensionality()
                .map_err(|e| Error::Shape(format!("{}: {e}", f.depth)))?;
            let frame = CameraFrame {
                rgb,
                depth,
                intrinsics: c.intrinsics()?,
                extrinsic: c.extrinsic()?,
            };
            frame.validate()?;
            Ok(frame)
        })
        .collect()
}

/// Default file names for `cameras` frames written without a prefix.
pub fn frame_files(cameras: usize) -> Vec<FrameFiles> {
    (0..cameras)
        .map(|i| FrameFiles {
            rgb: format!("cam{i}_rgb.a3rt"),
            depth: format!("cam{i}_depth.a3rt"),
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dir: &Path, samples: &[ReachSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut episodes = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let prefix = format!("ep{i:05}_");
        let frames = save_frames(dir, &prefix, &s.frames)?;
        let actions = write_tensor(dir, &format!("{prefix}actions.a3rt"), &s.chunk.actions)?;
        episodes.push(EpisodeRecord {
            instruction: s.instruction.clone(),
            proprio: ProprioRecord::new(&s.proprio),
            target: s.target,
            calibration: s.spec.cameras.clone(),
            frames,
            actions,
            scene: s.spec.clone(),
        });
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&DatasetManifest { episodes }).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<ReachSample>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if manifest.episodes.is_empty() {
        return Err(Error::InvalidInput(format!("{} lists no episodes", path.display())));
    }
    manifest
        .episodes
        .into_iter()
        .map(|ep| {
            let frames = load_frames(dir, &ep.frames, &ep.calibration)?;
            let actions = tensor_io::decode_float(&read(&dir.join(&ep.actions))?)?
                .into_dimensionality()
                .map_err(|e| Error::Shape(format!("{}: {e}", ep.actions)))?;
            Ok(ReachSample {
                proprio: ep.proprio.proprioception()?,
                spec: ep.scene,
                frames,
                instruction: ep.instruction,
                target: ep.target,
                chunk: ActionChunk::new(actions)?,
            })
        })
        .collect()
}
