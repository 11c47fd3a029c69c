//! Multi-camera feature-cloud fusion, end-effector frame change and cropping.

use nalgebra::Vector3;
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureVolume;
use crate::error::{Error, Result};
use crate::geometry::{deproject, invert, transform_points, CameraFrame, PointMap, Proprioception, RigidTransform};

/// Coordinate frame of a cloud's `points`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CloudFrame {
    Base,
    /// End-effector frame; carries the EE pose (EE → base) used to get there.
    EndEffector(RigidTransform),
}

/// Row-aligned points, features, colors and validity of a fused cloud.
///
/// Rows are never deleted; crops only clear `valid`, so `len()` stays equal
/// to the sum of feature-grid cells over all cameras.
#[derive(Debug, Clone)]
pub struct FeatureCloud {
    pub points: Array2<f64>,
    pub features: Array2<f64>,
    /// RGB of the depth pixel each row was taken from.
    pub colors: Array2<f64>,
    pub valid: Vec<bool>,
    pub frame: CloudFrame,
    /// First row of every camera's block, plus a trailing end offset.
    pub camera_offsets: Vec<usize>,
}

impl FeatureCloud {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        self.valid
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.then_some(i))
            .collect()
    }

    /// Points expressed in the robot base frame, whatever the current frame.
    pub fn base_points(&self) -> Array2<f64> {
        match &self.frame {
            CloudFrame::Base => self.points.clone(),
            CloudFrame::EndEffector(pose) => transform_points(self.points.view(), pose),
        }
    }

    pub fn is_ee_frame(&self) -> bool {
        matches!(self.frame, CloudFrame::EndEffector(_))
    }
}

/// Pixel index nearest to the center of cell `cell` when an axis of `image`
/// pixels is split into `grid` cells. Ties go to the smaller index.
pub fn nearest_source_index(cell: usize, grid: usize, image: usize) -> usize {
    // Cell center in pixel coordinates is ((2c+1)·image/grid − 1)/2; the nearest
    // pixel with ties rounded down is ceil(center − 1/2).
    let num = (2 * cell as i64 + 1) * image as i64 - 2 * grid as i64;
    let den = 2 * grid as i64;
    let idx = if num >= 0 { (num + den - 1) / den } else { num / den };
    idx.clamp(0, image as i64 - 1) as usize
}

/// Deprojects every frame at full resolution, then fuses.
pub fn fuse(frames: &[CameraFrame], volumes: &[FeatureVolume]) -> Result<FeatureCloud> {
    let maps: Vec<PointMap> = frames.par_iter().map(deproject).collect();
    fuse_point_maps(frames, &maps, volumes)
}

/// Fuses already-deprojected point maps: each camera's map is moved to the
/// base frame and resampled onto its feature grid by nearest neighbour, then
/// all cameras are flattened and concatenated.
pub fn fuse_point_maps(
    frames: &[CameraFrame],
    maps: &[PointMap],
    volumes: &[FeatureVolume],
) -> Result<FeatureCloud> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("at least one camera is required".into()));
    }
    if frames.len() != volumes.len() || frames.len() != maps.len() {
        return Err(Error::dims("camera/feature-volume count", frames.len(), volumes.len()));
    }
    let d = volumes[0].d();
    for (frame, vol) in frames.iter().zip(volumes) {
        frame.validate()?;
        vol.check_against(frame.height(), frame.width(), d)?;
    }

    let blocks: Vec<(Array2<f64>, Array2<f64>, Array2<f64>, Vec<bool>)> = frames
        .par_iter()
        .zip(maps.par_iter())
        .zip(volumes.par_iter())
        .map(|((frame, map), vol)| resample_camera(frame, map, vol))
        .collect();

    let m: usize = blocks.iter().map(|b| b.3.len()).sum();
    let mut points = Array2::zeros((m, 3));
    let mut features = Array2::zeros((m, d));
    let mut colors = Array2::zeros((m, 3));
    let mut valid = Vec::with_capacity(m);
    let mut camera_offsets = vec![0];
    let mut row = 0;
    for (p, f, c, v) in blocks {
        let n = v.len();
        points.slice_mut(ndarray::s![row..row + n, ..]).assign(&p);
        features.slice_mut(ndarray::s![row..row + n, ..]).assign(&f);
        colors.slice_mut(ndarray::s![row..row + n, ..]).assign(&c);
        valid.extend(v);
        row += n;
        camera_offsets.push(row);
    }
    Ok(FeatureCloud {
        points,
        features,
        colors,
        valid,
        frame: CloudFrame::Base,
        camera_offsets,
    })
}

fn resample_camera(
    frame: &CameraFrame,
    map: &PointMap,
    vol: &FeatureVolume,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Vec<bool>) {
    let (h, w, d) = vol.features.dim();
    let (height, width) = frame.depth.dim();
    let rows: Vec<usize> = (0..h).map(|i| nearest_source_index(i, h, height)).collect();
    let cols: Vec<usize> = (0..w).map(|j| nearest_source_index(j, w, width)).collect();
    let n = h * w;
    let mut points = Array2::from_elem((n, 3), f64::NAN);
    let mut colors = Array2::zeros((n, 3));
    let mut valid = vec![false; n];
    for (i, &v) in rows.iter().enumerate() {
        for (j, &u) in cols.iter().enumerate() {
            let r = i * w + j;
            for c in 0..3 {
                colors[(r, c)] = frame.rgb[(v, u, c)];
            }
            if map.valid[(v, u)] {
                let p = Vector3::new(map.points[(v, u, 0)], map.points[(v, u, 1)], map.points[(v, u, 2)]);
                let q = frame.extrinsic.apply(&p);
                points[(r, 0)] = q[0];
                points[(r, 1)] = q[1];
                points[(r, 2)] = q[2];
                valid[r] = true;
            }
        }
    }
    let features = vol
        .features
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, d))
        .expect("volume flattens to cells x channels");
    (points, features, colors, valid)
}

/// Expresses a base-frame cloud in the end-effector frame: `p' = T_EE⁻¹ p`.
pub fn to_ee_frame(cloud: &FeatureCloud, proprio: &Proprioception) -> Result<FeatureCloud> {
    if cloud.is_ee_frame() {
        return Err(Error::InvalidInput("cloud is already in the end-effector frame".into()));
    }
    let inv = invert(&proprio.ee_pose);
    Ok(FeatureCloud {
        points: transform_points(cloud.points.view(), &inv),
        frame: CloudFrame::EndEffector(proprio.ee_pose),
        ..cloud.clone()
    })
}

/// Undoes [`to_ee_frame`].
pub fn to_base_frame(cloud: &FeatureCloud) -> FeatureCloud {
    match cloud.frame {
        CloudFrame::Base => cloud.clone(),
        CloudFrame::EndEffector(pose) => FeatureCloud {
            points: transform_points(cloud.points.view(), &pose),
            frame: CloudFrame::Base,
            ..cloud.clone()
        },
    }
}

/// Axis-aligned box in the robot base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|k| !(self.min[k] < self.max[k])) {
            return Err(Error::InvalidInput(format!(
                "crop box min {:?} must be below max {:?} on every axis",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn expanded(&self, lateral: f64, below: f64, above: f64) -> Self {
        Self {
            min: [self.min[0] - lateral, self.min[1] - lateral, self.min[2] - below],
            max: [self.max[0] + lateral, self.max[1] + lateral, self.max[2] + above],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    None,
    Loose,
    Tight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub mode: CropMode,
    pub world_box: Option<Aabb>,
    /// Rows with end-effector-frame z below this are dropped.
    pub ee_zmin: Option<f64>,
}

/// Lateral margin the loose preset adds around the tight box (meters).
pub const LOOSE_MARGIN: f64 = 0.35;

impl CropConfig {
    pub fn none() -> Self {
        Self {
            mode: CropMode::None,
            world_box: None,
            ee_zmin: None,
        }
    }

    /// World-box preset relative to a tight workspace box, with the default
    /// end-effector crop at z = 0.
    pub fn preset(mode: CropMode, tight: Aabb) -> Self {
        let world_box = match mode {
            CropMode::None => None,
            CropMode::Tight => Some(tight),
            CropMode::Loose => Some(tight.expanded(LOOSE_MARGIN, 0.1, LOOSE_MARGIN)),
        };
        Self {
            mode,
            world_box,
            ee_zmin: Some(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = &self.world_box {
            b.validate()?;
        }
        if let Some(z) = self.ee_zmin {
            if !z.is_finite() {
                return Err(Error::NonFinite("ee_zmin".into()));
            }
        }
        Ok(())
    }
}

/// Invalidates rows whose base-frame position lies outside the world box.
pub fn apply_world_crop(cloud: &FeatureCloud, world_box: &Aabb) -> FeatureCloud {
    let base = match cloud.frame {
        CloudFrame::Base => None,
        CloudFrame::EndEffector(_) => Some(cloud.base_points()),
    };
    let pts: ArrayView2<f64> = base.as_ref().map_or(cloud.points.view(), |b| b.view());
    let valid = cloud
        .valid
        .iter()
        .zip(pts.outer_iter())
        .map(|(&v, p)| v && world_box.contains([p[0], p[1], p[2]]))
        .collect();
    FeatureCloud {
        valid,
        ..cloud.clone()
    }
}

/// Invalidates rows with end-effector-frame `z < zmin`. Requires an EE-frame cloud.
pub fn apply_ee_crop(cloud: &FeatureCloud, zmin: f64) -> Result<FeatureCloud> {
    if !cloud.is_ee_frame() {
        return Err(Error::InvalidInput(
            "end-effector crop needs a cloud in the end-effector frame".into(),
        ));
    }
    let valid = cloud
        .valid
        .iter()
        .zip(cloud.points.column(2))
        .map(|(&v, &z)| v && z >= zmin)
        .collect();
    Ok(FeatureCloud {
        valid,
        ..cloud.clone()
    })
}

/// Applies whichever crops `cfg` enables. The world box is always tested in
/// base-frame coordinates; the EE crop only applies to EE-frame clouds and is
/// skipped for base-frame ones.
pub fn apply_crops(cloud: &FeatureCloud, cfg: &CropConfig) -> FeatureCloud {
    let mut out = match &cfg.world_box {
        Some(b) => apply_world_crop(cloud, b),
        None => cloud.clone(),
    };
    if let (Some(z), true) = (cfg.ee_zmin, out.is_ee_frame()) {
        out = apply_ee_crop(&out, z).expect("frame checked");
    }
    out
}
