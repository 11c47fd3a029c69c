//! Viewpoint robustness: encode a scene, rotate its cameras about the
//! vertical axis through the EE start, encode again and measure how far the
//! scene vector moved. Also the variant-by-seed ablation runner built on it.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::backbone::{hash_embed, Backbone, TestBackbone};
use crate::config::{EncoderConfig, Variant};
use crate::decoders::HeadConfig;
use crate::encoder::SceneEncoding;
use crate::error::{Error, Result};
use crate::geometry::{CameraFrame, Proprioception, RigidTransform};
use crate::pipeline::{prepare_scene, Policy, Precision};
use crate::synth::{render, ReachSample};
use crate::train::{prepare_examples, train, TrainConfig, LANGUAGE_SEED};

pub const SWEEP_ANGLES: [f64; 3] = [0.4, 1.0, 2.0];

/// Scene vector for one observation with the policy's current parameters.
pub fn encode_frames(
    policy: &Policy,
    backbone: &TestBackbone,
    frames: &[CameraFrame],
    proprio: &Proprioception,
    instruction: &str,
) -> Result<SceneEncoding<f64>> {
    let cfg = &policy.encoder;
    let language = if cfg.language {
        Some(hash_embed(instruction, cfg.feature_dim, LANGUAGE_SEED)?)
    } else {
        None
    };
    let volumes = frames
        .iter()
        .map(|f| backbone.extract_features(f))
        .collect::<Result<Vec<_>>>()?;
    let scene = prepare_scene(cfg, frames, &volumes, proprio, language.as_ref(), Precision::F64, None)?;
    policy.encode(&scene.tokens)
}

/// Camera move used by the sweep for `sample` at angle `theta`.
pub fn sweep_transform(sample: &ReachSample, theta: f64) -> RigidTransform {
    let t = sample.proprio.ee_pose.translation;
    RigidTransform::about_vertical_axis(Vector3::new(t[0], t[1], t[2]), theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub angles: Vec<f64>,
    /// Mean ℓ2 change of z per angle, averaged over scenes.
    pub drift: Vec<f64>,
    pub scenes: usize,
}

impl SweepReport {
    pub fn mean_drift(&self) -> f64 {
        self.drift.iter().sum::<f64>() / self.drift.len().max(1) as f64
    }
}

pub fn camera_sweep(
    policy: &Policy,
    backbone: &TestBackbone,
    samples: &[ReachSample],
    angles: &[f64],
) -> Result<SweepReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("camera sweep needs at least one scene".into()));
    }
    let mut drift = vec![0.0; angles.len()];
    for s in samples {
        let z0 = encode_frames(policy, backbone, &s.frames, &s.proprio, &s.instruction)?.z;
        for (a, &theta) in angles.iter().enumerate() {
            let moved = s.spec.with_cameras_moved(&sweep_transform(s, theta))?;
            let frames = render(&moved)?;
            let z = encode_frames(policy, backbone, &frames, &s.proprio, &s.instruction)?.z;
            drift[a] += (&z - &z0).mapv(|v| v * v).sum().sqrt();
        }
    }
    for d in &mut drift {
        *d /= samples.len() as f64;
    }
    Ok(SweepReport {
        angles: angles.to_vec(),
        drift,
        scenes: samples.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub sweep: SweepReport,
}

#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub base: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub backbone: TestBackbone,
    pub angles: Vec<f64>,
}

/// Trains one policy under `variant` with `seed` driving both parameter
/// init and batch order, then runs the camera sweep on `eval`.
pub fn run_variant(
    setup: &AblationSetup,
    variant: Variant,
    seed: u64,
    train_set: &[ReachSample],
    eval: &[ReachSample],
) -> Result<(Policy, AblationRow)> {
    let enc = EncoderConfig {
        seed,
        ..variant.apply(&setup.base)
    };
    let mut policy = Policy::new(enc, setup.head)?;
    let mut backbone = setup.backbone.clone();
    let data = prepare_examples(&policy, &backbone, train_set)?;
    let cfg = TrainConfig { seed, ..setup.train };
    let report = train(&mut policy, Some(&mut backbone), &data, &cfg)?;
    let sweep = camera_sweep(&policy, &backbone, eval, &setup.angles)?;
    let row = AblationRow {
        variant,
        seed,
        initial_loss: report.initial_loss(),
        final_loss: report.final_loss(),
        sweep,
    };
    Ok((policy, row))
}

pub fn run_ablation(
    setup: &AblationSetup,
    variants: &[Variant],
    seeds: &[u64],
    train_set: &[ReachSample],
    eval: &[ReachSample],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &v in variants {
        for &seed in seeds {
            rows.push(run_variant(setup, v, seed, train_set, eval)?.1);
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let angles = rows.first().map(|r| r.sweep.angles.clone()).unwrap_or_default();
    let mut s = String::from("variant,seed,initial_loss,final_loss");
    for a in &angles {
        write!(s, ",drift_{a}").unwrap();
    }
    s.push_str(",mean_drift\n");
    for r in rows {
        write!(s, "{},{},{},{}", r.variant, r.seed, r.initial_loss, r.final_loss).unwrap();
        for d in &r.sweep.drift {
            write!(s, ",{d}").unwrap();
        }
        writeln!(s, ",{}", r.sweep.mean_drift()).unwrap();
    }
    s
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    std::fs::write(path, ablation_csv(rows)).map_err(|e| Error::io(path, e))
}
