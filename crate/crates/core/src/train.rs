//! Seeded training loop: Adam with L2 weight decay, cosine learning rate,
//! global-norm clipping, per-epoch mean loss.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{hash_embed, Backbone, BackboneCache, LanguageEmbedding, TestBackbone};
use crate::config::PointFeatures;
use crate::decoders::HeadNoise;
use crate::encoder::{PointTokenCloud, PoolCache};
use crate::error::{Error, Result};
use crate::geometry::{CameraFrame, Proprioception};
use crate::nn::{Adam, CosineSchedule, OptimizerKind, ParamStore, ScheduleKind};
use crate::pipeline::{prepare_scene, Policy, Precision, PreparedScene};
use crate::synth::ReachSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub schedule: ScheduleKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_min: 0.0,
            weight_decay: 1e-4,
            batch_size: 64,
            grad_clip: 100.0,
            epochs: 100,
            optimizer: OptimizerKind::Adam,
            schedule: ScheduleKind::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Larger step size and smaller batches for short desk-scale runs.
    pub fn toy() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            epochs: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate {} must be >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidInput("gradient clip must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// One observation/target pair. `tokens` is filled when the encoder input
/// can be computed once up front.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub frames: Vec<CameraFrame>,
    pub proprio: Proprioception,
    pub language: Option<LanguageEmbedding>,
    pub target: Array1<f64>,
    pub tokens: Option<PointTokenCloud<f64>>,
}

/// Whether encoder inputs must be rebuilt every step.
pub fn needs_refresh(policy: &Policy) -> bool {
    let cfg = &policy.encoder;
    cfg.fps_random_start || (cfg.finetune_backbone && cfg.point_features == PointFeatures::Backbone)
}

/// Language embedding seed shared by dataset preparation and the CLI.
pub const LANGUAGE_SEED: u64 = 0;

pub fn prepare_examples(
    policy: &Policy,
    backbone: &TestBackbone,
    samples: &[ReachSample],
) -> Result<Vec<TrainExample>> {
    let cfg = &policy.encoder;
    let t = policy.head_cfg.target_dim();
    let refresh = needs_refresh(policy);
    samples
        .iter()
        .map(|s| {
            let target = s.chunk.flat();
            if target.len() != t {
                return Err(Error::dims("action chunk size", t, target.len()));
            }
            let language = if cfg.language {
                Some(hash_embed(&s.instruction, cfg.feature_dim, LANGUAGE_SEED)?)
            } else {
                None
            };
            let tokens = if refresh {
                None
            } else {
                let vols = s
                    .frames
                    .iter()
                    .map(|f| backbone.extract_features(f))
                    .collect::<Result<Vec<_>>>()?;
                let scene = prepare_scene(cfg, &s.frames, &vols, &s.proprio, language.as_ref(), Precision::F64, None)?;
                Some(scene.tokens)
            };
            Ok(TrainExample {
                frames: s.frames.clone(),
                proprio: s.proprio,
                language,
                target,
                tokens,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.curve.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |r| r.loss)
    }
}

pub fn write_loss_csv(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,loss,lr\n");
    for r in curve {
        text.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.lr));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Encoder state of one example inside a step.
struct Forward {
    z: Array1<f64>,
    cache: PoolCache<f64>,
    backbone: Option<(PreparedScene, Vec<BackboneCache>)>,
}

fn encode_example(
    policy: &Policy,
    backbone: Option<&TestBackbone>,
    ex: &TrainExample,
    fps_seed: u64,
) -> Result<Forward> {
    let cfg = &policy.encoder;
    let (tokens, bb) = match (&ex.tokens, backbone) {
        (Some(t), _) => (t.clone(), None),
        (None, Some(bb)) => {
            let mut vols = Vec::with_capacity(ex.frames.len());
            let mut caches = Vec::with_capacity(ex.frames.len());
            for f in &ex.frames {
                let (v, c) = bb.forward_cached(f)?;
                vols.push(v);
                caches.push(c);
            }
            let scene = prepare_scene(
                cfg,
                &ex.frames,
                &vols,
                &ex.proprio,
                ex.language.as_ref(),
                Precision::F64,
                Some(fps_seed),
            )?;
            (scene.tokens.clone(), Some((scene, caches)))
        }
        (None, None) => {
            return Err(Error::InvalidInput("example has no tokens and no backbone was given".into()))
        }
    };
    let (enc, cache) = policy
        .pool
        .forward_cached(&policy.store, tokens.tokens.view(), cfg.pooling)?;
    Ok(Forward {
        z: enc.z,
        cache,
        backbone: bb,
    })
}

/// Routes gradients of the token feature block back onto each camera's
/// feature grid.
fn feature_volume_grads(
    scene: &PreparedScene,
    g_tokens: &Array2<f64>,
    grids: &[(usize, usize)],
    d: usize,
) -> Vec<Array3<f64>> {
    let mut out: Vec<Array3<f64>> = grids.iter().map(|&(h, w)| Array3::zeros((h, w, d))).collect();
    let range = scene.tokens.layout.feature_range();
    let offsets = &scene.cloud.camera_offsets;
    for (k, &row) in scene.sampled.indices.iter().enumerate() {
        let cam = offsets.partition_point(|&o| o <= row) - 1;
        let cell = row - offsets[cam];
        let w = grids[cam].1;
        let g = g_tokens.slice(s![k, range.clone()]);
        out[cam]
            .slice_mut(s![cell / w, cell % w, ..])
            .zip_mut_with(&g, |a, b| *a += *b);
    }
    out
}

/// Batch-mean loss; accumulates gradients into `policy.store` (and the
/// backbone's store when it is being finetuned).
pub fn loss_and_grad(
    policy: &mut Policy,
    mut backbone: Option<&mut TestBackbone>,
    batch: &[&TrainExample],
    noise: &HeadNoise,
    fps_seed: u64,
) -> Result<f64> {
    let cfg = policy.encoder;
    let b = batch.len();
    let de = cfg.embed_dim;
    let forwards = batch
        .iter()
        .enumerate()
        .map(|(i, ex)| encode_example(policy, backbone.as_deref(), ex, fps_seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;

    let mut cond = Array2::zeros((b, policy.cond_dim()));
    for (i, (f, ex)) in forwards.iter().zip(batch).enumerate() {
        cond.slice_mut(s![i, ..de]).assign(&f.z);
        if cfg.language {
            let l = ex.language.as_ref().ok_or_else(|| Error::InvalidInput("missing language".into()))?;
            let start = policy.cond_dim() - cfg.feature_dim;
            cond.slice_mut(s![i, start..]).assign(&l.vector);
        }
    }
    let proprio_in = Policy::proprio_input(&batch.iter().map(|e| e.proprio).collect::<Vec<_>>());
    let proprio_cache = match &policy.proprio {
        Some(enc) => {
            let (u, cache) = enc.net.forward_cached(&policy.store, proprio_in.view());
            cond.slice_mut(s![.., de..2 * de]).assign(&u);
            Some(cache)
        }
        None => None,
    };
    let targets = ndarray::stack(Axis(0), &batch.iter().map(|e| e.target.view()).collect::<Vec<_>>())
        .map_err(|e| Error::Shape(e.to_string()))?;

    let head = policy.head.clone();
    let (loss, g_cond) = head.loss_and_backward(&mut policy.store, cond.view(), targets.view(), noise)?;

    if let (Some(enc), Some(cache)) = (policy.proprio.clone(), proprio_cache) {
        enc.net
            .backward(&mut policy.store, &cache, g_cond.slice(s![.., de..2 * de]));
    }
    let pool = policy.pool.clone();
    for (i, f) in forwards.iter().enumerate() {
        let g_tokens = pool.backward(&mut policy.store, &f.cache, g_cond.slice(s![i, ..de]))?;
        if let (Some((scene, caches)), Some(bb)) = (&f.backbone, backbone.as_deref_mut()) {
            if scene.tokens.layout.features == 0 || cfg.point_features != PointFeatures::Backbone {
                continue;
            }
            let grids: Vec<(usize, usize)> = batch[i]
                .frames
                .iter()
                .map(|fr| bb.grid(fr.height(), fr.width()))
                .collect();
            let grads = feature_volume_grads(scene, &g_tokens, &grids, cfg.feature_dim);
            for (c, g) in caches.iter().zip(&grads) {
                bb.backward(c, g)?;
            }
        }
    }
    Ok(loss)
}

/// Global-norm clip over several stores at once; returns the pre-clip norm.
fn clip_global(stores: &mut [&mut ParamStore<f64>], max_norm: f64) -> f64 {
    let norm = stores
        .iter()
        .map(|s| s.grad_norm().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for s in stores.iter_mut() {
            for p in s.iter_mut().filter(|p| p.trainable) {
                p.grad.mapv_inplace(|g| g * scale);
            }
        }
    }
    norm
}

/// Trains `policy` (and `backbone` when the config finetunes it).
pub fn train(
    policy: &mut Policy,
    mut backbone: Option<&mut TestBackbone>,
    data: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let finetune = policy.encoder.finetune_backbone && policy.encoder.point_features == PointFeatures::Backbone;
    if needs_refresh(policy) && backbone.is_none() {
        return Err(Error::InvalidInput("this config needs the backbone during training".into()));
    }
    if let Some(bb) = backbone.as_deref_mut() {
        bb.params_mut().set_trainable("", finetune);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&policy.store, cfg.weight_decay);
    let mut bb_adam = backbone.as_deref().map(|bb| Adam::new(bb.params(), cfg.weight_decay));
    let per_epoch = cfg.steps_per_epoch(data.len());
    let schedule = CosineSchedule {
        lr_max: cfg.lr,
        lr_min: cfg.lr_min,
        total_steps: per_epoch * cfg.epochs,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        curve: Vec::with_capacity(cfg.epochs),
        step_losses: Vec::with_capacity(schedule.total_steps),
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr_epoch = schedule.lr(step);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &data[i]).collect();
            let noise = policy.head.sample_noise(batch.len(), &mut rng);
            let fps_seed: u64 = rng.random();
            policy.store.zero_grad();
            if let Some(bb) = backbone.as_deref_mut() {
                bb.params_mut().zero_grad();
            }
            let loss = match loss_and_grad(policy, backbone.as_deref_mut(), &batch, &noise, fps_seed) {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => return Err(Error::Divergence { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            let lr = schedule.lr(step);
            match backbone.as_deref_mut() {
                Some(bb) if finetune => {
                    clip_global(&mut [&mut policy.store, bb.params_mut()], cfg.grad_clip);
                    bb_adam.as_mut().expect("created with backbone").step(bb.params_mut(), lr);
                }
                _ => {
                    clip_global(&mut [&mut policy.store], cfg.grad_clip);
                }
            }
            adam.step(&mut policy.store, lr);
            report.step_losses.push(loss);
            total += loss * batch.len() as f64;
            step += 1;
        }
        report.curve.push(EpochRecord {
            epoch,
            loss: total / data.len() as f64,
            lr: lr_epoch,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TestBackboneConfig;
    use crate::config::EncoderConfig;
    use crate::decoders::{HeadConfig, HeadKind};
    use crate::synth::{make_reach_task, ReachConfig};

    fn tiny(kind: HeadKind, finetune: bool) -> (Policy, TestBackbone, Vec<TrainExample>) {
        let enc = EncoderConfig {
            feature_dim: 8,
            embed_dim: 16,
            key_dim: 16,
            num_points: 16,
            finetune_backbone: finetune,
            ..EncoderConfig::default()
        };
        let head = HeadConfig {
            kind,
            hidden: 16,
            latent_dim: 4,
            ..HeadConfig::default()
        };
        let policy = Policy::new(enc, head).unwrap();
        let bb = TestBackbone::new(TestBackboneConfig {
            dim: 8,
            ..TestBackboneConfig::default()
        });
        let samples = make_reach_task(&ReachConfig::default(), 4, 1).unwrap();
        let data = prepare_examples(&policy, &bb, &samples).unwrap();
        (policy, bb, data)
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (mut policy, _, data) = tiny(HeadKind::Nll, false);
        let before = policy.store.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        train(&mut policy, None, &data, &cfg).unwrap();
        for (a, b) in before.iter().zip(policy.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn all_heads_train_deterministically() {
        for kind in [HeadKind::Nll, HeadKind::Diffusion, HeadKind::Cvae] {
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 2,
                ..TrainConfig::toy()
            };
            let (mut a, _, data) = tiny(kind, false);
            let mut b = a.clone();
            let ra = train(&mut a, None, &data, &cfg).unwrap();
            let rb = train(&mut b, None, &data, &cfg).unwrap();
            assert_eq!(ra, rb, "{kind}");
            assert_eq!(ra.step_losses.len(), 4);
        }
    }

    #[test]
    fn finetuning_updates_the_backbone() {
        let (mut policy, mut bb, data) = tiny(HeadKind::Nll, true);
        assert!(data.iter().all(|e| e.tokens.is_none()));
        let before = bb.params().clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::toy()
        };
        train(&mut policy, Some(&mut bb), &data, &cfg).unwrap();
        let changed = before
            .iter()
            .zip(bb.params().iter())
            .any(|(a, b)| a.value != b.value);
        assert!(changed);
        assert!(train(&mut policy, None, &data, &cfg).is_err());
    }

    #[test]
    fn loss_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let curve = [
            EpochRecord { epoch: 0, loss: 2.0, lr: 1e-3 },
            EpochRecord { epoch: 1, loss: 1.5, lr: 5e-4 },
        ];
        write_loss_csv(&path, &curve).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("epoch,loss,lr\n"));
    }
}
