//! Throughput of the encoder pipeline on synthetic inputs. Feature volumes
//! are computed once up front, so backbone cost is excluded.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{hash_embed, Backbone, FeatureVolume, LanguageEmbedding, TestBackbone, TestBackboneConfig};
use crate::config::EncoderConfig;
use crate::decoders::HeadConfig;
use crate::error::{Error, Result};
use crate::geometry::{CameraFrame, Proprioception};
use crate::nn::ParamStore;
use crate::pipeline::{prepare_scene, Policy, Precision, StageTimings};
use crate::synth::{make_reach_task, ReachConfig};
use crate::train::LANGUAGE_SEED;

/// Rate the reference system reports, GPU backbone included.
pub const REFERENCE_HZ: f64 = 44.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    pub image_size: usize,
    pub cameras: usize,
    /// Test backbone stride; sets the feature grid and so the cloud size.
    pub stride: usize,
    pub precision: Precision,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            image_size: 128,
            cameras: 2,
            stride: 4,
            precision: Precision::F32,
            warmup: 2,
            seed: 0,
        }
    }
}

/// Encoder defaults with the benchmark feature width.
pub fn bench_encoder() -> EncoderConfig {
    EncoderConfig {
        feature_dim: 64,
        ..EncoderConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct BenchInput {
    pub frames: Vec<CameraFrame>,
    pub volumes: Vec<FeatureVolume>,
    pub proprio: Proprioception,
    pub language: LanguageEmbedding,
}

impl BenchInput {
    /// Points entering fusion: cameras × feature grid cells.
    pub fn cloud_size(&self) -> usize {
        self.volumes.iter().map(|v| v.h() * v.w()).sum()
    }
}

pub fn bench_input(enc: &EncoderConfig, opts: &BenchOptions) -> Result<BenchInput> {
    if opts.cameras == 0 {
        return Err(Error::InvalidInput("benchmark needs at least one camera".into()));
    }
    let base = ReachConfig::default();
    let reach = ReachConfig {
        image_size: opts.image_size,
        camera_eyes: base.camera_eyes.iter().cycle().take(opts.cameras).copied().collect(),
        ..base
    };
    let sample = make_reach_task(&reach, 1, opts.seed)?.remove(0);
    let backbone = TestBackbone::new(TestBackboneConfig {
        stride: opts.stride,
        dim: enc.feature_dim,
        seed: opts.seed,
        ..TestBackboneConfig::default()
    });
    let volumes = sample
        .frames
        .iter()
        .map(|f| backbone.extract_features(f))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchInput {
        frames: sample.frames,
        volumes,
        proprio: sample.proprio,
        language: hash_embed(&sample.instruction, enc.feature_dim, LANGUAGE_SEED)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub iterations: usize,
    pub threads: usize,
    pub precision: Precision,
    pub cloud_points: usize,
    pub sampled_points: usize,
    /// Mean per-iteration stage times.
    pub stage_us: StageTimings,
    pub stage_hz: StageRates,
    /// Mean wall time of a full iteration.
    pub wall_us: f64,
    pub total_hz: f64,
    pub reference_hz: f64,
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRates {
    pub deproject: f64,
    pub fuse: f64,
    pub crop: f64,
    pub fps: f64,
    pub pe: f64,
    pub pool: f64,
}

fn hz(us: f64) -> f64 {
    if us > 0.0 {
        1e6 / us
    } else {
        f64::INFINITY
    }
}

fn one_pass<F: crate::nn::Real>(
    policy: &Policy,
    store: &ParamStore<F>,
    enc: &EncoderConfig,
    input: &BenchInput,
    precision: Precision,
) -> Result<(StageTimings, usize)> {
    let lang = enc.language.then_some(&input.language);
    let scene = prepare_scene(enc, &input.frames, &input.volumes, &input.proprio, lang, precision, None)?;
    let mut timings = scene.timings;
    let t = Instant::now();
    let tokens = scene.tokens.cast::<F>();
    let out = policy.encode_as(store, &tokens)?;
    std::hint::black_box(&out.z);
    timings.pool_us += t.elapsed().as_secs_f64() * 1e6;
    Ok((timings, scene.sampled.len()))
}

/// Runs `n_iters` timed passes on the calling thread's rayon pool.
pub fn run_bench(enc: &EncoderConfig, opts: &BenchOptions, input: &BenchInput, n_iters: usize) -> Result<BenchReport> {
    if n_iters == 0 {
        return Err(Error::InvalidInput("benchmark needs at least one iteration".into()));
    }
    let policy = Policy::new(*enc, HeadConfig::default())?;
    let store32 = policy.store.cast::<f32>();
    let pass = |policy: &Policy| match opts.precision {
        Precision::F32 => one_pass(policy, &store32, enc, input, opts.precision),
        Precision::F64 => one_pass(policy, &policy.store, enc, input, opts.precision),
    };
    for _ in 0..opts.warmup {
        pass(&policy)?;
    }
    let mut sum = StageTimings::default();
    let mut sampled = 0;
    let start = Instant::now();
    for _ in 0..n_iters {
        let (t, p) = pass(&policy)?;
        sum.add(&t);
        sampled = p;
    }
    let wall_us = start.elapsed().as_secs_f64() * 1e6 / n_iters as f64;
    let stage_us = sum.scaled(1.0 / n_iters as f64);
    Ok(BenchReport {
        iterations: n_iters,
        threads: rayon::current_num_threads(),
        precision: opts.precision,
        cloud_points: input.cloud_size(),
        sampled_points: sampled,
        stage_hz: StageRates {
            deproject: hz(stage_us.deproject_us),
            fuse: hz(stage_us.fuse_us),
            crop: hz(stage_us.crop_us),
            fps: hz(stage_us.fps_us),
            pe: hz(stage_us.pe_us),
            pool: hz(stage_us.pool_us),
        },
        stage_us,
        wall_us,
        total_hz: hz(wall_us),
        reference_hz: REFERENCE_HZ,
        note: "backbone excluded; the reference rate includes a GPU image backbone".into(),
    })
}

/// `run_bench` inside a dedicated pool of `threads` workers.
pub fn run_bench_threads(
    enc: &EncoderConfig,
    opts: &BenchOptions,
    input: &BenchInput,
    n_iters: usize,
    threads: usize,
) -> Result<BenchReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(|| run_bench(enc, opts, input, n_iters))
}
