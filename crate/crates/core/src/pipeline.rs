//! End-to-end observation encoding: fusion, frame change, crops, sampling,
//! tokens and pooling, with per-stage wall-clock timings.

use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureVolume, LanguageEmbedding};
use crate::cloud::{apply_crops, fuse_point_maps, to_base_frame, to_ee_frame, FeatureCloud};
use crate::config::{EncoderConfig, PointFeatures};
use crate::decoders::{Head, HeadConfig, ProprioEncoder, PROPRIO_DIM};
use crate::encoder::{assemble_tokens, positional_encode, AttentionPool, PointTokenCloud, SceneEncoding};
use crate::error::{Error, Result};
use crate::geometry::{deproject, CameraFrame, PointMap, Proprioception};
use crate::nn::{forward_row, ParamStore, Real};
use crate::sampling::{fps_rows, gather, DownsampledCloud, FpsMetric, SamplerConfig};

/// Float width used for sampling and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// Microseconds spent in each stage. The EE frame change is counted under
/// `crop`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub deproject_us: f64,
    pub fuse_us: f64,
    pub crop_us: f64,
    pub fps_us: f64,
    pub pe_us: f64,
    pub pool_us: f64,
}

impl StageTimings {
    pub fn total_us(&self) -> f64 {
        self.deproject_us + self.fuse_us + self.crop_us + self.fps_us + self.pe_us + self.pool_us
    }

    pub fn add(&mut self, other: &StageTimings) {
        self.deproject_us += other.deproject_us;
        self.fuse_us += other.fuse_us;
        self.crop_us += other.crop_us;
        self.fps_us += other.fps_us;
        self.pe_us += other.pe_us;
        self.pool_us += other.pool_us;
    }

    pub fn scaled(&self, k: f64) -> StageTimings {
        StageTimings {
            deproject_us: self.deproject_us * k,
            fuse_us: self.fuse_us * k,
            crop_us: self.crop_us * k,
            fps_us: self.fps_us * k,
            pe_us: self.pe_us * k,
            pool_us: self.pool_us * k,
        }
    }
}

fn micros(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e6
}

/// Everything between raw frames and pooling.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    /// Cropped cloud in the frame the tokens use.
    pub cloud: FeatureCloud,
    pub sampled: DownsampledCloud,
    pub tokens: PointTokenCloud<f64>,
    pub timings: StageTimings,
}

impl PreparedScene {
    /// Base-frame positions of the sampled rows.
    pub fn sampled_base_points(&self) -> Array2<f64> {
        self.cloud.base_points().select(Axis(0), &self.sampled.indices)
    }
}

/// Fusion, frame change and crops. Returns the cloud in the frame the
/// config asks for.
pub fn build_cloud(
    cfg: &EncoderConfig,
    frames: &[CameraFrame],
    volumes: &[FeatureVolume],
    proprio: &Proprioception,
    timings: &mut StageTimings,
) -> Result<FeatureCloud> {
    let t = Instant::now();
    let maps: Vec<PointMap> = frames.par_iter().map(deproject).collect();
    timings.deproject_us += micros(t);

    let t = Instant::now();
    let fused = fuse_point_maps(frames, &maps, volumes)?;
    timings.fuse_us += micros(t);

    // The EE crop is defined in the EE frame even when tokens stay in the
    // base frame.
    let t = Instant::now();
    let ee = to_ee_frame(&fused, proprio)?;
    let cropped = apply_crops(&ee, &cfg.crop);
    let cloud = if cfg.ee_frame { cropped } else { to_base_frame(&cropped) };
    timings.crop_us += micros(t);
    if cloud.valid_count() == 0 {
        return Err(Error::NoValidPoints);
    }
    Ok(cloud)
}

/// Row data farthest-point sampling runs on under `cfg`.
pub fn fps_source(cfg: &EncoderConfig, cloud: &FeatureCloud) -> Array2<f64> {
    match cfg.effective_fps_metric() {
        FpsMetric::Position => cloud.points.clone(),
        FpsMetric::Feature => match cfg.point_features {
            PointFeatures::Rgb => cloud.colors.clone(),
            _ => cloud.features.clone(),
        },
    }
}

pub fn sample_cloud(
    cfg: &EncoderConfig,
    cloud: &FeatureCloud,
    precision: Precision,
    random_start: Option<u64>,
    timings: &mut StageTimings,
) -> Result<DownsampledCloud> {
    let t = Instant::now();
    let sampler = SamplerConfig {
        num_points: cfg.num_points,
        metric: cfg.effective_fps_metric(),
        seed_index: 0,
        random_start: if cfg.fps_random_start { random_start } else { None },
    };
    let source = fps_source(cfg, cloud);
    let indices = match precision {
        Precision::F64 => fps_rows(source.view(), &cloud.valid, &sampler)?,
        Precision::F32 => fps_rows(source.mapv(|v| v as f32).view(), &cloud.valid, &sampler)?,
    };
    let sampled = gather(cloud, &indices)?;
    timings.fps_us += micros(t);
    Ok(sampled)
}

/// Position, feature and language blocks of the token matrix per `cfg`.
pub fn build_tokens(
    cfg: &EncoderConfig,
    sampled: &DownsampledCloud,
    language: Option<&LanguageEmbedding>,
) -> Result<PointTokenCloud<f64>> {
    let position = if cfg.positional_encoding {
        positional_encode(sampled.points.view(), cfg.pe_frequencies)
    } else {
        sampled.points.clone()
    };
    let features = match cfg.point_features {
        PointFeatures::Backbone => sampled.features.clone(),
        PointFeatures::Rgb => sampled.colors.clone(),
        PointFeatures::None => Array2::zeros((sampled.len(), 0)),
    };
    let lang = if cfg.language {
        let l = language.ok_or_else(|| Error::InvalidInput("config needs a language embedding".into()))?;
        if l.dim() != cfg.feature_dim {
            return Err(Error::dims("language embedding width", cfg.feature_dim, l.dim()));
        }
        Some(l.vector.view())
    } else {
        None
    };
    let tokens = assemble_tokens(position.view(), features.view(), lang)?;
    debug_assert_eq!(tokens.layout, cfg.token_layout());
    Ok(tokens)
}

/// Frames and feature volumes to a token matrix.
pub fn prepare_scene(
    cfg: &EncoderConfig,
    frames: &[CameraFrame],
    volumes: &[FeatureVolume],
    proprio: &Proprioception,
    language: Option<&LanguageEmbedding>,
    precision: Precision,
    random_start: Option<u64>,
) -> Result<PreparedScene> {
    if cfg.point_features == PointFeatures::Backbone {
        if let Some(v) = volumes.first() {
            if v.d() != cfg.feature_dim {
                return Err(Error::dims("feature volume channels", cfg.feature_dim, v.d()));
            }
        }
    }
    let mut timings = StageTimings::default();
    let cloud = build_cloud(cfg, frames, volumes, proprio, &mut timings)?;
    let sampled = sample_cloud(cfg, &cloud, precision, random_start, &mut timings)?;
    let t = Instant::now();
    let tokens = build_tokens(cfg, &sampled, language)?;
    timings.pe_us += micros(t);
    Ok(PreparedScene {
        cloud,
        sampled,
        tokens,
        timings,
    })
}

/// Encoder parameters plus a decoder head sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Policy {
    pub encoder: EncoderConfig,
    pub head_cfg: HeadConfig,
    pub store: ParamStore<f64>,
    pub pool: AttentionPool,
    pub proprio: Option<ProprioEncoder>,
    pub head: Head,
}

impl Policy {
    /// Parameters are drawn from a ChaCha8 stream seeded by `encoder.seed`.
    pub fn new(encoder: EncoderConfig, head_cfg: HeadConfig) -> Result<Self> {
        encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(encoder.seed);
        let mut store = ParamStore::new();
        let pool = AttentionPool::from_config(&mut store, "pool", &encoder, &mut rng);
        let proprio = encoder
            .proprioception
            .then(|| ProprioEncoder::new(&mut store, "proprio", encoder.embed_dim, &mut rng));
        let cond_dim = Self::cond_dim_for(&encoder);
        let head = Head::new(&mut store, "head", head_cfg, cond_dim, &mut rng);
        Ok(Self {
            encoder,
            head_cfg,
            store,
            pool,
            proprio,
            head,
        })
    }

    /// Width of `[z | u | ℓ]`.
    pub fn cond_dim_for(cfg: &EncoderConfig) -> usize {
        cfg.embed_dim
            + if cfg.proprioception { cfg.embed_dim } else { 0 }
            + if cfg.language { cfg.feature_dim } else { 0 }
    }

    pub fn cond_dim(&self) -> usize {
        Self::cond_dim_for(&self.encoder)
    }

    pub fn encode(&self, tokens: &PointTokenCloud<f64>) -> Result<SceneEncoding<f64>> {
        self.pool.forward(&self.store, tokens.tokens.view(), self.encoder.pooling)
    }

    pub fn encode_as<F: Real>(&self, store: &ParamStore<F>, tokens: &PointTokenCloud<F>) -> Result<SceneEncoding<F>> {
        self.pool.forward(store, tokens.tokens.view(), self.encoder.pooling)
    }

    /// Conditioning row for one observation.
    pub fn conditioning(
        &self,
        z: ArrayView1<f64>,
        proprio: &Proprioception,
        language: Option<&LanguageEmbedding>,
    ) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(self.cond_dim());
        let de = self.encoder.embed_dim;
        out.slice_mut(s![..de]).assign(&z);
        let mut at = de;
        if let Some(enc) = &self.proprio {
            let u = forward_row(&enc.net, &self.store, &ProprioEncoder::input(proprio));
            out.slice_mut(s![at..at + de]).assign(&u);
            at += de;
        }
        if self.encoder.language {
            let l = language.ok_or_else(|| Error::InvalidInput("config needs a language embedding".into()))?;
            out.slice_mut(s![at..]).assign(&l.vector);
        }
        Ok(out)
    }

    pub fn proprio_input(proprio: &[Proprioception]) -> Array2<f64> {
        let mut x = Array2::zeros((proprio.len(), PROPRIO_DIM));
        for (mut row, p) in x.outer_iter_mut().zip(proprio) {
            row.assign(&ProprioEncoder::input(p));
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{hash_embed, Backbone, TestBackbone, TestBackboneConfig};
    use crate::config::Variant;
    use crate::synth::{make_reach_task, ReachConfig};

    fn setup(cfg: &EncoderConfig) -> (Vec<CameraFrame>, Vec<FeatureVolume>, Proprioception, LanguageEmbedding) {
        let s = make_reach_task(&ReachConfig::default(), 1, 2).unwrap().remove(0);
        let bb = TestBackbone::new(TestBackboneConfig {
            dim: cfg.feature_dim,
            ..TestBackboneConfig::default()
        });
        let vols = s.frames.iter().map(|f| bb.extract_features(f).unwrap()).collect();
        let lang = hash_embed(&s.instruction, cfg.feature_dim, 0).unwrap();
        (s.frames, vols, s.proprio, lang)
    }

    #[test]
    fn default_tokens_have_documented_width() {
        let cfg = EncoderConfig::default();
        let (frames, vols, proprio, lang) = setup(&cfg);
        let scene = prepare_scene(&cfg, &frames, &vols, &proprio, Some(&lang), Precision::F64, None).unwrap();
        assert_eq!(scene.tokens.tokens.dim(), (512, 188));
        assert_eq!(scene.cloud.len(), 2 * 8 * 8);
        let policy = Policy::new(cfg, HeadConfig::default()).unwrap();
        let enc = policy.encode(&scene.tokens).unwrap();
        assert_eq!(enc.z.len(), 256);
        assert!((enc.attention.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn every_variant_encodes() {
        let base = EncoderConfig::toy();
        let (frames, vols, proprio, lang) = setup(&base);
        for v in Variant::ALL {
            let cfg = v.apply(&base);
            let scene = prepare_scene(&cfg, &frames, &vols, &proprio, Some(&lang), Precision::F64, None).unwrap();
            assert_eq!(scene.tokens.tokens.ncols(), cfg.token_layout().width(), "{v}");
            let policy = Policy::new(cfg, HeadConfig::default()).unwrap();
            let enc = policy.encode(&scene.tokens).unwrap();
            assert_eq!(enc.z.len(), cfg.embed_dim);
            let cond = policy.conditioning(enc.z.view(), &proprio, Some(&lang)).unwrap();
            assert_eq!(cond.len(), policy.cond_dim());
        }
    }

    #[test]
    fn missing_language_is_an_error() {
        let cfg = EncoderConfig::toy();
        let (frames, vols, proprio, _) = setup(&cfg);
        assert!(prepare_scene(&cfg, &frames, &vols, &proprio, None, Precision::F64, None).is_err());
    }

    #[test]
    fn f32_sampling_returns_full_index_list() {
        let cfg = EncoderConfig::toy();
        let (frames, vols, proprio, lang) = setup(&cfg);
        let a = prepare_scene(&cfg, &frames, &vols, &proprio, Some(&lang), Precision::F64, None).unwrap();
        let b = prepare_scene(&cfg, &frames, &vols, &proprio, Some(&lang), Precision::F32, None).unwrap();
        assert_eq!(a.sampled.indices.len(), b.sampled.indices.len());
    }
}
