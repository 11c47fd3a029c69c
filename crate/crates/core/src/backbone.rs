//! Semantic feature extraction behind a pluggable interface.
//!
//! Real deployments feed externally computed feature volumes through
//! [`load_feature_volume`]. [`TestBackbone`] is a deterministic stand-in: a
//! fixed-seed patch convolution followed by a 1×1 projection, with a
//! backward pass so that backbone finetuning can be exercised end to end.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, Ix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraFrame;
use crate::nn::{silu, silu_grad, ParamId, ParamStore};
use crate::tensor_io;

/// `h×w×d` grid of per-cell feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub features: Array3<f64>,
}

impl FeatureVolume {
    pub fn new(features: Array3<f64>) -> Result<Self> {
        let v = Self { features };
        v.validate()?;
        Ok(v)
    }

    pub fn h(&self) -> usize {
        self.features.dim().0
    }

    pub fn w(&self) -> usize {
        self.features.dim().1
    }

    pub fn d(&self) -> usize {
        self.features.dim().2
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature volume".into()));
        }
        if self.features.is_empty() {
            return Err(Error::Shape("feature volume has an empty dimension".into()));
        }
        Ok(())
    }

    /// Checks the volume fits inside an `height×width` image with `d` channels.
    pub fn check_against(&self, height: usize, width: usize, d: usize) -> Result<()> {
        if self.h() > height || self.w() > width {
            return Err(Error::dims(
                "feature grid",
                format!("at most {height}x{width}"),
                format!("{}x{}", self.h(), self.w()),
            ));
        }
        if self.d() != d {
            return Err(Error::dims("feature channels", d, self.d()));
        }
        Ok(())
    }
}

pub fn save_feature_volume(path: &Path, volume: &FeatureVolume) -> Result<()> {
    tensor_io::save(path, &volume.features)
}

/// Loads an `h×w×d` volume stored as f32 or f64.
pub fn load_feature_volume(path: &Path) -> Result<FeatureVolume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let arr = tensor_io::decode_float(&bytes)?;
    let rank = arr.ndim();
    let features = arr
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::Shape(format!("feature volume must be rank 3, found rank {rank}")))?;
    FeatureVolume::new(features)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEmbedding {
    pub vector: Array1<f64>,
}

impl LanguageEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// A 2D feature extractor plus language embedder.
pub trait Backbone: Send + Sync {
    fn feature_dim(&self) -> usize;
    fn extract_features(&self, frame: &CameraFrame) -> Result<FeatureVolume>;
    fn embed_language(&self, instruction: &str) -> Result<LanguageEmbedding>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestBackboneConfig {
    /// Patch size and stride of the first convolution.
    pub stride: usize,
    pub hidden: usize,
    pub dim: usize,
    pub seed: u64,
    pub bias: bool,
}

impl Default for TestBackboneConfig {
    fn default() -> Self {
        Self {
            stride: 8,
            hidden: 32,
            dim: 64,
            seed: 0,
            bias: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TestBackbone {
    cfg: TestBackboneConfig,
    params: ParamStore<f64>,
    patch_weight: ParamId,
    patch_bias: ParamId,
    proj_weight: ParamId,
    proj_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    grid: (usize, usize),
    patches: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl TestBackbone {
    pub fn new(cfg: TestBackboneConfig) -> Self {
        assert!(cfg.stride >= 1 && cfg.hidden >= 1 && cfg.dim >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_636b_626f_6e65);
        let fan_in = cfg.stride * cfg.stride * 3;
        let mut gaussian = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_fn((rows, cols), |_| {
                scale * rng.sample::<f64, _>(StandardNormal)
            })
        };
        let w1 = gaussian(fan_in, cfg.hidden, 2.0 / (fan_in as f64).sqrt());
        let w2 = gaussian(cfg.hidden, cfg.dim, 1.0 / (cfg.hidden as f64).sqrt());
        let (b1, b2) = if cfg.bias {
            (
                gaussian(1, cfg.hidden, 0.1).into_shape_with_order(cfg.hidden).unwrap(),
                gaussian(1, cfg.dim, 0.1).into_shape_with_order(cfg.dim).unwrap(),
            )
        } else {
            (Array1::zeros(cfg.hidden), Array1::zeros(cfg.dim))
        };
        let mut params = ParamStore::new();
        let patch_weight = params.add("backbone.patch.weight", w1.into_dyn());
        let patch_bias = params.add("backbone.patch.bias", b1.into_dyn());
        let proj_weight = params.add("backbone.proj.weight", w2.into_dyn());
        let proj_bias = params.add("backbone.proj.bias", b2.into_dyn());
        Self {
            cfg,
            params,
            patch_weight,
            patch_bias,
            proj_weight,
            proj_bias,
        }
    }

    pub fn config(&self) -> &TestBackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }

    /// Output grid for an `height×width` image.
    pub fn grid(&self, height: usize, width: usize) -> (usize, usize) {
        (height / self.cfg.stride, width / self.cfg.stride)
    }

    fn patches(&self, frame: &CameraFrame) -> Result<((usize, usize), Array2<f64>)> {
        let s = self.cfg.stride;
        let (gh, gw) = self.grid(frame.height(), frame.width());
        if gh == 0 || gw == 0 {
            return Err(Error::dims(
                "image size for test backbone",
                format!("at least {s}x{s}"),
                format!("{}x{}", frame.height(), frame.width()),
            ));
        }
        let mut patches = Array2::zeros((gh * gw, s * s * 3));
        for gi in 0..gh {
            for gj in 0..gw {
                let mut row = patches.row_mut(gi * gw + gj);
                let mut k = 0;
                for dy in 0..s {
                    for dx in 0..s {
                        for c in 0..3 {
                            row[k] = frame.rgb[(gi * s + dy, gj * s + dx, c)];
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(((gh, gw), patches))
    }

    pub fn forward_cached(&self, frame: &CameraFrame) -> Result<(FeatureVolume, BackboneCache)> {
        let (grid, patches) = self.patches(frame)?;
        let p = &self.params;
        let pre = patches.dot(&p.matrix(self.patch_weight)) + &p.vector(self.patch_bias);
        let hidden = pre.mapv(silu);
        let out = hidden.dot(&p.matrix(self.proj_weight)) + &p.vector(self.proj_bias);
        let features = out
            .into_shape_with_order((grid.0, grid.1, self.cfg.dim))
            .expect("grid cells times dim");
        let volume = FeatureVolume::new(features)?;
        Ok((
            volume,
            BackboneCache {
                grid,
                patches,
                pre,
                hidden,
            },
        ))
    }

    /// Accumulates parameter gradients given `d loss / d features` (`h×w×d`).
    pub fn backward(&mut self, cache: &BackboneCache, grad_features: &Array3<f64>) -> Result<()> {
        let (gh, gw) = cache.grid;
        if grad_features.dim() != (gh, gw, self.cfg.dim) {
            return Err(Error::dims(
                "backbone upstream gradient",
                format!("{gh}x{gw}x{}", self.cfg.dim),
                format!("{:?}", grad_features.dim()),
            ));
        }
        let g_out = grad_features
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((gh * gw, self.cfg.dim))
            .unwrap();
        let p = &mut self.params;
        let dw2 = cache.hidden.t().dot(&g_out);
        p.grad_matrix_mut(self.proj_weight).zip_mut_with(&dw2, |g, d| *g += *d);
        let db2 = g_out.sum_axis(ndarray::Axis(0));
        p.grad_vector_mut(self.proj_bias).zip_mut_with(&db2, |g, d| *g += *d);
        let mut g_hidden = g_out.dot(&p.matrix(self.proj_weight).t());
        g_hidden.zip_mut_with(&cache.pre, |g, x| *g *= silu_grad(*x));
        let dw1 = cache.patches.t().dot(&g_hidden);
        p.grad_matrix_mut(self.patch_weight).zip_mut_with(&dw1, |g, d| *g += *d);
        let db1 = g_hidden.sum_axis(ndarray::Axis(0));
        p.grad_vector_mut(self.patch_bias).zip_mut_with(&db1, |g, d| *g += *d);
        Ok(())
    }
}

impl Backbone for TestBackbone {
    fn feature_dim(&self) -> usize {
        self.cfg.dim
    }

    fn extract_features(&self, frame: &CameraFrame) -> Result<FeatureVolume> {
        Ok(self.forward_cached(frame)?.0)
    }

    fn embed_language(&self, instruction: &str) -> Result<LanguageEmbedding> {
        hash_embed(instruction, self.cfg.dim, self.cfg.seed)
    }
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bag-of-tokens embedding: every lowercased alphanumeric token seeds a
/// Gaussian vector; the sum is normalized to unit length.
pub fn hash_embed(instruction: &str, dim: usize, seed: u64) -> Result<LanguageEmbedding> {
    let mut acc = Array1::<f64>::zeros(dim);
    let mut tokens = 0;
    for token in instruction
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let token = token.to_lowercase();
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes(), seed));
        for v in acc.iter_mut() {
            *v += rng.sample::<f64, _>(StandardNormal);
        }
        tokens += 1;
    }
    if tokens == 0 {
        return Err(Error::InvalidInput("empty language instruction".into()));
    }
    let norm = acc.dot(&acc).sqrt();
    if norm == 0.0 {
        return Err(Error::NonFinite("language embedding norm".into()));
    }
    Ok(LanguageEmbedding {
        vector: acc / norm,
    })
}

/// Reads an externally computed language embedding (rank-1 tensor).
pub fn load_language_embedding(path: &Path) -> Result<LanguageEmbedding> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let arr: ArrayD<f64> = tensor_io::decode_float(&bytes)?;
    let rank = arr.ndim();
    let vector = arr
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|_| Error::Shape(format!("language embedding must be rank 1, found {rank}")))?;
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("language embedding".into()));
    }
    Ok(LanguageEmbedding { vector })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, RigidTransform};
    use ndarray::Array2;

    fn frame(h: usize, w: usize, fill: impl Fn(usize, usize, usize) -> f64) -> CameraFrame {
        CameraFrame {
            rgb: Array3::from_shape_fn((h, w, 3), |(v, u, c)| fill(v, u, c)),
            depth: Array2::from_elem((h, w), 1.0),
            intrinsics: CameraIntrinsics::from_fov(w, h, 1.0),
            extrinsic: RigidTransform::identity(),
        }
    }

    fn cfg(stride: usize, dim: usize) -> TestBackboneConfig {
        TestBackboneConfig {
            stride,
            hidden: 16,
            dim,
            seed: 5,
            bias: false,
        }
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let bb = TestBackbone::new(cfg(4, 8));
        let vol = bb.extract_features(&frame(16, 16, |_, _, _| 0.0)).unwrap();
        assert!(vol.features.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn deterministic_for_seed() {
        let f = frame(32, 32, |v, u, c| ((v * 7 + u * 3 + c) % 11) as f64 / 10.0);
        let a = TestBackbone::new(cfg(8, 8)).extract_features(&f).unwrap();
        let b = TestBackbone::new(cfg(8, 8)).extract_features(&f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stride_shape_arithmetic() {
        let bb = TestBackbone::new(cfg(16, 32));
        let vol = bb.extract_features(&frame(128, 128, |_, _, _| 0.3)).unwrap();
        assert_eq!(vol.features.dim(), (8, 8, 32));
    }

    #[test]
    fn language_embedding_contract() {
        let a = hash_embed("open drawer", 64, 0).unwrap();
        let b = hash_embed("open drawer", 64, 0).unwrap();
        assert_eq!(a, b);
        assert!((a.vector.dot(&a.vector).sqrt() - 1.0).abs() < 1e-6);
        let c = hash_embed("close drawer", 64, 0).unwrap();
        assert!(a.vector.iter().zip(c.vector.iter()).any(|(x, y)| x != y));
        assert!(hash_embed("  ", 64, 0).is_err());
        assert!(hash_embed("", 64, 0).is_err());
    }

    #[test]
    fn volume_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let vol = TestBackbone::new(cfg(4, 8))
            .extract_features(&frame(16, 12, |v, u, c| (v + 2 * u + c) as f64 * 0.01))
            .unwrap();
        let path = dir.path().join("vol.a3rt");
        save_feature_volume(&path, &vol).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = load_feature_volume(&path).unwrap();
        assert_eq!(back, vol);
        save_feature_volume(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[1] = b'!';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_feature_volume(&path), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[5] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_feature_volume(&path), Err(Error::DtypeMismatch { .. })));

        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_feature_volume(&path), Err(Error::Truncated { .. })));

        tensor_io::save(&path, &Array2::<f64>::zeros((3, 4))).unwrap();
        assert!(matches!(load_feature_volume(&path), Err(Error::Shape(_))));
    }

    #[test]
    fn f32_volumes_are_widened() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v32.a3rt");
        let arr = Array3::<f32>::from_shape_fn((2, 3, 4), |(a, b, c)| (a + b + c) as f32 * 0.5);
        tensor_io::save(&path, &arr).unwrap();
        let vol = load_feature_volume(&path).unwrap();
        assert_eq!(vol.features, arr.mapv(f64::from));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bb = TestBackbone::new(TestBackboneConfig {
            bias: true,
            ..cfg(2, 3)
        });
        let f = frame(4, 6, |v, u, c| ((v * 5 + u * 3 + c * 7) % 13) as f64 / 12.0);
        let (_, cache) = bb.forward_cached(&f).unwrap();
        let up = Array3::from_shape_fn((2, 3, 3), |(a, b, c)| ((a * 7 + b * 3 + c) % 5) as f64 - 2.0);
        bb.backward(&cache, &up).unwrap();
        let objective = |b: &TestBackbone| (b.extract_features(&f).unwrap().features * &up).sum();
        let h = 1e-6;
        let names: Vec<String> = bb.params().iter().map(|p| p.name.clone()).collect();
        for name in names {
            let id = bb.params().id(&name).unwrap();
            let n = bb.params().param(id).value.len();
            for k in 0..n {
                let mut plus = bb.clone();
                plus.params_mut().param_mut(id).value.as_slice_mut().unwrap()[k] += h;
                let mut minus = bb.clone();
                minus.params_mut().param_mut(id).value.as_slice_mut().unwrap()[k] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = bb.params().param(id).grad.as_slice().unwrap()[k];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{name}[{k}]: {fd} vs {an}");
            }
        }
    }
}
