//! Positional encoding, token assembly and the pooling heads that reduce a
//! point-token set to one conditioning vector.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{EncoderConfig, Pooling, TokenLayout};
use crate::error::{Error, Result};
use crate::nn::{cast, Mlp, MlpCache, ParamId, ParamStore, Real};

/// Fourier features of every coordinate.
///
/// Column layout: coordinate-major, frequency-minor, sine before cosine, so
/// coordinate `c` at frequency `i` occupies columns `2(cL + i)` (sin) and
/// `2(cL + i) + 1` (cos).
pub fn positional_encode(points: ArrayView2<f64>, frequencies: usize) -> Array2<f64> {
    let mut out = Array2::zeros((points.nrows(), 6 * frequencies));
    for (p, mut row) in points.outer_iter().zip(out.outer_iter_mut()) {
        for c in 0..3 {
            for i in 0..frequencies {
                let arg = (1u64 << i) as f64 * PI * p[c];
                let col = 2 * (c * frequencies + i);
                row[col] = arg.sin();
                row[col + 1] = arg.cos();
            }
        }
    }
    out
}

/// The `p × width` token matrix fed to pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTokenCloud<F = f64> {
    pub tokens: Array2<F>,
    pub layout: TokenLayout,
}

impl<F: Real> PointTokenCloud<F> {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn cast<G: Real>(&self) -> PointTokenCloud<G> {
        PointTokenCloud {
            tokens: self.tokens.mapv(|v| G::from(v).expect("float cast")),
            layout: self.layout,
        }
    }
}

/// Row `i` = `[position_i | features_i | language]`. Empty blocks (zero
/// columns, or no language) are simply omitted.
pub fn assemble_tokens(
    position: ArrayView2<f64>,
    features: ArrayView2<f64>,
    language: Option<ArrayView1<f64>>,
) -> Result<PointTokenCloud<f64>> {
    let p = position.nrows();
    if features.nrows() != p {
        return Err(Error::dims("token feature rows", p, features.nrows()));
    }
    let layout = TokenLayout {
        position: position.ncols(),
        features: features.ncols(),
        language: language.map_or(0, |l| l.len()),
    };
    let mut tokens = Array2::zeros((p, layout.width()));
    tokens.slice_mut(s![.., ..layout.position]).assign(&position);
    tokens.slice_mut(s![.., layout.feature_range()]).assign(&features);
    if let Some(l) = language {
        let r = layout.language_range();
        for mut row in tokens.outer_iter_mut() {
            row.slice_mut(s![r.clone()]).assign(&l);
        }
    }
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("point tokens".into()));
    }
    Ok(PointTokenCloud { tokens, layout })
}

/// Output of pooling: the conditioning vector plus per-point weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEncoding<F = f64> {
    pub z: Array1<F>,
    /// Softmax weights (attention pooling) or the share of output dimensions
    /// each row wins (max pooling). Sums to one either way.
    pub attention: Array1<F>,
}

/// Key network, value network and learned query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPool {
    pub key_net: Mlp,
    pub value_net: Mlp,
    pub query: ParamId,
    pub input_dim: usize,
    pub key_dim: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone)]
enum PoolKind<F> {
    Attention {
        key_cache: MlpCache<F>,
        keys: Array2<F>,
        weights: Array1<F>,
    },
    Max {
        argmax: Vec<usize>,
    },
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct PoolCache<F> {
    value_cache: MlpCache<F>,
    values: Array2<F>,
    kind: PoolKind<F>,
}

impl<F> PoolCache<F> {
    pub fn is_max(&self) -> bool {
        matches!(self.kind, PoolKind::Max { .. })
    }

    /// Winning row per output dimension under max pooling.
    pub fn argmax(&self) -> Option<&[usize]> {
        match &self.kind {
            PoolKind::Max { argmax } => Some(argmax),
            _ => None,
        }
    }
}

impl AttentionPool {
    /// Two-layer key and value networks with hidden width `embed_dim`.
    pub fn new(
        store: &mut ParamStore<f64>,
        name: &str,
        input_dim: usize,
        key_dim: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let key_net = Mlp::new(store, &format!("{name}.key"), &[input_dim, embed_dim, key_dim], rng);
        let value_net = Mlp::new(store, &format!("{name}.value"), &[input_dim, embed_dim, embed_dim], rng);
        let std = 1.0 / (key_dim as f64).sqrt();
        let q = Array1::from_shape_fn(key_dim, |_| std * rng.sample::<f64, _>(StandardNormal));
        let query = store.add(format!("{name}.query"), q.into_dyn());
        Self {
            key_net,
            value_net,
            query,
            input_dim,
            key_dim,
            embed_dim,
        }
    }

    pub fn from_config(store: &mut ParamStore<f64>, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        Self::new(store, name, cfg.token_layout().width(), cfg.key_dim, cfg.embed_dim, rng)
    }

    fn check_input<F: Real>(&self, tokens: &ArrayView2<F>) -> Result<()> {
        if tokens.ncols() != self.input_dim {
            return Err(Error::dims("token width", self.input_dim, tokens.ncols()));
        }
        if tokens.nrows() == 0 {
            return Err(Error::InvalidInput("pooling needs at least one token".into()));
        }
        Ok(())
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        tokens: ArrayView2<F>,
        pooling: Pooling,
    ) -> Result<SceneEncoding<F>> {
        Ok(self.forward_cached(store, tokens, pooling)?.0)
    }

    pub fn forward_cached<F: Real>(
        &self,
        store: &ParamStore<F>,
        tokens: ArrayView2<F>,
        pooling: Pooling,
    ) -> Result<(SceneEncoding<F>, PoolCache<F>)> {
        match pooling {
            Pooling::Attention => self.attention_forward(store, tokens),
            Pooling::Max => self.max_forward(store, tokens),
        }
    }

    /// `z = softmax(q Kᵀ / √d_k) V` with `K = K_θ(P)`, `V = V_θ(P)`.
    pub fn attention_forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        tokens: ArrayView2<F>,
    ) -> Result<(SceneEncoding<F>, PoolCache<F>)> {
        self.check_input(&tokens)?;
        let (keys, key_cache) = self.key_net.forward_cached(store, tokens);
        let (values, value_cache) = self.value_net.forward_cached(store, tokens);
        let scale = cast::<F>(1.0 / (self.key_dim as f64).sqrt());
        let logits = keys.dot(&store.vector(self.query)) * scale;
        let max = logits.fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut weights = logits.mapv(|v| (v - max).exp());
        let total = weights.sum();
        weights.mapv_inplace(|w| w / total);
        let z = values.t().dot(&weights);
        if !max.is_finite() || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attention pooling".into()));
        }
        Ok((
            SceneEncoding {
                z,
                attention: weights.clone(),
            },
            PoolCache {
                value_cache,
                values,
                kind: PoolKind::Attention {
                    key_cache,
                    keys,
                    weights,
                },
            },
        ))
    }

    /// Per-dimension max over `V_θ(P)`; ties go to the lowest row.
    pub fn max_forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        tokens: ArrayView2<F>,
    ) -> Result<(SceneEncoding<F>, PoolCache<F>)> {
        self.check_input(&tokens)?;
        let (values, value_cache) = self.value_net.forward_cached(store, tokens);
        let (p, de) = values.dim();
        let mut argmax = vec![0usize; de];
        let mut z = values.row(0).to_owned();
        for i in 1..p {
            for j in 0..de {
                if values[(i, j)] > z[j] {
                    z[j] = values[(i, j)];
                    argmax[j] = i;
                }
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("max pooling".into()));
        }
        let mut attention = Array1::zeros(p);
        let share = cast::<F>(1.0 / de as f64);
        for &i in &argmax {
            attention[i] += share;
        }
        Ok((
            SceneEncoding { z, attention },
            PoolCache {
                value_cache,
                values,
                kind: PoolKind::Max { argmax },
            },
        ))
    }

    /// Accumulates parameter gradients for `upstream = ∂L/∂z` and returns
    /// `∂L/∂tokens`.
    pub fn backward<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        cache: &PoolCache<F>,
        upstream: ArrayView1<F>,
    ) -> Result<Array2<F>> {
        if upstream.len() != self.embed_dim {
            return Err(Error::dims("pooling upstream gradient", self.embed_dim, upstream.len()));
        }
        let (p, de) = cache.values.dim();
        match &cache.kind {
            PoolKind::Attention {
                key_cache,
                keys,
                weights,
            } => {
                let g_values = weights
                    .view()
                    .insert_axis(Axis(1))
                    .dot(&upstream.insert_axis(Axis(0)));
                let g_weights = cache.values.dot(&upstream);
                let mean = weights.dot(&g_weights);
                let g_logits = Array1::from_shape_fn(p, |i| weights[i] * (g_weights[i] - mean));
                let scale = cast::<F>(1.0 / (self.key_dim as f64).sqrt());
                let g_query = keys.t().dot(&g_logits) * scale;
                store
                    .grad_vector_mut(self.query)
                    .zip_mut_with(&g_query, |g, d| *g += *d);
                let query = store.vector(self.query).to_owned();
                let g_keys = g_logits
                    .insert_axis(Axis(1))
                    .dot(&query.insert_axis(Axis(0)))
                    * scale;
                let g_tok_k = self.key_net.backward(store, key_cache, g_keys.view());
                let g_tok_v = self.value_net.backward(store, &cache.value_cache, g_values.view());
                Ok(g_tok_k + g_tok_v)
            }
            PoolKind::Max { argmax } => {
                let mut g_values = Array2::zeros((p, de));
                for (j, &i) in argmax.iter().enumerate() {
                    g_values[(i, j)] = upstream[j];
                }
                Ok(self.value_net.backward(store, &cache.value_cache, g_values.view()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(input: usize, dk: usize, de: usize) -> (AttentionPool, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let pool = AttentionPool::new(&mut store, "pool", input, dk, de, &mut ChaCha8Rng::seed_from_u64(3));
        (pool, store)
    }

    #[test]
    fn origin_encodes_to_zeros_and_ones() {
        let enc = positional_encode(array![[0.0, 0.0, 0.0]].view(), 10);
        assert_eq!(enc.ncols(), 60);
        let sines = enc.iter().step_by(2).filter(|v| **v == 0.0).count();
        let cosines = enc.iter().skip(1).step_by(2).filter(|v| **v == 1.0).count();
        assert_eq!((sines, cosines), (30, 30));
    }

    #[test]
    fn layout_is_coordinate_major() {
        let enc = positional_encode(array![[0.5, 0.0, 0.25]].view(), 10);
        assert!((enc[(0, 0)] - 1.0).abs() < 1e-15);
        // x block spans 20 columns; z starts at column 40.
        assert_eq!(enc[(0, 20)], 0.0);
        assert!((enc[(0, 40)] - (PI * 0.25).sin()).abs() < 1e-15);
        assert!((enc[(0, 43)] - (2.0 * PI * 0.25).cos()).abs() < 1e-15);
    }

    #[test]
    fn token_assembly_widths() {
        let p = 4;
        let pe = Array2::zeros((p, 60));
        let f = Array2::ones((p, 64));
        let l = Array1::from_elem(64, 0.5);
        let t = assemble_tokens(pe.view(), f.view(), Some(l.view())).unwrap();
        assert_eq!(t.tokens.ncols(), 188);
        assert_eq!(t.tokens[(3, 187)], 0.5);
        assert_eq!(t.tokens[(3, 60)], 1.0);
        let t = assemble_tokens(pe.view(), f.view(), None).unwrap();
        assert_eq!(t.tokens.ncols(), 124);
        let raw = Array2::zeros((p, 3));
        let t = assemble_tokens(raw.view(), f.view(), Some(l.view())).unwrap();
        assert_eq!(t.tokens.ncols(), 131);
        assert!(assemble_tokens(pe.view(), Array2::zeros((3, 64)).view(), None).is_err());
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let (pool, store) = pool(5, 4, 6);
        let tokens = Array2::from_shape_fn((7, 5), |(_, j)| j as f64 * 0.3 - 0.5);
        let (enc, _) = pool.attention_forward(&store, tokens.view()).unwrap();
        for w in enc.attention.iter() {
            assert_eq!(*w, 1.0 / 7.0);
        }
        let v = pool.value_net.forward(&store, tokens.slice(s![0..1, ..]));
        for j in 0..6 {
            assert!((enc.z[j] - v[(0, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_row() {
        let (pool, store) = pool(3, 2, 4);
        let tokens = array![[0.1, -0.4, 0.9]];
        let (enc, _) = pool.attention_forward(&store, tokens.view()).unwrap();
        assert_eq!(enc.attention[0], 1.0);
        assert_eq!(enc.z, pool.value_net.forward(&store, tokens.view()).row(0));
        let (enc, _) = pool.max_forward(&store, tokens.view()).unwrap();
        assert_eq!(enc.z, pool.value_net.forward(&store, tokens.view()).row(0));
        assert_eq!(enc.attention[0], 1.0);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let (pool, store) = pool(3, 2, 4);
        assert!(pool.attention_forward(&store, Array2::<f64>::zeros((2, 4)).view()).is_err());
        let (_, cache) = pool.attention_forward(&store, Array2::<f64>::zeros((2, 3)).view()).unwrap();
        let mut store = store;
        assert!(pool.backward(&mut store, &cache, Array1::zeros(3).view()).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (pool, mut store) = pool(4, 3, 5);
        let tokens = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 3 + j) % 5) as f64 * 0.2);
        let (_, cache) = pool.attention_forward(&store, tokens.view()).unwrap();
        let g = pool.backward(&mut store, &cache, Array1::zeros(5).view()).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(store.iter().all(|p| p.grad.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let (pool, store) = pool(6, 4, 8);
        let tokens = Array2::from_shape_fn((9, 6), |(i, j)| ((i * 5 + j * 3) % 7) as f64 * 0.1 - 0.3);
        let z64 = pool.attention_forward(&store, tokens.view()).unwrap().0.z;
        let store32 = store.cast::<f32>();
        let z32 = pool
            .attention_forward(&store32, tokens.mapv(|v| v as f32).view())
            .unwrap()
            .0
            .z;
        for (a, b) in z64.iter().zip(z32.iter()) {
            assert!((a - f64::from(*b)).abs() < 1e-5);
        }
    }
}
