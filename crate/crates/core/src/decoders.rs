//! Small decoder heads conditioned on the scene encoding: a Gaussian NLL
//! head, a denoising head and a conditional VAE, plus the proprioception
//! encoder. All losses are averaged over the batch and come with analytic
//! gradients for the head parameters and the conditioning input.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Proprioception;
use crate::nn::{Mlp, ParamStore};

/// Width of the proprioception vector `[ee_x, ee_y, ee_z, gripper]`.
pub const PROPRIO_DIM: usize = 4;

/// `½ log 2π`.
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

/// `H × a_dim` block of future actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub actions: Array2<f64>,
}

impl ActionChunk {
    pub fn new(actions: Array2<f64>) -> Result<Self> {
        if actions.nrows() == 0 {
            return Err(Error::InvalidInput("action chunk needs at least one step".into()));
        }
        if actions.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action chunk".into()));
        }
        Ok(Self { actions })
    }

    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.nrows() == 0
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    /// Row-major flattening used as the head target.
    pub fn flat(&self) -> Array1<f64> {
        self.actions.iter().copied().collect()
    }
}

/// Negative log density of `target` under `N(mean, diag(std²))`.
pub fn nll_loss(target: ArrayView1<f64>, mean: ArrayView1<f64>, std: ArrayView1<f64>) -> Result<f64> {
    check_len("nll mean", target.len(), mean.len())?;
    check_len("nll std", target.len(), std.len())?;
    let mut total = 0.0;
    for ((a, m), s) in target.iter().zip(mean.iter()).zip(std.iter()) {
        if !(*s > 0.0) {
            return Err(Error::InvalidInput(format!("standard deviation must be positive, got {s}")));
        }
        let r = (a - m) / s;
        total += 0.5 * r * r + s.ln() + HALF_LOG_2PI;
    }
    Ok(total)
}

/// `KL(N(mu, diag(std²)) ‖ N(0, I))`, summed over dimensions.
pub fn gaussian_kl(mu: ArrayView1<f64>, std: ArrayView1<f64>) -> Result<f64> {
    check_len("kl std", mu.len(), std.len())?;
    let mut total = 0.0;
    for (m, s) in mu.iter().zip(std.iter()) {
        if !(*s > 0.0) {
            return Err(Error::InvalidInput(format!("posterior std must be positive, got {s}")));
        }
        total += 0.5 * (m * m + s * s - 1.0) - s.ln();
    }
    Ok(total)
}

pub fn mse(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    check_len("mse operand", a.len(), b.len())?;
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Reconstruction MSE plus `beta` times the posterior KL.
pub fn cvae_loss(
    target: ArrayView1<f64>,
    reconstruction: ArrayView1<f64>,
    mu: ArrayView1<f64>,
    std: ArrayView1<f64>,
    beta: f64,
) -> Result<f64> {
    Ok(mse(target, reconstruction)? + beta * gaussian_kl(mu, std)?)
}

/// MSE between injected noise and its prediction.
pub fn diffusion_denoise_loss(noise: ArrayView1<f64>, predicted: ArrayView1<f64>) -> Result<f64> {
    mse(noise, predicted)
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dims(what, expected, got));
    }
    Ok(())
}

/// Discrete cosine ("squaredcos_cap_v2") schedule over `K` training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    /// Cumulative signal rate `ᾱ_k` for `k = 1..=K` at index `k - 1`.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn squared_cosine(steps: usize) -> Self {
        let f = |t: f64| ((t + 0.008) / 1.008 * PI / 2.0).cos().powi(2);
        let k = steps as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|i| (1.0 - f((i + 1) as f64 / k) / f(i as f64 / k)).min(0.999))
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Self { betas, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn signal_rate(&self, k: usize) -> Result<f64> {
        if k == 0 || k > self.steps() {
            return Err(Error::InvalidInput(format!(
                "diffusion step {k} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(self.alpha_bar[k - 1])
    }

    /// `√ᾱ_k · chunk + √(1 − ᾱ_k) · noise`.
    pub fn noised(&self, chunk: ArrayView1<f64>, noise: ArrayView1<f64>, k: usize) -> Result<Array1<f64>> {
        check_len("diffusion noise", chunk.len(), noise.len())?;
        let ab = self.signal_rate(k)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(Array1::from_shape_fn(chunk.len(), |i| a * chunk[i] + b * noise[i]))
    }
}

/// Fixed sinusoidal embedding of a diffusion step.
pub fn step_embedding(k: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for j in 0..half {
        let freq = (-(j as f64) * (1000f64).ln() / half.max(1) as f64).exp();
        out[2 * j] = (k as f64 * freq).sin();
        out[2 * j + 1] = (k as f64 * freq).cos();
    }
    out
}

/// `U_θ`: proprioception vector to `d_e`, one hidden layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProprioEncoder {
    pub net: Mlp,
}

impl ProprioEncoder {
    pub fn new(store: &mut ParamStore<f64>, name: &str, embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            net: Mlp::new(store, name, &[PROPRIO_DIM, embed_dim, embed_dim], rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.net.outputs()
    }

    pub fn input(proprio: &Proprioception) -> Array1<f64> {
        Array1::from(proprio.to_vector().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Nll,
    Diffusion,
    Cvae,
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Nll => "nll",
            HeadKind::Diffusion => "diffusion",
            HeadKind::Cvae => "cvae",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nll" => Ok(HeadKind::Nll),
            "diffusion" => Ok(HeadKind::Diffusion),
            "cvae" => Ok(HeadKind::Cvae),
            _ => Err(Error::Unknown {
                kind: "head",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub chunk_len: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub beta: f64,
    pub diffusion_steps: usize,
    pub step_embed_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Nll,
            chunk_len: 8,
            action_dim: 4,
            hidden: 256,
            latent_dim: 32,
            beta: 10.0,
            diffusion_steps: 100,
            step_embed_dim: 16,
        }
    }
}

impl HeadConfig {
    pub fn target_dim(&self) -> usize {
        self.chunk_len * self.action_dim
    }
}

/// Per-batch randomness consumed by a head's loss. Drawn outside the loss so
/// the loss itself is a deterministic function of parameters and inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadNoise {
    None,
    Diffusion { steps: Vec<usize>, noise: Array2<f64> },
    Cvae { xi: Array2<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub cfg: HeadConfig,
    pub cond_dim: usize,
    nets: HeadNets,
    schedule: Option<NoiseSchedule>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum HeadNets {
    Nll { net: Mlp },
    Diffusion { net: Mlp },
    Cvae { posterior: Mlp, decoder: Mlp },
}

impl Head {
    pub fn new(
        store: &mut ParamStore<f64>,
        name: &str,
        cfg: HeadConfig,
        cond_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let t = cfg.target_dim();
        let h = cfg.hidden;
        let (nets, schedule) = match cfg.kind {
            HeadKind::Nll => (
                HeadNets::Nll {
                    net: Mlp::new(store, &format!("{name}.nll"), &[cond_dim, h, h, 2 * t], rng),
                },
                None,
            ),
            HeadKind::Diffusion => (
                HeadNets::Diffusion {
                    net: Mlp::new(
                        store,
                        &format!("{name}.eps"),
                        &[t + cfg.step_embed_dim + cond_dim, h, h, t],
                        rng,
                    ),
                },
                Some(NoiseSchedule::squared_cosine(cfg.diffusion_steps)),
            ),
            HeadKind::Cvae => (
                HeadNets::Cvae {
                    posterior: Mlp::new(
                        store,
                        &format!("{name}.posterior"),
                        &[t + cond_dim, h, 2 * cfg.latent_dim],
                        rng,
                    ),
                    decoder: Mlp::new(
                        store,
                        &format!("{name}.decoder"),
                        &[cfg.latent_dim + cond_dim, h, h, t],
                        rng,
                    ),
                },
                None,
            ),
        };
        Self {
            cfg,
            cond_dim,
            nets,
            schedule,
        }
    }

    pub fn schedule(&self) -> Option<&NoiseSchedule> {
        self.schedule.as_ref()
    }

    pub fn sample_noise(&self, batch: usize, rng: &mut impl Rng) -> HeadNoise {
        let t = self.cfg.target_dim();
        match self.cfg.kind {
            HeadKind::Nll => HeadNoise::None,
            HeadKind::Diffusion => {
                let k_max = self.cfg.diffusion_steps;
                let steps = (0..batch).map(|_| rng.random_range(1..=k_max)).collect();
                let noise = Array2::from_shape_fn((batch, t), |_| rng.sample(StandardNormal));
                HeadNoise::Diffusion { steps, noise }
            }
            HeadKind::Cvae => HeadNoise::Cvae {
                xi: Array2::from_shape_fn((batch, self.cfg.latent_dim), |_| rng.sample(StandardNormal)),
            },
        }
    }

    fn check(&self, cond: &ArrayView2<f64>, targets: &ArrayView2<f64>) -> Result<()> {
        if cond.ncols() != self.cond_dim {
            return Err(Error::dims("conditioning width", self.cond_dim, cond.ncols()));
        }
        if targets.ncols() != self.cfg.target_dim() {
            return Err(Error::dims("action chunk width", self.cfg.target_dim(), targets.ncols()));
        }
        if targets.nrows() != cond.nrows() || cond.nrows() == 0 {
            return Err(Error::dims("batch size", cond.nrows(), targets.nrows()));
        }
        Ok(())
    }

    /// Batch-mean loss without touching gradients.
    pub fn loss(
        &self,
        store: &ParamStore<f64>,
        cond: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        noise: &HeadNoise,
    ) -> Result<f64> {
        let mut scratch = store.clone();
        self.loss_and_backward(&mut scratch, cond, targets, noise)
            .map(|(loss, _)| loss)
    }

    /// Batch-mean loss; accumulates parameter gradients and returns
    /// `∂loss/∂cond`.
    pub fn loss_and_backward(
        &self,
        store: &mut ParamStore<f64>,
        cond: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        noise: &HeadNoise,
    ) -> Result<(f64, Array2<f64>)> {
        self.check(&cond, &targets)?;
        let b = cond.nrows();
        let inv_b = 1.0 / b as f64;
        let t = self.cfg.target_dim();
        let (loss, g_cond) = match (&self.nets, noise) {
            (HeadNets::Nll { net }, HeadNoise::None) => {
                let (out, cache) = net.forward_cached(store, cond);
                let mean = out.slice(s![.., ..t]);
                let log_std = out.slice(s![.., t..]);
                let mut loss = 0.0;
                let mut g_out = Array2::zeros(out.raw_dim());
                for i in 0..b {
                    for j in 0..t {
                        let ls = log_std[(i, j)];
                        let r = (targets[(i, j)] - mean[(i, j)]) * (-ls).exp();
                        loss += 0.5 * r * r + ls + HALF_LOG_2PI;
                        g_out[(i, j)] = -r * (-ls).exp() * inv_b;
                        g_out[(i, t + j)] = (1.0 - r * r) * inv_b;
                    }
                }
                let g_cond = net.backward(store, &cache, g_out.view());
                (loss * inv_b, g_cond)
            }
            (HeadNets::Diffusion { net }, HeadNoise::Diffusion { steps, noise }) => {
                if steps.len() != b || noise.dim() != (b, t) {
                    return Err(Error::dims("diffusion noise batch", b, steps.len()));
                }
                let schedule = self.schedule.as_ref().expect("diffusion head has a schedule");
                let e = self.cfg.step_embed_dim;
                let mut input = Array2::zeros((b, t + e + self.cond_dim));
                for i in 0..b {
                    let noised = schedule.noised(targets.row(i), noise.row(i), steps[i])?;
                    input.slice_mut(s![i, ..t]).assign(&noised);
                    input.slice_mut(s![i, t..t + e]).assign(&step_embedding(steps[i], e));
                    input.slice_mut(s![i, t + e..]).assign(&cond.row(i));
                }
                let (pred, cache) = net.forward_cached(store, input.view());
                let diff = &pred - noise;
                let n = (b * t) as f64;
                let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
                let g_pred = diff * (2.0 / n);
                let g_in = net.backward(store, &cache, g_pred.view());
                (loss, g_in.slice(s![.., t + e..]).to_owned())
            }
            (HeadNets::Cvae { posterior, decoder }, HeadNoise::Cvae { xi }) => {
                let l = self.cfg.latent_dim;
                if xi.dim() != (b, l) {
                    return Err(Error::dims("cvae latent noise", b * l, xi.len()));
                }
                let beta = self.cfg.beta;
                let post_in = concatenate(Axis(1), &[targets, cond]).expect("same batch");
                let (post, post_cache) = posterior.forward_cached(store, post_in.view());
                let mu = post.slice(s![.., ..l]);
                let log_std = post.slice(s![.., l..]);
                let std = log_std.mapv(f64::exp);
                let eta = &mu + &(&std * xi);
                let dec_in = concatenate(Axis(1), &[eta.view(), cond]).expect("same batch");
                let (recon, dec_cache) = decoder.forward_cached(store, dec_in.view());

                let diff = &recon - &targets;
                let n = (b * t) as f64;
                let rec = diff.iter().map(|d| d * d).sum::<f64>() / n;
                let mut kl = 0.0;
                for i in 0..b {
                    for j in 0..l {
                        let (m, s, ls) = (mu[(i, j)], std[(i, j)], log_std[(i, j)]);
                        kl += 0.5 * (m * m + s * s - 1.0) - ls;
                    }
                }
                let loss = rec + beta * kl * inv_b;

                let g_recon = diff * (2.0 / n);
                let g_dec_in = decoder.backward(store, &dec_cache, g_recon.view());
                let g_eta = g_dec_in.slice(s![.., ..l]);
                let mut g_post = Array2::zeros(post.raw_dim());
                for i in 0..b {
                    for j in 0..l {
                        let (m, s) = (mu[(i, j)], std[(i, j)]);
                        g_post[(i, j)] = g_eta[(i, j)] + beta * m * inv_b;
                        g_post[(i, l + j)] =
                            g_eta[(i, j)] * xi[(i, j)] * s + beta * (s * s - 1.0) * inv_b;
                    }
                }
                let g_post_in = posterior.backward(store, &post_cache, g_post.view());
                let g_cond = &g_dec_in.slice(s![.., l..]) + &g_post_in.slice(s![.., t..]);
                (loss, g_cond)
            }
            _ => {
                return Err(Error::InvalidInput(format!(
                    "noise sample does not match the {} head",
                    self.cfg.kind
                )))
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("{} loss", self.cfg.kind)));
        }
        Ok((loss, g_cond))
    }

    /// Mean of the predicted Gaussian (NLL head only).
    pub fn predict_mean(&self, store: &ParamStore<f64>, cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.nets {
            HeadNets::Nll { net } => {
                if cond.ncols() != self.cond_dim {
                    return Err(Error::dims("conditioning width", self.cond_dim, cond.ncols()));
                }
                let out = net.forward(store, cond);
                Ok(out.slice(s![.., ..self.cfg.target_dim()]).to_owned())
            }
            _ => Err(Error::InvalidInput(format!(
                "{} head has no closed-form mean",
                self.cfg.kind
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nll_at_mean_with_unit_std() {
        let a = array![0.3, -1.0, 2.0, 0.0];
        let loss = nll_loss(a.view(), a.view(), Array1::ones(4).view()).unwrap();
        assert!((loss - 2.0 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_decreases_toward_target() {
        let a = array![1.0, 1.0];
        let s = array![0.5, 0.5];
        let far = nll_loss(a.view(), array![0.0, 0.0].view(), s.view()).unwrap();
        let near = nll_loss(a.view(), array![0.5, 0.5].view(), s.view()).unwrap();
        assert!(near < far);
        assert!(nll_loss(a.view(), a.view(), array![1.0, 0.0].view()).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let mu = array![0.7, -1.5];
        let kl = gaussian_kl(mu.view(), Array1::ones(2).view()).unwrap();
        assert!((kl - (0.49 + 2.25) / 2.0).abs() < 1e-12);
        let z = Array1::zeros(3);
        assert_eq!(cvae_loss(z.view(), z.view(), z.view(), Array1::ones(3).view(), 10.0).unwrap(), 0.0);
        assert!(gaussian_kl(mu.view(), array![1.0, -1.0].view()).is_err());
    }

    #[test]
    fn denoise_loss_trivial_cases() {
        let eps = array![0.5, -2.0, 1.0];
        assert_eq!(diffusion_denoise_loss(eps.view(), eps.view()).unwrap(), 0.0);
        let zero = Array1::zeros(3);
        assert!((diffusion_denoise_loss(eps.view(), zero.view()).unwrap() - 5.25 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = NoiseSchedule::squared_cosine(100);
        assert!(s.signal_rate(1).unwrap() > 0.999);
        assert!(s.signal_rate(100).unwrap() < 1e-4);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] <= w[0]));
        assert!(s.signal_rate(0).is_err());
        assert!(s.signal_rate(101).is_err());
    }

    #[test]
    fn head_names_parse() {
        for k in [HeadKind::Nll, HeadKind::Diffusion, HeadKind::Cvae] {
            assert_eq!(k.name().parse::<HeadKind>().unwrap(), k);
        }
        assert!("act".parse::<HeadKind>().is_err());
    }

    #[test]
    fn mismatched_noise_is_rejected() {
        let mut store = ParamStore::new();
        let cfg = HeadConfig {
            kind: HeadKind::Cvae,
            hidden: 8,
            latent_dim: 2,
            ..HeadConfig::default()
        };
        let head = Head::new(&mut store, "head", cfg, 5, &mut ChaCha8Rng::seed_from_u64(0));
        let cond = Array2::zeros((2, 5));
        let targets = Array2::zeros((2, cfg.target_dim()));
        assert!(head.loss(&store, cond.view(), targets.view(), &HeadNoise::None).is_err());
        let noise = head.sample_noise(2, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(head.loss(&store, cond.view(), targets.view(), &noise).is_ok());
        assert!(head.loss(&store, Array2::zeros((2, 4)).view(), targets.view(), &noise).is_err());
    }
}
