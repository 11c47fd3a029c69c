//! Minimal dense-network machinery with hand-written backward passes.
//!
//! Parameters live in a [`ParamStore`]; layers hold [`ParamId`] handles into
//! it, so the optimizer and checkpoint code see every tensor through one
//! flat, ordered registry.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Ix1, Ix2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type accepted by the numeric kernels.
pub trait Real:
    Float
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + NumAssign
        + LinalgScalar
        + ScalarOperand
        + Sum
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

#[inline]
pub fn cast<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("f64 converts to any Real")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<F = f64> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub trainable: bool,
}

/// Ordered registry of named tensors with gradient slots.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F = f64> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on duplicate names (a programming error).
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn matrix(&self, id: ParamId) -> ArrayView2<'_, F> {
        self.params[id.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("parameter is a matrix")
    }

    pub fn vector(&self, id: ParamId) -> ArrayView1<'_, F> {
        self.params[id.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("parameter is a vector")
    }

    pub fn grad_matrix_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        self.params[id.0]
            .grad
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("parameter is a matrix")
    }

    pub fn grad_vector_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        self.params[id.0]
            .grad
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("parameter is a vector")
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Global ℓ2 norm over the gradients of trainable parameters.
    pub fn grad_norm(&self) -> F {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.iter())
            .map(|g| *g * *g)
            .sum::<F>()
            .sqrt()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let conv = |v: &F| G::from(*v).expect("float cast");
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.map(conv),
                    grad: p.grad.map(conv),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::dims("parameter count", self.len(), other.len()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::dims(
                    format!("parameter {}", dst.name),
                    format!("{:?}", dst.value.shape()),
                    format!("{} {:?}", src.name, src.value.shape()),
                ));
            }
            dst.value.assign(&src.value);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    Orthogonal,
}

/// Random matrix with orthonormal columns (rows ≥ cols) or rows (rows < cols),
/// via modified Gram–Schmidt on a Gaussian draw.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Array2<f64> {
    let (n, k) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut q = Array2::<f64>::zeros((n, k));
    for mut col in q.columns_mut() {
        for v in col.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    for j in 0..k {
        for i in 0..j {
            let proj = q.column(i).dot(&q.column(j));
            let qi = q.column(i).to_owned();
            q.column_mut(j).scaled_add(-proj, &qi);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    let q = q.mapv(|v| v * gain);
    if rows >= cols {
        q
    } else {
        q.reversed_axes().as_standard_layout().to_owned()
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// Affine layer `y = x W + b`, with `W` stored `in × out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore<f64>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = orthogonal(inputs, outputs, 1.0, rng).into_dyn();
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(vec![outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: ArrayView2<F>) -> Array2<F> {
        x.dot(&store.matrix(self.weight)) + &store.vector(self.bias)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        x: ArrayView2<F>,
        grad_out: ArrayView2<F>,
    ) -> Array2<F> {
        let grad_in = grad_out.dot(&store.matrix(self.weight).t());
        let dw = x.t().dot(&grad_out);
        store.grad_matrix_mut(self.weight).zip_mut_with(&dw, |g, d| *g += *d);
        let db = grad_out.sum_axis(Axis(0));
        store.grad_vector_mut(self.bias).zip_mut_with(&db, |g, d| *g += *d);
        grad_in
    }
}

/// Dense stack with SiLU between layers (none after the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    /// Input to every layer.
    inputs: Vec<Array2<F>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Array2<F>>,
}

impl Mlp {
    /// `widths = [in, hidden..., out]`.
    pub fn new(store: &mut ParamStore<f64>, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: ArrayView2<F>) -> Array2<F> {
        let mut h = self.layers[0].forward(store, x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(silu);
            h = layer.forward(store, h.view());
        }
        h
    }

    pub fn forward_cached<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: ArrayView2<F>,
    ) -> (Array2<F>, MlpCache<F>) {
        let mut inputs = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = self.layers[0].forward(store, x);
        for layer in &self.layers[1..] {
            let act = h.mapv(silu);
            pre.push(h);
            h = layer.forward(store, act.view());
            inputs.push(act);
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        cache: &MlpCache<F>,
        grad_out: ArrayView2<F>,
    ) -> Array2<F> {
        let last = self.layers.len() - 1;
        let mut g = self.layers[last].backward(store, cache.inputs[last].view(), grad_out);
        for i in (0..last).rev() {
            g.zip_mut_with(&cache.pre[i], |gv, pv| *gv *= silu_grad(*pv));
            g = self.layers[i].backward(store, cache.inputs[i].view(), g.view());
        }
        g
    }
}

pub fn forward_row<F: Real>(mlp: &Mlp, store: &ParamStore<F>, x: &Array1<F>) -> Array1<F> {
    let x2 = x.view().insert_axis(Axis(0));
    mlp.forward(store, x2).remove_axis(Axis(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<ArrayD<f64>>,
    second: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f64>, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: store.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
            second: store.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<f64>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.trainable {
                continue;
            }
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    let g = g + wd * *w;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr_max;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Rescales trainable gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore<f64>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad.mapv_inplace(|g| g * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn orthogonal_columns_and_rows() {
        let tall = orthogonal(12, 5, 1.0, &mut rng());
        let gram = tall.t().dot(&tall);
        assert!((gram - Array2::<f64>::eye(5)).iter().all(|v| v.abs() < 1e-12));

        let wide = orthogonal(4, 9, 1.0, &mut rng());
        let gram = wide.dot(&wide.t());
        assert!((gram - Array2::<f64>::eye(4)).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn silu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[5, 7, 3], &mut rng());
        let mut r = rng();
        let x = Array2::from_shape_fn((4, 5), |_| r.random_range(-1.0..1.0));
        let up = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0));
        let (_, cache) = mlp.forward_cached(&store, x.view());
        let gx = mlp.backward(&mut store, &cache, up.view());

        let objective = |s: &ParamStore<f64>, x: &Array2<f64>| (mlp.forward(s, x.view()) * &up).sum();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..5 {
                let mut xp = x.clone();
                xp[(i, j)] += h;
                let mut xm = x.clone();
                xm[(i, j)] -= h;
                let fd = (objective(&store, &xp) - objective(&store, &xm)) / (2.0 * h);
                assert!((fd - gx[(i, j)]).abs() < 1e-7);
            }
        }
        let w = mlp.layers[0].weight;
        let analytic = store.param(w).grad.clone();
        for k in 0..analytic.len() {
            let mut sp = store.clone();
            sp.param_mut(w).value.as_slice_mut().unwrap()[k] += h;
            let mut sm = store.clone();
            sm.param_mut(w).value.as_slice_mut().unwrap()[k] -= h;
            let fd = (objective(&sp, &x) - objective(&sm, &x)) / (2.0 * h);
            assert!((fd - analytic.as_slice().unwrap()[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn cosine_schedule_endpoints_and_monotone() {
        let s = CosineSchedule {
            lr_max: 1e-4,
            lr_min: 0.0,
            total_steps: 100,
        };
        assert_eq!(s.lr(0), 1e-4);
        assert!(s.lr(100) <= 1e-7);
        for t in 0..100 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut store = ParamStore::new();
        let _ = Mlp::new(&mut store, "m", &[3, 4, 2], &mut rng());
        let before = store.clone();
        for p in store.iter_mut() {
            p.grad.fill(1.0);
        }
        let mut adam = Adam::new(&store, 1e-4);
        for _ in 0..5 {
            adam.step(&mut store, 0.0);
        }
        for (a, b) in store.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut store = ParamStore::new();
        store.add("a", ArrayD::zeros(vec![3]));
        store.add("b", ArrayD::zeros(vec![2, 2]));
        for p in store.iter_mut() {
            p.grad.fill(100.0);
        }
        let before = clip_grad_norm(&mut store, 100.0);
        assert!((before - (7.0f64).sqrt() * 100.0).abs() < 1e-9);
        assert!((store.grad_norm() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut store = ParamStore::new();
        store.add("frozen.w", ArrayD::from_elem(vec![2], 1.0));
        store.add("live.w", ArrayD::from_elem(vec![2], 1.0));
        store.set_trainable("frozen", false);
        for p in store.iter_mut() {
            p.grad.fill(1.0);
        }
        let mut adam = Adam::new(&store, 0.0);
        adam.step(&mut store, 0.1);
        assert_eq!(store.param(store.id("frozen.w").unwrap()).value[[0]], 1.0);
        assert!(store.param(store.id("live.w").unwrap()).value[[0]] < 1.0);
    }
}
