//! Farthest-point sampling over feature or Cartesian space.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::FeatureCloud;
use crate::error::{Error, Result};
use crate::nn::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpsMetric {
    /// ℓ2 distance between semantic feature vectors.
    Feature,
    /// ℓ2 distance between 3D positions.
    Position,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_points: usize,
    pub metric: FpsMetric,
    /// Selection starts at the first valid row at or after this index.
    pub seed_index: usize,
    /// When set, the start row is drawn uniformly from the valid rows instead.
    #[serde(default)]
    pub random_start: Option<u64>,
}

impl SamplerConfig {
    pub fn new(num_points: usize, metric: FpsMetric) -> Self {
        Self {
            num_points,
            metric,
            seed_index: 0,
            random_start: None,
        }
    }
}

/// Rows per parallel work item; below this the scan stays sequential.
const PAR_CHUNK: usize = 512;

pub fn farthest_point_sample(cloud: &FeatureCloud, cfg: &SamplerConfig) -> Result<Vec<usize>> {
    let data = match cfg.metric {
        FpsMetric::Feature => cloud.features.view(),
        FpsMetric::Position => cloud.points.view(),
    };
    fps_rows(data, &cloud.valid, cfg)
}

#[inline]
fn squared_distance<F: Real>(a: &[F], b: &[F]) -> F {
    // Eight independent accumulators let the compiler vectorize the sum.
    let mut acc = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    let mut tail = F::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = *x - *y;
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Candidate comparison: larger distance wins, ties go to the lower index.
#[inline]
fn better<F: Real>(a: (F, usize), b: (F, usize)) -> (F, usize) {
    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

/// Greedy max–min selection over the valid rows of `data` using squared ℓ2.
pub fn fps_rows<F: Real>(data: ArrayView2<F>, valid: &[bool], cfg: &SamplerConfig) -> Result<Vec<usize>> {
    if cfg.num_points == 0 {
        return Err(Error::InvalidInput("sample count p must be at least 1".into()));
    }
    if valid.len() != data.nrows() {
        return Err(Error::dims("validity mask length", data.nrows(), valid.len()));
    }
    let rows: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if rows.is_empty() {
        return Err(Error::NoValidPoints);
    }
    let v = rows.len();
    let dim = data.ncols();
    // Compact copy of the valid rows, row-major.
    let mut packed = Vec::with_capacity(v * dim);
    for &r in &rows {
        packed.extend(data.row(r).iter().copied());
    }

    let start = match cfg.random_start {
        Some(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..v),
        None => rows.iter().position(|&r| r >= cfg.seed_index).unwrap_or(0),
    };

    let target = cfg.num_points.min(v);
    let mut selected = Vec::with_capacity(cfg.num_points);
    selected.push(start);
    let mut dist = vec![F::infinity(); v];
    dist[start] = F::neg_infinity();
    let parallel = rayon::current_num_threads() > 1 && v >= 2 * PAR_CHUNK;

    while selected.len() < target {
        let last = *selected.last().unwrap();
        let anchor = &packed[last * dim..(last + 1) * dim];
        let scan = |(chunk_idx, chunk): (usize, &mut [F])| {
            let base = chunk_idx * PAR_CHUNK;
            let mut best = (F::neg_infinity(), usize::MAX);
            for (k, d) in chunk.iter_mut().enumerate() {
                let i = base + k;
                if *d != F::neg_infinity() {
                    let nd = squared_distance(&packed[i * dim..(i + 1) * dim], anchor);
                    if nd < *d {
                        *d = nd;
                    }
                }
                if *d > best.0 {
                    best = (*d, i);
                }
            }
            best
        };
        let best = if parallel {
            dist.par_chunks_mut(PAR_CHUNK)
                .enumerate()
                .map(scan)
                .reduce(|| (F::neg_infinity(), usize::MAX), better)
        } else {
            dist.chunks_mut(PAR_CHUNK)
                .enumerate()
                .map(scan)
                .fold((F::neg_infinity(), usize::MAX), better)
        };
        debug_assert!(best.1 != usize::MAX);
        dist[best.1] = F::neg_infinity();
        selected.push(best.1);
    }

    let mut out: Vec<usize> = selected.iter().map(|&i| rows[i]).collect();
    // Under-full clouds repeat the selection order.
    let chosen = out.len();
    while out.len() < cfg.num_points {
        out.push(out[out.len() % chosen]);
    }
    Ok(out)
}

/// Rows of a cloud gathered in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampledCloud {
    pub indices: Vec<usize>,
    pub points: Array2<f64>,
    pub features: Array2<f64>,
    pub colors: Array2<f64>,
}

impl DownsampledCloud {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn gather(cloud: &FeatureCloud, indices: &[usize]) -> Result<DownsampledCloud> {
    for &i in indices {
        if i >= cloud.len() {
            return Err(Error::InvalidInput(format!(
                "gather index {i} out of range for {} rows",
                cloud.len()
            )));
        }
        if !cloud.valid[i] {
            return Err(Error::InvalidInput(format!("gather index {i} is a masked row")));
        }
    }
    Ok(DownsampledCloud {
        indices: indices.to_vec(),
        points: cloud.points.select(ndarray::Axis(0), indices),
        features: cloud.features.select(ndarray::Axis(0), indices),
        colors: cloud.colors.select(ndarray::Axis(0), indices),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::CloudFrame;
    use ndarray::{array, Array2};

    fn cloud_from(features: Array2<f64>, points: Array2<f64>, valid: Vec<bool>) -> FeatureCloud {
        let n = valid.len();
        FeatureCloud {
            points,
            features,
            colors: Array2::zeros((n, 3)),
            valid,
            frame: CloudFrame::Base,
            camera_offsets: vec![0, n],
        }
    }

    #[test]
    fn one_dimensional_example() {
        let f = array![[0.0], [1.0], [2.0], [10.0]];
        let cloud = cloud_from(f, Array2::zeros((4, 3)), vec![true; 4]);
        let idx = farthest_point_sample(&cloud, &SamplerConfig::new(2, FpsMetric::Feature)).unwrap();
        assert_eq!(idx, vec![0, 3]);
    }

    #[test]
    fn full_count_is_permutation_of_valid() {
        let f = Array2::from_shape_fn((10, 3), |(i, k)| ((i * 7 + k * 3) % 11) as f64);
        let valid: Vec<bool> = (0..10).map(|i| i % 3 != 1).collect();
        let cloud = cloud_from(f, Array2::zeros((10, 3)), valid.clone());
        let v = cloud.valid_count();
        let mut idx = farthest_point_sample(&cloud, &SamplerConfig::new(v, FpsMetric::Feature)).unwrap();
        idx.sort();
        assert_eq!(idx, cloud.valid_indices());
    }

    #[test]
    fn start_row_skips_masked_rows() {
        let f = array![[0.0], [1.0], [5.0]];
        let cloud = cloud_from(f, Array2::zeros((3, 3)), vec![false, true, true]);
        let idx = farthest_point_sample(&cloud, &SamplerConfig::new(1, FpsMetric::Feature)).unwrap();
        assert_eq!(idx, vec![1]);
        let mut cfg = SamplerConfig::new(1, FpsMetric::Feature);
        cfg.seed_index = 2;
        assert_eq!(farthest_point_sample(&cloud, &cfg).unwrap(), vec![2]);
    }

    #[test]
    fn underfull_cloud_cycles() {
        let f = Array2::from_shape_fn((98, 4), |(i, k)| ((i * 31 + k * 17) % 97) as f64);
        let cloud = cloud_from(f, Array2::zeros((98, 3)), vec![true; 98]);
        let idx = farthest_point_sample(&cloud, &SamplerConfig::new(512, FpsMetric::Feature)).unwrap();
        assert_eq!(idx.len(), 512);
        let mut counts = vec![0usize; 98];
        for &i in &idx {
            counts[i] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 512 / 98));
        assert_eq!(&idx[98..196], &idx[..98]);
    }

    #[test]
    fn errors() {
        let cloud = cloud_from(Array2::zeros((3, 2)), Array2::zeros((3, 3)), vec![false; 3]);
        assert!(matches!(
            farthest_point_sample(&cloud, &SamplerConfig::new(2, FpsMetric::Feature)),
            Err(Error::NoValidPoints)
        ));
        let cloud = cloud_from(Array2::zeros((3, 2)), Array2::zeros((3, 3)), vec![true; 3]);
        assert!(farthest_point_sample(&cloud, &SamplerConfig::new(0, FpsMetric::Feature)).is_err());
    }

    #[test]
    fn duplicates_never_reselect_chosen_rows() {
        let f = Array2::zeros((5, 2));
        let cloud = cloud_from(f, Array2::zeros((5, 3)), vec![true; 5]);
        let idx = farthest_point_sample(&cloud, &SamplerConfig::new(5, FpsMetric::Feature)).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn random_start_is_seeded() {
        let f = Array2::from_shape_fn((50, 2), |(i, k)| (i * (k + 1)) as f64);
        let cloud = cloud_from(f, Array2::zeros((50, 3)), vec![true; 50]);
        let mut cfg = SamplerConfig::new(5, FpsMetric::Feature);
        cfg.random_start = Some(17);
        let a = farthest_point_sample(&cloud, &cfg).unwrap();
        assert_eq!(a, farthest_point_sample(&cloud, &cfg).unwrap());
    }

    #[test]
    fn gather_rules() {
        let f = array![[1.0], [2.0], [3.0]];
        let p = array![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        let cloud = cloud_from(f.clone(), p.clone(), vec![true, true, false]);
        let g = gather(&cloud, &[1, 1, 0]).unwrap();
        assert_eq!(g.features, array![[2.0], [2.0], [1.0]]);
        assert_eq!(g.points.row(0), p.row(1));
        assert!(gather(&cloud, &[2]).is_err());
        assert!(gather(&cloud, &[3]).is_err());

        let full = cloud_from(f.clone(), p.clone(), vec![true; 3]);
        let g = gather(&full, &[0, 1, 2]).unwrap();
        assert_eq!((g.points, g.features), (p, f));
    }

    #[test]
    fn two_clusters_both_covered() {
        let f = Array2::from_shape_fn((40, 3), |(i, k)| {
            let c = if i % 2 == 0 { 0.0 } else { 10.0 };
            c + 0.01 * ((i * 3 + k) % 7) as f64
        });
        let cloud = cloud_from(f, Array2::zeros((40, 3)), vec![true; 40]);
        let idx = farthest_point_sample(&cloud, &SamplerConfig::new(2, FpsMetric::Feature)).unwrap();
        let g = gather(&cloud, &idx).unwrap();
        let clusters: Vec<bool> = g.features.column(0).iter().map(|v| *v > 5.0).collect();
        assert!(clusters.contains(&true) && clusters.contains(&false));
    }

    #[test]
    fn same_result_across_thread_counts() {
        let f = Array2::from_shape_fn((3000, 8), |(i, k)| (((i * 2654435761) ^ (k * 40503)) % 1000) as f64 * 1e-3);
        let cloud = cloud_from(f, Array2::zeros((3000, 3)), vec![true; 3000]);
        let cfg = SamplerConfig::new(64, FpsMetric::Feature);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| farthest_point_sample(&cloud, &cfg).unwrap());
        let b = four.install(|| farthest_point_sample(&cloud, &cfg).unwrap());
        assert_eq!(a, b);
    }
}
