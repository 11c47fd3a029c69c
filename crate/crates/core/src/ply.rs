//! ASCII PLY export of point clouds with colours and optional attention.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Projects features onto their top three principal components, each
/// min-max scaled to `[0, 1]`. Fewer than three channels are zero-padded.
pub fn feature_pca_colors(features: ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = features.dim();
    let mut out = Array2::zeros((n, 3));
    if n == 0 || d == 0 {
        return out;
    }
    let mean = features.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let centered = &features - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[(i, j)]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (k, &c) in order.iter().take(3).enumerate() {
        let axis = eig.eigenvectors.column(c);
        let proj: Vec<f64> = centered
            .outer_iter()
            .map(|row| row.iter().zip(axis.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let (lo, hi) = proj
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (i, v) in proj.iter().enumerate() {
            out[(i, k)] = (v - lo) / span;
        }
    }
    out
}

/// `points` are written as floats, `colors` (in `[0, 1]`) as 0–255 bytes.
pub fn to_ply_string(
    points: ArrayView2<f64>,
    colors: ArrayView2<f64>,
    attention: Option<ArrayView1<f64>>,
) -> Result<String> {
    let n = points.nrows();
    if points.ncols() != 3 {
        return Err(Error::dims("ply point columns", 3, points.ncols()));
    }
    if colors.dim() != (n, 3) {
        return Err(Error::dims("ply color rows", n, colors.nrows()));
    }
    if let Some(a) = &attention {
        if a.len() != n {
            return Err(Error::dims("ply attention rows", n, a.len()));
        }
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {n}").unwrap();
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    if attention.is_some() {
        s.push_str("property float attention\n");
    }
    s.push_str("end_header\n");
    for i in 0..n {
        let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        write!(
            s,
            "{} {} {} {} {} {}",
            points[(i, 0)] as f32,
            points[(i, 1)] as f32,
            points[(i, 2)] as f32,
            byte(colors[(i, 0)]),
            byte(colors[(i, 1)]),
            byte(colors[(i, 2)])
        )
        .unwrap();
        if let Some(a) = &attention {
            write!(s, " {}", a[i] as f32).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_ply(
    path: &Path,
    points: ArrayView2<f64>,
    colors: ArrayView2<f64>,
    attention: Option<ArrayView1<f64>>,
) -> Result<()> {
    let text = to_ply_string(points, colors, attention)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_and_rows() {
        let pts = array![[0.0, 1.0, 2.0], [0.5, -0.5, 1.5]];
        let cols = array![[1.0, 0.0, 0.5], [0.0, 1.0, 0.0]];
        let att = array![0.25, 0.75];
        let s = to_ply_string(pts.view(), cols.view(), Some(att.view())).unwrap();
        assert!(s.contains("element vertex 2\n"));
        assert!(s.contains("property float attention\n"));
        let body: Vec<&str> = s.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body, ["0 1 2 255 0 128 0.25", "0.5 -0.5 1.5 0 255 0 0.75"]);
        assert!(to_ply_string(pts.view(), cols.view(), Some(array![1.0].view())).is_err());
    }

    #[test]
    fn pca_colors_are_normalized() {
        let f = Array2::from_shape_fn((20, 5), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let c = feature_pca_colors(f.view());
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        let first = c.column(0);
        assert_eq!(first.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(first.iter().cloned().fold(0.0, f64::max), 1.0);
    }
}
