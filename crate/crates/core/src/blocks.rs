//! Stacked per-agent vectors `[x_i]_{i in N}` and small helpers over them.

use nalgebra::DVector;

/// One vector per agent, all of the same length.
pub type Blocks = Vec<DVector<f64>>;

pub fn zeros(nodes: usize, dim: usize) -> Blocks {
    vec![DVector::zeros(dim); nodes]
}

/// Every block equal to `w`.
pub fn replicate(nodes: usize, w: &DVector<f64>) -> Blocks {
    vec![w.clone(); nodes]
}

pub fn norm(x: &[DVector<f64>]) -> f64 {
    x.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
}

pub fn dist(x: &[DVector<f64>], y: &[DVector<f64>]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt()
}

pub fn sub(x: &[DVector<f64>], y: &[DVector<f64>]) -> Blocks {
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

pub fn mean(x: &[DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(x[0].len());
    for b in x {
        m += b;
    }
    m / x.len() as f64
}

pub fn flatten(x: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(x.iter().map(|b| b.len()).sum(), x.iter().flat_map(|b| b.iter().copied()))
}

pub fn unflatten(v: &DVector<f64>, nodes: usize) -> Blocks {
    let dim = v.len() / nodes;
    (0..nodes).map(|i| v.rows(i * dim, dim).into_owned()).collect()
}

pub fn all_finite(x: &[DVector<f64>]) -> bool {
    x.iter().all(|b| b.iter().all(|v| v.is_finite()))
}
