use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EvalError, Result};
use crate::linalg::{self, Matrix};

pub const PCA_ITERATIONS: usize = 200;
pub const PCA_TOLERANCE: f64 = 1e-9;

/// Top-two principal directions and the projected coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, largest variance first.
    pub components: [Vec<f64>; 2],
    /// Variance (population normalization) along each component.
    pub variances: [f64; 2],
    pub coords: Vec<[f64; 2]>,
}

impl Pca {
    /// Maps 2-D coordinates back into the original space.
    pub fn reconstruct(&self, coord: [f64; 2]) -> Vec<f64> {
        (0..self.mean.len())
            .map(|j| self.mean[j] + coord[0] * self.components[0][j] + coord[1] * self.components[1][j])
            .collect()
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn remove_component(v: &mut [f64], u: &[f64]) {
    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Power iteration on `cov` from a seeded start, kept orthogonal to `against`.
fn leading_direction(cov: &Matrix, against: Option<&[f64]>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dim = cov.rows();
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    if let Some(u) = against {
        remove_component(&mut v, u);
    }
    normalize(&mut v);
    for _ in 0..PCA_ITERATIONS {
        let mut next = mat_vec(cov, &v);
        if let Some(u) = against {
            remove_component(&mut next, u);
        }
        if normalize(&mut next) == 0.0 {
            break;
        }
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = next;
        if delta < PCA_TOLERANCE {
            break;
        }
    }
    // sign convention: the largest-magnitude loading is positive
    let lead = v
        .iter()
        .enumerate()
        .fold(0, |b, (i, x)| if x.abs() > v[b].abs() { i } else { b });
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Projects mean-centered rows of `x` onto their top two principal
/// directions, found by power iteration with deflation.
pub fn pca_2d(x: &Matrix, seed: u64) -> Result<Pca> {
    let (n, dim) = x.shape();
    if n < 3 || dim < 2 {
        return Err(EvalError::Degenerate(format!(
            "need at least 3 points of dimension 2, got {n}x{dim}"
        )));
    }
    let mut mean = vec![0.0; dim];
    for r in 0..n {
        mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = Matrix::from_fn(n, dim, |r, c| x.get(r, c) - mean[c]);
    if centered.max_abs() <= 1e-12 * x.max_abs().max(1.0) {
        return Err(EvalError::Degenerate("all points are equal".into()));
    }
    let cov = linalg::matmul_tn(&centered, &centered)?.scale(1.0 / n as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v1 = leading_direction(&cov, None, &mut rng);
    let l1: f64 = mat_vec(&cov, &v1).iter().zip(&v1).map(|(a, b)| a * b).sum();
    let deflated = Matrix::from_fn(dim, dim, |i, j| cov.get(i, j) - l1 * v1[i] * v1[j]);
    let v2 = leading_direction(&deflated, Some(&v1), &mut rng);
    let l2: f64 = mat_vec(&cov, &v2).iter().zip(&v2).map(|(a, b)| a * b).sum();

    let coords = (0..n)
        .map(|r| {
            let row = centered.row(r);
            let dot = |u: &[f64]| row.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
            [dot(&v1), dot(&v2)]
        })
        .collect();
    Ok(Pca {
        mean,
        components: [v1, v2],
        variances: [l1, l2],
        coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    #[test]
    fn planar_data_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dim = 12;
        let a: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let offset: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let x = Matrix::from_fn(50, dim, |r, c| {
            let (s, t) = ((r as f64 * 0.37).sin() * 3.0, (r as f64 * 0.91).cos());
            offset[c] + s * a[c] + t * b[c]
        });
        let p = pca_2d(&x, 0).unwrap();
        for (r, &coord) in p.coords.iter().enumerate() {
            let back = p.reconstruct(coord);
            for c in 0..dim {
                assert!((back[c] - x.get(r, c)).abs() < 1e-8);
            }
        }
        let dot: f64 = p.components[0].iter().zip(&p.components[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-10);
        assert!(p.variances[0] >= p.variances[1]);
    }

    #[test]
    fn isotropic_cloud_has_balanced_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::from_fn(5000, 6, |_, _| rng.sample(StandardNormal));
        let p = pca_2d(&x, 3).unwrap();
        let var = |i: usize| p.coords.iter().map(|c| c[i] * c[i]).sum::<f64>() / 5000.0;
        let (v0, v1) = (var(0), var(1));
        assert!((v0 - v1).abs() / v0.max(v1) < 0.2, "{v0} vs {v1}");
    }

    #[test]
    fn duplicated_data_keeps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::from_fn(40, 5, |_, c| rng.sample::<f64, _>(StandardNormal) * (c + 1) as f64);
        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(x.data());
        let x2 = Matrix::from_vec(80, 5, doubled).unwrap();
        let (a, b) = (pca_2d(&x, 9).unwrap(), pca_2d(&x2, 9).unwrap());
        for i in 0..2 {
            for (u, v) in a.components[i].iter().zip(&b.components[i]) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        let same = Matrix::from_fn(5, 3, |_, c| c as f64 + 0.1);
        assert!(matches!(pca_2d(&same, 0), Err(EvalError::Degenerate(_))));
        assert!(pca_2d(&Matrix::zeros(2, 3), 0).is_err());
    }
}
