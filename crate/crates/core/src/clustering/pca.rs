use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Principal axes of a dataset.
///
/// `components` holds one unit-length axis per row, sorted by descending
/// eigenvalue. Each axis is oriented so its largest-magnitude entry is
/// positive (ties: the earlier index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel<T> {
    pub mean: Vec<T>,
    pub components: Matrix<T>,
    pub explained_variance: Vec<T>,
    /// Sum of per-feature sample variances.
    pub total_variance: T,
}

impl<T: Scalar> PcaModel<T> {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn transform(&self, data: &Matrix<T>) -> Matrix<T> {
        let k = self.n_components();
        let mut out = Matrix::zeros(data.nrows(), k);
        let mut centered = vec![T::zero(); data.ncols()];
        for i in 0..data.nrows() {
            for (c, (&x, &m)) in centered.iter_mut().zip(data.row(i).iter().zip(&self.mean)) {
                *c = x - m;
            }
            for a in 0..k {
                let v = centered
                    .iter()
                    .zip(self.components.row(a))
                    .map(|(&c, &w)| c * w)
                    .sum();
                out.set(i, a, v);
            }
        }
        out
    }

    pub fn inverse_transform(&self, scores: &Matrix<T>) -> Matrix<T> {
        let p = self.mean.len();
        let mut out = Matrix::zeros(scores.nrows(), p);
        for i in 0..scores.nrows() {
            for j in 0..p {
                let v = self.mean[j]
                    + (0..self.n_components())
                        .map(|a| scores.get(i, a) * self.components.get(a, j))
                        .sum::<T>();
                out.set(i, j, v);
            }
        }
        out
    }
}

/// Fits PCA on `data` (covariance divisor `n - 1`) and returns the model with the scores.
pub fn pca_fit_transform<T: Scalar>(data: &Matrix<T>, n_components: usize) -> Result<(PcaModel<T>, Matrix<T>)> {
    let n = data.nrows();
    let p = data.ncols();
    if n_components == 0 || n_components > p {
        return Err(Error::InvalidParameter(format!(
            "n_components must be in 1..={p}, got {n_components}"
        )));
    }
    if n < n_components {
        return Err(Error::InvalidParameter(format!(
            "PCA needs at least {n_components} rows, got {n}"
        )));
    }
    let mean = data.column_means();
    let mut cov = vec![T::zero(); p * p];
    for r in data.rows_iter() {
        for a in 0..p {
            let da = r[a] - mean[a];
            for b in a..p {
                cov[a * p + b] += da * (r[b] - mean[b]);
            }
        }
    }
    let denom = T::of_usize(n.saturating_sub(1).max(1));
    for a in 0..p {
        for b in a..p {
            let v = cov[a * p + b] / denom;
            cov[a * p + b] = v;
            cov[b * p + a] = v;
        }
    }
    let total_variance = (0..p).map(|a| cov[a * p + a]).sum();
    let (vals, vecs) = symmetric_eigen(&cov, p);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&x, &y| vals[y].partial_cmp(&vals[x]).unwrap().then(x.cmp(&y)));

    let mut components = Matrix::zeros(n_components, p);
    let mut explained_variance = Vec::with_capacity(n_components);
    for (a, &k) in order.iter().take(n_components).enumerate() {
        let mut axis: Vec<T> = (0..p).map(|j| vecs[j * p + k]).collect();
        let lead = axis
            .iter()
            .enumerate()
            .fold((0, T::zero()), |best, (j, &v)| if v.abs() > best.1 { (j, v.abs()) } else { best })
            .0;
        if axis[lead] < T::zero() {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        components.row_mut(a).copy_from_slice(&axis);
        explained_variance.push(vals[k].max(T::zero()));
    }
    let model = PcaModel {
        mean,
        components,
        explained_variance,
        total_variance,
    };
    let scores = model.transform(data);
    Ok((model, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, p: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * p).map(|_| rng.random::<f64>()).collect();
        Matrix::from_vec(n, p, data)
    }

    fn covariance(m: &Matrix<f64>) -> Vec<Vec<f64>> {
        let k = m.ncols();
        let mean = m.column_means();
        let n = m.nrows() as f64;
        (0..k)
            .map(|a| {
                (0..k)
                    .map(|b| m.rows_iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1.0))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn rank_one_data() {
        let dir = [1.0, 2.0, -1.0, 0.5, 3.0];
        let rows: Vec<Vec<f64>> = (0..20).map(|i| dir.iter().map(|d| d * i as f64 * 0.1 + 0.3).collect()).collect();
        let m = Matrix::from_rows(&rows, 5);
        let (model, _) = pca_fit_transform(&m, 2).unwrap();
        assert!(model.explained_variance[1].abs() < 1e-10);
        assert!(model.explained_variance[0] > 0.0);
    }

    #[test]
    fn full_rank_reconstruction() {
        let m = random(30, 5, 3);
        let (model, scores) = pca_fit_transform(&m, 5).unwrap();
        let back = model.inverse_transform(&scores);
        for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
        let ev: f64 = model.explained_variance.iter().sum();
        assert!((ev - model.total_variance).abs() < 1e-8);
    }

    #[test]
    fn scores_are_decorrelated() {
        let m = random(100, 5, 11);
        let (model, scores) = pca_fit_transform(&m, 5).unwrap();
        let cov = covariance(&scores);
        for a in 0..5 {
            for b in 0..5 {
                if a != b {
                    assert!(cov[a][b].abs() < 1e-8);
                } else {
                    assert!((cov[a][a] - model.explained_variance[a]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn axes_orthonormal_sorted_and_signed() {
        let m = random(50, 5, 4);
        let (model, _) = pca_fit_transform(&m, 4).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = model.components.row(a).iter().zip(model.components.row(b)).map(|(x, y)| x * y).sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
            let row = model.components.row(a);
            let lead = row.iter().enumerate().max_by(|x, y| x.1.abs().partial_cmp(&y.1.abs()).unwrap()).unwrap();
            assert!(*lead.1 > 0.0);
        }
        assert!(model.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        assert!(model.explained_variance.iter().sum::<f64>() <= model.total_variance + 1e-8);
    }

    #[test]
    fn too_few_rows() {
        let m = random(2, 5, 1);
        assert!(pca_fit_transform(&m, 3).is_err());
        assert!(pca_fit_transform(&m, 2).is_ok());
    }

    #[test]
    fn works_in_single_precision() {
        let m: Matrix<f32> = random(40, 5, 9).map(|v| v as f32);
        let (model, scores) = pca_fit_transform(&m, 5).unwrap();
        let back = model.inverse_transform(&scores);
        for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
