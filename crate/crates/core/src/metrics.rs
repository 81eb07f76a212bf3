//! Distribution-level similarity between two feature sets: FID and KID.
//!
//! FID fits a Gaussian to each set and takes the Fréchet distance
//! `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`. KID is the unbiased
//! squared MMD under the cubic polynomial kernel `(x.y / d + 1)^3`,
//! averaged over random subsets.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RegenError, Result};
use crate::scalar::Scalar;

/// Row-major `rows x cols` matrix of per-sample embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    pub extractor_id: String,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>, extractor_id: impl Into<String>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(RegenError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} feature matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(RegenError::invalid(format!(
                "non-finite feature at row {}, col {}",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(FeatureMatrix {
            rows,
            cols,
            data,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<T>], extractor_id: impl Into<String>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(RegenError::Shape("ragged feature rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data, extractor_id)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
            extractor_id: self.extractor_id.clone(),
        }
    }

    fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }
}

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats<T> {
    pub mean: Vec<T>,
    /// Row-major `d x d`.
    pub cov: Vec<T>,
    pub n: usize,
}

impl<T: Scalar> FeatureStats<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_at(&self, i: usize, j: usize) -> T {
        self.cov[i * self.dim() + j]
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_iterator(d, d, self.cov.iter().map(|v| v.to_f64_lossy()))
    }
}

pub fn gaussian_stats<T: Scalar>(f: &FeatureMatrix<T>) -> Result<FeatureStats<T>> {
    let (n, d) = (f.rows, f.cols);
    if n < 2 {
        return Err(RegenError::invalid(format!(
            "gaussian statistics need at least 2 samples, got {n}"
        )));
    }
    let x = f.to_f64();
    let mut mean = vec![0.0f64; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = x;
    for row in centered.chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    // cov = Xc^T Xc / (n - 1)
    let mut cov = vec![0.0f64; d * d];
    f64::gemm(
        d,
        n,
        d,
        1.0 / (n as f64 - 1.0),
        &centered,
        1,
        d as isize,
        &centered,
        d as isize,
        1,
        0.0,
        &mut cov,
        d as isize,
        1,
    );
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    Ok(FeatureStats {
        mean: mean.into_iter().map(T::from_f64_lossy).collect(),
        cov: cov.into_iter().map(T::from_f64_lossy).collect(),
        n,
    })
}

pub const SQRTM_JITTER: f64 = 1e-6;
pub const SQRTM_RETRIES: usize = 3;

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Principal square root of a symmetric PSD matrix; `None` if clearly indefinite.
fn sqrt_psd(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, SymmetricEigen<f64, nalgebra::Dyn>)> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|v| !v.is_finite() || *v < -1e-6 * scale) {
        return None;
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    Some((root, eig))
}

/// Square root of the product `S_a S_b` via the symmetrized form
/// `S_a^(1/2) S_b S_a^(1/2)`. Returns the root matrix and its trace; the trace
/// never needs `S_a` to be invertible, the full matrix does.
fn sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>, need_matrix: bool) -> Result<(Option<DMatrix<f64>>, f64)> {
    let d = a.nrows();
    let mut jitter = 0.0;
    for attempt in 0..=SQRTM_RETRIES {
        let eye = DMatrix::<f64>::identity(d, d) * jitter;
        let (aj, bj) = (a + &eye, b + &eye);
        if let Some((ra, ea)) = sqrt_psd(&aj) {
            let inner = symmetrize(&(&ra * &bj * &ra));
            if let Some((rm, em)) = sqrt_psd(&inner) {
                let trace: f64 = em.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
                if !need_matrix {
                    return Ok((None, trace));
                }
                let min_eig = ea.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
                if min_eig > 0.0 {
                    let inv_roots = ea.eigenvalues.map(|v| 1.0 / v.sqrt());
                    let ra_inv = &ea.eigenvectors * DMatrix::from_diagonal(&inv_roots) * ea.eigenvectors.transpose();
                    return Ok((Some(&ra * rm * ra_inv), trace));
                }
            }
        }
        log::debug!("matrix square root attempt {attempt} failed at jitter {jitter:e}");
        jitter = if jitter == 0.0 { SQRTM_JITTER } else { jitter * 10.0 };
    }
    Err(RegenError::MatrixSqrt {
        retries: SQRTM_RETRIES,
    })
}

/// `(S_a S_b)^(1/2)` as a row-major matrix.
pub fn sqrtm_product<T: Scalar>(a: &FeatureStats<T>, b: &FeatureStats<T>) -> Result<Vec<f64>> {
    check_dims(a.dim(), b.dim())?;
    let (m, _) = sqrt_product(&a.cov_matrix(), &b.cov_matrix(), true)?;
    let m = m.expect("matrix requested");
    Ok(m.transpose().as_slice().to_vec())
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(RegenError::Shape(format!("feature dimension {a} vs {b}")));
    }
    Ok(())
}

/// Fréchet distance before flooring at zero.
pub fn fid_unclamped<T: Scalar>(a: &FeatureStats<T>, b: &FeatureStats<T>) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
        .sum();
    let (ca, cb) = (a.cov_matrix(), b.cov_matrix());
    let (_, tr_sqrt) = sqrt_product(&ca, &cb, false)?;
    Ok(mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt)
}

pub fn fid<T: Scalar>(a: &FeatureStats<T>, b: &FeatureStats<T>) -> Result<f64> {
    Ok(fid_unclamped(a, b)?.max(0.0))
}

pub fn polynomial_kernel<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    check_dims(x.len(), y.len())?;
    let d = T::from_usize_lossy(x.len().max(1));
    let dot: T = x.iter().zip(y).map(|(&a, &b)| a * b).sum();
    Ok((dot / d + T::one()).powi(3))
}

/// Kernel matrix `(X Y^T / d + 1)^3` in f64.
fn kernel_matrix(x: &[f64], n: usize, y: &[f64], m: usize, d: usize) -> Vec<f64> {
    let mut k = vec![0.0f64; n * m];
    f64::gemm(
        n,
        d,
        m,
        1.0 / d.max(1) as f64,
        x,
        d as isize,
        1,
        y,
        1,
        d as isize,
        0.0,
        &mut k,
        m as isize,
        1,
    );
    for v in &mut k {
        *v = (*v + 1.0).powi(3);
    }
    k
}

/// Running mean, exact when every value is equal.
fn running_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (i, v) in values.enumerate() {
        mean += (v - mean) / (i + 1) as f64;
    }
    mean
}

pub fn mmd2_unbiased<T: Scalar>(x: &FeatureMatrix<T>, y: &FeatureMatrix<T>) -> Result<f64> {
    check_dims(x.cols, y.cols)?;
    let (n, m, d) = (x.rows, y.rows, x.cols);
    if n < 2 || m < 2 {
        return Err(RegenError::invalid(format!(
            "unbiased MMD needs at least 2 samples per set, got {n} and {m}"
        )));
    }
    let (xf, yf) = (x.to_f64(), y.to_f64());
    let kxx = kernel_matrix(&xf, n, &xf, n, d);
    let kyy = kernel_matrix(&yf, m, &yf, m, d);
    let kxy = kernel_matrix(&xf, n, &yf, m, d);
    let off_diag = |k: &[f64], n: usize| {
        running_mean(
            k.iter()
                .enumerate()
                .filter(move |(i, _)| i / n != i % n)
                .map(|(_, &v)| v),
        )
    };
    Ok(off_diag(&kxx, n) + off_diag(&kyy, m) - 2.0 * running_mean(kxy.iter().copied()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidResult {
    pub mean: f64,
    pub std: f64,
    pub subset_size: usize,
    pub num_subsets: usize,
}

pub const KID_MAX_SUBSET: usize = 1000;
pub const KID_NUM_SUBSETS: usize = 100;

pub fn default_kid_subset(n: usize, m: usize) -> usize {
    KID_MAX_SUBSET.min(n).min(m)
}

pub fn kid<T: Scalar>(
    x: &FeatureMatrix<T>,
    y: &FeatureMatrix<T>,
    subset_size: usize,
    num_subsets: usize,
    seed: u64,
) -> Result<KidResult> {
    if subset_size < 2 {
        return Err(RegenError::invalid(format!(
            "KID subset size must be at least 2, got {subset_size}"
        )));
    }
    if subset_size > x.rows || subset_size > y.rows {
        return Err(RegenError::invalid(format!(
            "KID subset size {subset_size} exceeds sample counts {} and {}",
            x.rows, y.rows
        )));
    }
    if num_subsets == 0 {
        return Err(RegenError::invalid("KID needs at least one subset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |rows: usize| -> Vec<usize> {
        if subset_size == rows {
            (0..rows).collect()
        } else {
            index::sample(&mut rng, rows, subset_size).into_vec()
        }
    };
    let mut values = Vec::with_capacity(num_subsets);
    for _ in 0..num_subsets {
        let xs = x.select(&pick(x.rows));
        let ys = y.select(&pick(y.rows));
        values.push(mmd2_unbiased(&xs, &ys)?);
    }
    let mean = running_mean(values.iter().copied());
    let std = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    Ok(KidResult {
        mean,
        std,
        subset_size,
        num_subsets,
    })
}

/// `metrics.json` written by the evaluation command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub kid_x100_mean: f64,
    pub kid_x100_std: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub extractor: String,
    pub kid_subset_size: usize,
    pub kid_num_subsets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KidOptions {
    /// `None` selects `min(1000, n, m)`.
    pub subset_size: Option<usize>,
    pub num_subsets: usize,
    pub seed: u64,
}

impl Default for KidOptions {
    fn default() -> Self {
        KidOptions {
            subset_size: None,
            num_subsets: KID_NUM_SUBSETS,
            seed: 0,
        }
    }
}

/// FID and KID between two feature sets, KID scaled by 100 for reporting.
pub fn compare_features<T: Scalar>(
    generated: &FeatureMatrix<T>,
    reference: &FeatureMatrix<T>,
    kid_opts: KidOptions,
) -> Result<MetricsReport> {
    let fid_value = fid(&gaussian_stats(generated)?, &gaussian_stats(reference)?)?;
    let subset = kid_opts
        .subset_size
        .unwrap_or_else(|| default_kid_subset(generated.rows, reference.rows));
    let k = kid(generated, reference, subset, kid_opts.num_subsets, kid_opts.seed)?;
    Ok(MetricsReport {
        fid: fid_value,
        kid_x100_mean: k.mean * 100.0,
        kid_x100_std: k.std * 100.0,
        n_generated: generated.rows,
        n_reference: reference.rows,
        extractor: generated.extractor_id.clone(),
        kid_subset_size: k.subset_size,
        kid_num_subsets: k.num_subsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> FeatureMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMatrix::new(n, d, data, "test").unwrap()
    }

    #[test]
    fn stats_of_constant_rows() {
        let f = FeatureMatrix::from_rows(&vec![vec![1.5, -2.0]; 4], "t").unwrap();
        let s = gaussian_stats(&f).unwrap();
        assert_eq!(s.mean, vec![1.5, -2.0]);
        assert!(s.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stats_two_point_hand_computation() {
        let f = FeatureMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]], "t").unwrap();
        let s = gaussian_stats(&f).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert_eq!(s.cov, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn stats_match_two_pass_loops() {
        let f = random_matrix(37, 6, 1);
        let s = gaussian_stats(&f).unwrap();
        let (n, d) = (37, 6);
        for i in 0..d {
            let mi: f64 = (0..n).map(|r| f.row(r)[i]).sum::<f64>() / n as f64;
            assert!((mi - s.mean[i]).abs() < 1e-12);
            for j in 0..d {
                let mj: f64 = (0..n).map(|r| f.row(r)[j]).sum::<f64>() / n as f64;
                let c: f64 = (0..n).map(|r| (f.row(r)[i] - mi) * (f.row(r)[j] - mj)).sum::<f64>()
                    / (n as f64 - 1.0);
                assert!((c - s.cov_at(i, j)).abs() < 1e-10);
                assert_eq!(s.cov_at(i, j), s.cov_at(j, i));
            }
        }
    }

    #[test]
    fn stats_need_two_rows() {
        let f = FeatureMatrix::from_rows(&[vec![1.0]], "t").unwrap();
        assert!(gaussian_stats(&f).is_err());
    }

    #[test]
    fn fid_one_dimensional_closed_form() {
        let a = FeatureStats { mean: vec![0.0], cov: vec![1.0], n: 10 };
        let b = FeatureStats { mean: vec![2.0], cov: vec![1.0], n: 10 };
        assert!((fid(&a, &b).unwrap() - 4.0).abs() < 1e-12);
        let c = FeatureStats { mean: vec![0.0], cov: vec![4.0], n: 10 };
        // (sigma_a - sigma_c)^2 = 1
        assert!((fid(&a, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fid_diagonal_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 8;
        let mut expected = 0.0;
        let (mut a, mut b) = (
            FeatureStats { mean: vec![0.0; d], cov: vec![0.0; d * d], n: 2 },
            FeatureStats { mean: vec![0.0; d], cov: vec![0.0; d * d], n: 2 },
        );
        for i in 0..d {
            a.mean[i] = rng.gen_range(-2.0..2.0);
            b.mean[i] = rng.gen_range(-2.0..2.0);
            let (sa, sb): (f64, f64) = (rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0));
            a.cov[i * d + i] = sa * sa;
            b.cov[i * d + i] = sb * sb;
            expected += (a.mean[i] - b.mean[i]).powi(2) + (sa - sb).powi(2);
        }
        assert!((fid(&a, &b).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn fid_identical_is_zero_and_symmetric() {
        let a = gaussian_stats(&random_matrix(50, 10, 2)).unwrap();
        let b = gaussian_stats(&random_matrix(60, 10, 3)).unwrap();
        assert!(fid_unclamped(&a, &a).unwrap().abs() <= 1e-6);
        assert_eq!(fid(&a, &a).unwrap(), fid(&a, &a).unwrap().max(0.0));
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
    }

    #[test]
    fn fid_rejects_dimension_mismatch() {
        let a = gaussian_stats(&random_matrix(5, 3, 2)).unwrap();
        let b = gaussian_stats(&random_matrix(5, 4, 3)).unwrap();
        assert!(fid(&a, &b).is_err());
    }

    #[test]
    fn polynomial_kernel_examples() {
        assert_eq!(polynomial_kernel(&[0.0f64; 5], &[0.0; 5]).unwrap(), 1.0);
        // x.y = d
        assert_eq!(polynomial_kernel(&[1.0f64, 1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap(), 8.0);
        let x = [0.3f64, -1.2, 0.7, 2.0];
        let y = [1.1f64, 0.4, -0.5, 0.25];
        let dot = 0.3 * 1.1 + -1.2 * 0.4 + 0.7 * -0.5 + 2.0 * 0.25;
        let hand = (dot / 4.0 + 1.0f64).powi(3);
        assert!((polynomial_kernel(&x, &y).unwrap() - hand).abs() < 1e-12);
        assert!(polynomial_kernel(&x, &y[..3]).is_err());
    }

    #[test]
    fn mmd_of_identical_constant_sets_is_exactly_zero() {
        let v = vec![0.3f64, -0.7, 1.9];
        let x = FeatureMatrix::from_rows(&vec![v.clone(); 7], "t").unwrap();
        let y = FeatureMatrix::from_rows(&vec![v; 5], "t").unwrap();
        assert_eq!(mmd2_unbiased(&x, &y).unwrap(), 0.0);
        assert_eq!(kid(&x, &y, 4, 10, 1).unwrap().mean, 0.0);
    }

    #[test]
    fn mmd_self_comparison_is_slightly_negative() {
        let x = random_matrix(20, 4, 7);
        let v = mmd2_unbiased(&x, &x).unwrap();
        let n = 20;
        let mut max_gap: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let kii = polynomial_kernel(x.row(i), x.row(i)).unwrap();
                let kij = polynomial_kernel(x.row(i), x.row(j)).unwrap();
                max_gap = max_gap.max((kii - kij).abs());
            }
        }
        assert!(v < 0.0 && v.abs() <= max_gap, "{v} vs gap {max_gap}");
    }

    #[test]
    fn mmd_needs_two_rows() {
        let x = random_matrix(1, 4, 0);
        let y = random_matrix(5, 4, 1);
        assert!(mmd2_unbiased(&x, &y).is_err());
        assert!(kid(&y, &y, 1, 3, 0).is_err());
    }

    #[test]
    fn kid_single_full_subset_equals_mmd() {
        let x = random_matrix(30, 5, 4);
        let y = random_matrix(30, 5, 5);
        let k = kid(&x, &y, 30, 1, 0).unwrap();
        assert_eq!(k.mean, mmd2_unbiased(&x, &y).unwrap());
        assert_eq!(k.std, 0.0);
    }

    #[test]
    fn kid_is_deterministic_given_seed() {
        let x = random_matrix(50, 5, 4);
        let y = random_matrix(40, 5, 5);
        assert_eq!(kid(&x, &y, 20, 10, 3).unwrap(), kid(&x, &y, 20, 10, 3).unwrap());
        assert!(kid(&x, &y, 41, 10, 3).is_err());
    }
}
