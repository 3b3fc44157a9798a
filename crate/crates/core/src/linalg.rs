//! Dense linear-algebra and multivariate sampling helpers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

pub(crate) fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::domain("matrix is not symmetric positive definite"))
}

pub(crate) fn log_det_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub(crate) fn standard_normal_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// Draws from `N(P⁻¹ b, P⁻¹)` given the precision `P` and `b`.
pub(crate) fn sample_gaussian_canonical<R: Rng + ?Sized>(
    rng: &mut R,
    precision: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    let chol = cholesky(precision)?;
    let mean = chol.solve(b);
    let z = standard_normal_vector(rng, b.len());
    let lt = chol.l().transpose();
    let offset = lt
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("singular precision factor".into()))?;
    Ok(mean + offset)
}

/// Wishart draw with `df` degrees of freedom and scale matrix `scale`
/// (mean `df · scale`), by the Bartlett decomposition.
pub(crate) fn sample_wishart<R: Rng + ?Sized>(
    rng: &mut R,
    df: f64,
    scale: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if df <= (d as f64) - 1.0 {
        return Err(Error::domain(format!("Wishart df {df} too small for dimension {d}")));
    }
    let l = cholesky(scale)?.unpack();
    let mut a = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let shape = 0.5 * (df - i as f64);
        let chi2 = 2.0 * Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
        a[(i, i)] = chi2.sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l * a;
    Ok(&la * la.transpose())
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(m)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wishart_mean_is_df_times_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scale = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let n = 40_000;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..n {
            acc += sample_wishart(&mut rng, 5.0, &scale).unwrap();
        }
        acc /= n as f64;
        let expected = &scale * 5.0;
        for i in 0..2 {
            for j in 0..2 {
                assert!((acc[(i, j)] - expected[(i, j)]).abs() < 0.1, "{acc}");
            }
        }
    }

    #[test]
    fn canonical_gaussian_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let mean = p.clone().cholesky().unwrap().solve(&b);
        let cov = p.clone().try_inverse().unwrap();
        let n = 50_000;
        let draws: Vec<_> = (0..n)
            .map(|_| sample_gaussian_canonical(&mut rng, &p, &b).unwrap())
            .collect();
        let m0 = draws.iter().map(|d| d[0]).sum::<f64>() / n as f64;
        let v0 = draws.iter().map(|d| (d[0] - mean[0]).powi(2)).sum::<f64>() / n as f64;
        assert!((m0 - mean[0]).abs() < 0.01);
        assert!((v0 - cov[(0, 0)]).abs() < 0.01);
    }

    #[test]
    fn non_spd_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky(&m).is_err());
        assert!(spd_inverse(&m).is_err());
    }
}
