//! How much one projected gradient reveals about the full gradient under a
//! Gaussian prior `∇L ~ N(c, Σ)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

use crate::rng::GaussianStream;

/// Differential entropy of a standard 1-D normal, `(1 + ln 2π) / 2`.
pub const UNIT_NORMAL_ENTROPY: f64 = 1.418_938_533_204_672_7;

const SYMMETRY_TOL: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("covariance is {rows}x{cols}, mean has length {mean}")]
    Shape { rows: usize, cols: usize, mean: usize },
    #[error("covariance is not symmetric (entry ({0}, {1}))")]
    NotSymmetric(usize, usize),
    #[error("covariance is not positive-definite")]
    NotPositiveDefinite,
    #[error("need at least two dimensions, got {0}")]
    TooFewDims(usize),
    #[error("direction has norm {0}, expected 1")]
    NotUnit(f64),
    #[error("direction has length {got}, prior has {expected}")]
    DirectionLength { expected: usize, got: usize },
    #[error("{0} samples is too few for the Monte Carlo estimate")]
    TooFewSamples(usize),
}

#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self, PrivacyError> {
        let k = mean.len();
        if cov.nrows() != k || cov.ncols() != k {
            return Err(PrivacyError::Shape {
                rows: cov.nrows(),
                cols: cov.ncols(),
                mean: k,
            });
        }
        for i in 0..k {
            for j in (i + 1)..k {
                if (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(PrivacyError::NotSymmetric(i, j));
                }
            }
        }
        if cov.iter().any(|x| !x.is_finite()) {
            return Err(PrivacyError::NotPositiveDefinite);
        }
        let chol = Cholesky::new(cov.clone()).ok_or(PrivacyError::NotPositiveDefinite)?;
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            chol,
        })
    }

    pub fn isotropic(k: usize) -> Self {
        Self::new(vec![0.0; k], DMatrix::identity(k, k)).expect("identity is SPD")
    }

    pub fn diagonal(variances: &[f64]) -> Result<Self, PrivacyError> {
        let k = variances.len();
        Self::new(vec![0.0; k], DMatrix::from_diagonal(&DVector::from_column_slice(variances)))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn scaled(&self, a: f64) -> Result<Self, PrivacyError> {
        Self::new(self.mean.iter().copied().collect(), &self.cov * a)
    }

    pub fn log_det(&self) -> f64 {
        chol_log_det(&self.chol)
    }

    /// One draw `c + L z`.
    pub fn sample(&self, normals: &mut GaussianStream) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| normals.next_normal());
        &self.mean + self.chol.l_dirty().lower_triangle() * z
    }

    fn check_direction(&self, v: &[f64]) -> Result<DVector<f64>, PrivacyError> {
        let k = self.dim();
        if k < 2 {
            return Err(PrivacyError::TooFewDims(k));
        }
        if v.len() != k {
            return Err(PrivacyError::DirectionLength {
                expected: k,
                got: v.len(),
            });
        }
        let v = DVector::from_column_slice(v);
        let norm = v.norm();
        if !((norm - 1.0).abs() <= UNIT_TOL) {
            return Err(PrivacyError::NotUnit(norm));
        }
        Ok(v)
    }
}

fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Orthonormal basis `[v | U]` from the Householder reflection sending `e₁` to `v`.
fn basis_with_first(v: &DVector<f64>) -> DMatrix<f64> {
    let k = v.len();
    let mut w = -v.clone();
    w[0] += 1.0;
    let wn2 = w.norm_squared();
    let mut q = DMatrix::identity(k, k);
    if wn2 > 0.0 {
        q -= (&w * w.transpose()) * (2.0 / wn2);
    }
    q
}

/// Covariance of the components orthogonal to `v` after observing `v·∇L`:
/// the Schur complement of `vᵀΣv` in `QᵀΣQ`, expressed in the basis `U`.
pub fn conditional_covariance(prior: &GaussianPrior, v: &[f64]) -> Result<DMatrix<f64>, PrivacyError> {
    let v = prior.check_direction(v)?;
    let q = basis_with_first(&v);
    let rotated = q.transpose() * prior.covariance() * &q;
    let k = prior.dim();
    let a = rotated[(0, 0)];
    let b = rotated.view((1, 0), (k - 1, 1)).into_owned();
    let c = rotated.view((1, 1), (k - 1, k - 1)).into_owned();
    let schur = c - (&b * b.transpose()) / a;
    // Symmetrize away rounding so Cholesky sees an exactly symmetric input.
    Ok((&schur + schur.transpose()) * 0.5)
}

/// Entropy removed by one projection, in nats:
/// `½ ln(|Σ|/|Σ′|) + (1 + ln 2π)/2`, both determinants from Cholesky factors.
pub fn entropy_drop(prior: &GaussianPrior, v: &[f64]) -> Result<f64, PrivacyError> {
    let sigma_prime = conditional_covariance(prior, v)?;
    let chol = Cholesky::new(sigma_prime).ok_or(PrivacyError::NotPositiveDefinite)?;
    Ok(0.5 * (prior.log_det() - chol_log_det(&chol)) + UNIT_NORMAL_ENTROPY)
}

/// `[½ ln λ_min, ½ ln λ_max] + (1 + ln 2π)/2`: the drop for any direction lies here,
/// since it equals `½ ln(vᵀΣv) + (1 + ln 2π)/2`.
pub fn entropy_drop_bounds(prior: &GaussianPrior) -> (f64, f64) {
    let eig = SymmetricEigen::new(prior.covariance().clone());
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    (0.5 * lo.ln() + UNIT_NORMAL_ENTROPY, 0.5 * hi.ln() + UNIT_NORMAL_ENTROPY)
}

pub const MIN_MC_SAMPLES: usize = 10_000;
const KNN_K: usize = 4;

/// Monte Carlo estimate of the same quantity. By the chain rule
/// `h(X) − h(X | v·X) = h(v·X)`, so it suffices to estimate the entropy of
/// the projected samples, here with a k-nearest-neighbour estimator.
pub fn mc_entropy_drop(prior: &GaussianPrior, v: &[f64], samples: usize, seed: u64) -> Result<f64, PrivacyError> {
    let v = prior.check_direction(v)?;
    if samples < MIN_MC_SAMPLES {
        return Err(PrivacyError::TooFewSamples(samples));
    }
    let mut normals = GaussianStream::new(seed);
    let mut proj: Vec<f64> = (0..samples).map(|_| v.dot(&prior.sample(&mut normals))).collect();
    Ok(knn_entropy_1d(&mut proj, KNN_K))
}

/// Kozachenko–Leonenko estimate of the differential entropy of a 1-D sample:
/// `ψ(n) − ψ(k) + ln 2 + mean ln ρ_k`, with `ρ_k` the distance to the k-th neighbour.
/// Sorts `values` in place.
pub fn knn_entropy_1d(values: &mut [f64], k: usize) -> f64 {
    let n = values.len();
    assert!(k >= 1 && n > k, "need more than k samples");
    values.sort_by(f64::total_cmp);
    let mut sum_ln = 0.0;
    for i in 0..n {
        // Merge the two sorted runs of distances to the left and right.
        let (mut l, mut r) = (i, i);
        let mut rho = 0.0;
        for _ in 0..k {
            let dl = if l > 0 { values[i] - values[l - 1] } else { f64::INFINITY };
            let dr = if r + 1 < n { values[r + 1] - values[i] } else { f64::INFINITY };
            if dl <= dr {
                rho = dl;
                l -= 1;
            } else {
                rho = dr;
                r += 1;
            }
        }
        sum_ln += rho.max(f64::MIN_POSITIVE).ln();
    }
    digamma_int(n) - digamma_int(k) + std::f64::consts::LN_2 + sum_ln / n as f64
}

/// `ψ(n) = −γ + Σ_{j<n} 1/j` for positive integers.
fn digamma_int(n: usize) -> f64 {
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    -EULER_GAMMA + (1..n).map(|j| 1.0 / j as f64).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_matches_its_definition() {
        let c = (1.0 + (2.0 * std::f64::consts::PI).ln()) / 2.0;
        assert!((UNIT_NORMAL_ENTROPY - c).abs() < 1e-15);
    }

    #[test]
    fn identity_gives_unit_normal_entropy() {
        for k in 2..6 {
            let p = GaussianPrior::isotropic(k);
            let mut v = vec![0.0; k];
            v[k - 1] = 1.0;
            let d = entropy_drop(&p, &v).unwrap();
            assert!((d - 1.418_94).abs() < 1e-5, "k={k} d={d}");
        }
    }

    #[test]
    fn axis_aligned_diagonal() {
        let p = GaussianPrior::diagonal(&[4.0, 1.0]).unwrap();
        let d = entropy_drop(&p, &[1.0, 0.0]).unwrap();
        assert!((d - 2.112_08).abs() < 1e-5, "{d}");
        let s = conditional_covariance(&p, &[1.0, 0.0]).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = GaussianPrior::isotropic(3);
        assert!(matches!(entropy_drop(&p, &[1.0, 1.0, 0.0]), Err(PrivacyError::NotUnit(_))));
        assert!(matches!(entropy_drop(&p, &[1.0, 0.0]), Err(PrivacyError::DirectionLength { .. })));
        assert_eq!(
            entropy_drop(&GaussianPrior::isotropic(1), &[1.0]),
            Err(PrivacyError::TooFewDims(1))
        );
        let not_spd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(
            GaussianPrior::new(vec![0.0; 2], not_spd).unwrap_err(),
            PrivacyError::NotPositiveDefinite
        );
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]);
        assert_eq!(GaussianPrior::new(vec![0.0; 2], asym).unwrap_err(), PrivacyError::NotSymmetric(0, 1));
        assert_eq!(
            mc_entropy_drop(&p, &[1.0, 0.0, 0.0], 100, 1),
            Err(PrivacyError::TooFewSamples(100))
        );
    }

    #[test]
    fn knn_estimator_on_uniform_grid() {
        // A dense evenly spaced sample of U(0, 1) has entropy close to 0.
        let mut xs: Vec<f64> = (0..20_000).map(|i| (i as f64 + 0.5) / 20_000.0).collect();
        let h = knn_entropy_1d(&mut xs, 4);
        assert!(h.abs() < 0.15, "{h}");
    }

    fn random_spd(k: usize, seed: u64) -> DMatrix<f64> {
        let mut g = GaussianStream::new(seed);
        let a = DMatrix::from_fn(k, k, |_, _| g.next_normal());
        let m = &a * a.transpose() + DMatrix::identity(k, k) * 0.5;
        (&m + m.transpose()) * 0.5
    }

    fn unit(raw: &[f64]) -> Option<Vec<f64>> {
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        (n > 1e-3).then(|| raw.iter().map(|x| x / n).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rotation_invariant_for_identity(raw in prop::collection::vec(-1.0f64..1.0, 4)) {
            let Some(v) = unit(&raw) else { return Ok(()) };
            let d = entropy_drop(&GaussianPrior::isotropic(4), &v).unwrap();
            prop_assert!((d - UNIT_NORMAL_ENTROPY).abs() < 1e-10);
        }

        #[test]
        fn scaling_adds_half_log(seed in any::<u64>(), a in 0.01f64..100.0, raw in prop::collection::vec(-1.0f64..1.0, 3)) {
            let Some(v) = unit(&raw) else { return Ok(()) };
            let p = GaussianPrior::new(vec![0.0; 3], random_spd(3, seed)).unwrap();
            let d0 = entropy_drop(&p, &v).unwrap();
            let d1 = entropy_drop(&p.scaled(a).unwrap(), &v).unwrap();
            prop_assert!((d1 - d0 - 0.5 * a.ln()).abs() < 1e-9);
        }

        #[test]
        fn equals_projected_variance_and_stays_in_bounds(seed in any::<u64>(), raw in prop::collection::vec(-1.0f64..1.0, 5)) {
            let Some(v) = unit(&raw) else { return Ok(()) };
            let cov = random_spd(5, seed);
            let p = GaussianPrior::new(vec![1.0; 5], cov.clone()).unwrap();
            let d = entropy_drop(&p, &v).unwrap();
            let vv = DVector::from_column_slice(&v);
            let direct = 0.5 * (vv.transpose() * &cov * &vv)[(0, 0)].ln() + UNIT_NORMAL_ENTROPY;
            prop_assert!((d - direct).abs() < 1e-9, "{} vs {}", d, direct);
            let (lo, hi) = entropy_drop_bounds(&p);
            prop_assert!(d.is_finite() && lo - 1e-9 <= d && d <= hi + 1e-9);
        }
    }
}
