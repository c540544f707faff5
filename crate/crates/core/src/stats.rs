//! Particle ensembles and their (inflated) empirical moments.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;

/// `M` particles in `d` dimensions stored as the columns of a `d × M` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    particles: DMatrix<f64>,
    time: f64,
}

impl Ensemble {
    pub fn new(particles: DMatrix<f64>, time: f64) -> Result<Self> {
        if particles.ncols() < 2 {
            return Err(Error::InsufficientEnsemble {
                size: particles.ncols(),
            });
        }
        if particles.nrows() == 0 {
            return Err(Error::InvalidArgument("particles must have positive dimension".into()));
        }
        if let Some(k) = particles.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite entry in particle {}",
                k / particles.nrows()
            )));
        }
        Ok(Self { particles, time })
    }

    /// All particles at the same point.
    pub fn at_point(x: &DVector<f64>, size: usize, time: f64) -> Result<Self> {
        Self::new(DMatrix::from_fn(x.len(), size, |i, _| x[i]), time)
    }

    pub fn from_particles(particles: &[DVector<f64>], time: f64) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::InsufficientEnsemble { size: 0 });
        }
        Self::new(DMatrix::from_columns(particles), time)
    }

    pub fn size(&self) -> usize {
        self.particles.ncols()
    }
    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }
    pub fn time(&self) -> f64 {
        self.time
    }
    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }
    pub fn particle(&self, i: usize) -> DVector<f64> {
        self.particles.column(i).into_owned()
    }
    pub fn iter(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.particles.column_iter().map(|c| c.into_owned())
    }
    pub fn map(&self, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Vec<DVector<f64>> {
        self.iter().map(|x| f(&x)).collect()
    }
}

/// Mean and inflated covariance `C + δI` of an ensemble, with the Cholesky
/// factor of the inflated covariance cached for solves.
#[derive(Clone, Debug)]
pub struct EmpiricalMoments {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    inflation: f64,
    factor: Option<SpdFactor>,
}

impl PartialEq for EmpiricalMoments {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov && self.inflation == other.inflation
    }
}

impl EmpiricalMoments {
    /// Moments given directly, e.g. analytic values. `cov` is taken as the
    /// already-inflated covariance.
    pub fn from_parts(mean: DVector<f64>, cov: DMatrix<f64>, inflation: f64) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::InvalidArgument("covariance shape does not match mean".into()));
        }
        let factor = SpdFactor::new(cov.clone(), "covariance").ok();
        Ok(Self {
            mean,
            cov,
            inflation,
            factor,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
    pub fn inflation(&self) -> f64 {
        self.inflation
    }
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
    pub fn is_invertible(&self) -> bool {
        self.factor.is_some()
    }

    pub fn factor(&self) -> Result<&SpdFactor> {
        self.factor
            .as_ref()
            .ok_or_else(|| Error::NotPositiveDefinite("ensemble covariance".into()))
    }

    /// `C⁻¹ v` via the cached factor.
    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.factor()?.solve(v))
    }

    pub fn precision(&self) -> Result<DMatrix<f64>> {
        Ok(self.factor()?.inverse())
    }
}

fn mean_of(cols: &[DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(cols[0].len());
    for c in cols {
        m += c;
    }
    m / cols.len() as f64
}

fn cross_cov_of(xs: &[DVector<f64>], mx: &DVector<f64>, ys: &[DVector<f64>], my: &DVector<f64>) -> DMatrix<f64> {
    let (dx, dy) = (mx.len(), my.len());
    let mut c = DMatrix::zeros(dx, dy);
    for (x, y) in xs.iter().zip(ys) {
        for j in 0..dy {
            let yj = y[j] - my[j];
            for i in 0..dx {
                c[(i, j)] += (x[i] - mx[i]) * yj;
            }
        }
    }
    c / (xs.len() - 1) as f64
}

/// Empirical mean and unbiased covariance plus `δI`.
pub fn moments(e: &Ensemble, delta: f64) -> Result<EmpiricalMoments> {
    if e.size() < 2 {
        return Err(Error::InsufficientEnsemble { size: e.size() });
    }
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("inflation must be >= 0, got {delta}")));
    }
    let xs: Vec<_> = e.iter().collect();
    let m = mean_of(&xs);
    let mut c = cross_cov_of(&xs, &m, &xs, &m);
    for i in 0..c.nrows() {
        c[(i, i)] += delta;
    }
    EmpiricalMoments::from_parts(m, c, delta)
}

/// Cross-covariance between the state and `f(state)` together with the
/// empirical mean of `f`. No inflation.
pub fn cross_moments(
    e: &Ensemble,
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if e.size() < 2 {
        return Err(Error::InsufficientEnsemble { size: e.size() });
    }
    let xs: Vec<_> = e.iter().collect();
    let ys: Vec<_> = xs.iter().map(&f).collect();
    let mx = mean_of(&xs);
    let my = mean_of(&ys);
    Ok((cross_cov_of(&xs, &mx, &ys, &my), my))
}

/// `(1/(M−1)) Σ (Xⁱ − m)(f(Xⁱ) − m^f)ᵀ`.
pub fn cross_cov(e: &Ensemble, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(cross_moments(e, f)?.0)
}

/// Auto-covariance of `f(X)` and its mean, without inflation.
pub(crate) fn mapped_moments(
    e: &Ensemble,
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> (Vec<DVector<f64>>, DVector<f64>, DMatrix<f64>) {
    let ys: Vec<_> = e.iter().map(|x| f(&x)).collect();
    let my = mean_of(&ys);
    let c = cross_cov_of(&ys, &my, &ys, &my);
    (ys, my, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Streams};
    use proptest::prelude::*;

    fn ens1(xs: &[f64]) -> Ensemble {
        Ensemble::new(DMatrix::from_row_slice(1, xs.len(), xs), 0.0).unwrap()
    }

    #[test]
    fn two_point_unbiased() {
        let m = moments(&ens1(&[0.0, 2.0]), 0.0).unwrap();
        assert_eq!(m.mean()[0], 1.0);
        assert_eq!(m.cov()[(0, 0)], 2.0);
    }

    #[test]
    fn identical_particles_give_pure_inflation() {
        let x = DVector::from_vec(vec![1.5, -2.0]);
        let e = Ensemble::at_point(&x, 5, 0.0).unwrap();
        let m = moments(&e, 1e-4).unwrap();
        assert!((m.mean() - &x).amax() < 1e-15);
        assert!((m.cov() - DMatrix::identity(2, 2) * 1e-4).amax() < 1e-18);
        assert!(m.is_invertible());
    }

    #[test]
    fn too_small_ensemble_is_rejected() {
        assert!(matches!(
            Ensemble::new(DMatrix::zeros(1, 1), 0.0),
            Err(Error::InsufficientEnsemble { size: 1 })
        ));
    }

    #[test]
    fn monte_carlo_covariance_of_standard_normal() {
        let s = Streams::new(20240601);
        let cols: Vec<_> = (0..10_000).map(|i| s.normal_vec(Purpose::User, 0, i, 2)).collect();
        let e = Ensemble::from_particles(&cols, 0.0).unwrap();
        let m = moments(&e, 0.0).unwrap();
        assert!((m.cov() - DMatrix::identity(2, 2)).amax() < 0.1);
    }

    #[test]
    fn cross_cov_special_cases() {
        let e = ens1(&[-1.0, 1.0]);
        assert_eq!(cross_cov(&e, |x| x.map(|v| v * v)).unwrap()[(0, 0)], 0.0);
        let e = ens1(&[0.3, -1.2, 4.0]);
        assert_eq!(cross_cov(&e, |_| DVector::from_element(2, 7.0)).unwrap(), DMatrix::zeros(1, 2));
    }

    fn ensemble_strategy() -> impl Strategy<Value = Ensemble> {
        (1usize..4, 2usize..9).prop_flat_map(|(d, m)| {
            proptest::collection::vec(-10.0f64..10.0, d * m)
                .prop_map(move |v| Ensemble::new(DMatrix::from_vec(d, m, v), 0.0).unwrap())
        })
    }

    proptest! {
        #[test]
        fn cross_cov_identity_is_cov(e in ensemble_strategy()) {
            let c = cross_cov(&e, |x| x.clone()).unwrap();
            let m = moments(&e, 0.0).unwrap();
            prop_assert_eq!(&c, m.cov());
        }

        #[test]
        fn inflated_cov_minus_delta_is_psd(e in ensemble_strategy(), delta in 0.0f64..1.0) {
            let m = moments(&e, delta).unwrap();
            let c = m.cov() - DMatrix::identity(e.dim(), e.dim()) * delta;
            prop_assert_eq!(&c, &c.transpose());
            let min = c.symmetric_eigenvalues().min();
            prop_assert!(min > -1e-9 * (1.0 + c.amax()));
        }

        #[test]
        fn translation_equivariance(e in ensemble_strategy(), shift in -5.0f64..5.0) {
            let d = e.dim();
            let v = DVector::from_fn(d, |i, _| shift * (i as f64 + 1.0));
            let moved = Ensemble::new(
                DMatrix::from_fn(d, e.size(), |i, j| e.particles()[(i, j)] + v[i]), 0.0).unwrap();
            let a = moments(&e, 0.0).unwrap();
            let b = moments(&moved, 0.0).unwrap();
            prop_assert!((b.mean() - a.mean() - &v).amax() < 1e-9);
            prop_assert!((b.cov() - a.cov()).amax() < 1e-8);
            let ca = cross_cov(&e, |x| x.clone()).unwrap();
            let cb = cross_cov(&moved, |x| x.clone()).unwrap();
            prop_assert!((cb - ca).amax() < 1e-8);
        }
    }
}
