//! Gaussian-closure (EnKF-type) drift terms, the terminal ensemble update,
//! and extraction of the affine control gain.
//!
//! Sign convention of the reverse drift: the reverse sweep steps
//! `X̃_{n−1} = X̃_n + Δt f̃(X̃_n) + √(εΔt) σ Ξ` with
//!
//! ```text
//! f̃(x) = −b(x) + (∇·Σ − Σ C̄⁻¹(x − m̄)) − ((1−ε)/2)(∇·Σ − Σ C̃⁻¹(x − m̃)) − g̃(x)
//! ```
//!
//! which is the unique choice whose backward Fokker–Planck equation matches
//! the product density `π̃ ∝ v π̄`, and which reduces to `f̃(x) = −x/2` for the
//! stationary Ornstein–Uhlenbeck process with `ε = 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_sqrt, symmetrize, SpdFactor};
use crate::problem::ControlProblem;
use crate::rng::{Purpose, Streams};
use crate::stats::{mapped_moments, Ensemble, EmpiricalMoments};

/// Affine representation `A x + c` of `∇ log π̃ − ∇ log π̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct GainPair {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl GainPair {
    pub fn zeros(d: usize) -> Self {
        Self {
            a: DMatrix::zeros(d, d),
            c: DVector::zeros(d),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.c.iter()).all(|v| v.is_finite())
    }
}

/// `½ C^{xh} S⁻¹ (h(x) + m^h)`.
pub fn g_bar_kf(p: &ControlProblem, x: &DVector<f64>, cxh: &DMatrix<f64>, mh: &DVector<f64>) -> DVector<f64> {
    let w = p.running_weight().solve(&(p.running_map(x) + mh));
    cxh * w * 0.5
}

/// `∇·Σ(x) − Σ(x) C⁻¹ (x − m)`, the Gaussian closure of `∇·Σ + Σ ∇log π`.
pub fn gaussian_score_group(p: &ControlProblem, x: &DVector<f64>, m: &EmpiricalMoments) -> Result<DVector<f64>> {
    let z = m.solve(&(x - m.mean()))?;
    Ok(p.div_sigma(x) - p.sigma(x) * z)
}

/// Forward McKean–Vlasov drift under the Gaussian closure:
/// `b(x) − ((1−ε)/2)(∇·Σ − Σ C̄⁻¹(x − m̄)) − ḡ(x)`.
pub fn forward_drift(
    p: &ControlProblem,
    x: &DVector<f64>,
    bar: &EmpiricalMoments,
    cxh: &DMatrix<f64>,
    mh: &DVector<f64>,
    eps_noise: f64,
) -> Result<DVector<f64>> {
    let mut f = p.drift(x) - g_bar_kf(p, x, cxh, mh);
    if eps_noise < 1.0 {
        f -= gaussian_score_group(p, x, bar)? * (0.5 * (1.0 - eps_noise));
    }
    Ok(f)
}

/// Sampling of the perturbations `Ξⁱ` in the terminal update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalNoise {
    /// Independent standard normal draws.
    #[default]
    Iid,
    /// Independent draws, then centred, made orthogonal to the state and
    /// `ξ` anomalies, and whitened, so the updated ensemble has exactly the
    /// Kalman posterior moments when `ξ` is linear. Needs
    /// `M − 1 ≥ rank(anomalies) + d_ξ`.
    SecondOrderExact,
    /// `Ξ = 0`.
    Off,
}

impl std::str::FromStr for TerminalNoise {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Self::Iid),
            "second_order_exact" => Ok(Self::SecondOrderExact),
            "off" => Ok(Self::Off),
            _ => Err(Error::Config(format!("unknown terminal noise '{s}'"))),
        }
    }
}

fn conditioned_perturbations(
    raw: DMatrix<f64>,
    state_anoms: &DMatrix<f64>,
    xi_anoms: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (dxi, m) = raw.shape();
    let mut xi = raw;
    for mut row in xi.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    // Orthonormal basis of the span of the anomaly rows, as columns in R^M.
    let stacked = DMatrix::from_fn(m, state_anoms.nrows() + xi_anoms.nrows(), |k, r| {
        if r < state_anoms.nrows() {
            state_anoms[(r, k)]
        } else {
            xi_anoms[(r - state_anoms.nrows(), k)]
        }
    });
    let svd = stacked.svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-12 * smax.max(f64::MIN_POSITIVE))
        .count();
    if m - 1 < rank + dxi {
        return Err(Error::InvalidArgument(format!(
            "second-order-exact perturbations need M - 1 >= {} (anomaly rank + d_xi), have M = {m}",
            rank + dxi
        )));
    }
    for k in 0..rank {
        let q = u.column(k).into_owned();
        let proj = &xi * &q;
        xi -= proj * q.transpose();
    }
    let cov = &xi * xi.transpose() / (m - 1) as f64;
    let chol = nalgebra::Cholesky::new(symmetrize(&cov))
        .ok_or_else(|| Error::NotPositiveDefinite("perturbation covariance".into()))?;
    Ok(chol
        .l()
        .solve_lower_triangular(&xi)
        .expect("cholesky factor has a positive diagonal"))
}

/// Stochastic EnKF update taking the forward ensemble at `T` to the reverse
/// ensemble at `T`:
/// `X̃ⁱ = X̄ⁱ − C̄^{xξ}(C̄^{ξξ} + V)⁻¹(ξ(X̄ⁱ) + V^{1/2}Ξⁱ)`.
pub fn terminal_update(
    p: &ControlProblem,
    e: &Ensemble,
    noise: TerminalNoise,
    streams: &Streams,
) -> Result<Ensemble> {
    let m = e.size();
    if m < 2 {
        return Err(Error::InsufficientEnsemble { size: m });
    }
    if e.dim() != p.dim_x() {
        return Err(Error::InvalidArgument("ensemble dimension does not match d_x".into()));
    }
    let (xis, mxi, cxixi) = mapped_moments(e, |x| p.terminal_map(x));
    let (cxxi, _) = crate::stats::cross_moments(e, |x| p.terminal_map(x))?;
    let v = p.terminal_weight().matrix();
    let innov = SpdFactor::new(symmetrize(&(cxixi + v)), "C^xixi + V")?;
    // K = C^{xξ} (C^{ξξ} + V)⁻¹
    let k = innov.solve_mat(&cxxi.transpose()).transpose();
    let dxi = p.dim_xi();

    let pert = match noise {
        TerminalNoise::Off => DMatrix::zeros(dxi, m),
        TerminalNoise::Iid | TerminalNoise::SecondOrderExact => {
            let mut raw = DMatrix::zeros(dxi, m);
            for i in 0..m {
                raw.set_column(i, &streams.normal_vec(Purpose::TerminalUpdate, 0, i as u64, dxi));
            }
            if noise == TerminalNoise::SecondOrderExact {
                let mx = e.particles().column_mean();
                let sa = DMatrix::from_fn(e.dim(), m, |r, c| e.particles()[(r, c)] - mx[r]);
                let xa = DMatrix::from_fn(dxi, m, |r, c| xis[c][r] - mxi[r]);
                conditioned_perturbations(raw, &sa, &xa)?
            } else {
                raw
            }
        }
    };
    let vhalf = sym_sqrt(v);
    let mut out = e.particles().clone();
    for i in 0..m {
        let innovation = &xis[i] + &vhalf * pert.column(i);
        let dx = &k * innovation;
        let mut col = out.column_mut(i);
        col -= dx;
    }
    Ensemble::new(out, e.time())
}

/// `A = C̄⁻¹ − C̃⁻¹` (symmetrised), `c = C̃⁻¹m̃ − C̄⁻¹m̄`.
pub fn gain_from_moments(bar: &EmpiricalMoments, tilde: &EmpiricalMoments) -> Result<GainPair> {
    if bar.dim() != tilde.dim() {
        return Err(Error::InvalidArgument("moment dimensions differ".into()));
    }
    let a = symmetrize(&(bar.precision()? - tilde.precision()?));
    let c = tilde.solve(tilde.mean())? - bar.solve(bar.mean())?;
    Ok(GainPair { a, c })
}

/// The closure drift `g̃(x)`, affine in `x`, assembled once per step.
///
/// `g̃(x) = ½ C̃ {γI + A K} (A x + A m̃ + 2c)` with `K = Σ(m̃) − G(m̃)RG(m̃)ᵀ`;
/// `γ = 0` for finite horizons.
#[derive(Clone, Debug)]
pub struct TildeDrift {
    linear: DMatrix<f64>,
    offset: DVector<f64>,
}

impl TildeDrift {
    pub fn new(p: &ControlProblem, tilde: &EmpiricalMoments, gain: &GainPair, gamma: f64) -> Self {
        let d = p.dim_x();
        let mt = tilde.mean();
        let k = p.sigma(mt) - p.control_metric(mt);
        let middle = DMatrix::identity(d, d) * gamma + &gain.a * k;
        let left = tilde.cov() * middle * 0.5;
        let offset = &left * (&gain.a * mt + &gain.c * 2.0);
        let linear = left * &gain.a;
        Self { linear, offset }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.linear * x + &self.offset
    }

    /// Jacobian `½ C̃ {γI + AK} A`, constant in `x`.
    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.linear
    }
}

/// `½ C̃ A (Σ(m̃) − G(m̃)RG(m̃)ᵀ)(A x + A m̃ + 2c)`.
pub fn g_tilde_kf(p: &ControlProblem, x: &DVector<f64>, tilde: &EmpiricalMoments, gain: &GainPair) -> DVector<f64> {
    TildeDrift::new(p, tilde, gain, 0.0).eval(x)
}

/// Reverse drift without the `g̃` term.
pub(crate) fn reverse_drift_base(
    p: &ControlProblem,
    x: &DVector<f64>,
    bar: &EmpiricalMoments,
    tilde: &EmpiricalMoments,
    eps_noise: f64,
) -> Result<DVector<f64>> {
    let mut f = gaussian_score_group(p, x, bar)? - p.drift(x);
    if eps_noise < 1.0 {
        f -= gaussian_score_group(p, x, tilde)? * (0.5 * (1.0 - eps_noise));
    }
    Ok(f)
}

pub(crate) fn reverse_drift_with(
    p: &ControlProblem,
    x: &DVector<f64>,
    bar: &EmpiricalMoments,
    tilde: &EmpiricalMoments,
    g: &TildeDrift,
    eps_noise: f64,
) -> Result<DVector<f64>> {
    Ok(reverse_drift_base(p, x, bar, tilde, eps_noise)? - g.eval(x))
}

/// Reverse McKean–Vlasov drift `f̃(x)`; see the module docs for the sign
/// convention.
pub fn reverse_drift(
    p: &ControlProblem,
    x: &DVector<f64>,
    bar: &EmpiricalMoments,
    tilde: &EmpiricalMoments,
    gain: &GainPair,
    eps_noise: f64,
) -> Result<DVector<f64>> {
    let g = TildeDrift::new(p, tilde, gain, 0.0);
    reverse_drift_with(p, x, bar, tilde, &g, eps_noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }
    fn v1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }
    fn mom(m: f64, c: f64) -> EmpiricalMoments {
        EmpiricalMoments::from_parts(v1(m), s(c), 0.0).unwrap()
    }

    /// 1-D problem `dX = a X dt + g u dt + σ dB` with `h = ξ = x`.
    fn scalar(a: f64, g: f64, sigma: f64, r: f64, h_zero: bool) -> ControlProblem {
        let b = ControlProblem::builder(1)
            .drift(move |x| x * a)
            .constant_gain(s(g))
            .constant_noise(s(sigma))
            .terminal_cost(|x| x.clone(), s(1.0))
            .control_weight(s(r))
            .horizon(1.0)
            .start(v1(0.0));
        let b = if h_zero {
            b.running_cost(|_| v1(0.0), s(1.0))
        } else {
            b.running_cost(|x| x.clone(), s(1.0))
        };
        b.build().unwrap()
    }

    #[test]
    fn g_bar_substitution() {
        let p = scalar(0.0, 1.0, 1.0, 1.0, false);
        assert_eq!(g_bar_kf(&p, &v1(1.0), &s(2.0), &v1(0.0))[0], 1.0);
        for x in [-2.0, 0.0, 3.0] {
            assert_eq!(g_bar_kf(&p, &v1(x), &s(0.0), &v1(0.0))[0], 0.0);
        }
    }

    #[test]
    fn constant_running_map_has_no_cross_covariance() {
        let p = scalar(0.0, 1.0, 1.0, 1.0, true);
        let e = Ensemble::new(DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 5.0]), 0.0).unwrap();
        let (cxh, mh) = crate::stats::cross_moments(&e, |x| p.running_map(x)).unwrap();
        assert_eq!(g_bar_kf(&p, &v1(2.0), &cxh, &mh)[0], 0.0);
    }

    #[test]
    fn ou_forward_drift_vanishes() {
        let p = scalar(-0.5, 1.0, 1.0, 1.0, true);
        let bar = mom(0.0, 1.0);
        for x in [-3.0, -0.4, 0.0, 1.0, 7.5] {
            let f = forward_drift(&p, &v1(x), &bar, &s(0.0), &v1(0.0), 0.0).unwrap();
            assert!(f[0].abs() < 1e-15);
        }
    }

    #[test]
    fn full_noise_forward_drift_drops_closure() {
        let p = scalar(-0.5, 1.0, 1.0, 1.0, false);
        let bar = mom(0.3, 2.0);
        let x = v1(1.7);
        let f = forward_drift(&p, &x, &bar, &s(0.4), &v1(0.1), 1.0).unwrap();
        let expect = p.drift(&x) - g_bar_kf(&p, &x, &s(0.4), &v1(0.1));
        assert_eq!(f, expect);
    }

    #[test]
    fn forward_drift_substitution() {
        let p = scalar(0.0, 1.0, 1.0, 1.0, true);
        let f = forward_drift(&p, &v1(2.0), &mom(1.0, 2.0), &s(0.0), &v1(0.0), 0.0).unwrap();
        assert!((f[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn terminal_update_leaves_collapsed_ensemble() {
        let p = scalar(0.0, 1.0, 1.0, 1.0, false);
        let e = Ensemble::at_point(&v1(2.5), 4, 1.0).unwrap();
        let out = terminal_update(&p, &e, TerminalNoise::Iid, &Streams::new(1)).unwrap();
        assert_eq!(out, e);
    }

    #[test]
    fn terminal_update_substitution() {
        // Two particles with unit sample variance; ξ(x) = x so C^{xξ} = C^{ξξ} = 1.
        let p = scalar(0.0, 1.0, 1.0, 1.0, false);
        let e = Ensemble::new(DMatrix::from_row_slice(1, 2, &[2.0, 2.0 - 2f64.sqrt()]), 1.0).unwrap();
        let out = terminal_update(&p, &e, TerminalNoise::Off, &Streams::new(1)).unwrap();
        assert!((out.particles()[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn terminal_update_two_particle_matrix_algebra() {
        // Linear ξ(x) = H x in d = 2 with two particles; compare against the
        // explicit gain formula.
        let h = DMatrix::from_row_slice(1, 2, &[1.0, -2.0]);
        let hh = h.clone();
        let p = ControlProblem::builder(2)
            .drift(|x| x * 0.0)
            .constant_gain(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]))
            .constant_noise(DMatrix::identity(2, 2))
            .running_cost(|x| x.clone(), DMatrix::identity(2, 2))
            .terminal_cost(move |x| &hh * x, s(0.5))
            .control_weight(s(1.0))
            .horizon(1.0)
            .start(DVector::zeros(2))
            .build()
            .unwrap();
        let e = Ensemble::new(DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 0.0, 1.0]), 1.0).unwrap();
        let out = terminal_update(&p, &e, TerminalNoise::Off, &Streams::new(0)).unwrap();
        let c = crate::stats::moments(&e, 0.0).unwrap().cov().clone();
        let k = &c * h.transpose() / ((&h * &c * h.transpose())[(0, 0)] + 0.5);
        for i in 0..2 {
            let x = e.particle(i);
            let expect = &x - &k * (&h * &x);
            assert!((out.particle(i) - expect).amax() < 1e-12);
        }
        let m_out = crate::stats::moments(&out, 0.0).unwrap();
        let m_in = crate::stats::moments(&e, 0.0).unwrap();
        let expect_mean = m_in.mean() - &k * (&h * m_in.mean());
        assert!((m_out.mean() - expect_mean).amax() < 1e-12);
    }

    #[test]
    fn second_order_exact_noise_matches_kalman_moments() {
        let p = scalar(0.0, 1.0, 1.0, 1.0, false);
        let st = Streams::new(9);
        let cols: Vec<_> = (0..16).map(|i| st.normal_vec(Purpose::User, 0, i, 1) * 0.7 + v1(0.4)).collect();
        let e = Ensemble::from_particles(&cols, 1.0).unwrap();
        let out = terminal_update(&p, &e, TerminalNoise::SecondOrderExact, &st).unwrap();
        let prior = crate::stats::moments(&e, 0.0).unwrap();
        let post = crate::stats::moments(&out, 0.0).unwrap();
        let (c, m) = (prior.cov()[(0, 0)], prior.mean()[0]);
        assert!((post.cov()[(0, 0)] - c / (c + 1.0)).abs() < 1e-12);
        assert!((post.mean()[0] - m / (c + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn second_order_exact_needs_enough_particles() {
        let p = scalar(0.0, 1.0, 1.0, 1.0, false);
        let e = Ensemble::new(DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), 1.0).unwrap();
        assert!(matches!(
            terminal_update(&p, &e, TerminalNoise::SecondOrderExact, &Streams::new(0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gain_examples() {
        let g = gain_from_moments(&mom(0.0, 1.0), &mom(0.0, 1.0)).unwrap();
        assert_eq!(g, GainPair::zeros(1));
        let g = gain_from_moments(&mom(0.0, 2.0), &mom(1.0, 1.0)).unwrap();
        assert!((g.a[(0, 0)] + 0.5).abs() < 1e-15);
        assert!((g.c[0] - 1.0).abs() < 1e-15);
        let bar = EmpiricalMoments::from_parts(DVector::zeros(2), DMatrix::identity(2, 2) * 2.0, 0.0).unwrap();
        let tilde = EmpiricalMoments::from_parts(DVector::zeros(2), DMatrix::identity(2, 2), 0.0).unwrap();
        let g = gain_from_moments(&bar, &tilde).unwrap();
        assert!(g.a.symmetric_eigenvalues().max() < 0.0);
    }

    #[test]
    fn g_tilde_examples() {
        // Σ = G R Gᵀ: the matrix factor vanishes.
        let p = scalar(-0.5, 1.0, 1.0, 1.0, true);
        let gain = GainPair { a: s(-0.7), c: v1(0.2) };
        for x in [-1.0, 0.0, 2.0] {
            assert_eq!(g_tilde_kf(&p, &v1(x), &mom(0.1, 0.5), &gain)[0], 0.0);
        }
        let p2 = scalar(0.0, 1.0, 2f64.sqrt(), 1.0, true);
        assert_eq!(g_tilde_kf(&p2, &v1(1.0), &mom(0.0, 1.0), &GainPair::zeros(1))[0], 0.0);
        // C̃ = 1, A = −1, c = 0, m̃ = 0, Σ = 2, GRGᵀ = 1, x = 1 → 0.5
        let g = g_tilde_kf(&p2, &v1(1.0), &mom(0.0, 1.0), &GainPair { a: s(-1.0), c: v1(0.0) });
        assert!((g[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ou_reverse_drift_sign_convention() {
        let p = scalar(-0.5, 1.0, 1.0, 1.0, true);
        let bar = mom(0.0, 1.0);
        let tilde = mom(0.0, 1.0);
        let gain = gain_from_moments(&bar, &tilde).unwrap();
        let f = reverse_drift(&p, &v1(1.0), &bar, &tilde, &gain, 1.0).unwrap();
        assert!((f[0] + 0.5).abs() < 1e-15);
        let f = reverse_drift(&p, &v1(1.0), &bar, &tilde, &gain, 0.0).unwrap();
        assert!(f[0].abs() < 1e-15);
    }

    #[test]
    fn stationary_ou_is_a_fixed_point_of_the_moment_flow() {
        // Reverse-time moment ODEs of the linear drift f̃(x) = k (x − m̃) + f̃(m̃)
        // with ε = 0: dm̃/dτ = f̃(m̃), dC̃/dτ = 2 k C̃. Integrate with RK4 from
        // π̃ = N(0, 1) and check it stays put.
        let p = scalar(-0.5, 1.0, 1.0, 1.0, true);
        let bar = mom(0.0, 1.0);
        let rhs = |m: f64, c: f64| {
            let tilde = mom(m, c);
            let gain = gain_from_moments(&bar, &tilde).unwrap();
            let f0 = reverse_drift(&p, &v1(m), &bar, &tilde, &gain, 0.0).unwrap()[0];
            let f1 = reverse_drift(&p, &v1(m + 1.0), &bar, &tilde, &gain, 0.0).unwrap()[0];
            (f0, 2.0 * (f1 - f0) * c)
        };
        let (mut m, mut c) = (0.0, 1.0);
        let h = 1e-2;
        for _ in 0..100 {
            let k1 = rhs(m, c);
            let k2 = rhs(m + 0.5 * h * k1.0, c + 0.5 * h * k1.1);
            let k3 = rhs(m + 0.5 * h * k2.0, c + 0.5 * h * k2.1);
            let k4 = rhs(m + h * k3.0, c + h * k3.1);
            m += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            c += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        assert!(m.abs() < 1e-12 && (c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn g_tilde_contracts_reverse_covariance() {
        // Σ = 2 > GRGᵀ = 1: pushing an ensemble one reverse step along −g̃
        // shrinks its spread.
        let p = scalar(0.0, 1.0, 2f64.sqrt(), 1.0, true);
        let e = Ensemble::new(DMatrix::from_row_slice(1, 4, &[-1.0, -0.2, 0.5, 1.3]), 0.5).unwrap();
        let tilde = crate::stats::moments(&e, 0.0).unwrap();
        let bar = mom(0.0, 2.0 * tilde.cov()[(0, 0)]);
        let gain = gain_from_moments(&bar, &tilde).unwrap();
        assert!(gain.a[(0, 0)] < 0.0);
        let g = TildeDrift::new(&p, &tilde, &gain, 0.0);
        let dt = 1e-3;
        let pushed: Vec<_> = e.iter().map(|x| &x - g.eval(&x) * dt).collect();
        let after = crate::stats::moments(&Ensemble::from_particles(&pushed, 0.5).unwrap(), 0.0).unwrap();
        let rate = (after.cov()[(0, 0)] - tilde.cov()[(0, 0)]) / dt;
        assert!(rate < 0.0, "rate {rate}");
    }

    #[test]
    fn drifts_are_deterministic() {
        let p = scalar(0.3, 1.0, 1.5, 2.0, false);
        let bar = mom(0.2, 0.8);
        let tilde = mom(-0.1, 0.4);
        let gain = gain_from_moments(&bar, &tilde).unwrap();
        let a = reverse_drift(&p, &v1(0.7), &bar, &tilde, &gain, 0.3).unwrap();
        let b = reverse_drift(&p, &v1(0.7), &bar, &tilde, &gain, 0.3).unwrap();
        assert_eq!(a, b);
    }

    fn spd2() -> impl Strategy<Value = (DVector<f64>, DMatrix<f64>)> {
        (-3.0f64..3.0, -3.0f64..3.0, 0.2f64..3.0, 0.2f64..3.0, -0.9f64..0.9).prop_map(|(m1, m2, s1, s2, rho)| {
            let off = rho * (s1 * s2).sqrt();
            (DVector::from_vec(vec![m1, m2]), DMatrix::from_row_slice(2, 2, &[s1, off, off, s2]))
        })
    }

    proptest! {
        #[test]
        fn gain_is_antisymmetric_under_exchange(a in spd2(), b in spd2()) {
            let bar = EmpiricalMoments::from_parts(a.0, a.1, 0.0).unwrap();
            let tilde = EmpiricalMoments::from_parts(b.0, b.1, 0.0).unwrap();
            let g1 = gain_from_moments(&bar, &tilde).unwrap();
            let g2 = gain_from_moments(&tilde, &bar).unwrap();
            prop_assert!((&g1.a + &g2.a).amax() < 1e-9);
            prop_assert!((&g1.c + &g2.c).amax() < 1e-9);
            prop_assert_eq!(&g1.a, &g1.a.transpose());
        }
    }
}
