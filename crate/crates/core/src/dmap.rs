//! Sinkhorn-normalised diffusion-map approximation of the semigroup
//! `exp(εL)` of the generator `L f = π⁻¹ ∇·(π Σ ∇f)` built from an ensemble,
//! and the resulting estimate of `∇·Σ + Σ ∇log π`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::problem::{ControlProblem, MatrixField};

pub const SINKHORN_TOL: f64 = 1e-8;
pub const SINKHORN_MAX_ITER: usize = 10_000;

/// How `Σ(x)` is obtained at out-of-sample points.
#[derive(Clone)]
pub enum SigmaSource {
    Constant(DMatrix<f64>),
    Field(MatrixField),
}

impl SigmaSource {
    pub fn from_problem(p: &ControlProblem) -> Self {
        if p.noise_is_constant() {
            SigmaSource::Constant(p.sigma(p.start()))
        } else {
            let p = p.clone();
            SigmaSource::Field(Arc::new(move |x| p.sigma(x)))
        }
    }

    fn at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            SigmaSource::Constant(s) => s.clone(),
            SigmaSource::Field(f) => f(x),
        }
    }
}

/// `R_ij = exp(−(1/(2ε)) dᵀ (Σ(Xⁱ) + Σ(Xʲ))⁻¹ d)`, `d = Xⁱ − Xʲ`.
pub fn build_kernel(anchors: &DMatrix<f64>, sigma_at_anchors: &[DMatrix<f64>], eps_dm: f64) -> Result<DMatrix<f64>> {
    let m = anchors.ncols();
    if m < 2 {
        return Err(Error::InsufficientEnsemble { size: m });
    }
    if sigma_at_anchors.len() != m {
        return Err(Error::InvalidArgument("one Sigma per anchor required".into()));
    }
    if !(eps_dm > 0.0) {
        return Err(Error::InvalidArgument(format!("kernel scale must be positive, got {eps_dm}")));
    }
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let sum = &sigma_at_anchors[i] + &sigma_at_anchors[j];
            let f = SpdFactor::new(sum, "Sigma_i + Sigma_j").map_err(|_| Error::FullRankViolation { i, j })?;
            let d = anchors.column(i) - anchors.column(j);
            let val = if i == j { 1.0 } else { (-f.inv_quad(&d) / (2.0 * eps_dm)).exp() };
            k[(i, j)] = val;
            k[(j, i)] = val;
        }
    }
    Ok(k)
}

/// Result of the symmetric Sinkhorn scaling.
#[derive(Clone, Debug)]
pub struct Sinkhorn {
    pub scaling: DVector<f64>,
    pub iterations: usize,
    /// `max_i |Σ_j P_ij − 1/M|`.
    pub row_residual: f64,
    /// `max_j |Σ_i P_ij − 1/M|`.
    pub col_residual: f64,
    /// Row residual before each iteration, then the final one.
    pub history: Vec<f64>,
}

fn row_residual(kernel: &DMatrix<f64>, v: &DVector<f64>) -> (f64, DVector<f64>) {
    let m = v.len() as f64;
    let kv = kernel * v;
    let r = v
        .iter()
        .zip(kv.iter())
        .map(|(a, b)| (a * b - 1.0 / m).abs())
        .fold(0.0, f64::max);
    (r, kv)
}

fn col_residual(kernel: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let m = v.len();
    (0..m)
        .map(|j| ((0..m).map(|i| v[i] * kernel[(i, j)]).sum::<f64>() * v[j] - 1.0 / m as f64).abs())
        .fold(0.0, f64::max)
}

/// Finds `v > 0` with `D(v) R D(v)` having all row and column sums `1/M`,
/// by the damped symmetric iteration `v ← sqrt(v / (M R v))`.
pub fn sinkhorn(kernel: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<Sinkhorn> {
    let m = kernel.nrows();
    if m == 0 || !kernel.is_square() {
        return Err(Error::InvalidArgument("kernel must be a non-empty square matrix".into()));
    }
    if kernel.iter().any(|&v| !(v >= 0.0) || v > 1.0 + 1e-12) {
        return Err(Error::InvalidArgument("kernel entries must lie in [0, 1]".into()));
    }
    let mf = m as f64;
    let mut v = DVector::from_fn(m, |i, _| 1.0 / (mf * kernel.row(i).sum()).sqrt());
    let mut history = Vec::new();
    for it in 0..=max_iter {
        let (res, kv) = row_residual(kernel, &v);
        history.push(res);
        if res <= tol {
            return Ok(Sinkhorn {
                col_residual: col_residual(kernel, &v),
                scaling: v,
                iterations: it,
                row_residual: res,
                history,
            });
        }
        if it == max_iter {
            return Err(Error::SinkhornNotConverged {
                iterations: max_iter,
                residual: res,
            });
        }
        v = v.zip_map(&kv, |vi, ki| (vi / (mf * ki)).sqrt());
    }
    unreachable!()
}

/// Diffusion-map semigroup built on a fixed anchor ensemble.
#[derive(Clone)]
pub struct DiffusionMapOperator {
    anchors: DMatrix<f64>,
    sigma_at_anchors: Vec<DMatrix<f64>>,
    sigma: SigmaSource,
    /// Factor of `2Σ` when the noise is constant (shared by every query).
    constant_pair: Option<SpdFactor>,
    bandwidth: f64,
    log_scaling: DVector<f64>,
    sinkhorn: Sinkhorn,
}

impl std::fmt::Debug for DiffusionMapOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionMapOperator")
            .field("anchors", &self.anchors.ncols())
            .field("bandwidth", &self.bandwidth)
            .field("sinkhorn_iterations", &self.sinkhorn.iterations)
            .finish_non_exhaustive()
    }
}

/// `p(x)` together with its convex-combination certificate.
#[derive(Clone, Debug)]
pub struct Weights {
    pub p: DVector<f64>,
    pub min: f64,
    pub sum_error: f64,
}

impl Weights {
    pub fn is_convex(&self) -> bool {
        self.min >= 0.0 && self.sum_error <= 1e-12 * self.p.len() as f64
    }
}

impl DiffusionMapOperator {
    pub fn new(anchors: DMatrix<f64>, sigma: SigmaSource, eps_dm: f64) -> Result<Self> {
        Self::with_tolerance(anchors, sigma, eps_dm, SINKHORN_TOL, SINKHORN_MAX_ITER)
    }

    pub fn from_problem(p: &ControlProblem, anchors: DMatrix<f64>, eps_dm: f64) -> Result<Self> {
        Self::new(anchors, SigmaSource::from_problem(p), eps_dm)
    }

    pub fn with_tolerance(
        anchors: DMatrix<f64>,
        sigma: SigmaSource,
        eps_dm: f64,
        tol: f64,
        max_iter: usize,
    ) -> Result<Self> {
        let sigma_at_anchors: Vec<_> = anchors.column_iter().map(|c| sigma.at(&c.into_owned())).collect();
        let kernel = build_kernel(&anchors, &sigma_at_anchors, eps_dm)?;
        let sinkhorn = sinkhorn(&kernel, tol, max_iter)?;
        let constant_pair = match &sigma {
            SigmaSource::Constant(s) => Some(SpdFactor::new(s * 2.0, "2 Sigma")?),
            SigmaSource::Field(_) => None,
        };
        Ok(Self {
            log_scaling: sinkhorn.scaling.map(f64::ln),
            anchors,
            sigma_at_anchors,
            sigma,
            constant_pair,
            bandwidth: eps_dm,
            sinkhorn,
        })
    }

    pub fn anchors(&self) -> &DMatrix<f64> {
        &self.anchors
    }
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
    pub fn scaling(&self) -> &DVector<f64> {
        &self.sinkhorn.scaling
    }
    pub fn sinkhorn_report(&self) -> &Sinkhorn {
        &self.sinkhorn
    }

    /// `p(x) = D(v) r(x) / (vᵀ r(x))`, evaluated in the log domain.
    pub fn weights(&self, x: &DVector<f64>) -> Result<Weights> {
        let m = self.anchors.ncols();
        let sx = match self.constant_pair {
            Some(_) => None,
            None => Some(self.sigma.at(x)),
        };
        let mut logw = DVector::zeros(m);
        for i in 0..m {
            let d = self.anchors.column(i) - x;
            let q = match (&self.constant_pair, &sx) {
                (Some(f), _) => f.inv_quad(&d),
                (None, Some(s)) => SpdFactor::new(&self.sigma_at_anchors[i] + s, "Sigma_i + Sigma(x)")?.inv_quad(&d),
                _ => unreachable!(),
            };
            logw[i] = self.log_scaling[i] - q / (2.0 * self.bandwidth);
        }
        let top = logw.max();
        let mut p = logw.map(|w| (w - top).exp());
        let total = p.sum();
        p /= total;
        let min = p.min();
        let sum_error = (p.sum() - 1.0).abs();
        Ok(Weights { p, min, sum_error })
    }

    /// `𝒳 p(x)`, the semigroup applied to the identity map.
    pub fn semigroup_apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.anchors * self.weights(x)?.p)
    }

    /// `(𝒳 p(x) − x) / ε`, approximating `∇·Σ(x) + Σ(x)∇log π(x)`.
    pub fn grad_log_estimate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok((self.semigroup_apply(x)? - x) / self.bandwidth)
    }
}
