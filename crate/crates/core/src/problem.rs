//! Control problem data, costs, and the affine feedback law.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, SpdFactor};

pub type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Controlled diffusion `dX = b dt + G u dt + σ dB` with quadratic running
/// and terminal costs `½ h(x)ᵀS⁻¹h(x)` and `½ ξ(x)ᵀV⁻¹ξ(x)`, and control
/// penalty `½ uᵀR⁻¹u`.
///
/// Immutable once built; all evaluations are pure.
#[derive(Clone)]
pub struct ControlProblem {
    dim_x: usize,
    dim_u: usize,
    dim_b: usize,
    drift: VectorField,
    gain: MatrixField,
    noise: MatrixField,
    div_sigma: VectorField,
    noise_constant: bool,
    running_map: VectorField,
    running_weight: SpdFactor,
    terminal_map: VectorField,
    terminal_weight: SpdFactor,
    control_weight: SpdFactor,
    horizon: f64,
    start: DVector<f64>,
    initial_cov: Option<DMatrix<f64>>,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("dim_x", &self.dim_x)
            .field("dim_u", &self.dim_u)
            .field("dim_b", &self.dim_b)
            .field("dim_h", &self.dim_h())
            .field("dim_xi", &self.dim_xi())
            .field("horizon", &self.horizon)
            .field("start", &self.start.as_slice())
            .finish_non_exhaustive()
    }
}

impl ControlProblem {
    pub fn builder(dim_x: usize) -> ControlProblemBuilder {
        ControlProblemBuilder::new(dim_x)
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }
    pub fn dim_u(&self) -> usize {
        self.dim_u
    }
    pub fn dim_b(&self) -> usize {
        self.dim_b
    }
    pub fn dim_h(&self) -> usize {
        self.running_weight.dim()
    }
    pub fn dim_xi(&self) -> usize {
        self.terminal_weight.dim()
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn start(&self) -> &DVector<f64> {
        &self.start
    }
    /// Covariance of a Gaussian initial law around `start`; `None` means the
    /// process starts at the point `start`.
    pub fn initial_cov(&self) -> Option<&DMatrix<f64>> {
        self.initial_cov.as_ref()
    }
    pub fn noise_is_constant(&self) -> bool {
        self.noise_constant
    }

    pub fn running_weight(&self) -> &SpdFactor {
        &self.running_weight
    }
    pub fn terminal_weight(&self) -> &SpdFactor {
        &self.terminal_weight
    }
    pub fn control_weight(&self) -> &SpdFactor {
        &self.control_weight
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }
    pub fn gain(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.gain)(x)
    }
    pub fn noise(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.noise)(x)
    }
    /// `Σ(x) = σ(x)σ(x)ᵀ`.
    pub fn sigma(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let s = self.noise(x);
        &s * s.transpose()
    }
    pub fn div_sigma(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.div_sigma)(x)
    }
    pub fn running_map(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.running_map)(x)
    }
    pub fn terminal_map(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.terminal_map)(x)
    }

    /// `G(x) R G(x)ᵀ`.
    pub fn control_metric(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let g = self.gain(x);
        &g * self.control_weight.matrix() * g.transpose()
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim_x {
            return Err(Error::InvalidArgument(format!(
                "state has dimension {}, problem has d_x = {}",
                x.len(),
                self.dim_x
            )));
        }
        Ok(())
    }

    /// `c(x) = ½ h(x)ᵀ S⁻¹ h(x)`.
    pub fn running_cost(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_state(x)?;
        Ok(0.5 * self.running_weight.inv_quad(&self.running_map(x)))
    }

    /// `f(x) = ½ ξ(x)ᵀ V⁻¹ ξ(x)`.
    pub fn terminal_cost(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_state(x)?;
        Ok(0.5 * self.terminal_weight.inv_quad(&self.terminal_map(x)))
    }

    /// `½ uᵀ R⁻¹ u`.
    pub fn control_cost(&self, u: &DVector<f64>) -> f64 {
        0.5 * self.control_weight.inv_quad(u)
    }

    /// `u = R G(x)ᵀ (A_t x + c_t)` with the schedule entry active at `t`.
    pub fn apply_control(
        &self,
        sched: &AffineControlSchedule,
        t: f64,
        x: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_state(x)?;
        if sched.dim() != self.dim_x {
            return Err(Error::InvalidArgument(format!(
                "schedule has dimension {}, problem has d_x = {}",
                sched.dim(),
                self.dim_x
            )));
        }
        if t < 0.0 || t > self.horizon {
            return Err(Error::OutOfRange {
                t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        let n = sched.index_at(t)?;
        Ok(self.feedback(&sched.gains[n], &sched.shifts[n], x))
    }

    /// `R G(x)ᵀ (A x + c)` for an explicit gain pair.
    pub fn feedback(&self, a: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let w = a * x + c;
        self.control_weight.matrix() * self.gain(x).transpose() * w
    }
}

/// Incremental construction of a [`ControlProblem`].
pub struct ControlProblemBuilder {
    dim_x: usize,
    drift: Option<VectorField>,
    gain: Option<MatrixField>,
    noise: Option<(MatrixField, Option<VectorField>, bool)>,
    running: Option<(VectorField, DMatrix<f64>)>,
    terminal: Option<(VectorField, DMatrix<f64>)>,
    control_weight: Option<DMatrix<f64>>,
    horizon: Option<f64>,
    start: Option<DVector<f64>>,
    initial_cov: Option<DMatrix<f64>>,
}

impl ControlProblemBuilder {
    fn new(dim_x: usize) -> Self {
        Self {
            dim_x,
            drift: None,
            gain: None,
            noise: None,
            running: None,
            terminal: None,
            control_weight: None,
            horizon: None,
            start: None,
            initial_cov: None,
        }
    }

    pub fn drift(mut self, f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn gain(mut self, f: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.gain = Some(Arc::new(f));
        self
    }

    pub fn constant_gain(self, g: DMatrix<f64>) -> Self {
        self.gain(move |_| g.clone())
    }

    /// State-dependent noise with its analytic divergence `∇·(σσᵀ)`.
    pub fn noise(
        mut self,
        sigma: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        div_sigma: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.noise = Some((Arc::new(sigma), Some(Arc::new(div_sigma)), false));
        self
    }

    /// Constant noise matrix; the divergence of `Σ` is identically zero.
    pub fn constant_noise(mut self, sigma: DMatrix<f64>) -> Self {
        self.noise = Some((Arc::new(move |_| sigma.clone()), None, true));
        self
    }

    pub fn running_cost(
        mut self,
        h: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        weight: DMatrix<f64>,
    ) -> Self {
        self.running = Some((Arc::new(h), weight));
        self
    }

    pub fn terminal_cost(
        mut self,
        xi: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        weight: DMatrix<f64>,
    ) -> Self {
        self.terminal = Some((Arc::new(xi), weight));
        self
    }

    pub fn control_weight(mut self, r: DMatrix<f64>) -> Self {
        self.control_weight = Some(r);
        self
    }

    pub fn horizon(mut self, t: f64) -> Self {
        self.horizon = Some(t);
        self
    }

    pub fn start(mut self, x0: DVector<f64>) -> Self {
        self.start = Some(x0);
        self
    }

    pub fn initial_cov(mut self, cov: DMatrix<f64>) -> Self {
        self.initial_cov = Some(cov);
        self
    }

    pub fn build(self) -> Result<ControlProblem> {
        let missing = |what: &str| Error::InvalidArgument(format!("control problem is missing {what}"));
        let dim_x = self.dim_x;
        if dim_x == 0 {
            return Err(Error::InvalidArgument("d_x must be positive".into()));
        }
        let drift = self.drift.ok_or_else(|| missing("a drift"))?;
        let gain = self.gain.ok_or_else(|| missing("a control gain"))?;
        let (noise, div, noise_constant) = self.noise.ok_or_else(|| missing("a noise matrix"))?;
        let (running_map, s) = self.running.ok_or_else(|| missing("a running cost"))?;
        let (terminal_map, v) = self.terminal.ok_or_else(|| missing("a terminal cost"))?;
        let r = self.control_weight.ok_or_else(|| missing("a control weight"))?;
        let horizon = self.horizon.ok_or_else(|| missing("a horizon"))?;
        let start = self.start.ok_or_else(|| missing("a start state"))?;

        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if start.len() != dim_x {
            return Err(Error::InvalidArgument(format!(
                "start has dimension {}, expected {dim_x}",
                start.len()
            )));
        }
        if let Some(cov) = &self.initial_cov {
            if cov.nrows() != dim_x || !is_symmetric(cov, 1e-12) {
                return Err(Error::InvalidArgument(
                    "initial covariance must be a symmetric d_x x d_x matrix".into(),
                ));
            }
        }

        let running_weight = SpdFactor::new(s, "running weight S")?;
        let terminal_weight = SpdFactor::new(v, "terminal weight V")?;
        let control_weight = SpdFactor::new(r, "control weight R")?;
        let dim_u = control_weight.dim();

        let g0 = gain(&start);
        if g0.nrows() != dim_x || g0.ncols() != dim_u {
            return Err(Error::InvalidArgument(format!(
                "G(x) is {}x{}, expected {dim_x}x{dim_u}",
                g0.nrows(),
                g0.ncols()
            )));
        }
        let s0 = noise(&start);
        if s0.nrows() != dim_x || s0.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "sigma(x) is {}x{}, expected {dim_x} rows",
                s0.nrows(),
                s0.ncols()
            )));
        }
        let dim_b = s0.ncols();
        if drift(&start).len() != dim_x {
            return Err(Error::InvalidArgument("b(x) has the wrong dimension".into()));
        }
        if running_map(&start).len() != running_weight.dim() {
            return Err(Error::InvalidArgument("h(x) does not match the shape of S".into()));
        }
        if terminal_map(&start).len() != terminal_weight.dim() {
            return Err(Error::InvalidArgument("xi(x) does not match the shape of V".into()));
        }
        let div_sigma: VectorField = match div {
            Some(d) => {
                if d(&start).len() != dim_x {
                    return Err(Error::InvalidArgument("div Sigma(x) has the wrong dimension".into()));
                }
                d
            }
            None => Arc::new(move |_| DVector::zeros(dim_x)),
        };

        Ok(ControlProblem {
            dim_x,
            dim_u,
            dim_b,
            drift,
            gain,
            noise,
            div_sigma,
            noise_constant,
            running_map,
            running_weight,
            terminal_map,
            terminal_weight,
            control_weight,
            horizon,
            start,
            initial_cov: self.initial_cov,
        })
    }
}

/// Piecewise-constant schedule of affine feedback gains on a time grid.
///
/// For `t ∈ [t_n, t_{n+1})` entry `n` is active; at the final time the last
/// entry is used.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineControlSchedule {
    times: Vec<f64>,
    gains: Vec<DMatrix<f64>>,
    shifts: Vec<DVector<f64>>,
}

impl AffineControlSchedule {
    pub fn new(times: Vec<f64>, gains: Vec<DMatrix<f64>>, shifts: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one time".into()));
        }
        if gains.len() != times.len() || shifts.len() != times.len() {
            return Err(Error::InvalidArgument(format!(
                "schedule lengths differ: {} times, {} gains, {} shifts",
                times.len(),
                gains.len(),
                shifts.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("schedule times must be strictly increasing".into()));
        }
        let d = shifts[0].len();
        for (a, c) in gains.iter().zip(&shifts) {
            if a.nrows() != d || a.ncols() != d || c.len() != d {
                return Err(Error::InvalidArgument("inconsistent gain shapes".into()));
            }
            if !is_symmetric(a, 1e-9) {
                return Err(Error::InvalidArgument("schedule gains must be symmetric".into()));
            }
        }
        Ok(Self { times, gains, shifts })
    }

    /// The all-zero (uncontrolled) schedule on a grid.
    pub fn zeros(times: Vec<f64>, dim_x: usize) -> Result<Self> {
        let n = times.len();
        Self::new(times, vec![DMatrix::zeros(dim_x, dim_x); n], vec![DVector::zeros(dim_x); n])
    }

    pub fn dim(&self) -> usize {
        self.shifts[0].len()
    }
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }
    pub fn shifts(&self) -> &[DVector<f64>] {
        &self.shifts
    }

    /// Index of the entry active at `t` (left-closed lookup).
    pub fn index_at(&self, t: f64) -> Result<usize> {
        let lo = self.times[0];
        let hi = *self.times.last().unwrap();
        if !(t >= lo && t <= hi) {
            return Err(Error::OutOfRange { t, lo, hi });
        }
        let k = self.times.partition_point(|&s| s <= t);
        Ok(k.saturating_sub(1).min(self.times.len() - 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_problem(r: f64) -> ControlProblem {
        ControlProblem::builder(1)
            .drift(|x| x * 0.0)
            .constant_gain(DMatrix::from_element(1, 1, 1.0))
            .constant_noise(DMatrix::from_element(1, 1, 1.0))
            .running_cost(|x| x.clone(), DMatrix::identity(1, 1))
            .terminal_cost(|x| x.clone(), DMatrix::identity(1, 1))
            .control_weight(DMatrix::from_element(1, 1, r))
            .horizon(1.0)
            .start(DVector::from_element(1, 0.0))
            .build()
            .unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn zero_state_has_zero_costs() {
        let p = scalar_problem(1.0);
        assert_eq!(p.running_cost(&v(&[0.0])).unwrap(), 0.0);
        assert_eq!(p.terminal_cost(&v(&[0.0])).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = scalar_problem(1.0);
        assert!(matches!(p.running_cost(&v(&[0.0, 1.0])), Err(Error::InvalidArgument(_))));
        assert!(matches!(p.terminal_cost(&v(&[0.0, 1.0])), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn scalar_feedback_substitution() {
        let p = scalar_problem(2.0);
        let sched = AffineControlSchedule::new(
            vec![0.0, 1.0],
            vec![DMatrix::from_element(1, 1, -0.5); 2],
            vec![v(&[1.0]); 2],
        )
        .unwrap();
        let u = p.apply_control(&sched, 0.3, &v(&[3.0])).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_schedule_gives_zero_control() {
        let p = scalar_problem(1.0);
        let sched = AffineControlSchedule::zeros(vec![0.0, 0.5, 1.0], 1).unwrap();
        for x in [-3.0, 0.0, 2.5] {
            assert_eq!(p.apply_control(&sched, 0.7, &v(&[x])).unwrap()[0], 0.0);
        }
    }

    #[test]
    fn time_outside_horizon_is_out_of_range() {
        let p = scalar_problem(1.0);
        let sched = AffineControlSchedule::zeros(vec![0.0, 0.5, 1.0], 1).unwrap();
        assert!(matches!(p.apply_control(&sched, 1.5, &v(&[0.0])), Err(Error::OutOfRange { .. })));
        assert!(matches!(p.apply_control(&sched, -0.1, &v(&[0.0])), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn lookup_is_left_closed() {
        let sched = AffineControlSchedule::new(
            vec![0.0, 0.5, 1.0],
            (0..3).map(|k| DMatrix::from_element(1, 1, k as f64)).collect(),
            vec![v(&[0.0]); 3],
        )
        .unwrap();
        assert_eq!(sched.index_at(0.0).unwrap(), 0);
        assert_eq!(sched.index_at(0.49).unwrap(), 0);
        assert_eq!(sched.index_at(0.5).unwrap(), 1);
        assert_eq!(sched.index_at(0.99).unwrap(), 1);
        assert_eq!(sched.index_at(1.0).unwrap(), 2);
    }

    #[test]
    fn schedule_rejects_bad_grids() {
        let g = vec![DMatrix::zeros(1, 1); 2];
        let c = vec![v(&[0.0]); 2];
        assert!(AffineControlSchedule::new(vec![0.0, 0.0], g.clone(), c.clone()).is_err());
        assert!(AffineControlSchedule::new(vec![0.0], g.clone(), c.clone()).is_err());
        let asym = vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]); 2];
        assert!(AffineControlSchedule::new(vec![0.0, 1.0], asym, vec![v(&[0.0, 0.0]); 2]).is_err());
    }

    #[test]
    fn weights_must_be_positive_definite() {
        let r = ControlProblem::builder(1)
            .drift(|x| x.clone())
            .constant_gain(DMatrix::from_element(1, 1, 1.0))
            .constant_noise(DMatrix::from_element(1, 1, 1.0))
            .running_cost(|x| x.clone(), DMatrix::from_element(1, 1, -1.0))
            .terminal_cost(|x| x.clone(), DMatrix::identity(1, 1))
            .control_weight(DMatrix::identity(1, 1))
            .horizon(1.0)
            .start(v(&[0.0]))
            .build();
        assert!(matches!(r, Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn gain_shape_is_checked() {
        let r = ControlProblem::builder(2)
            .drift(|x| x.clone())
            .constant_gain(DMatrix::from_element(1, 1, 1.0))
            .constant_noise(DMatrix::identity(2, 2))
            .running_cost(|x| x.clone(), DMatrix::identity(2, 2))
            .terminal_cost(|x| x.clone(), DMatrix::identity(2, 2))
            .control_weight(DMatrix::identity(1, 1))
            .horizon(1.0)
            .start(v(&[0.0, 0.0]))
            .build();
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn constant_noise_has_zero_divergence() {
        let p = scalar_problem(1.0);
        assert!(p.noise_is_constant());
        assert_eq!(p.div_sigma(&v(&[4.0]))[0], 0.0);
    }
}
