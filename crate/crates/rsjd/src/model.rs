//! Model definition: regime-wise Lévy-type coefficients coupled by a
//! state-dependent switching-rate matrix, plus generator evaluation on test
//! functions.
//!
//! The generator acting on `f(x, k)` is
//!
//! ```text
//!   1/2 tr(a(x,k) ∇²f) + <b(x,k), ∇f>
//!     + ∫ [f(x+u,k) - f(x,k) - <∇f, u> 1{|u| < eps0}] ν(x,k,du)
//!     + Σ_l q_kl(x) [f(x,l) - f(x,k)]
//! ```
//!
//! Jump kernels are supplied in thinning-ready form: a dominating finite
//! measure with a known sampler plus a state-dependent acceptance ratio in
//! `[0,1]`. That is the only exact scheme for state-dependent kernels with a
//! uniform mass bound, and it makes couplings at two points computable from
//! pointwise minima of acceptance ratios.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::{Matrix, Regime, State};

/// Drift coefficient `b(x, k)`.
pub type DriftFn = Box<dyn Fn(&State, Regime) -> State + Send + Sync>;
/// Diffusion factor `sigma(x, k)` with `a = sigma sigma^T`.
pub type SigmaFn = Box<dyn Fn(&State, Regime) -> Matrix + Send + Sync>;
/// Switching-rate matrix `Q(x)`; off-diagonal entries nonnegative, rows sum to zero.
pub type SwitchingFn = Box<dyn Fn(&State) -> Matrix + Send + Sync>;
/// Scalar field of the state and regime (moduli, second-moment bounds, ...).
pub type ScalarFieldFn = Box<dyn Fn(&State, Regime) -> f64 + Send + Sync>;
/// Vector field of the state and regime (compensator means, ...).
pub type VectorFieldFn = Box<dyn Fn(&State, Regime) -> State + Send + Sync>;
/// Matrix field of the state and regime.
pub type MatrixFieldFn = Box<dyn Fn(&State, Regime) -> Matrix + Send + Sync>;
/// Sampler drawing one candidate jump from a dominating measure.
pub type JumpSamplerFn = Box<dyn Fn(&mut dyn RngCore) -> State + Send + Sync>;
/// Acceptance ratio `r(x, k, u)` of a thinned kernel.
pub type AcceptFn = Box<dyn Fn(&State, Regime, &State) -> f64 + Send + Sync>;

/// Row-sum tolerance for the switching matrix.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// One thinned component of a jump kernel: a finite dominating measure
/// `mass * sampler-law` together with an acceptance ratio, so that the
/// component's true intensity at `(x, k)` is `mass * E[r(x,k,U) ; U in .]`.
pub struct ThinnedComponent {
    /// Total mass of the dominating measure (candidate rate per unit time).
    pub mass: f64,
    /// Draws a candidate `u` from the normalized dominating measure.
    pub sampler: JumpSamplerFn,
    /// Acceptance ratio in `[0,1]`; the kernel is the dominating measure
    /// thinned by this ratio.
    pub accept: AcceptFn,
}

impl ThinnedComponent {
    /// A component that never fires.
    pub fn none(dim: usize) -> Self {
        ThinnedComponent {
            mass: 0.0,
            sampler: Box::new(move |_| DVector::zeros(dim)),
            accept: Box::new(|_, _, _| 0.0),
        }
    }
}

/// Compensated medium-jump range `[delta_small, eps0)` plus bookkeeping for
/// the dropped range `|u| < delta_small`.
pub struct SmallJumpPart {
    /// Truncation radius; jumps below it are dropped after compensation.
    pub delta_small: f64,
    /// Thinned sampler for jumps with `delta_small <= |u| < eps0`.
    pub component: ThinnedComponent,
    /// Second moment of the dropped range, `∫_{|u|<delta_small} |u|^2 ν(du)`.
    pub second_moment: ScalarFieldFn,
    /// Compensator mean of the simulated range,
    /// `μ_c(x,k) = ∫_{delta_small <= |u| < eps0} u ν(x,k,du)`.
    pub compensator_mean: VectorFieldFn,
    /// Optional Gaussian substitution for the dropped range: covariance per
    /// unit time of `N(0, Σ dt)` increments added to the Euler step.
    pub gaussian_substitution: Option<MatrixFieldFn>,
}

/// Jump measure of one regime, split into an uncompensated large part
/// (`|u| >= eps0`) and an optional compensated medium part.
pub struct LevyKernelSpec {
    pub large: ThinnedComponent,
    pub small: Option<SmallJumpPart>,
    /// Declared bound on `sup_{x,k} ∫ (1 ∧ |u|^2) ν(x,k,du)`.
    pub total_bound: f64,
}

impl LevyKernelSpec {
    /// Kernel with no jumps at all.
    pub fn none(dim: usize) -> Self {
        LevyKernelSpec {
            large: ThinnedComponent::none(dim),
            small: None,
            total_bound: 0.0,
        }
    }
}

/// Concave nondecreasing modulus used by the coupling distance bounds.
#[derive(Clone)]
pub enum Rho {
    /// `ρ(r) = scale * r`.
    Linear { scale: f64 },
    /// `ρ(r) = r ln(1/r)` for `r < 1/e`, constant `1/e` above. Concave,
    /// nondecreasing, positive away from zero, and its reciprocal is
    /// non-integrable at zero.
    LogLinear,
    /// User-supplied modulus; must be concave, nondecreasing, positive on
    /// `(0, ∞)`.
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Rho {
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            Rho::Linear { scale } => scale * r,
            Rho::LogLinear => {
                let knee = (-1.0f64).exp();
                if r <= 0.0 {
                    0.0
                } else if r < knee {
                    r * (1.0 / r).ln()
                } else {
                    knee
                }
            }
            Rho::Custom(f) => f(r),
        }
    }
}

impl std::fmt::Debug for Rho {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rho::Linear { scale } => write!(f, "Rho::Linear{{scale: {scale}}}"),
            Rho::LogLinear => write!(f, "Rho::LogLinear"),
            Rho::Custom(_) => write!(f, "Rho::Custom"),
        }
    }
}

/// Continuity modulus for the uniformly elliptic (reflection-coupling)
/// regime: `theta` on `[0, delta0]` with `theta(0+) = 0`.
pub struct ReflectionModulus {
    pub delta0: f64,
    pub theta: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

/// Full description of the weakly coupled operator.
pub struct ModelSpec {
    /// State dimension `d >= 1`.
    pub dim: usize,
    /// Number of regimes `>= 1`.
    pub n_regimes: usize,
    pub drift: DriftFn,
    pub sigma: SigmaFn,
    /// One kernel per regime; empty means no jumps in any regime.
    pub kernels: Vec<LevyKernelSpec>,
    pub switching: SwitchingFn,
    /// Compensation radius: jumps with `|u| < comp_radius` enter compensated.
    pub comp_radius: f64,
    /// Common Lipschitz/bound constant shared by the coefficient moduli and
    /// the switching rates.
    pub lip_const: f64,
    pub rho: Rho,
    /// Ellipticity floor `lambda0 >= 0`; zero when uniform ellipticity is not
    /// claimed.
    pub ellipticity: f64,
    /// Modulus for the reflection-coupling contraction; required only by the
    /// strong-continuity machinery.
    pub reflection_modulus: Option<ReflectionModulus>,
    /// Dominating switch rate, `>= sup_{x,k} |q_kk(x)|`.
    pub max_switch_rate: f64,
}

impl ModelSpec {
    pub fn kernel(&self, k: Regime) -> Option<&LevyKernelSpec> {
        self.kernels.get(k)
    }

    /// Diffusion matrix `a(x,k) = sigma sigma^T`.
    pub fn diffusion(&self, x: &State, k: Regime) -> Matrix {
        let s = (self.sigma)(x, k);
        &s * s.transpose()
    }

    /// Total switch intensity out of regime `k`, `q_k(x) = Σ_{l≠k} q_kl(x)`.
    pub fn switch_rate(&self, q: &Matrix, k: Regime) -> f64 {
        let mut s = 0.0;
        for l in 0..self.n_regimes {
            if l != k {
                s += q[(k, l)];
            }
        }
        s
    }

    /// Euler drift with the compensator of the simulated-but-compensated
    /// medium jumps absorbed: `b(x,k) - μ_c(x,k)`.
    pub fn effective_drift(&self, x: &State, k: Regime) -> State {
        let mut b = (self.drift)(x, k);
        if let Some(kernel) = self.kernel(k) {
            if let Some(small) = &kernel.small {
                b -= (small.compensator_mean)(x, k);
            }
        }
        b
    }

    fn check_basic(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidModel("state dimension d must be >= 1".into()));
        }
        if self.n_regimes == 0 {
            return Err(Error::InvalidModel("regime count must be >= 1".into()));
        }
        if self.max_switch_rate <= 0.0 && self.n_regimes > 1 {
            return Err(Error::InvalidModel(
                "dominating switch rate must be positive".into(),
            ));
        }
        if self.comp_radius <= 0.0 {
            return Err(Error::InvalidModel(
                "compensation radius must be positive".into(),
            ));
        }
        if !self.kernels.is_empty() && self.kernels.len() != self.n_regimes {
            return Err(Error::InvalidModel(format!(
                "expected one kernel per regime ({} regimes, {} kernels)",
                self.n_regimes,
                self.kernels.len()
            )));
        }
        for (k, kernel) in self.kernels.iter().enumerate() {
            if !kernel.large.mass.is_finite() || kernel.large.mass < 0.0 {
                return Err(Error::InvalidModel(format!(
                    "kernel {k}: dominating mass must be finite and nonnegative"
                )));
            }
            if !kernel.total_bound.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "kernel {k}: total bound must be finite"
                )));
            }
            if let Some(small) = &kernel.small {
                if !(small.delta_small > 0.0 && small.delta_small <= self.comp_radius) {
                    return Err(Error::InvalidModel(format!(
                        "kernel {k}: delta_small must lie in (0, eps0]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Axis-aligned sampling box for validation.
#[derive(Debug, Clone)]
pub struct Hyperrect {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Hyperrect {
    pub fn cube(dim: usize, half_width: f64) -> Self {
        Hyperrect {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn contains(&self, x: &State) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&a, &b))| v >= a && v <= b)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> State {
        DVector::from_iterator(
            self.lo.len(),
            self.lo
                .iter()
                .zip(&self.hi)
                .map(|(&a, &b)| a + (b - a) * rng.random::<f64>()),
        )
    }
}

/// One validated invariant with its worst observed violation.
#[derive(Debug, Clone)]
pub struct InvariantItem {
    pub name: String,
    pub pass: bool,
    /// Worst violation observed (0 when the invariant held everywhere).
    pub worst: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub items: Vec<InvariantItem>,
    pub pass: bool,
}

impl ValidationReport {
    fn push(&mut self, name: &str, worst: f64, tol: f64, detail: String) {
        let pass = worst <= tol;
        self.pass &= pass;
        self.items.push(InvariantItem {
            name: name.to_string(),
            pass,
            worst,
            detail,
        });
    }
}

/// Sampling-based validation of the model's structural assumptions.
///
/// Coefficients are opaque callables, so every bound is checked on random
/// points of `sample_box`. A switching row that fails to sum to zero within
/// [`ROW_SUM_TOL`] is a hard error; all other violations are reported as
/// failed items.
pub fn validate_model(
    spec: &ModelSpec,
    sample_count: usize,
    sample_box: &Hyperrect,
    seed: u64,
) -> Result<ValidationReport> {
    spec.check_basic()?;
    if sample_count == 0 {
        return Err(Error::InvalidArgument("sample_count must be >= 1".into()));
    }
    if sample_box.lo.len() != spec.dim || sample_box.hi.len() != spec.dim {
        return Err(Error::InvalidArgument(
            "sampling box dimension does not match the model".into(),
        ));
    }

    let mut rng = stream_rng(seed, 0);
    let mut report = ValidationReport {
        items: Vec::new(),
        pass: true,
    };

    let mut worst_row_sum = 0.0f64;
    let mut worst_offdiag = 0.0f64;
    let mut worst_rate_bound = 0.0f64;
    let mut worst_kill_sign = 0.0f64;
    let mut worst_accept = 0.0f64;
    let mut worst_large_support = 0.0f64;
    let mut worst_coeff_modulus = 0.0f64;
    let mut worst_kernel_modulus = 0.0f64;
    let mut worst_switch_lip = 0.0f64;
    let mut worst_ellipticity = 0.0f64;

    for _ in 0..sample_count {
        let x = sample_box.sample(&mut rng);
        let z = sample_box.sample(&mut rng);
        let q = (spec.switching)(&x);
        if q.nrows() != spec.n_regimes || q.ncols() != spec.n_regimes {
            return Err(Error::InvalidModel(
                "switching matrix has wrong dimensions".into(),
            ));
        }
        for k in 0..spec.n_regimes {
            let mut row_sum = 0.0;
            for l in 0..spec.n_regimes {
                row_sum += q[(k, l)];
                if l != k {
                    worst_offdiag = worst_offdiag.max(-q[(k, l)]);
                }
            }
            if row_sum.abs() > ROW_SUM_TOL {
                return Err(Error::RowSumViolation {
                    row: k,
                    sum: row_sum,
                    at: x.iter().copied().collect(),
                    tol: ROW_SUM_TOL,
                });
            }
            worst_row_sum = worst_row_sum.max(row_sum.abs());
            worst_rate_bound = worst_rate_bound.max(q[(k, k)].abs() - spec.max_switch_rate);
            worst_kill_sign = worst_kill_sign.max(q[(k, k)]);
        }

        // Lipschitz bound on the off-diagonal switching rates.
        let qz = (spec.switching)(&z);
        let dist = (&x - &z).norm();
        if dist > 1e-12 {
            for k in 0..spec.n_regimes {
                for l in 0..spec.n_regimes {
                    if l != k {
                        let lhs = (q[(k, l)] - qz[(k, l)]).abs();
                        worst_switch_lip = worst_switch_lip.max(lhs - spec.lip_const * dist);
                    }
                }
            }
            // Coefficient modulus shared by drift and diffusion factor.
            for k in 0..spec.n_regimes {
                let sx = (spec.sigma)(&x, k);
                let sz = (spec.sigma)(&z, k);
                let bx = (spec.drift)(&x, k);
                let bz = (spec.drift)(&z, k);
                let lhs = (&sx - &sz).norm_squared() + 2.0 * (&x - &z).dot(&(&bx - &bz));
                let rhs = spec.lip_const * dist * spec.rho.eval(dist);
                worst_coeff_modulus = worst_coeff_modulus.max(lhs - rhs);
            }
        }

        for (k, kernel) in spec.kernels.iter().enumerate() {
            let mut tv = 0.0;
            let n_kernel_samples = 32usize;
            for _ in 0..n_kernel_samples {
                let u = (kernel.large.sampler)(&mut rng);
                let rx = (kernel.large.accept)(&x, k, &u);
                let rz = (kernel.large.accept)(&z, k, &u);
                worst_accept = worst_accept.max((-rx).max(rx - 1.0));
                if u.norm() < spec.comp_radius {
                    worst_large_support = worst_large_support.max(rx.abs());
                }
                tv += u.norm() * (rx - rz).abs();
            }
            tv *= kernel.large.mass / n_kernel_samples as f64;
            if let Some(small) = &kernel.small {
                let mut tv_small = 0.0;
                for _ in 0..n_kernel_samples {
                    let u = (small.component.sampler)(&mut rng);
                    let rx = (small.component.accept)(&x, k, &u);
                    let rz = (small.component.accept)(&z, k, &u);
                    worst_accept = worst_accept.max((-rx).max(rx - 1.0));
                    let n = u.norm();
                    if n < small.delta_small || n >= spec.comp_radius {
                        worst_large_support = worst_large_support.max(rx.abs());
                    }
                    tv_small += n * (rx - rz).abs();
                }
                tv += small.component.mass * tv_small / n_kernel_samples as f64;
            }
            if dist > 1e-12 {
                worst_kernel_modulus =
                    worst_kernel_modulus.max(tv - spec.lip_const * spec.rho.eval(dist));
            }
        }

        if spec.ellipticity > 0.0 {
            for k in 0..spec.n_regimes {
                let a = spec.diffusion(&x, k);
                let mut xi = DVector::from_fn(spec.dim, |_, _| {
                    rng.random::<f64>() * 2.0 - 1.0
                });
                let n = xi.norm();
                if n > 0.0 {
                    xi /= n;
                }
                let quad = xi.dot(&(&a * &xi));
                worst_ellipticity = worst_ellipticity.max(spec.ellipticity - quad);
            }
        }
    }

    report.push(
        "row-sums",
        worst_row_sum,
        ROW_SUM_TOL,
        "each switching row sums to zero".into(),
    );
    report.push(
        "offdiag-nonneg",
        worst_offdiag,
        0.0,
        "off-diagonal switching rates are nonnegative".into(),
    );
    report.push(
        "rate-bound",
        worst_rate_bound.max(0.0),
        0.0,
        "|q_kk| stays below the dominating switch rate".into(),
    );
    report.push(
        "kill-rate-sign",
        worst_kill_sign.max(0.0),
        0.0,
        "diagonal switching rates are nonpositive".into(),
    );
    if !spec.kernels.is_empty() {
        report.push(
            "acceptance-range",
            worst_accept.max(0.0),
            0.0,
            "acceptance ratios lie in [0,1]".into(),
        );
        report.push(
            "component-support",
            worst_large_support,
            0.0,
            "each thinned component only accepts jumps in its radius range".into(),
        );
        report.push(
            "kernel-modulus",
            worst_kernel_modulus.max(0.0),
            // An MC estimate of an integral bound; allow slack at the scale
            // of the sampling error.
            0.05 * spec.lip_const,
            "sampled kernel total-variation modulus".into(),
        );
    }
    report.push(
        "coeff-modulus",
        worst_coeff_modulus.max(0.0),
        1e-9,
        "drift/diffusion modulus bound holds at sampled pairs".into(),
    );
    report.push(
        "switch-lipschitz",
        worst_switch_lip.max(0.0),
        1e-9,
        "switching rates are H-Lipschitz at sampled pairs".into(),
    );
    if spec.ellipticity > 0.0 {
        report.push(
            "ellipticity",
            worst_ellipticity.max(0.0),
            1e-10,
            "diffusion matrix dominates the ellipticity floor".into(),
        );
    }

    Ok(report)
}

/// Smooth test function with analytic derivatives.
pub struct TestFunction {
    pub value: Box<dyn Fn(&State, Regime) -> f64 + Send + Sync>,
    pub gradient: Box<dyn Fn(&State, Regime) -> State + Send + Sync>,
    pub hessian: Box<dyn Fn(&State, Regime) -> Matrix + Send + Sync>,
    /// Radius of a ball containing the support (`inf` for unbounded).
    pub support_radius: f64,
}

impl TestFunction {
    /// Classic smooth bump `w_k * exp(1 - 1/(1 - |x-c|^2/R^2))` supported on
    /// the ball of radius `R` around `c`, with one weight per regime.
    pub fn bump(center: State, radius: f64, regime_weights: Vec<f64>) -> Self {
        let dim = center.len();
        assert!(radius > 0.0);
        let c = center.clone();
        let w = regime_weights.clone();
        let profile = move |x: &State, k: Regime| -> (f64, f64, f64, State) {
            // returns (weight, g(s), phi(s) = dg/ds, x - c); g = 0 off support
            let wk = *w.get(k).unwrap_or(&0.0);
            let diff = x - &c;
            let s = diff.norm_squared() / (radius * radius);
            if s >= 1.0 || wk == 0.0 {
                return (wk, 0.0, 0.0, diff);
            }
            let om = 1.0 - s;
            let g = (1.0 - 1.0 / om).exp();
            let phi = -g / (om * om);
            (wk, g, phi, diff)
        };
        let p1 = profile.clone();
        let p2 = profile.clone();
        let p3 = profile;
        let r2 = radius * radius;
        let support = center.norm() + radius;
        TestFunction {
            value: Box::new(move |x, k| {
                let (wk, g, _, _) = p1(x, k);
                wk * g
            }),
            gradient: Box::new(move |x, k| {
                let (wk, _, phi, diff) = p2(x, k);
                diff * (wk * phi * 2.0 / r2)
            }),
            hessian: Box::new(move |x, k| {
                let (wk, g, phi, diff) = p3(x, k);
                if g == 0.0 && phi == 0.0 {
                    return DMatrix::zeros(dim, dim);
                }
                let s = diff.norm_squared() / r2;
                let om = 1.0 - s;
                // phi'(s) = g(s) [ (1-s)^{-4} - 2 (1-s)^{-3} ]
                let phi_p = g * (om.powi(-4) - 2.0 * om.powi(-3));
                let mut h = DMatrix::identity(dim, dim) * (wk * phi * 2.0 / r2);
                h += (&diff * diff.transpose()) * (wk * phi_p * 4.0 / (r2 * r2));
                h
            }),
            support_radius: support,
        }
    }

    /// A function of the regime only; gradient and Hessian vanish.
    pub fn regime_only(dim: usize, values: Vec<f64>) -> Self {
        let v = values.clone();
        TestFunction {
            value: Box::new(move |_, k| *v.get(k).unwrap_or(&0.0)),
            gradient: Box::new(move |_, _| DVector::zeros(dim)),
            hessian: Box::new(move |_, _| DMatrix::zeros(dim, dim)),
            support_radius: f64::INFINITY,
        }
    }

    /// Constant function.
    pub fn constant(dim: usize, c: f64) -> Self {
        TestFunction {
            value: Box::new(move |_, _| c),
            gradient: Box::new(move |_, _| DVector::zeros(dim)),
            hessian: Box::new(move |_, _| DMatrix::zeros(dim, dim)),
            support_radius: f64::INFINITY,
        }
    }

    /// Check gradient and Hessian against central finite differences of the
    /// value at the given points; relative tolerance 1e-5.
    pub fn validate_derivatives(&self, points: &[(State, Regime)]) -> Result<()> {
        let tol = 1e-5;
        for (x, k) in points {
            let dim = x.len();
            let step = 1e-5 * (1.0 + x.norm());
            let grad = (self.gradient)(x, *k);
            let hess = (self.hessian)(x, *k);
            let scale_g = 1.0 + grad.norm();
            let scale_h = 1.0 + hess.norm();
            for i in 0..dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += step;
                xm[i] -= step;
                let fd = ((self.value)(&xp, *k) - (self.value)(&xm, *k)) / (2.0 * step);
                if (fd - grad[i]).abs() / scale_g > tol {
                    return Err(Error::InvalidArgument(format!(
                        "test function gradient component {i} disagrees with finite differences: {fd} vs {}",
                        grad[i]
                    )));
                }
                let gp = (self.gradient)(&xp, *k);
                let gm = (self.gradient)(&xm, *k);
                for j in 0..dim {
                    let fd2 = (gp[j] - gm[j]) / (2.0 * step);
                    if (fd2 - hess[(j, i)]).abs() / scale_h > 10.0 * tol {
                        return Err(Error::InvalidArgument(format!(
                            "test function hessian entry ({j},{i}) disagrees with finite differences: {fd2} vs {}",
                            hess[(j, i)]
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Battery of compactly supported bumps used by the martingale checks.
pub fn bump_battery(dim: usize, n_regimes: usize) -> Vec<TestFunction> {
    let mut battery = Vec::new();
    let centers = [0.0, 0.6, -0.8, 1.5, -0.3];
    let radii = [2.0, 1.5, 2.5, 1.8, 3.0];
    for i in 0..5 {
        let mut c = DVector::zeros(dim);
        c[0] = centers[i];
        let weights = (0..n_regimes)
            .map(|k| 1.0 / (1.0 + 0.5 * ((k + i) % n_regimes) as f64))
            .collect();
        battery.push(TestFunction::bump(c, radii[i], weights));
    }
    battery
}

/// Monte Carlo budget for kernel integrals.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureConfig {
    pub n_samples: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig { n_samples: 1024 }
    }
}

/// Value of the generator applied to a test function, with the Monte Carlo
/// standard error of the kernel-integral term.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorValue {
    pub value: f64,
    pub jump_se: f64,
}

/// Monte Carlo integral of `integrand(u)` against the thinned kernel of
/// regime `k` at `x`, covering the large and (if present) medium components.
/// Returns per-component-combined (value, standard error).
///
/// The dropped range `|u| < delta_small` is excluded by construction, which
/// matches what the path simulators realize.
fn mc_kernel_integral<const M: usize>(
    spec: &ModelSpec,
    x: &State,
    k: Regime,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
    integrand: impl Fn(&State) -> [f64; M],
) -> Result<([f64; M], [f64; M])> {
    let mut total = [0.0f64; M];
    let mut var = [0.0f64; M];
    let kernel = match spec.kernel(k) {
        Some(kr) => kr,
        None => return Ok((total, var)),
    };
    let mut components: Vec<&ThinnedComponent> = Vec::new();
    if kernel.large.mass > 0.0 {
        components.push(&kernel.large);
    }
    if let Some(small) = &kernel.small {
        if small.component.mass > 0.0 {
            components.push(&small.component);
        }
    }
    for comp in components {
        let n = n_samples.max(2);
        // Welford accumulation keeps the variance exact (zero) for
        // deterministic integrands; raw second moments feed the tail guard.
        let mut mean = [0.0f64; M];
        let mut m2c = [0.0f64; M];
        let mut sum_sq = [0.0f64; M];
        let mut half_sum_sq = [0.0f64; M];
        for i in 0..n {
            let u = (comp.sampler)(rng);
            let r = (comp.accept)(x, k, &u);
            let vals = integrand(&u);
            for m in 0..M {
                let w = comp.mass * r * vals[m];
                let delta = w - mean[m];
                mean[m] += delta / (i as f64 + 1.0);
                m2c[m] += delta * (w - mean[m]);
                sum_sq[m] += w * w;
                if i < n / 2 {
                    half_sum_sq[m] += w * w;
                }
            }
        }
        for m in 0..M {
            let m2_full = sum_sq[m] / n as f64;
            let m2_half = half_sum_sq[m] / (n / 2).max(1) as f64;
            // Heavy-tail guard: a finite-variance integrand keeps the sample
            // second moment stable under doubling.
            if n >= 64 && m2_full > 4.0 * m2_half && m2_full > 1e-12 {
                return Err(Error::VarianceUnstable {
                    context: format!(
                        "second moment {m2_full:.3e} vs {m2_half:.3e} at half the sample"
                    ),
                });
            }
            total[m] += mean[m];
            var[m] += m2c[m] / (n as f64 * n as f64);
        }
    }
    Ok((total, var))
}

/// Apply the full generator to a test function at `(x, k)`.
///
/// The diffusion, drift, and switching terms are exact; the kernel integral
/// is a Monte Carlo estimate against the dominating sampler with its standard
/// error reported.
pub fn generator_apply(
    spec: &ModelSpec,
    f: &TestFunction,
    x: &State,
    k: Regime,
    quad: QuadratureConfig,
    seed: u64,
) -> Result<GeneratorValue> {
    let mut rng = stream_rng(seed, 0);
    generator_apply_with(spec, f, x, k, quad, &mut rng)
}

/// As [`generator_apply`], drawing kernel samples from a caller-owned stream.
pub fn generator_apply_with(
    spec: &ModelSpec,
    f: &TestFunction,
    x: &State,
    k: Regime,
    quad: QuadratureConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratorValue> {
    let grad = (f.gradient)(x, k);
    let hess = (f.hessian)(x, k);
    let a = spec.diffusion(x, k);
    let mut value = 0.5 * (&a * &hess).trace() + (spec.drift)(x, k).dot(&grad);

    let fx = (f.value)(x, k);
    let eps0 = spec.comp_radius;
    let (jump, jump_var) = mc_kernel_integral::<1>(spec, x, k, quad.n_samples, rng, |u| {
        let fu = (f.value)(&(x + u), k);
        let comp = if u.norm() < eps0 { grad.dot(u) } else { 0.0 };
        [fu - fx - comp]
    })?;
    value += jump[0];

    let q = (spec.switching)(x);
    for l in 0..spec.n_regimes {
        if l != k {
            value += q[(k, l)] * ((f.value)(x, l) - fx);
        }
    }

    Ok(GeneratorValue {
        value,
        jump_se: jump_var[0].sqrt(),
    })
}

/// Apply the generator to a whole battery at once, sharing the coefficient
/// evaluations and the kernel sample draws across the battery. Each entry is
/// what [`generator_apply_with`] would return for that function; the shared
/// draws only correlate the estimates, they do not bias them.
pub fn generator_apply_batch(
    spec: &ModelSpec,
    battery: &[&TestFunction],
    x: &State,
    k: Regime,
    quad: QuadratureConfig,
    rng: &mut ChaCha8Rng,
    out: &mut [f64],
) -> Result<()> {
    assert_eq!(battery.len(), out.len());
    let a = spec.diffusion(x, k);
    let b = (spec.drift)(x, k);
    let q = (spec.switching)(x);
    let eps0 = spec.comp_radius;
    let mut values = Vec::with_capacity(battery.len());
    let mut grads = Vec::with_capacity(battery.len());
    for (j, f) in battery.iter().enumerate() {
        let grad = (f.gradient)(x, k);
        let hess = (f.hessian)(x, k);
        let fx = (f.value)(x, k);
        let mut v = 0.5 * (&a * &hess).trace() + b.dot(&grad);
        for l in 0..spec.n_regimes {
            if l != k {
                v += q[(k, l)] * ((f.value)(x, l) - fx);
            }
        }
        out[j] = v;
        values.push(fx);
        grads.push(grad);
    }
    if let Some(kernel) = spec.kernel(k) {
        let mut components: Vec<&ThinnedComponent> = Vec::new();
        if kernel.large.mass > 0.0 {
            components.push(&kernel.large);
        }
        if let Some(small) = &kernel.small {
            if small.component.mass > 0.0 {
                components.push(&small.component);
            }
        }
        for comp in components {
            let n = quad.n_samples.max(1);
            for _ in 0..n {
                let u = (comp.sampler)(rng);
                let r = (comp.accept)(x, k, &u);
                if r == 0.0 {
                    continue;
                }
                let shifted = x + &u;
                let compensate = u.norm() < eps0;
                let w = comp.mass * r / n as f64;
                for (j, f) in battery.iter().enumerate() {
                    let mut term = (f.value)(&shifted, k) - values[j];
                    if compensate {
                        term -= grads[j].dot(&u);
                    }
                    out[j] += w * term;
                }
            }
        }
    }
    Ok(())
}

/// Characteristic exponent of regime `k` frozen at `x`:
///
/// ```text
///   psi(theta) = i<theta,b> - 1/2 <theta, a theta>
///              + ∫ (e^{i<theta,u>} - 1 - i<theta,u> 1{|u|<eps0}) ν(x,k,du)
/// ```
#[derive(Debug, Clone, Copy)]
pub struct LevyExponent {
    pub value: Complex64,
    pub jump_se: f64,
}

pub fn levy_exponent(
    spec: &ModelSpec,
    theta: &State,
    x: &State,
    k: Regime,
    quad: QuadratureConfig,
    seed: u64,
) -> Result<LevyExponent> {
    let mut rng = stream_rng(seed, 0);
    levy_exponent_with(spec, theta, x, k, quad, &mut rng)
}

pub fn levy_exponent_with(
    spec: &ModelSpec,
    theta: &State,
    x: &State,
    k: Regime,
    quad: QuadratureConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LevyExponent> {
    if !theta.iter().all(|t| t.is_finite()) {
        return Err(Error::InvalidArgument("theta must be finite".into()));
    }
    let b = (spec.drift)(x, k);
    let a = spec.diffusion(x, k);
    let drift_part = Complex64::new(0.0, theta.dot(&b));
    let diff_part = Complex64::new(-0.5 * theta.dot(&(&a * theta)), 0.0);

    let eps0 = spec.comp_radius;
    let (jump, jump_var) = mc_kernel_integral::<2>(spec, x, k, quad.n_samples, rng, |u| {
        let phase = theta.dot(u);
        let comp = if u.norm() < eps0 { phase } else { 0.0 };
        [phase.cos() - 1.0, phase.sin() - comp]
    })?;

    Ok(LevyExponent {
        value: drift_part + diff_part + Complex64::new(jump[0], jump[1]),
        jump_se: (jump_var[0] + jump_var[1]).sqrt(),
    })
}

/// Kernel mass of a radius set `{|u| >= radius}` at `(x,k)`, estimated by
/// thinning-weighted Monte Carlo. Exact (zero variance) for kernels whose
/// acceptance is constant over the sampled support.
pub fn kernel_tail_mass(
    spec: &ModelSpec,
    x: &State,
    k: Regime,
    radius: f64,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let (v, var) = mc_kernel_integral::<1>(spec, x, k, n_samples, rng, |u| {
        [if u.norm() >= radius { 1.0 } else { 0.0 }]
    })?;
    Ok((v[0], var[0].sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn diag_sigma(dim: usize, s: f64) -> SigmaFn {
        Box::new(move |_, _| DMatrix::identity(dim, dim) * s)
    }

    fn uniform_reference_q(n: usize) -> SwitchingFn {
        Box::new(move |_| {
            DMatrix::from_fn(n, n, |k, l| if k == l { -((n - 1) as f64) } else { 1.0 })
        })
    }

    fn plain_model(dim: usize, n: usize) -> ModelSpec {
        ModelSpec {
            dim,
            n_regimes: n,
            drift: Box::new(move |_, _| DVector::zeros(dim)),
            sigma: diag_sigma(dim, 1.0),
            kernels: vec![],
            switching: uniform_reference_q(n),
            comp_radius: 1.0,
            lip_const: 1.0,
            rho: Rho::Linear { scale: 1.0 },
            ellipticity: 0.0,
            reflection_modulus: None,
            max_switch_rate: (n.max(2) - 1) as f64,
        }
    }

    #[test]
    fn uniform_reference_matrix_validates() {
        let spec = plain_model(1, 3);
        let report = validate_model(&spec, 64, &Hyperrect::cube(1, 1.0), 7).unwrap();
        assert!(report.pass, "{report:?}");
        let rows = report.items.iter().find(|i| i.name == "row-sums").unwrap();
        assert_eq!(rows.worst, 0.0);
    }

    #[test]
    fn bad_row_sum_is_a_hard_error_naming_the_row() {
        let mut spec = plain_model(1, 2);
        spec.switching = Box::new(|_| DMatrix::from_row_slice(2, 2, &[-1.0, 1.1, 1.0, -1.0]));
        let err = validate_model(&spec, 16, &Hyperrect::cube(1, 1.0), 7).unwrap_err();
        match err {
            Error::RowSumViolation { row, sum, .. } => {
                assert_eq!(row, 0);
                assert!((sum - 0.1).abs() < 1e-12);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn sine_switching_passes_lipschitz_sampling() {
        // Oracle: |sin a - sin b| <= |a - b|, confirmed by a dense grid scan.
        let mut worst = 0.0f64;
        let grid: Vec<f64> = (0..=400).map(|i| -1.0 + 0.005 * i as f64).collect();
        for &a in &grid {
            for &b in &grid {
                if a != b {
                    let ratio = (a.sin() - b.sin()).abs() / (a - b).abs();
                    worst = worst.max(ratio);
                }
            }
        }
        assert!(worst <= 1.0 + 1e-12);

        let mut spec = plain_model(1, 2);
        spec.switching = Box::new(|x| {
            let q = 0.5 * x[0].sin() + 1.0;
            DMatrix::from_row_slice(2, 2, &[-q, q, q, -q])
        });
        spec.lip_const = 1.0;
        spec.max_switch_rate = 1.5;
        let report = validate_model(&spec, 256, &Hyperrect::cube(1, 1.0), 11).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn rejects_degenerate_counts() {
        let mut spec = plain_model(1, 2);
        spec.n_regimes = 0;
        assert!(validate_model(&spec, 8, &Hyperrect::cube(1, 1.0), 1).is_err());
        let mut spec = plain_model(1, 2);
        spec.dim = 0;
        assert!(validate_model(&spec, 8, &Hyperrect::cube(1, 1.0), 1).is_err());
        let mut spec = plain_model(1, 2);
        spec.max_switch_rate = 0.0;
        assert!(validate_model(&spec, 8, &Hyperrect::cube(1, 1.0), 1).is_err());
    }

    #[test]
    fn generator_on_constant_is_exactly_zero() {
        let spec = plain_model(2, 2);
        let f = TestFunction::constant(2, 3.25);
        let g = generator_apply(
            &spec,
            &f,
            &dvector![0.3, -0.4],
            0,
            QuadratureConfig::default(),
            5,
        )
        .unwrap();
        assert_eq!(g.value, 0.0);
        assert_eq!(g.jump_se, 0.0);
    }

    #[test]
    fn generator_on_regime_function_is_switching_term() {
        let spec = plain_model(1, 3);
        let f = TestFunction::regime_only(1, vec![1.0, 4.0, 9.0]);
        let x = dvector![0.2];
        let g = generator_apply(&spec, &f, &x, 0, QuadratureConfig::default(), 5).unwrap();
        // sum_l q_0l (g(l) - g(0)) with unit off-diagonal rates
        let expect = (4.0 - 1.0) + (9.0 - 1.0);
        assert_eq!(g.value, expect);
    }

    #[test]
    fn generator_without_rates_on_regime_function_is_zero() {
        let mut spec = plain_model(1, 3);
        spec.switching = Box::new(|_| DMatrix::zeros(3, 3));
        let f = TestFunction::regime_only(1, vec![1.0, 4.0, 9.0]);
        let g = generator_apply(&spec, &f, &dvector![0.7], 1, QuadratureConfig::default(), 5)
            .unwrap();
        assert_eq!(g.value, 0.0);
    }

    #[test]
    fn generator_on_quadratic_gives_half_trace() {
        let mut spec = plain_model(1, 1);
        spec.switching = Box::new(|_| DMatrix::zeros(1, 1));
        spec.max_switch_rate = 1.0;
        let f = TestFunction {
            value: Box::new(|x, _| x[0] * x[0]),
            gradient: Box::new(|x, _| dvector![2.0 * x[0]]),
            hessian: Box::new(|_, _| DMatrix::from_element(1, 1, 2.0)),
            support_radius: f64::INFINITY,
        };
        let g = generator_apply(&spec, &f, &dvector![1.7], 0, QuadratureConfig::default(), 5)
            .unwrap();
        assert!((g.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exponent_gaussian_case() {
        let spec = plain_model(2, 1);
        let theta = dvector![0.7, -0.3];
        let e = levy_exponent(
            &spec,
            &theta,
            &dvector![0.0, 0.0],
            0,
            QuadratureConfig::default(),
            5,
        )
        .unwrap();
        let expect = -0.5 * theta.norm_squared();
        assert!((e.value.re - expect).abs() < 1e-14);
        assert!(e.value.im.abs() < 1e-14);
    }

    #[test]
    fn exponent_point_mass_kernel() {
        // Finite activity, |u0| >= eps0, sigma = 0, b = 0:
        // psi(theta) = lambda (e^{i theta u0} - 1) exactly, zero variance.
        let lambda = 0.8;
        let u0 = 1.6;
        let mut spec = plain_model(1, 1);
        spec.sigma = diag_sigma(1, 0.0);
        spec.switching = Box::new(|_| DMatrix::zeros(1, 1));
        spec.kernels = vec![LevyKernelSpec {
            large: ThinnedComponent {
                mass: lambda,
                sampler: Box::new(move |_| dvector![u0]),
                accept: Box::new(|_, _, _| 1.0),
            },
            small: None,
            total_bound: lambda,
        }];
        let theta = dvector![0.9];
        let e = levy_exponent(&spec, &theta, &dvector![0.0], 0, QuadratureConfig::default(), 5)
            .unwrap();
        let expect = Complex64::new(
            lambda * ((theta[0] * u0).cos() - 1.0),
            lambda * (theta[0] * u0).sin(),
        );
        assert!((e.value - expect).norm() < 1e-14);
        assert!(e.jump_se < 1e-14);
    }

    #[test]
    fn exponent_vanishes_at_zero() {
        let spec = plain_model(1, 1);
        let e = levy_exponent(
            &spec,
            &dvector![0.0],
            &dvector![0.0],
            0,
            QuadratureConfig::default(),
            5,
        )
        .unwrap();
        assert_eq!(e.value, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn exponent_conjugate_symmetry_same_stream() {
        let lambda = 1.1;
        let mut spec = plain_model(1, 1);
        spec.kernels = vec![LevyKernelSpec {
            large: ThinnedComponent {
                mass: lambda,
                sampler: Box::new(|rng| dvector![1.0 + rng.next_u64() as f64 / u64::MAX as f64]),
                accept: Box::new(|x: &State, _, u: &State| {
                    (0.5 + 0.25 * (x[0] + u[0]).tanh()).clamp(0.0, 1.0)
                }),
            },
            small: None,
            total_bound: lambda,
        }];
        let theta = dvector![0.6];
        let x = dvector![0.4];
        let quad = QuadratureConfig { n_samples: 4096 };
        let plus = levy_exponent(&spec, &theta, &x, 0, quad, 99).unwrap();
        let minus = levy_exponent(&spec, &(-theta), &x, 0, quad, 99).unwrap();
        // Same stream for +theta and -theta: conjugate symmetry is exact
        // sample by sample.
        assert!((plus.value - minus.value.conj()).norm() < 1e-12);
    }

    #[test]
    fn heavy_tailed_kernel_integrand_trips_the_variance_guard() {
        // Pareto(1.2)-sized jumps against a quadratic test function: the
        // thinned integrand has infinite variance, so its sample second
        // moment keeps growing under doubling.
        let mut spec = plain_model(1, 1);
        spec.switching = Box::new(|_| DMatrix::zeros(1, 1));
        spec.kernels = vec![LevyKernelSpec {
            large: ThinnedComponent {
                mass: 1.0,
                sampler: Box::new(|rng| {
                    let u = ((rng.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
                    dvector![1.5 * u.powf(-1.0 / 1.2)]
                }),
                accept: Box::new(|_, _, _| 1.0),
            },
            small: None,
            total_bound: 1.0,
        }];
        let quadratic = TestFunction {
            value: Box::new(|x, _| x[0] * x[0]),
            gradient: Box::new(|x, _| dvector![2.0 * x[0]]),
            hessian: Box::new(|_, _| DMatrix::from_element(1, 1, 2.0)),
            support_radius: f64::INFINITY,
        };
        let mut tripped = 0;
        for seed in 0..20 {
            if matches!(
                generator_apply(
                    &spec,
                    &quadratic,
                    &dvector![0.0],
                    0,
                    QuadratureConfig { n_samples: 4096 },
                    seed,
                ),
                Err(Error::VarianceUnstable { .. })
            ) {
                tripped += 1;
            }
        }
        assert!(tripped > 0, "guard never fired on an infinite-variance integrand");
    }

    #[test]
    fn bump_battery_derivatives_are_consistent() {
        let battery = bump_battery(2, 2);
        let points: Vec<(State, Regime)> = vec![
            (dvector![0.1, 0.2], 0),
            (dvector![-0.5, 0.9], 1),
            (dvector![1.1, -0.4], 0),
        ];
        for f in &battery {
            f.validate_derivatives(&points).unwrap();
        }
    }

    #[test]
    fn generator_is_linear_in_f() {
        let mut spec = plain_model(1, 2);
        spec.kernels = vec![
            LevyKernelSpec {
                large: ThinnedComponent {
                    mass: 0.9,
                    sampler: Box::new(|rng| {
                        dvector![1.0 + (rng.next_u64() as f64 / u64::MAX as f64)]
                    }),
                    accept: Box::new(|x: &State, _, _: &State| 0.5 + 0.4 * x[0].tanh()),
                },
                small: None,
                total_bound: 1.0,
            },
            LevyKernelSpec::none(1),
        ];
        let bump_a = || TestFunction::bump(dvector![0.0], 2.0, vec![1.0, 0.4]);
        let bump_b = || TestFunction::bump(dvector![0.6], 1.5, vec![0.7, 1.0]);
        let x = dvector![0.25];
        let quad = QuadratureConfig { n_samples: 2048 };
        let (alpha, beta) = (1.7, -0.6);
        let (ca, cb) = (bump_a(), bump_b());
        let (ga_, gb_) = (bump_a(), bump_b());
        let (ha, hb) = (bump_a(), bump_b());
        let combo = TestFunction {
            value: Box::new(move |x, k| alpha * (ca.value)(x, k) + beta * (cb.value)(x, k)),
            gradient: Box::new(move |x, k| {
                (ga_.gradient)(x, k) * alpha + (gb_.gradient)(x, k) * beta
            }),
            hessian: Box::new(move |x, k| (ha.hessian)(x, k) * alpha + (hb.hessian)(x, k) * beta),
            support_radius: 3.0,
        };
        // Same seed: the kernel samples coincide, so linearity is exact up to
        // rounding.
        let ga = generator_apply(&spec, &bump_a(), &x, 0, quad, 31).unwrap();
        let gb = generator_apply(&spec, &bump_b(), &x, 0, quad, 31).unwrap();
        let gc = generator_apply(&spec, &combo, &x, 0, quad, 31).unwrap();
        assert!((gc.value - (alpha * ga.value + beta * gb.value)).abs() < 1e-10);
    }
}
