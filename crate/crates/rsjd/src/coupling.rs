//! Couplings of two copies of a single-regime process and the analytic
//! contraction bounds they realize.
//!
//! Synchronous coupling drives both copies with one Gaussian increment and
//! one thinned jump stream split into common and marginal parts (a candidate
//! `u` with acceptance ratios `r(x)`, `r(z)` jumps both copies with
//! probability `min`, and only the copy with the larger ratio on the excess).
//! Under the coarse coefficient modulus `rho` this gives the mean-distance
//! bound `E|X_t - Z_t| <= G^{-1}(G(|x-z|) + 3 H t)` with
//! `G(r) = ∫_1^r ds/rho(s)`.
//!
//! Reflection coupling splits each copy's noise into an isotropic part of
//! variance `lambda0` (mirrored across the hyperplane orthogonal to `x - z`
//! for the second copy) and a shared part driven by the positive-semidefinite
//! square root of `a - lambda0 I`. Under a vanishing continuity modulus this
//! contracts `F(|x-z|) = |x-z|/(1+|x-z|)` at rate `kappa` below a radius
//! `delta`, giving the coupling-time tail `P(T > t) <= (1/(t kappa) +
//! 1/F(delta)) F(|x-z|)`.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Rho};
use crate::rng::ensemble_map;
use crate::stats::MCEstimate;
use crate::{Matrix, Regime, State};

/// Which coupling drives a paired simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingKind {
    Synchronous,
    Reflection,
}

/// Paired trajectory; after the coupling time the copies are glued and
/// evolve as one path.
#[derive(Debug, Clone)]
pub struct CoupledPath {
    dim: usize,
    times: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    glued: Vec<bool>,
    pub coupling_time: Option<f64>,
}

impl CoupledPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn x_slice(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn z_slice(&self, i: usize) -> &[f64] {
        &self.z[i * self.dim..(i + 1) * self.dim]
    }

    pub fn x_state(&self, i: usize) -> State {
        DVector::from_column_slice(self.x_slice(i))
    }

    pub fn z_state(&self, i: usize) -> State {
        DVector::from_column_slice(self.z_slice(i))
    }

    pub fn glued(&self, i: usize) -> bool {
        self.glued[i]
    }

    pub fn distance(&self, i: usize) -> f64 {
        if self.glued[i] {
            return 0.0;
        }
        self.x_slice(i)
            .iter()
            .zip(self.z_slice(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Distance at an arbitrary time (interpolating each copy linearly).
    pub fn distance_at(&self, t: f64) -> f64 {
        let i = match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => return self.distance(i),
            Err(i) => i,
        };
        assert!(i > 0 && i < self.len(), "time {t} outside the coupled path");
        if self.glued[i - 1] && self.glued[i] {
            return 0.0;
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        let mut d2 = 0.0;
        for j in 0..self.dim {
            let a = self.x_slice(i - 1)[j] * (1.0 - w) + self.x_slice(i)[j] * w;
            let b = self.z_slice(i - 1)[j] * (1.0 - w) + self.z_slice(i)[j] * w;
            d2 += (a - b) * (a - b);
        }
        d2.sqrt()
    }
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues slightly
/// negative from rounding are clamped, genuinely negative ones are an error.
pub fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-9 {
            return Err(Error::NotPositiveSemidefinite { eigenvalue: *v });
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * Matrix::from_diagonal(&vals) * q.transpose())
}

struct CoupledStepper<'m> {
    model: &'m ModelSpec,
    k: Regime,
    kind: CouplingKind,
    glue_tol: f64,
    x: State,
    z: State,
    t: f64,
    glued: bool,
    coupling_time: Option<f64>,
    xi: State,
    xi_shared: State,
    path: CoupledPath,
    next_large: f64,
    next_medium: f64,
    anchor_idx: u64,
    h: f64,
}

fn exp_gap(rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    if rate <= 0.0 {
        f64::INFINITY
    } else {
        let e: f64 = rand_distr::Exp1.sample(rng);
        e / rate
    }
}

impl<'m> CoupledStepper<'m> {
    fn new(
        model: &'m ModelSpec,
        k: Regime,
        kind: CouplingKind,
        x0: State,
        z0: State,
        h: f64,
        glue_tol: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dim = model.dim;
        let (large_rate, medium_rate) = match model.kernel(k) {
            Some(kernel) => (
                kernel.large.mass,
                kernel.small.as_ref().map_or(0.0, |s| s.component.mass),
            ),
            None => (0.0, 0.0),
        };
        let mut s = CoupledStepper {
            model,
            k,
            kind,
            glue_tol,
            x: x0,
            z: z0,
            t: 0.0,
            glued: false,
            coupling_time: None,
            xi: DVector::zeros(dim),
            xi_shared: DVector::zeros(dim),
            path: CoupledPath {
                dim,
                times: Vec::new(),
                x: Vec::new(),
                z: Vec::new(),
                glued: Vec::new(),
                coupling_time: None,
            },
            next_large: exp_gap(large_rate, rng),
            next_medium: exp_gap(medium_rate, rng),
            anchor_idx: 1,
            h,
        };
        s.check_glue();
        s.push();
        s
    }

    fn check_glue(&mut self) {
        if !self.glued {
            let d = (&self.x - &self.z).norm();
            if d <= self.glue_tol {
                self.glue_now();
            }
        }
    }

    fn glue_now(&mut self) {
        self.glued = true;
        self.coupling_time.get_or_insert(self.t);
        self.z.copy_from(&self.x);
    }

    fn push(&mut self) {
        self.path.times.push(self.t);
        self.path.x.extend_from_slice(self.x.as_slice());
        self.path.z.extend_from_slice(self.z.as_slice());
        self.path.glued.push(self.glued);
    }

    fn next_nominal(&self) -> f64 {
        self.anchor_idx as f64 * self.h
    }

    fn diffuse(&mut self, t_next: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let dt = t_next - self.t;
        if dt <= 0.0 {
            self.t = t_next;
            return Ok(());
        }
        let sqrt_dt = dt.sqrt();
        let model = self.model;
        let k = self.k;
        for i in 0..model.dim {
            self.xi[i] = StandardNormal.sample(rng);
        }
        if self.glued {
            let b = model.effective_drift(&self.x, k);
            let sig = (model.sigma)(&self.x, k);
            self.x.axpy(dt, &b, 1.0);
            let mut noise = DVector::zeros(model.dim);
            noise.gemv(sqrt_dt, &sig, &self.xi, 0.0);
            self.x += &noise;
            self.apply_substitution(dt, true, rng)?;
            self.z.copy_from(&self.x);
        } else {
            match self.kind {
                CouplingKind::Synchronous => {
                    let bx = model.effective_drift(&self.x, k);
                    let bz = model.effective_drift(&self.z, k);
                    let sx = (model.sigma)(&self.x, k);
                    let sz = (model.sigma)(&self.z, k);
                    let mut noise = DVector::zeros(model.dim);
                    self.x.axpy(dt, &bx, 1.0);
                    noise.gemv(sqrt_dt, &sx, &self.xi, 0.0);
                    self.x += &noise;
                    self.z.axpy(dt, &bz, 1.0);
                    noise.gemv(sqrt_dt, &sz, &self.xi, 0.0);
                    self.z += &noise;
                    self.apply_substitution(dt, false, rng)?;
                }
                CouplingKind::Reflection => {
                    let lam = model.ellipticity;
                    let sqrt_lam = lam.sqrt();
                    for i in 0..model.dim {
                        self.xi_shared[i] = StandardNormal.sample(rng);
                    }
                    let diff = &self.x - &self.z;
                    let dist = diff.norm();
                    let e = &diff / dist;
                    // mirrored isotropic draw for the second copy
                    let reflected = &self.xi - &e * (2.0 * e.dot(&self.xi));
                    let bx = model.effective_drift(&self.x, k);
                    let bz = model.effective_drift(&self.z, k);
                    let ax = model.diffusion(&self.x, k)
                        - Matrix::identity(model.dim, model.dim) * lam;
                    let az = model.diffusion(&self.z, k)
                        - Matrix::identity(model.dim, model.dim) * lam;
                    let slx = psd_sqrt(&ax)?;
                    let slz = psd_sqrt(&az)?;
                    let mut noise = DVector::zeros(model.dim);
                    let x_old = if model.dim == 1 { self.x[0] - self.z[0] } else { 0.0 };
                    self.x.axpy(dt, &bx, 1.0);
                    self.x.axpy(sqrt_lam * sqrt_dt, &self.xi, 1.0);
                    noise.gemv(sqrt_dt, &slx, &self.xi_shared, 0.0);
                    self.x += &noise;
                    self.z.axpy(dt, &bz, 1.0);
                    self.z.axpy(sqrt_lam * sqrt_dt, &reflected, 1.0);
                    noise.gemv(sqrt_dt, &slz, &self.xi_shared, 0.0);
                    self.z += &noise;
                    self.apply_substitution(dt, false, rng)?;
                    // One-dimensional first-passage correction: the scalar
                    // difference is a diffusion between events, so a sign
                    // change or a Brownian-bridge excursion below zero marks
                    // the exact meeting time that discrete monitoring misses.
                    if model.dim == 1 && !self.glued {
                        let d_new = self.x[0] - self.z[0];
                        let var_rate = 4.0 * lam + (slx[(0, 0)] - slz[(0, 0)]).powi(2);
                        let crossed = x_old * d_new <= 0.0 || {
                            let p = (-2.0 * x_old * d_new / (var_rate * dt)).exp();
                            let w: f64 = rng.random();
                            w < p
                        };
                        if crossed {
                            let frac = x_old.abs() / (x_old.abs() + d_new.abs()).max(1e-300);
                            self.t += frac * dt;
                            self.glue_now();
                            self.t = t_next;
                            if !self.x.iter().all(|v| v.is_finite()) {
                                return Err(Error::NonFiniteState { t: t_next });
                            }
                            self.advance_grid();
                            return Ok(());
                        }
                    }
                }
            }
        }
        if !self.x.iter().all(|v| v.is_finite()) || !self.z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { t: t_next });
        }
        self.t = t_next;
        self.advance_grid();
        self.check_glue();
        Ok(())
    }

    fn advance_grid(&mut self) {
        while self.next_nominal() <= self.t {
            self.anchor_idx += 1;
        }
    }

    /// Shared Gaussian substitution of the dropped sub-truncation jumps: one
    /// draw drives both copies through their own covariance factors.
    fn apply_substitution(
        &mut self,
        dt: f64,
        x_only: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let model = self.model;
        let cov_fn = match model
            .kernel(self.k)
            .and_then(|kr| kr.small.as_ref())
            .and_then(|s| s.gaussian_substitution.as_ref())
        {
            Some(f) => f,
            None => return Ok(()),
        };
        let dim = model.dim;
        let mut draw = DVector::zeros(dim);
        for i in 0..dim {
            draw[i] = StandardNormal.sample(rng);
        }
        let k = self.k;
        let factor = |at: &State| -> Result<Matrix> {
            let cov = cov_fn(at, k) * dt;
            cov.cholesky().map(|c| c.l()).ok_or_else(|| {
                Error::InvalidModel(
                    "small-jump substitution covariance is not positive definite".into(),
                )
            })
        };
        let mut noise = DVector::zeros(dim);
        let lx = factor(&self.x)?;
        noise.gemv(1.0, &lx, &draw, 0.0);
        self.x += &noise;
        if !x_only {
            let lz = factor(&self.z)?;
            noise.gemv(1.0, &lz, &draw, 0.0);
            self.z += &noise;
        }
        Ok(())
    }

    fn process_due_jumps(&mut self, rng: &mut ChaCha8Rng) {
        let model = self.model;
        let k = self.k;
        loop {
            let (due_large, due_medium) = (self.next_large <= self.t, self.next_medium <= self.t);
            if !due_large && !due_medium {
                break;
            }
            let kernel = model.kernel(k).expect("clock implies kernel");
            let comp = if due_large {
                &kernel.large
            } else {
                &kernel.small.as_ref().expect("medium clock").component
            };
            let u = (comp.sampler)(rng);
            let v: f64 = rng.random();
            let rx = (comp.accept)(&self.x, k, &u);
            let rz = if self.glued {
                rx
            } else {
                (comp.accept)(&self.z, k, &u)
            };
            let common = rx.min(rz);
            if v < common {
                self.x += &u;
                self.z += &u;
            } else if v < rx {
                self.x += &u;
            } else if v < rz {
                self.z += &u;
            }
            let rate = comp.mass;
            if due_large {
                self.next_large = self.t + exp_gap(rate, rng);
            } else {
                self.next_medium = self.t + exp_gap(rate, rng);
            }
            self.check_glue();
        }
    }

    fn run(mut self, horizon: f64, rng: &mut ChaCha8Rng) -> Result<CoupledPath> {
        while self.t < horizon {
            let t_next = self
                .next_nominal()
                .min(self.next_large)
                .min(self.next_medium)
                .min(horizon);
            self.diffuse(t_next, rng)?;
            self.process_due_jumps(rng);
            self.push();
        }
        self.path.coupling_time = self.coupling_time;
        Ok(self.path)
    }
}

fn default_glue_tol(x0: &State, z0: &State) -> f64 {
    1e-6 * (x0 - z0).norm()
}

fn check_pair(model: &ModelSpec, k: Regime, x0: &State, z0: &State, h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument("step h must be positive".into()));
    }
    if x0.len() != model.dim || z0.len() != model.dim {
        return Err(Error::InvalidArgument(
            "start points must match the model dimension".into(),
        ));
    }
    if k >= model.n_regimes {
        return Err(Error::InvalidArgument("regime out of range".into()));
    }
    Ok(())
}

/// Synchronous coupling: shared Gaussian increment, shared jump stream with
/// common/marginal thinning split.
pub fn couple_synchronous(
    model: &ModelSpec,
    k: Regime,
    x0: State,
    z0: State,
    horizon: f64,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CoupledPath> {
    check_pair(model, k, &x0, &z0, h)?;
    let tol = default_glue_tol(&x0, &z0);
    let stepper = CoupledStepper::new(model, k, CouplingKind::Synchronous, x0, z0, h, tol, rng);
    stepper.run(horizon, rng)
}

/// Reflection coupling under uniform ellipticity: the isotropic noise part of
/// the second copy is mirrored across the hyperplane orthogonal to `x - z`,
/// the residual part is shared, jumps as in the synchronous coupling. Once
/// `|x - z| <= glue_tol` (or, in one dimension, once the scalar difference
/// hits zero between grid points) the copies are glued and evolve together.
pub fn couple_reflection(
    model: &ModelSpec,
    k: Regime,
    x0: State,
    z0: State,
    horizon: f64,
    h: f64,
    glue_tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CoupledPath> {
    check_pair(model, k, &x0, &z0, h)?;
    if !(model.ellipticity > 0.0) {
        return Err(Error::InvalidArgument(
            "reflection coupling needs a positive ellipticity floor".into(),
        ));
    }
    // Validate the residual square root at both start points before running.
    let id = Matrix::identity(model.dim, model.dim) * model.ellipticity;
    psd_sqrt(&(model.diffusion(&x0, k) - &id))?;
    psd_sqrt(&(model.diffusion(&z0, k) - &id))?;
    let stepper = CoupledStepper::new(model, k, CouplingKind::Reflection, x0, z0, h, glue_tol, rng);
    stepper.run(horizon, rng)
}

/// Run a coupling by kind with its default gluing threshold.
pub fn couple(
    model: &ModelSpec,
    k: Regime,
    kind: CouplingKind,
    x0: State,
    z0: State,
    horizon: f64,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CoupledPath> {
    match kind {
        CouplingKind::Synchronous => couple_synchronous(model, k, x0, z0, horizon, h, rng),
        CouplingKind::Reflection => {
            let tol = default_glue_tol(&x0, &z0);
            couple_reflection(model, k, x0, z0, horizon, h, tol, rng)
        }
    }
}

// ---------------------------------------------------------------------------
// Distance transform and analytic bounds
// ---------------------------------------------------------------------------

/// The increasing distance transform `G(r) = ∫_1^r ds/rho(s)` and its
/// inverse. Closed forms for the built-in moduli, adaptive quadrature plus
/// monotone bisection otherwise.
pub struct DistanceTransform {
    rho: Rho,
}

/// Build the pair `(G, G^{-1})` for a modulus.
pub fn g_machinery(rho: &Rho) -> DistanceTransform {
    DistanceTransform { rho: rho.clone() }
}

impl DistanceTransform {
    pub fn g(&self, r: f64) -> f64 {
        assert!(r > 0.0, "G is defined on (0, inf)");
        match &self.rho {
            Rho::Linear { scale } => r.ln() / scale,
            Rho::LogLinear => {
                let knee = (-1.0f64).exp();
                let e = 1.0f64.exp();
                if r >= knee {
                    e * (r - 1.0)
                } else {
                    (1.0 - e) - (1.0 / r).ln().ln()
                }
            }
            Rho::Custom(_) => self.integrate(r),
        }
    }

    pub fn g_inv(&self, y: f64) -> f64 {
        match &self.rho {
            Rho::Linear { scale } => (scale * y).exp(),
            Rho::LogLinear => {
                let e = 1.0f64.exp();
                let y_knee = 1.0 - e;
                if y >= y_knee {
                    1.0 + y / e
                } else {
                    (-((y_knee - y).exp())).exp()
                }
            }
            Rho::Custom(_) => self.invert(y),
        }
    }

    fn integrate(&self, r: f64) -> f64 {
        let f = |s: f64| {
            let v = self.rho.eval(s);
            assert!(v > 0.0, "modulus must be positive on the integration range");
            1.0 / v
        };
        if (r - 1.0).abs() < 1e-300 {
            return 0.0;
        }
        let (a, b, sign) = if r > 1.0 { (1.0, r, 1.0) } else { (r, 1.0, -1.0) };
        sign * adaptive_simpson(&f, a, b, 1e-12, 50)
    }

    fn invert(&self, y: f64) -> f64 {
        // G is increasing; bracket then bisect.
        let mut lo = 1.0f64;
        let mut hi = 1.0f64;
        if y >= 0.0 {
            while self.g(hi) < y {
                hi *= 2.0;
                if hi > 1e12 {
                    return hi;
                }
            }
            lo = hi / 2.0;
        } else {
            while self.g(lo) > y {
                lo /= 4.0;
                if lo < 1e-300 {
                    return 0.0;
                }
            }
            hi = lo * 4.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.g(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
            if (hi - lo) <= 1e-13 * hi.max(1.0) {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
    }
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let left = simpson(f, a, m);
        let right = simpson(f, m, b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol * (1.0 + whole.abs()) {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, right, tol / 2.0, depth - 1)
        }
    }
    recurse(f, a, b, simpson(f, a, b), tol, depth)
}

/// Mean-distance bound `G^{-1}(G(r0) + 3 H t)`; zero at coincidence.
pub fn wasserstein_bound(rho: &Rho, lip_const: f64, r0: f64, t: f64) -> f64 {
    if r0 <= 0.0 {
        return 0.0;
    }
    let gm = g_machinery(rho);
    gm.g_inv(gm.g(r0) + 3.0 * lip_const * t)
}

/// Contraction rate and radius of the reflection coupling.
#[derive(Debug, Clone, Copy)]
pub struct ContractionParams {
    pub kappa: f64,
    pub delta: f64,
    pub delta0: f64,
}

/// `F(r) = r/(1+r)`, the bounded concave distance used by the coupling-time
/// estimate.
pub fn f_bounded(r: f64) -> f64 {
    r / (1.0 + r)
}

/// Find the largest radius `delta <= delta0` on a grid where the modulus
/// perturbation `2 H theta(r)` stays below half the ellipticity margin
/// `4 lambda0/(1+delta0)^3`, and the worst-case contraction rate `kappa` on
/// `(0, delta]`.
pub fn contraction_params(model: &ModelSpec, k: Regime) -> Result<ContractionParams> {
    if !(model.ellipticity > 0.0) {
        return Err(Error::InvalidArgument(
            "contraction parameters need a positive ellipticity floor".into(),
        ));
    }
    let modulus = model.reflection_modulus.as_ref().ok_or_else(|| {
        Error::InvalidArgument("contraction parameters need a continuity modulus".into())
    })?;
    if k >= model.n_regimes {
        return Err(Error::InvalidArgument("regime out of range".into()));
    }
    // The residual square root must exist for the coupling to run at all.
    let origin = DVector::zeros(model.dim);
    let id = Matrix::identity(model.dim, model.dim) * model.ellipticity;
    psd_sqrt(&(model.diffusion(&origin, k) - &id))?;

    let delta0 = modulus.delta0;
    let base = 4.0 * model.ellipticity / (1.0 + delta0).powi(3);
    let n_grid = 1000usize;
    let mut delta = None;
    for i in (1..=n_grid).rev() {
        let r = delta0 * i as f64 / n_grid as f64;
        if 2.0 * model.lip_const * (modulus.theta)(r) <= base / 2.0 {
            delta = Some(r);
            break;
        }
    }
    let delta = delta.ok_or(Error::NoContractionRadius { delta0 })?;
    let mut worst_theta = 0.0f64;
    for i in 1..=n_grid {
        let r = delta0 * i as f64 / n_grid as f64;
        if r > delta {
            break;
        }
        worst_theta = worst_theta.max((modulus.theta)(r));
    }
    let kappa = base - 2.0 * model.lip_const * worst_theta;
    Ok(ContractionParams {
        kappa,
        delta,
        delta0,
    })
}

/// Coupling-time tail bound `min(1, (1/(t kappa) + 1/F(delta)) F(r0))`.
pub fn coupling_tail_bound(params: &ContractionParams, r0: f64, t: f64) -> f64 {
    assert!(t > 0.0, "tail bound needs t > 0");
    if r0 <= 0.0 {
        return 0.0;
    }
    let raw = (1.0 / (t * params.kappa) + 1.0 / f_bounded(params.delta)) * f_bounded(r0);
    raw.min(1.0)
}

/// Ensemble mean of `|X(t) - Z(t)|` at each grid time.
pub fn empirical_mean_distance(
    model: &ModelSpec,
    k: Regime,
    x0: &State,
    z0: &State,
    t_grid: &[f64],
    n_paths: usize,
    kind: CouplingKind,
    h: f64,
    seed: u64,
) -> Result<Vec<MCEstimate>> {
    if n_paths < 100 {
        return Err(Error::InvalidArgument(
            "empirical distance curves need at least 100 paths".into(),
        ));
    }
    let horizon = t_grid.iter().cloned().fold(0.0f64, f64::max);
    let rows: Vec<Result<Vec<f64>>> = ensemble_map(n_paths, seed, |_, mut rng| {
        let cp = couple(model, k, kind, x0.clone(), z0.clone(), horizon, h, &mut rng)?;
        Ok(t_grid.iter().map(|&t| cp.distance_at(t)).collect())
    });
    let mut per_t: Vec<Vec<f64>> = vec![Vec::with_capacity(n_paths); t_grid.len()];
    for row in rows {
        let row = row?;
        for (j, v) in row.into_iter().enumerate() {
            per_t[j].push(v);
        }
    }
    Ok(per_t
        .into_iter()
        .map(|samples| MCEstimate::from_samples(&samples, seed))
        .collect())
}

/// Ensemble survival curve of the coupling time, `P(T > t)` at each grid time.
pub fn empirical_coupling_tail(
    model: &ModelSpec,
    k: Regime,
    x0: &State,
    z0: &State,
    t_grid: &[f64],
    n_paths: usize,
    glue_tol: f64,
    h: f64,
    seed: u64,
) -> Result<Vec<MCEstimate>> {
    let horizon = t_grid.iter().cloned().fold(0.0f64, f64::max);
    let rows: Vec<Result<Vec<f64>>> = ensemble_map(n_paths, seed, |_, mut rng| {
        let cp = couple_reflection(
            model,
            k,
            x0.clone(),
            z0.clone(),
            horizon,
            h,
            glue_tol,
            &mut rng,
        )?;
        let t_c = cp.coupling_time.unwrap_or(f64::INFINITY);
        Ok(t_grid
            .iter()
            .map(|&t| if t_c > t { 1.0 } else { 0.0 })
            .collect())
    });
    let mut per_t: Vec<Vec<f64>> = vec![Vec::with_capacity(n_paths); t_grid.len()];
    for row in rows {
        let row = row?;
        for (j, v) in row.into_iter().enumerate() {
            per_t[j].push(v);
        }
    }
    Ok(per_t
        .into_iter()
        .map(|samples| MCEstimate::from_samples(&samples, seed))
        .collect())
}

/// Sensitivity of the empirical coupling-time tail to the gluing threshold:
/// the largest change of `P(T > t)` over the grid when `glue_tol` is scaled
/// by ten. Discrete-time gluing is a surrogate for an exact meeting time, so
/// harness outputs report this alongside the curves.
#[allow(clippy::too_many_arguments)]
pub fn glue_tol_sensitivity(
    model: &ModelSpec,
    k: Regime,
    x0: &State,
    z0: &State,
    t_grid: &[f64],
    n_paths: usize,
    glue_tol: f64,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let base = empirical_coupling_tail(model, k, x0, z0, t_grid, n_paths, glue_tol, h, seed)?;
    let wide =
        empirical_coupling_tail(model, k, x0, z0, t_grid, n_paths, glue_tol * 10.0, h, seed)?;
    Ok(base
        .iter()
        .zip(&wide)
        .map(|(a, b)| (a.value - b.value).abs())
        .fold(0.0, f64::max))
}

/// Smallest eigenvalue of the assembled joint diffusion matrix of the
/// reflection coupling at `(x, z)`; the coupling is well posed when this is
/// nonnegative (up to rounding).
pub fn joint_diffusion_min_eigenvalue(
    model: &ModelSpec,
    k: Regime,
    x: &State,
    z: &State,
) -> Result<f64> {
    let d = model.dim;
    let lam = model.ellipticity;
    let ax = model.diffusion(x, k);
    let az = model.diffusion(z, k);
    let id = Matrix::identity(d, d) * lam;
    let slx = psd_sqrt(&(&ax - &id))?;
    let slz = psd_sqrt(&(&az - &id))?;
    let diff = x - z;
    let dist = diff.norm();
    if dist == 0.0 {
        return Err(Error::InvalidArgument(
            "joint matrix is undefined at coincident points".into(),
        ));
    }
    let e = diff / dist;
    let reflect = Matrix::identity(d, d) - &e * e.transpose() * 2.0;
    let cross = reflect * lam + &slx * slz.transpose();
    let mut joint = Matrix::zeros(2 * d, 2 * d);
    joint.view_mut((0, 0), (d, d)).copy_from(&ax);
    joint.view_mut((0, d), (d, d)).copy_from(&cross);
    joint.view_mut((d, 0), (d, d)).copy_from(&cross.transpose());
    joint.view_mut((d, d), (d, d)).copy_from(&az);
    let eig = ((joint.clone() + joint.transpose()) * 0.5).symmetric_eigen();
    Ok(eig.eigenvalues.min())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LevyKernelSpec, ReflectionModulus, ThinnedComponent};
    use crate::rng::stream_rng;
    use crate::stats::std_normal_cdf;
    use nalgebra::{dvector, DMatrix};

    fn single_regime_model(sigma: f64) -> ModelSpec {
        ModelSpec {
            dim: 1,
            n_regimes: 1,
            drift: Box::new(|_, _| dvector![0.0]),
            sigma: Box::new(move |_, _| DMatrix::from_element(1, 1, sigma)),
            kernels: vec![],
            switching: Box::new(|_| DMatrix::zeros(1, 1)),
            comp_radius: 1.0,
            lip_const: 1.0,
            rho: Rho::Linear { scale: 1.0 },
            ellipticity: 0.0,
            reflection_modulus: None,
            max_switch_rate: 1.0,
        }
    }

    #[test]
    fn synchronous_equal_starts_glue_immediately() {
        let model = single_regime_model(1.0);
        let mut rng = stream_rng(1, 0);
        let cp = couple_synchronous(
            &model,
            0,
            dvector![0.4],
            dvector![0.4],
            1.0,
            0.01,
            &mut rng,
        )
        .unwrap();
        assert_eq!(cp.coupling_time, Some(0.0));
        for i in 0..cp.len() {
            assert_eq!(cp.distance(i), 0.0);
        }
    }

    #[test]
    fn synchronous_constant_sigma_keeps_difference() {
        let model = single_regime_model(1.0);
        let mut rng = stream_rng(2, 0);
        let cp = couple_synchronous(
            &model,
            0,
            dvector![1.0],
            dvector![0.25],
            1.0,
            0.001,
            &mut rng,
        )
        .unwrap();
        for i in 0..cp.len() {
            assert!((cp.distance(i) - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn synchronous_state_independent_jumps_are_common() {
        let mut model = single_regime_model(1.0);
        model.kernels = vec![LevyKernelSpec {
            large: ThinnedComponent {
                mass: 3.0,
                sampler: Box::new(|rng| {
                    dvector![1.0 + rng.next_u64() as f64 / u64::MAX as f64]
                }),
                accept: Box::new(|_, _, _| 0.8),
            },
            small: None,
            total_bound: 3.0,
        }];
        let mut rng = stream_rng(3, 0);
        let cp = couple_synchronous(
            &model,
            0,
            dvector![0.5],
            dvector![-0.5],
            2.0,
            0.01,
            &mut rng,
        )
        .unwrap();
        for i in 0..cp.len() {
            assert!((cp.distance(i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_medium_jumps_and_substitution_cancel_in_the_difference() {
        // State-independent compensated kernel plus a shared Gaussian
        // substitution draw: every increment is common, so the synchronous
        // difference stays put.
        let mut model = single_regime_model(0.0);
        model.kernels = vec![LevyKernelSpec {
            large: ThinnedComponent::none(1),
            small: Some(crate::model::SmallJumpPart {
                delta_small: 0.5,
                component: ThinnedComponent {
                    mass: 1.5,
                    sampler: Box::new(|rng| {
                        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                        dvector![0.5 + 0.5 * u]
                    }),
                    accept: Box::new(|_, _, _| 1.0),
                },
                second_moment: Box::new(|_, _| 0.0),
                compensator_mean: Box::new(|_, _| dvector![1.5 * 0.75]),
                gaussian_substitution: Some(Box::new(|_: &State, _| {
                    DMatrix::from_element(1, 1, 0.3)
                })),
            }),
            total_bound: 1.5,
        }];
        let mut rng = stream_rng(8, 0);
        let cp = couple_synchronous(
            &model,
            0,
            dvector![0.9],
            dvector![0.1],
            1.5,
            0.01,
            &mut rng,
        )
        .unwrap();
        for i in 0..cp.len() {
            assert!((cp.distance(i) - 0.8).abs() < 1e-12, "step {i}: {}", cp.distance(i));
        }
    }

    #[test]
    fn reflection_unit_diffusion_survival_matches_reflection_principle() {
        let mut model = single_regime_model(1.0);
        model.ellipticity = 1.0;
        let r0 = 0.5;
        let t = 0.5;
        let est = crate::rng::ensemble_mean(20_000, 7, |_, mut rng| {
            let cp = couple_reflection(
                &model,
                0,
                dvector![r0],
                dvector![0.0],
                t,
                0.002,
                1e-9,
                &mut rng,
            )
            .unwrap();
            match cp.coupling_time {
                Some(tc) if tc <= t => 0.0,
                _ => 1.0,
            }
        });
        let expect = 2.0 * std_normal_cdf(r0 / (2.0 * t.sqrt())) - 1.0;
        assert!(
            (est.value - expect).abs() <= 3.0 * est.se,
            "survival {} +- {} vs {}",
            est.value,
            est.se,
            expect
        );
    }

    #[test]
    fn reflection_glued_pair_stays_glued() {
        let mut model = single_regime_model(1.0);
        model.ellipticity = 1.0;
        let mut rng = stream_rng(5, 0);
        let cp = couple_reflection(
            &model,
            0,
            dvector![0.05],
            dvector![0.0],
            2.0,
            0.005,
            1e-9,
            &mut rng,
        )
        .unwrap();
        let tc = cp.coupling_time.expect("couples quickly from 0.05");
        let mut max_after = 0.0f64;
        for i in 0..cp.len() {
            if cp.time(i) >= tc {
                max_after = max_after.max(cp.distance(i));
            }
        }
        assert_eq!(max_after, 0.0);
    }

    #[test]
    fn reflection_rejects_missing_ellipticity() {
        let model = single_regime_model(1.0);
        let mut rng = stream_rng(5, 0);
        let err = couple_reflection(
            &model,
            0,
            dvector![1.0],
            dvector![0.0],
            1.0,
            0.01,
            1e-9,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn psd_sqrt_reports_offending_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        match psd_sqrt(&m) {
            Err(Error::NotPositiveSemidefinite { eigenvalue }) => {
                assert!((eigenvalue + 0.5).abs() < 1e-12)
            }
            other => panic!("expected PSD failure, got {other:?}"),
        }
    }

    #[test]
    fn transform_linear_closed_forms() {
        let gm = g_machinery(&Rho::Linear { scale: 1.0 });
        assert!((gm.g(std::f64::consts::E) - 1.0).abs() < 1e-12);
        assert_eq!(gm.g(1.0), 0.0);
        assert!((gm.g_inv(2.0) - (2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn transform_log_modulus_diverges_at_zero() {
        let gm = g_machinery(&Rho::LogLinear);
        assert_eq!(gm.g(1.0), 0.0);
        assert!(gm.g(1e-8) < -3.0);
        // inverse round trip across the knee
        for &r in &[1e-6, 1e-3, 0.2, 0.5, 1.0, 3.0] {
            let back = gm.g_inv(gm.g(r));
            assert!((back - r).abs() <= 1e-9 * r.max(1.0), "{r} -> {back}");
        }
    }

    #[test]
    fn transform_custom_matches_linear() {
        let gm_num = g_machinery(&Rho::Custom(std::sync::Arc::new(|r| r)));
        let gm_closed = g_machinery(&Rho::Linear { scale: 1.0 });
        for &r in &[0.01, 0.1, 0.7, 1.0, 2.5, 10.0] {
            assert!((gm_num.g(r) - gm_closed.g(r)).abs() < 1e-9);
            let y = gm_closed.g(r);
            assert!((gm_num.g_inv(y) - r).abs() < 1e-9 * r.max(1.0));
        }
    }

    #[test]
    fn wasserstein_bound_cases() {
        let rho = Rho::Linear { scale: 1.0 };
        assert_eq!(wasserstein_bound(&rho, 2.0, 0.0, 1.0), 0.0);
        let b = wasserstein_bound(&rho, 2.0, 0.3, 0.5);
        assert!((b - 0.3 * (3.0f64).exp()).abs() < 1e-12);
        let b0 = wasserstein_bound(&rho, 2.0, 0.3, 0.0);
        assert!((b0 - 0.3).abs() < 1e-12);
    }

    fn elliptic_model(theta: impl Fn(f64) -> f64 + Send + Sync + 'static) -> ModelSpec {
        let mut m = single_regime_model(1.0);
        m.ellipticity = 1.0;
        m.reflection_modulus = Some(ReflectionModulus {
            delta0: 1.0,
            theta: Box::new(theta),
        });
        m
    }

    #[test]
    fn contraction_params_flat_modulus() {
        let model = elliptic_model(|_| 0.0);
        let p = contraction_params(&model, 0).unwrap();
        assert!((p.delta - 1.0).abs() < 1e-12);
        assert!((p.kappa - 0.5).abs() < 1e-12);
    }

    #[test]
    fn contraction_params_linear_modulus() {
        let model = elliptic_model(|r| r);
        let p = contraction_params(&model, 0).unwrap();
        assert!((p.delta - 0.125).abs() < 1e-12, "delta {}", p.delta);
        assert!((p.kappa - 0.25).abs() < 1e-12, "kappa {}", p.kappa);
    }

    #[test]
    fn contraction_params_no_decay_fails() {
        let mut model = elliptic_model(|_| 1.0);
        model.ellipticity = 0.01;
        match contraction_params(&model, 0) {
            Err(Error::NoContractionRadius { .. }) => {}
            other => panic!("expected no contraction radius, got {other:?}"),
        }
    }

    #[test]
    fn tail_bound_arithmetic_and_monotonicity() {
        let p = ContractionParams {
            kappa: 0.25,
            delta: 0.125,
            delta0: 1.0,
        };
        assert_eq!(coupling_tail_bound(&p, 0.0, 1.0), 0.0);
        let v = coupling_tail_bound(&p, 0.01, 1.0);
        let expect: f64 = (1.0 / 0.25 + 1.125 / 0.125) * (0.01 / 1.01);
        assert!((v - expect.min(1.0)).abs() < 1e-12, "{v} vs {expect}");
        let mut prev = 0.0;
        for i in 1..50 {
            let r = i as f64 * 0.05;
            let b = coupling_tail_bound(&p, r, 1.0);
            assert!(b >= prev);
            prev = b;
        }
        let mut prev = f64::INFINITY;
        for i in 1..50 {
            let t = i as f64 * 0.1;
            let b = coupling_tail_bound(&p, 0.3, t);
            assert!(b <= prev + 1e-15);
            prev = b;
        }
    }

    #[test]
    fn mean_distance_zero_at_coincidence_and_linear_decay() {
        let mut model = single_regime_model(1.0);
        model.drift = Box::new(|x, _| -x.clone());
        let grid = [0.25, 0.5, 1.0];
        let zero = empirical_mean_distance(
            &model,
            0,
            &dvector![0.7],
            &dvector![0.7],
            &grid,
            200,
            CouplingKind::Synchronous,
            0.001,
            3,
        )
        .unwrap();
        for e in &zero {
            assert_eq!(e.value, 0.0);
        }
        let r0 = 0.5;
        let curve = empirical_mean_distance(
            &model,
            0,
            &dvector![r0],
            &dvector![0.0],
            &grid,
            200,
            CouplingKind::Synchronous,
            0.001,
            3,
        )
        .unwrap();
        for (e, &t) in curve.iter().zip(&grid) {
            let target = r0 * (-t).exp();
            // The difference ODE is integrated by Euler: allow the first
            // order scheme bias alongside the (here zero) sampling error.
            let allowance = 3.0 * e.se + r0 * t * 0.001 * (-t).exp();
            assert!(
                (e.value - target).abs() <= allowance,
                "t={t}: {} vs {target}",
                e.value
            );
            let bound = wasserstein_bound(&model.rho, model.lip_const, r0, t);
            assert!(e.value <= bound + 3.0 * e.se);
        }
    }

    #[test]
    fn joint_matrix_is_psd_at_sampled_pairs() {
        let mut model = single_regime_model(1.3);
        model.ellipticity = 0.7;
        let ev = joint_diffusion_min_eigenvalue(&model, 0, &dvector![0.4], &dvector![-0.2])
            .unwrap();
        assert!(ev >= -1e-10, "min eigenvalue {ev}");
    }
}
