//! Path simulation for the regime-switching jump diffusion.
//!
//! Two independent routes to the same law:
//!
//! * [`simulate_pieced`]: single-regime segments concatenated at the switch
//!   epochs of the uniform reference chain (holding times Exp(n-1), next
//!   regime uniform on the others). Paths carry the ingredients of the
//!   likelihood ratio that reweights this auxiliary law onto the true one.
//! * [`simulate_direct`]: switches thinned from a dominating Poisson clock of
//!   rate `max_switch_rate`, accepting a candidate at state `x` from regime
//!   `k` to `l` with probability `q_kl(x)/max_switch_rate`.
//!
//! Between switches both use the same Euler scheme with jump events inserted
//! off-grid at their exact exponential clock times; the step containing an
//! event is split so event times are exact and the switch/jump time sets can
//! be compared exactly.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::{Regime, State};

/// Logged path event.
#[derive(Debug, Clone)]
pub enum EventKind {
    Switch { from: Regime, to: Regime },
    /// `large` marks an uncompensated jump (`|u| >= comp_radius`).
    Jump { size: State, large: bool },
}

#[derive(Debug, Clone)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
}

impl Event {
    pub fn is_switch(&self) -> bool {
        matches!(self.kind, EventKind::Switch { .. })
    }
    pub fn is_jump(&self) -> bool {
        matches!(self.kind, EventKind::Jump { .. })
    }
}

/// Event-logged trajectory on an event-refined grid.
///
/// Regimes are piecewise constant: the regime stored at a grid point is the
/// one in force from that time on (cadlag). States stored at jump times are
/// post-jump; the pre-jump left limit is recoverable from the event log.
#[derive(Debug, Clone)]
pub struct RegimePath {
    dim: usize,
    n_regimes: usize,
    times: Vec<f64>,
    /// Row-major states, stride `dim`.
    states: Vec<f64>,
    regimes: Vec<Regime>,
    pub events: Vec<Event>,
    /// Trapezoidal running integral of `q_k(X(s)) - (n_regimes - 1)`, the
    /// exponent rate of the likelihood ratio, at each grid point.
    cum_excess: Vec<f64>,
}

impl RegimePath {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn regime(&self, i: usize) -> Regime {
        self.regimes[i]
    }

    pub fn state_slice(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn state(&self, i: usize) -> State {
        DVector::from_column_slice(self.state_slice(i))
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("path has at least one point")
    }

    /// Terminal state and regime.
    pub fn endpoint(&self) -> (State, Regime) {
        let i = self.len() - 1;
        (self.state(i), self.regimes[i])
    }

    /// State and regime at an arbitrary time (linear interpolation between
    /// grid points, regime of the containing interval's left end).
    pub fn state_at(&self, t: f64) -> (State, Regime) {
        let i = match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => return (self.state(i), self.regimes[i]),
            Err(i) => i,
        };
        assert!(i > 0 && i < self.len(), "time {t} outside the path");
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        let mut x = self.state(i - 1) * (1.0 - w);
        x.axpy(w, &self.state(i), 1.0);
        (x, self.regimes[i - 1])
    }

    /// Running likelihood-exponent integral at time `t` (grid-exact, linear
    /// in between).
    pub fn excess_integral_at(&self, t: f64) -> f64 {
        match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => self.cum_excess[i],
            Err(i) => {
                assert!(i > 0 && i < self.len(), "time {t} outside the path");
                let (t0, t1) = (self.times[i - 1], self.times[i]);
                let w = (t - t0) / (t1 - t0);
                self.cum_excess[i - 1] * (1.0 - w) + self.cum_excess[i] * w
            }
        }
    }

    /// Number of logged jumps up to time `t` whose size satisfies `pred`.
    pub fn jump_count<P: Fn(&State) -> bool>(&self, t: f64, pred: P) -> usize {
        self.events
            .iter()
            .filter(|e| e.time <= t)
            .filter(|e| match &e.kind {
                EventKind::Jump { size, .. } => pred(size),
                _ => false,
            })
            .count()
    }

    pub fn switch_times(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter(|e| e.is_switch())
            .map(|e| e.time)
            .collect()
    }

    pub fn jump_times(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter(|e| e.is_jump())
            .map(|e| e.time)
            .collect()
    }

    /// Trapezoidal path integral of `g(i, t, X(t), Λ(t))` over `[0, t_end]`
    /// using left limits at event times, so the integrand sees the state and
    /// regime in force on each interval. The first argument is the grid index
    /// of the point being evaluated (for aligning external per-point data).
    pub fn integrate_trapezoid<F>(&self, t_end: f64, mut g: F) -> f64
    where
        F: FnMut(usize, f64, &State, Regime) -> f64,
    {
        self.integrate_trapezoid_vec::<1, _>(t_end, |i, t, x, k| [g(i, t, x, k)])[0]
    }

    /// Runtime-width variant of [`Self::integrate_trapezoid_vec`]: the
    /// integrand writes its components into `vals`, and the totals land in
    /// `totals`.
    ///
    /// `stride` coarsens the quadrature for expensive integrands: only every
    /// `stride`-th grid point is evaluated, except that event times and the
    /// endpoints are always evaluated, so the piecewise-smooth structure is
    /// preserved. Along diffusion paths the coarse trapezoid adds a centered
    /// `O(stride * h)` fluctuation (absorbed by Monte Carlo error bands) on
    /// top of an `O((stride * h)^2)` bias.
    pub fn integrate_trapezoid_dyn<F>(
        &self,
        t_end: f64,
        width: usize,
        stride: usize,
        totals: &mut [f64],
        mut g: F,
    ) where
        F: FnMut(usize, f64, &State, Regime, &mut [f64]),
    {
        assert_eq!(totals.len(), width);
        assert!(t_end <= self.horizon() + 1e-12, "t_end beyond path horizon");
        let stride = stride.max(1);
        totals.iter_mut().for_each(|v| *v = 0.0);
        let mut event_idx = 0usize;
        let mut left = self.state(0);
        let mut left_idx = 0usize;
        let mut g_left = vec![0.0; width];
        let mut g_right = vec![0.0; width];
        g(0, self.times[0], &left, self.regimes[0], &mut g_left);
        let mut right = DVector::zeros(self.dim);
        let mut i = 1usize;
        while i < self.len() {
            // Next evaluation point: stride steps ahead, but stop at any
            // event boundary or at the integration end.
            let mut j = (left_idx + stride).min(self.len() - 1);
            while event_idx < self.events.len() && self.events[event_idx].time < self.times[i] {
                event_idx += 1;
            }
            if event_idx < self.events.len() {
                // index of the event time in the grid (events sit on grid
                // points at or after i)
                let ev_t = self.events[event_idx].time;
                if ev_t <= self.times[j] {
                    // find the grid index with this exact time
                    let mut jj = i;
                    while self.times[jj] != ev_t {
                        jj += 1;
                    }
                    j = jj;
                }
            }
            // Also stop at the first grid point at or beyond t_end.
            if self.times[j] >= t_end {
                let mut jj = i;
                while self.times[jj] < t_end {
                    jj += 1;
                }
                j = j.min(jj);
            }
            let k = self.regimes[left_idx];
            let t1 = self.times[j];
            right.copy_from_slice(self.state_slice(j));
            let mut boundary_event = false;
            if event_idx < self.events.len() && self.events[event_idx].time == t1 {
                boundary_event = true;
                if let EventKind::Jump { size, .. } = &self.events[event_idx].kind {
                    right -= size;
                }
            }
            if t1 >= t_end {
                let t0 = self.times[left_idx];
                if t_end > t0 {
                    let w = (t_end - t0) / (t1 - t0);
                    let mut x_end = left.clone() * (1.0 - w);
                    x_end.axpy(w, &right, 1.0);
                    g(j, t_end, &x_end, k, &mut g_right);
                    for m in 0..width {
                        totals[m] += 0.5 * (g_left[m] + g_right[m]) * (t_end - t0);
                    }
                }
                return;
            }
            g(j, t1, &right, k, &mut g_right);
            let dt = t1 - self.times[left_idx];
            for m in 0..width {
                totals[m] += 0.5 * (g_left[m] + g_right[m]) * dt;
            }
            left.copy_from_slice(self.state_slice(j));
            left_idx = j;
            if boundary_event {
                g(j, t1, &left, self.regimes[j], &mut g_left);
                event_idx += 1;
            } else {
                g_left.copy_from_slice(&g_right);
            }
            i = j + 1;
        }
    }

    /// Vector-valued trapezoidal path integral; all components share one
    /// integrand evaluation per grid point, so stochastic integrands (e.g.
    /// sampled kernel integrals) stay consistent across components.
    pub fn integrate_trapezoid_vec<const M: usize, F>(&self, t_end: f64, mut g: F) -> [f64; M]
    where
        F: FnMut(usize, f64, &State, Regime) -> [f64; M],
    {
        let mut total = [0.0f64; M];
        self.integrate_trapezoid_dyn(t_end, M, 1, &mut total, |i, t, x, k, vals| {
            vals.copy_from_slice(&g(i, t, x, k));
        });
        total
    }

    /// Event-log consistency: every regime change on the grid is backed by a
    /// switch event at that exact time and vice versa.
    pub fn event_log_consistent(&self) -> bool {
        let mut switches = self.events.iter().filter(|e| e.is_switch());
        for i in 1..self.len() {
            if self.regimes[i] != self.regimes[i - 1] {
                match switches.next() {
                    Some(Event {
                        time,
                        kind: EventKind::Switch { from, to },
                    }) => {
                        if *time != self.times[i]
                            || *from != self.regimes[i - 1]
                            || *to != self.regimes[i]
                        {
                            return false;
                        }
                    }
                    _ => return false,
                }
            }
        }
        switches.next().is_none()
    }
}

/// Path with its likelihood-ratio weight at the horizon.
#[derive(Debug, Clone)]
pub struct WeightedPath {
    pub path: RegimePath,
    pub weight: f64,
}

/// Switch skeleton of the uniform reference chain.
#[derive(Debug, Clone)]
pub struct RegimeSkeleton {
    pub initial: Regime,
    /// Ordered `(switch time, new regime)` pairs within the horizon.
    pub switches: Vec<(f64, Regime)>,
}

/// Simulate the reference chain: holding times i.i.d. Exp(n-1), next regime
/// uniform on the other `n - 1` states. With one regime the chain never
/// moves (and consumes no randomness).
pub fn simulate_reference_chain(
    n_regimes: usize,
    k0: Regime,
    horizon: f64,
    rng: &mut ChaCha8Rng,
) -> RegimeSkeleton {
    assert!(k0 < n_regimes, "initial regime out of range");
    let mut switches = Vec::new();
    if n_regimes > 1 {
        let rate = (n_regimes - 1) as f64;
        let mut t = 0.0;
        let mut k = k0;
        loop {
            let gap: f64 = Exp1.sample(rng);
            t += gap / rate;
            if t > horizon {
                break;
            }
            let mut pick = rng.random_range(0..n_regimes - 1);
            if pick >= k {
                pick += 1;
            }
            switches.push((t, pick));
            k = pick;
        }
    }
    RegimeSkeleton {
        initial: k0,
        switches,
    }
}

/// Kill-mode selector for the single-regime killed process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillMode {
    /// Exponential alarm against the cumulative hazard; the path is truncated
    /// at the kill time.
    Clock,
    /// Full path with multiplicative survival weight `exp(∫ q_kk ds)`.
    Weight,
}

#[derive(Debug, Clone)]
pub enum KillOutcome {
    /// Clock mode: `Some(kill time)` if the alarm fired before the horizon.
    Clock(Option<f64>),
    /// Weight mode: survival weight in `(0, 1]`.
    Weight(f64),
}

#[derive(Debug, Clone)]
pub struct KilledPath {
    pub path: RegimePath,
    pub outcome: KillOutcome,
    /// Cumulative hazard `∫_0^{t_i} (-q_kk)(X(s)) ds` at each grid point, so
    /// Feynman-Kac functionals can weight the whole trajectory.
    pub cum_hazard: Vec<f64>,
}

impl KilledPath {
    /// Survival indicator (clock) or weight (weight mode).
    pub fn survival_value(&self) -> f64 {
        match &self.outcome {
            KillOutcome::Clock(None) => 1.0,
            KillOutcome::Clock(Some(_)) => 0.0,
            KillOutcome::Weight(w) => *w,
        }
    }
}

// ---------------------------------------------------------------------------
// Stepping engine
// ---------------------------------------------------------------------------

struct JumpClocks {
    next_large: f64,
    next_medium: f64,
}

impl JumpClocks {
    fn draw(model: &ModelSpec, k: Regime, t: f64, rng: &mut ChaCha8Rng) -> Self {
        let (large_rate, medium_rate) = match model.kernel(k) {
            Some(kernel) => (
                kernel.large.mass,
                kernel.small.as_ref().map_or(0.0, |s| s.component.mass),
            ),
            None => (0.0, 0.0),
        };
        JumpClocks {
            next_large: t + exp_gap(large_rate, rng),
            next_medium: t + exp_gap(medium_rate, rng),
        }
    }

    fn next(&self) -> f64 {
        self.next_large.min(self.next_medium)
    }
}

fn exp_gap(rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    if rate <= 0.0 {
        f64::INFINITY
    } else {
        let e: f64 = Exp1.sample(rng);
        e / rate
    }
}

struct PathBuilder {
    dim: usize,
    n_regimes: usize,
    times: Vec<f64>,
    states: Vec<f64>,
    regimes: Vec<Regime>,
    events: Vec<Event>,
    cum_excess: Vec<f64>,
    x: State,
    k: Regime,
    t: f64,
    excess: f64,
    rate_prev: f64,
    // nominal grid: anchor + grid_idx * h is the next unrefined step boundary
    anchor: f64,
    h: f64,
    grid_idx: u64,
    xi: State,
    noise: State,
}

fn excess_rate(model: &ModelSpec, x: &State, k: Regime) -> f64 {
    if model.n_regimes == 1 {
        return 0.0;
    }
    let q = (model.switching)(x);
    model.switch_rate(&q, k) - (model.n_regimes as f64 - 1.0)
}

impl PathBuilder {
    fn new(model: &ModelSpec, x0: State, k0: Regime, t0: f64, h: f64) -> Self {
        let dim = model.dim;
        let rate0 = excess_rate(model, &x0, k0);
        let mut b = PathBuilder {
            dim,
            n_regimes: model.n_regimes,
            times: Vec::new(),
            states: Vec::new(),
            regimes: Vec::new(),
            events: Vec::new(),
            cum_excess: Vec::new(),
            x: x0,
            k: k0,
            t: t0,
            excess: 0.0,
            rate_prev: rate0,
            anchor: t0,
            h,
            grid_idx: 1,
            xi: DVector::zeros(dim),
            noise: DVector::zeros(dim),
        };
        b.push_point();
        b
    }

    fn next_nominal(&self) -> f64 {
        self.anchor + self.grid_idx as f64 * self.h
    }

    fn push_point(&mut self) {
        self.times.push(self.t);
        self.states.extend_from_slice(self.x.as_slice());
        self.regimes.push(self.k);
        self.cum_excess.push(self.excess);
    }

    /// Euler-advance the state to `t_next` and accumulate the likelihood
    /// exponent by trapezoid. The state after this call is the pre-event
    /// value at `t_next`.
    fn advance(&mut self, model: &ModelSpec, t_next: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let dt = t_next - self.t;
        if dt > 0.0 {
            let sqrt_dt = dt.sqrt();
            let b = model.effective_drift(&self.x, self.k);
            let sig = (model.sigma)(&self.x, self.k);
            for i in 0..self.dim {
                self.xi[i] = StandardNormal.sample(rng);
            }
            self.noise.gemv(sqrt_dt, &sig, &self.xi, 0.0);
            self.x.axpy(dt, &b, 1.0);
            self.x += &self.noise;
            if let Some(kernel) = model.kernel(self.k) {
                if let Some(small) = &kernel.small {
                    if let Some(cov_fn) = &small.gaussian_substitution {
                        let cov = cov_fn(&self.x, self.k) * dt;
                        let chol = cov.cholesky().ok_or_else(|| {
                            Error::InvalidModel(
                                "small-jump substitution covariance is not positive definite"
                                    .into(),
                            )
                        })?;
                        for i in 0..self.dim {
                            self.xi[i] = StandardNormal.sample(rng);
                        }
                        self.noise.gemv(1.0, chol.l_dirty(), &self.xi, 0.0);
                        self.x += &self.noise;
                    }
                }
            }
            if !self.x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteState { t: t_next });
            }
            let rate_new = excess_rate(model, &self.x, self.k);
            self.excess += 0.5 * (self.rate_prev + rate_new) * dt;
            self.rate_prev = rate_new;
        }
        self.t = t_next;
        while self.next_nominal() <= self.t {
            self.grid_idx += 1;
        }
        Ok(())
    }

    fn apply_jump(&mut self, model: &ModelSpec, size: State, large: bool) {
        self.x += &size;
        self.rate_prev = excess_rate(model, &self.x, self.k);
        self.events.push(Event {
            time: self.t,
            kind: EventKind::Jump { size, large },
        });
    }

    /// Switch regime at the current time. Must be called right after a
    /// `push_point` at the switch instant: the stored point takes the new
    /// (cadlag) regime.
    fn apply_switch(&mut self, model: &ModelSpec, to: Regime) {
        debug_assert!(to != self.k);
        self.events.push(Event {
            time: self.t,
            kind: EventKind::Switch { from: self.k, to },
        });
        self.k = to;
        *self.regimes.last_mut().expect("switch after a point") = to;
        self.rate_prev = excess_rate(model, &self.x, self.k);
    }

    /// Run the current regime up to `t_end`, inserting thinned jumps at their
    /// exact clock times. Leaves the builder positioned at `t_end` with the
    /// final point pushed.
    ///
    /// With `boundary_is_switch`, a jump candidate tied exactly with `t_end`
    /// (a forced switch epoch) is displaced by redrawing its clock residual,
    /// which keeps switch and jump times disjoint by construction.
    fn run_regime_until(
        &mut self,
        model: &ModelSpec,
        t_end: f64,
        boundary_is_switch: bool,
        clocks: &mut JumpClocks,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        while self.t < t_end {
            let t_next = self.next_nominal().min(clocks.next()).min(t_end);
            self.advance(model, t_next, rng)?;
            if boundary_is_switch && self.t >= t_end {
                if let Some(kernel) = model.kernel(self.k) {
                    if clocks.next_large <= self.t {
                        clocks.next_large = self.t + exp_gap(kernel.large.mass, rng);
                    }
                    if clocks.next_medium <= self.t {
                        let mass = kernel.small.as_ref().map_or(0.0, |s| s.component.mass);
                        clocks.next_medium = self.t + exp_gap(mass, rng);
                    }
                }
            } else {
                self.process_due_jumps(model, clocks, rng);
            }
            self.push_point();
        }
        Ok(())
    }

    fn process_due_jumps(
        &mut self,
        model: &ModelSpec,
        clocks: &mut JumpClocks,
        rng: &mut ChaCha8Rng,
    ) {
        // At most one applied jump per instant: a second clock tied with an
        // already-applied jump time is displaced by redrawing its residual.
        let mut applied = false;
        loop {
            if clocks.next_large <= self.t {
                let kernel = model.kernel(self.k).expect("clock implies kernel");
                if !applied {
                    let u = (kernel.large.sampler)(rng);
                    let v: f64 = rng.random();
                    if v < (kernel.large.accept)(&self.x, self.k, &u) {
                        let large = u.norm() >= model.comp_radius;
                        self.apply_jump(model, u, large);
                        applied = true;
                    }
                }
                clocks.next_large = self.t + exp_gap(kernel.large.mass, rng);
            } else if clocks.next_medium <= self.t {
                let kernel = model.kernel(self.k).expect("clock implies kernel");
                let small = kernel.small.as_ref().expect("clock implies medium part");
                if !applied {
                    let u = (small.component.sampler)(rng);
                    let v: f64 = rng.random();
                    if v < (small.component.accept)(&self.x, self.k, &u) {
                        let large = u.norm() >= model.comp_radius;
                        self.apply_jump(model, u, large);
                        applied = true;
                    }
                }
                clocks.next_medium = self.t + exp_gap(small.component.mass, rng);
            } else {
                break;
            }
        }
    }

    /// Whether a jump event was applied exactly at the current time.
    fn jump_applied_now(&self) -> bool {
        self.events
            .last()
            .is_some_and(|e| e.time == self.t && e.is_jump())
    }

    fn finish(self) -> RegimePath {
        RegimePath {
            dim: self.dim,
            n_regimes: self.n_regimes,
            times: self.times,
            states: self.states,
            regimes: self.regimes,
            events: self.events,
            cum_excess: self.cum_excess,
        }
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument("step h must be positive".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Public simulators
// ---------------------------------------------------------------------------

/// Single-regime segment on `[t0, t1]`: Euler diffusion plus thinned jumps,
/// with the compensator of the simulated-but-compensated medium range folded
/// into the drift.
pub fn simulate_segment(
    model: &ModelSpec,
    k: Regime,
    x0: State,
    t0: f64,
    t1: f64,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RegimePath> {
    check_step(h)?;
    check_start(model, &x0, k)?;
    if !(t0 < t1) {
        return Err(Error::InvalidArgument("need t0 < t1".into()));
    }
    let mut pb = PathBuilder::new(model, x0, k, t0, h);
    let mut clocks = JumpClocks::draw(model, k, t0, rng);
    pb.run_regime_until(model, t1, false, &mut clocks, rng)?;
    Ok(pb.finish())
}

fn check_start(model: &ModelSpec, x0: &State, k: Regime) -> Result<()> {
    if x0.len() != model.dim {
        return Err(Error::InvalidArgument(format!(
            "start point has dimension {}, model has {}",
            x0.len(),
            model.dim
        )));
    }
    if k >= model.n_regimes {
        return Err(Error::InvalidArgument(format!(
            "start regime {k} out of range (model has {} regimes)",
            model.n_regimes
        )));
    }
    Ok(())
}

/// Pieced construction under the auxiliary law: reference-chain switch epochs
/// with single-regime segments in between.
pub fn simulate_pieced(
    model: &ModelSpec,
    x0: State,
    k0: Regime,
    horizon: f64,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RegimePath> {
    check_step(h)?;
    check_start(model, &x0, k0)?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let skeleton = simulate_reference_chain(model.n_regimes, k0, horizon, rng);
    let mut pb = PathBuilder::new(model, x0, k0, 0.0, h);
    let mut clocks = JumpClocks::draw(model, k0, 0.0, rng);
    for &(tau, to) in &skeleton.switches {
        pb.run_regime_until(model, tau, true, &mut clocks, rng)?;
        pb.apply_switch(model, to);
        clocks = JumpClocks::draw(model, to, tau, rng);
    }
    pb.run_regime_until(model, horizon, false, &mut clocks, rng)?;
    Ok(pb.finish())
}

/// Direct simulation of the target law: switch candidates arrive at rate
/// `max_switch_rate` and a candidate at state `x` moves `k -> l` with
/// probability `q_kl(x)/max_switch_rate`.
pub fn simulate_direct(
    model: &ModelSpec,
    x0: State,
    k0: Regime,
    horizon: f64,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RegimePath> {
    check_step(h)?;
    check_start(model, &x0, k0)?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let mut pb = PathBuilder::new(model, x0, k0, 0.0, h);
    let mut clocks = JumpClocks::draw(model, k0, 0.0, rng);
    if model.n_regimes == 1 {
        pb.run_regime_until(model, horizon, false, &mut clocks, rng)?;
        return Ok(pb.finish());
    }
    let qbar = model.max_switch_rate;
    if !(qbar > 0.0) {
        return Err(Error::InvalidModel(
            "direct simulation needs a positive dominating switch rate".into(),
        ));
    }
    let mut next_candidate = exp_gap(qbar, rng);
    while pb.t < horizon {
        let stop = next_candidate.min(horizon);
        pb.run_regime_until(model, stop, false, &mut clocks, rng)?;
        if stop >= horizon {
            break;
        }
        // Candidate decision at the evolved state X(t). A candidate tied with
        // an applied jump is skipped and its clock residual redrawn: the jump
        // takes precedence and event times stay disjoint.
        if !pb.jump_applied_now() {
            let q = (model.switching)(&pb.x);
            let total = model.switch_rate(&q, pb.k);
            if total > qbar * (1.0 + 1e-12) {
                return Err(Error::SwitchRateBoundExceeded {
                    observed: total,
                    bound: qbar,
                    t: pb.t,
                });
            }
            let v: f64 = rng.random();
            let mut cum = 0.0;
            let mut target = None;
            for l in 0..model.n_regimes {
                if l != pb.k {
                    cum += q[(pb.k, l)] / qbar;
                    if v < cum {
                        target = Some(l);
                        break;
                    }
                }
            }
            if let Some(to) = target {
                pb.apply_switch(model, to);
                clocks = JumpClocks::draw(model, to, pb.t, rng);
            }
        }
        next_candidate = pb.t + exp_gap(qbar, rng);
    }
    Ok(pb.finish())
}

/// Likelihood ratio of the target law against the auxiliary (pieced) law on
/// the interval `[0, t]`:
///
/// ```text
///   M_t = Π_{switches τ_i <= t} q_{Λ(τ_i-) Λ(τ_i)}(X(τ_i))
///         * exp( -∫_0^t [ q_{Λ(s)}(X(s)) - (n-1) ] ds )
/// ```
///
/// An empty product is 1; a zero weight is legal (a switch through a channel
/// whose rate vanishes at the switch state).
pub fn likelihood_ratio(model: &ModelSpec, path: &RegimePath, t: f64) -> Result<f64> {
    if path.n_regimes != model.n_regimes {
        return Err(Error::InvalidArgument(
            "path regime count does not match the model".into(),
        ));
    }
    if t > path.horizon() + 1e-12 {
        return Err(Error::InvalidArgument(
            "likelihood horizon exceeds the path horizon".into(),
        ));
    }
    let mut product = 1.0f64;
    for e in &path.events {
        if e.time > t {
            break;
        }
        if let EventKind::Switch { from, to } = e.kind {
            let (x, _) = path.state_at(e.time);
            let q = (model.switching)(&x);
            product *= q[(from, to)];
        }
    }
    Ok(product * (-path.excess_integral_at(t)).exp())
}

/// Pieced path together with its weight at the horizon.
pub fn weighted_pieced(
    model: &ModelSpec,
    x0: State,
    k0: Regime,
    horizon: f64,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<WeightedPath> {
    let path = simulate_pieced(model, x0, k0, horizon, h, rng)?;
    let weight = likelihood_ratio(model, &path, horizon)?;
    Ok(WeightedPath { path, weight })
}

/// Single-regime process killed at rate `-q_kk`.
///
/// Clock mode draws an exponential alarm against the cumulative hazard and
/// truncates the path at the (linearly interpolated) crossing time; weight
/// mode keeps the whole path and returns `exp(∫_0^T q_kk(X(s)) ds)`.
pub fn simulate_killed(
    model: &ModelSpec,
    k: Regime,
    x0: State,
    horizon: f64,
    h: f64,
    mode: KillMode,
    rng: &mut ChaCha8Rng,
) -> Result<KilledPath> {
    check_step(h)?;
    check_start(model, &x0, k)?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let kill_rate = |x: &State| -> Result<f64> {
        let q = (model.switching)(x);
        let qkk = q[(k, k)];
        if qkk > 1e-12 {
            return Err(Error::PositiveKillRate {
                value: qkk,
                t: 0.0,
            });
        }
        Ok(-qkk.min(0.0))
    };

    let alarm = match mode {
        KillMode::Clock => {
            let e: f64 = Exp1.sample(rng);
            e
        }
        KillMode::Weight => f64::INFINITY,
    };

    let mut pb = PathBuilder::new(model, x0, k, 0.0, h);
    let mut clocks = JumpClocks::draw(model, k, 0.0, rng);
    let mut hazard = 0.0f64;
    let mut cum_hazard = vec![0.0f64];
    let mut rate_prev = kill_rate(&pb.x)?;
    let mut killed_at = None;

    while pb.t < horizon {
        let t_next = pb.next_nominal().min(clocks.next()).min(horizon);
        let t_prev = pb.t;
        let x_prev = pb.x.clone();
        let excess_prev = pb.excess;
        pb.advance(model, t_next, rng)?;
        let rate_new = kill_rate(&pb.x).map_err(|e| match e {
            Error::PositiveKillRate { value, .. } => Error::PositiveKillRate { value, t: pb.t },
            other => other,
        })?;
        let increment = 0.5 * (rate_prev + rate_new) * (t_next - t_prev);
        if hazard + increment >= alarm && increment > 0.0 {
            // Kill inside this step: invert the linear hazard and truncate at
            // the interpolated crossing time and state.
            let frac = ((alarm - hazard) / increment).clamp(0.0, 1.0);
            let t_kill = t_prev + frac * (t_next - t_prev);
            let mut x_kill = x_prev * (1.0 - frac);
            x_kill.axpy(frac, &pb.x, 1.0);
            pb.t = t_kill;
            pb.x = x_kill;
            pb.excess = excess_prev + frac * (pb.excess - excess_prev);
            pb.push_point();
            hazard = alarm;
            cum_hazard.push(hazard);
            killed_at = Some(t_kill);
            break;
        }
        hazard += increment;
        rate_prev = rate_new;
        pb.process_due_jumps(model, &mut clocks, rng);
        if pb.jump_applied_now() {
            rate_prev = kill_rate(&pb.x)?;
        }
        pb.push_point();
        cum_hazard.push(hazard);
    }

    let outcome = match mode {
        KillMode::Clock => KillOutcome::Clock(killed_at),
        KillMode::Weight => KillOutcome::Weight((-hazard).exp()),
    };
    Ok(KilledPath {
        path: pb.finish(),
        outcome,
        cum_hazard,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        LevyKernelSpec, ModelSpec, Rho, SwitchingFn, ThinnedComponent,
    };
    use crate::rng::{ensemble_mean, stream_rng};
    use crate::stats::{ks_critical_1pct, ks_statistic};
    use nalgebra::{dvector, DMatrix};

    fn reference_q(n: usize) -> SwitchingFn {
        Box::new(move |_| {
            DMatrix::from_fn(n, n, |k, l| if k == l { -((n - 1) as f64) } else { 1.0 })
        })
    }

    fn drift_free_model(dim: usize, n: usize, sigma: f64) -> ModelSpec {
        ModelSpec {
            dim,
            n_regimes: n,
            drift: Box::new(move |_, _| DVector::zeros(dim)),
            sigma: Box::new(move |_, _| DMatrix::identity(dim, dim) * sigma),
            kernels: vec![],
            switching: reference_q(n),
            comp_radius: 1.0,
            lip_const: 1.0,
            rho: Rho::Linear { scale: 1.0 },
            ellipticity: 0.0,
            reflection_modulus: None,
            max_switch_rate: (n.max(2) - 1) as f64,
        }
    }

    fn compound_poisson_kernel(rate: f64) -> LevyKernelSpec {
        // Jump sizes 1.5 + U(0,1), all above the compensation radius.
        LevyKernelSpec {
            large: ThinnedComponent {
                mass: rate,
                sampler: Box::new(|rng| {
                    let mut buf = [0u8; 8];
                    rng.fill_bytes(&mut buf);
                    let u = u64::from_le_bytes(buf) as f64 / u64::MAX as f64;
                    dvector![1.5 + u]
                }),
                accept: Box::new(|_, _, _| 1.0),
            },
            small: None,
            total_bound: rate,
        }
    }

    #[test]
    fn static_model_path_is_constant() {
        let model = drift_free_model(2, 1, 0.0);
        let mut rng = stream_rng(1, 0);
        let p = simulate_segment(&model, 0, dvector![0.5, -0.25], 0.0, 1.0, 0.01, &mut rng)
            .unwrap();
        for i in 0..p.len() {
            assert_eq!(p.state_slice(i), &[0.5, -0.25]);
        }
        assert!(p.events.is_empty());
    }

    #[test]
    fn constant_drift_is_exact() {
        let mut model = drift_free_model(1, 1, 0.0);
        model.drift = Box::new(|_, _| dvector![1.0]);
        let mut rng = stream_rng(1, 0);
        let p = simulate_segment(&model, 0, dvector![0.0], 0.0, 1.0, 0.001, &mut rng).unwrap();
        let (x, _) = p.endpoint();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((p.horizon() - 1.0).abs() == 0.0);
    }

    #[test]
    fn compound_poisson_jump_count_matches_rate() {
        let mut model = drift_free_model(1, 1, 0.0);
        model.kernels = vec![compound_poisson_kernel(2.0)];
        let est = ensemble_mean(30_000, 99, |_, mut rng| {
            let p =
                simulate_segment(&model, 0, dvector![0.0], 0.0, 1.0, 0.01, &mut rng).unwrap();
            p.jump_count(1.0, |_| true) as f64
        });
        assert!(
            (est.value - 2.0).abs() <= 3.0 * est.se,
            "mean jump count {} +- {}",
            est.value,
            est.se
        );
    }

    #[test]
    fn reference_chain_holding_time_law() {
        let n = 100_000;
        let mut rng = stream_rng(7, 0);
        let mut first = Vec::with_capacity(n);
        for _ in 0..n {
            let sk = simulate_reference_chain(2, 0, 50.0, &mut rng);
            first.push(sk.switches[0].0);
        }
        let d = ks_statistic(&first, crate::stats::exp_cdf(1.0));
        assert!(d < ks_critical_1pct(n), "KS statistic {d}");
    }

    #[test]
    fn reference_chain_single_regime_never_switches() {
        let mut rng = stream_rng(7, 0);
        let sk = simulate_reference_chain(1, 0, 1e6, &mut rng);
        assert!(sk.switches.is_empty());
    }

    #[test]
    fn reference_chain_mean_switch_count() {
        let n = 100_000usize;
        let mut rng = stream_rng(8, 0);
        let mut counts = Vec::with_capacity(n);
        for _ in 0..n {
            let sk = simulate_reference_chain(3, 1, 1.0, &mut rng);
            counts.push(sk.switches.len() as f64);
        }
        let est = crate::stats::MCEstimate::from_samples(&counts, 8);
        assert!(
            (est.value - 2.0).abs() <= 3.0 * est.se,
            "mean switches {} +- {}",
            est.value,
            est.se
        );
    }

    #[test]
    fn pieced_with_one_regime_equals_segment_bitwise() {
        let model = drift_free_model(1, 1, 1.0);
        let mut r1 = stream_rng(5, 3);
        let mut r2 = stream_rng(5, 3);
        let a = simulate_pieced(&model, dvector![0.2], 0, 1.0, 0.01, &mut r1).unwrap();
        let b = simulate_segment(&model, 0, dvector![0.2], 0.0, 1.0, 0.01, &mut r2).unwrap();
        assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            assert_eq!(a.time(i).to_bits(), b.time(i).to_bits());
            assert_eq!(a.state_slice(i)[0].to_bits(), b.state_slice(i)[0].to_bits());
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_paths() {
        let mut model = drift_free_model(1, 2, 0.7);
        model.kernels = vec![compound_poisson_kernel(1.0), compound_poisson_kernel(0.5)];
        let mut r1 = stream_rng(17, 11);
        let mut r2 = stream_rng(17, 11);
        let a = simulate_direct(&model, dvector![0.1], 0, 2.0, 0.01, &mut r1).unwrap();
        let b = simulate_direct(&model, dvector![0.1], 0, 2.0, 0.01, &mut r2).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.events.len(), b.events.len());
        for i in 0..a.len() {
            assert_eq!(a.time(i).to_bits(), b.time(i).to_bits());
            assert_eq!(a.state_slice(i)[0].to_bits(), b.state_slice(i)[0].to_bits());
            assert_eq!(a.regime(i), b.regime(i));
        }
    }

    /// Two-state telegraph: regimes drive drift +1 / -1, switch rate 1 each
    /// way under the reference chain. E[X(1)] = ∫_0^1 e^{-2t} dt, confirmed
    /// here by an independent RK4 integration of the two-state master
    /// equation before comparing against the ensemble.
    #[test]
    fn pieced_telegraph_mean_matches_ode_oracle() {
        // RK4 oracle for m'(t) = -2 m(t), y'(t) = m(t), m(0)=1, y(0)=0.
        let mut m = 1.0f64;
        let mut y = 0.0f64;
        let steps = 2000;
        let dt = 1.0 / steps as f64;
        for _ in 0..steps {
            let f = |state: (f64, f64)| (-2.0 * state.0, state.0);
            let k1 = f((m, y));
            let k2 = f((m + 0.5 * dt * k1.0, y + 0.5 * dt * k1.1));
            let k3 = f((m + 0.5 * dt * k2.0, y + 0.5 * dt * k2.1));
            let k4 = f((m + dt * k3.0, y + dt * k3.1));
            m += dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            y += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        let closed_form = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((y - closed_form).abs() < 1e-10);

        let mut model = drift_free_model(1, 2, 0.0);
        model.drift = Box::new(|_, k| if k == 0 { dvector![1.0] } else { dvector![-1.0] });
        let est = ensemble_mean(30_000, 4242, |_, mut rng| {
            let p = simulate_pieced(&model, dvector![0.0], 0, 1.0, 0.005, &mut rng).unwrap();
            p.endpoint().0[0]
        });
        assert!(
            (est.value - closed_form).abs() <= 3.0 * est.se,
            "telegraph mean {} +- {} vs {}",
            est.value,
            est.se,
            closed_form
        );
    }

    #[test]
    fn weight_is_exactly_one_under_reference_rates() {
        let model = drift_free_model(1, 3, 0.5);
        let mut rng = stream_rng(3, 0);
        for _ in 0..50 {
            let p = simulate_pieced(&model, dvector![0.0], 0, 2.0, 0.01, &mut rng).unwrap();
            let w = likelihood_ratio(&model, &p, 2.0).unwrap();
            assert_eq!(w, 1.0);
        }
    }

    #[test]
    fn no_switch_weight_has_closed_form() {
        let c = 1.7;
        let mut model = drift_free_model(1, 2, 0.3);
        model.switching = Box::new(move |_| DMatrix::from_row_slice(2, 2, &[-c, c, c, -c]));
        model.max_switch_rate = c;
        let mut rng = stream_rng(21, 0);
        let mut checked = 0;
        for _ in 0..200 {
            let p = simulate_pieced(&model, dvector![0.0], 0, 1.0, 0.01, &mut rng).unwrap();
            if p.switch_times().is_empty() {
                let w = likelihood_ratio(&model, &p, 1.0).unwrap();
                let expect = (-(c - 1.0)).exp();
                assert!((w - expect).abs() < 1e-12, "{w} vs {expect}");
                checked += 1;
            }
        }
        assert!(checked > 0, "no switch-free paths at horizon 1");
    }

    #[test]
    fn pieced_weight_has_mean_one() {
        let mut model = drift_free_model(1, 2, 0.5);
        model.switching = Box::new(|x| {
            let q12 = 1.0 + 0.5 * x[0].sin();
            let q21 = 1.0 - 0.5 * x[0].sin();
            DMatrix::from_row_slice(2, 2, &[-q12, q12, q21, -q21])
        });
        model.max_switch_rate = 1.5;
        let est = ensemble_mean(30_000, 77, |_, mut rng| {
            weighted_pieced(&model, dvector![0.3], 0, 1.0, 0.01, &mut rng)
                .unwrap()
                .weight
        });
        assert!(
            (est.value - 1.0).abs() <= 3.0 * est.se,
            "mean weight {} +- {}",
            est.value,
            est.se
        );
    }

    #[test]
    fn direct_without_rates_never_switches() {
        let mut model = drift_free_model(1, 2, 0.4);
        model.switching = Box::new(|_| DMatrix::zeros(2, 2));
        model.max_switch_rate = 1.0;
        let mut rng = stream_rng(2, 0);
        let p = simulate_direct(&model, dvector![0.0], 0, 2.0, 0.01, &mut rng).unwrap();
        assert!(p.switch_times().is_empty());
        assert!(p.event_log_consistent());
    }

    #[test]
    fn direct_switch_count_matches_two_state_closed_form() {
        // Constant symmetric rates c: E[#(0->1 switches) on [0,T]]
        //   = c ∫_0^T P(Λ_t = 0) dt = cT/2 + (1 - e^{-2cT})/4.
        let c = 0.8;
        let t_end = 1.5;
        let expect: f64 = c * t_end / 2.0 + (1.0 - f64::exp(-2.0 * c * t_end)) / 4.0;
        let mut model = drift_free_model(1, 2, 0.0);
        model.switching = Box::new(move |_| DMatrix::from_row_slice(2, 2, &[-c, c, c, -c]));
        model.max_switch_rate = c;
        let est = ensemble_mean(30_000, 31, |_, mut rng| {
            let p = simulate_direct(&model, dvector![0.0], 0, t_end, 0.01, &mut rng).unwrap();
            p.events
                .iter()
                .filter(
                    |e| matches!(e.kind, EventKind::Switch { from: 0, to: 1 }),
                )
                .count() as f64
        });
        assert!(
            (est.value - expect).abs() <= 3.0 * est.se,
            "0->1 switch count {} +- {} vs {}",
            est.value,
            est.se,
            expect
        );
    }

    #[test]
    fn killed_zero_rate_always_survives() {
        let mut model = drift_free_model(1, 2, 1.0);
        model.switching = Box::new(|_| DMatrix::zeros(2, 2));
        model.max_switch_rate = 1.0;
        let mut rng = stream_rng(5, 0);
        let kp = simulate_killed(&model, 0, dvector![0.0], 1.0, 0.01, KillMode::Clock, &mut rng)
            .unwrap();
        assert!(matches!(kp.outcome, KillOutcome::Clock(None)));
        assert_eq!(kp.survival_value(), 1.0);
    }

    #[test]
    fn killed_constant_hazard_survival() {
        let c = 1.3;
        let mut model = drift_free_model(1, 2, 1.0);
        model.switching = Box::new(move |_| DMatrix::from_row_slice(2, 2, &[-c, c, c, -c]));
        model.max_switch_rate = c;
        let est = ensemble_mean(30_000, 12, |_, mut rng| {
            let kp = simulate_killed(
                &model,
                0,
                dvector![0.0],
                1.0,
                0.01,
                KillMode::Clock,
                &mut rng,
            )
            .unwrap();
            kp.survival_value()
        });
        let expect = (-c).exp();
        assert!(
            (est.value - expect).abs() <= 3.0 * est.se,
            "survival {} +- {} vs {}",
            est.value,
            est.se,
            expect
        );
    }

    #[test]
    fn killed_weight_and_clock_agree_on_brownian_functional() {
        // E[f(X_T); alive] for f = 1_{x >= 0}, state-dependent kill rate.
        let mut model = drift_free_model(1, 2, 1.0);
        model.switching = Box::new(|x| {
            let c = 0.6 + 0.4 * x[0].tanh();
            DMatrix::from_row_slice(2, 2, &[-c, c, c, -c])
        });
        model.max_switch_rate = 1.0;
        let f = |x: &State| if x[0] >= 0.0 { 1.0 } else { 0.0 };
        let clock = ensemble_mean(40_000, 61, |_, mut rng| {
            let kp = simulate_killed(
                &model,
                0,
                dvector![0.0],
                1.0,
                0.01,
                KillMode::Clock,
                &mut rng,
            )
            .unwrap();
            match kp.outcome {
                KillOutcome::Clock(None) => f(&kp.path.endpoint().0),
                _ => 0.0,
            }
        });
        let weight = ensemble_mean(40_000, 62, |_, mut rng| {
            let kp = simulate_killed(
                &model,
                0,
                dvector![0.0],
                1.0,
                0.01,
                KillMode::Weight,
                &mut rng,
            )
            .unwrap();
            kp.survival_value() * f(&kp.path.endpoint().0)
        });
        let diff = (clock.value - weight.value).abs();
        let se = clock.combined_se(&weight);
        assert!(diff <= 3.0 * se, "clock {} vs weight {}", clock.value, weight.value);
    }

    /// Medium-range kernel with uniform sizes on [0.5, 1), compensated: the
    /// simulated process is a centered martingale with variance
    /// `rate * E[u^2] * t` (+ the substitution covariance when enabled).
    fn medium_jump_model(rate: f64, substitution: Option<f64>) -> ModelSpec {
        let mut model = drift_free_model(1, 1, 0.0);
        model.kernels = vec![LevyKernelSpec {
            large: ThinnedComponent::none(1),
            small: Some(crate::model::SmallJumpPart {
                delta_small: 0.5,
                component: ThinnedComponent {
                    mass: rate,
                    sampler: Box::new(|rng| {
                        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                        dvector![0.5 + 0.5 * u]
                    }),
                    accept: Box::new(|_, _, _| 1.0),
                },
                second_moment: Box::new(|_, _| 0.0),
                compensator_mean: Box::new(move |_, _| dvector![rate * 0.75]),
                gaussian_substitution: substitution
                    .map(|v| -> crate::model::MatrixFieldFn {
                        Box::new(move |_: &State, _| DMatrix::from_element(1, 1, v))
                    }),
            }),
            total_bound: rate,
        }];
        model
    }

    #[test]
    fn compensated_medium_jumps_are_centered_with_known_variance() {
        // E[u^2] for u ~ U[0.5, 1) is 7/12.
        let rate = 2.0;
        let t_end = 1.0;
        let expect_var = rate * (7.0 / 12.0) * t_end;
        for (sub, extra_var) in [(None, 0.0), (Some(0.4), 0.4 * t_end)] {
            let model = medium_jump_model(rate, sub);
            let rows = crate::rng::ensemble_map(30_000, 777, |_, mut rng| {
                let p = simulate_segment(&model, 0, dvector![0.0], 0.0, t_end, 0.01, &mut rng)
                    .unwrap();
                let x = p.endpoint().0[0];
                (x, x * x)
            });
            let means: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let squares: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let mean = crate::stats::MCEstimate::from_samples(&means, 0);
            let second = crate::stats::MCEstimate::from_samples(&squares, 0);
            assert!(
                mean.value.abs() <= 3.0 * mean.se,
                "sub {sub:?}: compensated mean {} +- {}",
                mean.value,
                mean.se
            );
            let total = expect_var + extra_var;
            assert!(
                (second.value - total).abs() <= 3.0 * second.se,
                "sub {sub:?}: variance {} +- {} vs {total}",
                second.value,
                second.se
            );
        }
    }

    #[test]
    fn killed_rejects_positive_kill_rate() {
        let mut model = drift_free_model(1, 2, 0.5);
        // structurally invalid switching row (diagonal positive)
        model.switching = Box::new(|_| DMatrix::from_row_slice(2, 2, &[0.5, -0.5, 1.0, -1.0]));
        let mut rng = stream_rng(4, 0);
        let err = simulate_killed(&model, 0, dvector![0.0], 1.0, 0.01, KillMode::Weight, &mut rng)
            .unwrap_err();
        assert!(matches!(err, crate::error::Error::PositiveKillRate { .. }));
    }

    #[test]
    fn direct_with_one_regime_equals_segment_bitwise() {
        let mut model = drift_free_model(1, 1, 0.9);
        model.kernels = vec![compound_poisson_kernel(1.5)];
        let mut r1 = stream_rng(6, 2);
        let mut r2 = stream_rng(6, 2);
        let a = simulate_direct(&model, dvector![0.4], 0, 1.5, 0.01, &mut r1).unwrap();
        let b = simulate_segment(&model, 0, dvector![0.4], 0.0, 1.5, 0.01, &mut r2).unwrap();
        assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            assert_eq!(a.time(i).to_bits(), b.time(i).to_bits());
            assert_eq!(a.state_slice(i)[0].to_bits(), b.state_slice(i)[0].to_bits());
        }
    }

    #[test]
    fn switch_and_jump_times_are_disjoint() {
        let mut model = drift_free_model(1, 2, 0.5);
        model.kernels = vec![compound_poisson_kernel(2.0), compound_poisson_kernel(1.0)];
        let mut rng = stream_rng(23, 0);
        let mut total_events = 0;
        for _ in 0..200 {
            let p = simulate_pieced(&model, dvector![0.0], 0, 2.0, 0.01, &mut rng).unwrap();
            let switches = p.switch_times();
            let jumps = p.jump_times();
            total_events += switches.len() + jumps.len();
            for s in &switches {
                assert!(!jumps.iter().any(|j| j == s), "shared event time {s}");
            }
            assert!(p.event_log_consistent());
        }
        assert!(total_events > 500);
    }

    #[test]
    fn trapezoid_integral_of_one_is_elapsed_time() {
        let model = drift_free_model(1, 1, 1.0);
        let mut rng = stream_rng(9, 0);
        let p = simulate_segment(&model, 0, dvector![0.0], 0.0, 1.0, 0.01, &mut rng).unwrap();
        let v = p.integrate_trapezoid(1.0, |_, _, _, _| 1.0);
        assert!((v - 1.0).abs() < 1e-12);
        let half = p.integrate_trapezoid(0.5, |_, _, _, _| 1.0);
        assert!((half - 0.5).abs() < 1e-12);
    }
}
