//! Resolvents and transition quantities.
//!
//! The resolvent of the coupled process, `E ∫_0^∞ e^{-alpha t} f(X,Λ) dt`, is
//! estimated three ways: direct Monte Carlo on the target law, weighted Monte
//! Carlo on the pieced auxiliary law, and a geometric series over the killed
//! single-regime resolvents valid for `alpha >= 2 (n-1) H`:
//!
//! ```text
//!   G_alpha f = Σ_i ψ_i,   ψ_0^{(k)} = G^{(k)}_alpha f(.,k),
//!   ψ_i^{(k)} = G^{(k)}_alpha ( Σ_{l≠k} q_kl ψ_{i-1}^{(l)} ),
//! ```
//!
//! with per-step halving `Σ_k ||ψ_i|| <= 1/2 Σ_k ||ψ_{i-1}||` and the
//! truncation residual below `2^{-m} Σ_k ||G_alpha f(.,k)||`.
//!
//! Transition probabilities expand the same way: the `m`-th term is the
//! contribution of exactly `m` switches, a simplex integral over killed
//! segments chained by the off-diagonal switch rates.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Hyperrect, ModelSpec};
use crate::paths::{
    likelihood_ratio, simulate_direct, simulate_killed, simulate_pieced, KillMode, KillOutcome,
    KilledPath,
};
use crate::rng::{ensemble_map, substream_seed, try_ensemble_mean};
use crate::stats::MCEstimate;
use crate::{Regime, State};

/// Which simulator backs a resolvent estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimulatorKind {
    /// Pieced auxiliary paths reweighted by the likelihood ratio.
    PiecedWeighted,
    /// Direct thinned simulation of the target law.
    Direct,
}

/// Bounded test function on state x regime.
pub type BoundedFn = Box<dyn Fn(&State, Regime) -> f64 + Send + Sync>;

/// A resolvent evaluation request with its truncation horizon.
pub struct ResolventQuery {
    pub f: BoundedFn,
    /// Declared sup norm of `f` (used for tail bounds).
    pub f_sup: f64,
    pub alpha: f64,
    pub x0: State,
    pub k0: Regime,
    /// Truncation horizon; the neglected tail is below
    /// `e^{-alpha t_max} f_sup / alpha`.
    pub t_max: f64,
    pub tail_tol: f64,
    pub n_paths: usize,
    pub h: f64,
    pub seed: u64,
}

impl ResolventQuery {
    /// Build a query, choosing `t_max` from a tail tolerance (default
    /// `1e-3 * f_sup / alpha`). Fails if a horizon budget is given and the
    /// tolerance needs more time than it allows.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        f: BoundedFn,
        f_sup: f64,
        alpha: f64,
        x0: State,
        k0: Regime,
        n_paths: usize,
        h: f64,
        seed: u64,
        tail_tol: Option<f64>,
        horizon_budget: Option<f64>,
    ) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument("alpha must be positive".into()));
        }
        if !(f_sup > 0.0 && f_sup.is_finite()) {
            return Err(Error::InvalidArgument(
                "f_sup must be a positive finite bound".into(),
            ));
        }
        let tail_tol = tail_tol.unwrap_or(1e-3 * f_sup / alpha);
        let needed = ((f_sup / (alpha * tail_tol)).ln() / alpha).max(h);
        if let Some(budget) = horizon_budget {
            if needed > budget {
                return Err(Error::TailTolUnreachable {
                    needed,
                    budget,
                });
            }
        }
        Ok(ResolventQuery {
            f,
            f_sup,
            alpha,
            x0,
            k0,
            t_max: needed,
            tail_tol,
            n_paths,
            h,
            seed,
        })
    }
}

/// Monte Carlo estimate plus the deterministic truncation-tail bound.
#[derive(Debug, Clone)]
pub struct ResolventEstimate {
    pub est: MCEstimate,
    pub tail_bound: f64,
}

/// Resolvent of the coupled process by path-wise discounted integration.
pub fn resolvent_mc(
    model: &ModelSpec,
    query: &ResolventQuery,
    simulator: SimulatorKind,
) -> Result<ResolventEstimate> {
    let alpha = query.alpha;
    let est = try_ensemble_mean(query.n_paths, query.seed, |_, mut rng| {
        let (path, weight) = match simulator {
            SimulatorKind::Direct => {
                let p = simulate_direct(
                    model,
                    query.x0.clone(),
                    query.k0,
                    query.t_max,
                    query.h,
                    &mut rng,
                )?;
                (p, 1.0)
            }
            SimulatorKind::PiecedWeighted => {
                let p = simulate_pieced(
                    model,
                    query.x0.clone(),
                    query.k0,
                    query.t_max,
                    query.h,
                    &mut rng,
                )?;
                let w = likelihood_ratio(model, &p, query.t_max)?;
                (p, w)
            }
        };
        let integral = path.integrate_trapezoid(query.t_max, |_, t, x, k| {
            (-alpha * t).exp() * (query.f)(x, k)
        });
        Ok(weight * integral)
    })?;
    Ok(ResolventEstimate {
        est,
        tail_bound: (-alpha * query.t_max).exp() * query.f_sup / alpha,
    })
}

/// Discounted Feynman-Kac integral along one killed (weight-mode) path:
/// `∫_0^{t_max} e^{-alpha t} e^{-H(t)} g(X(t)) dt`.
fn killed_pathwise_integral(
    kp: &KilledPath,
    alpha: f64,
    t_max: f64,
    g: &(dyn Fn(&State) -> f64 + Sync),
) -> f64 {
    kp.path.integrate_trapezoid(t_max, |i, t, x, _| {
        (-alpha * t - kp.cum_hazard[i]).exp() * g(x)
    })
}

/// Killed-process resolvent `G^{(k)}_alpha g(x)` by weight-mode Monte Carlo.
#[allow(clippy::too_many_arguments)]
pub fn killed_resolvent_mc(
    model: &ModelSpec,
    k: Regime,
    g: &(dyn Fn(&State) -> f64 + Sync),
    g_sup: f64,
    alpha: f64,
    x0: &State,
    t_max: f64,
    n_paths: usize,
    h: f64,
    seed: u64,
) -> Result<ResolventEstimate> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be positive".into()));
    }
    let est = try_ensemble_mean(n_paths, seed, |_, mut rng| {
        let kp = simulate_killed(model, k, x0.clone(), t_max, h, KillMode::Weight, &mut rng)?;
        Ok(killed_pathwise_integral(&kp, alpha, t_max, g))
    })?;
    Ok(ResolventEstimate {
        est,
        tail_bound: (-alpha * t_max).exp() * g_sup / alpha,
    })
}

/// Both sides of the kill-time identity
/// `E[e^{-alpha ζ} φ(X(ζ-))] = G^{(k)}_alpha ((-q_kk) φ)(x)`:
/// the left side from clock-mode kill times, the right side from the killed
/// resolvent applied to the rate-weighted function.
#[allow(clippy::too_many_arguments)]
pub fn killing_identity_check(
    model: &ModelSpec,
    k: Regime,
    phi: &(dyn Fn(&State) -> f64 + Sync),
    phi_sup: f64,
    alpha: f64,
    x0: &State,
    t_max: f64,
    n_paths: usize,
    h: f64,
    seed: u64,
) -> Result<(ResolventEstimate, ResolventEstimate)> {
    let lhs_est = try_ensemble_mean(n_paths, substream_seed(seed, &[1]), |_, mut rng| {
        let kp = simulate_killed(model, k, x0.clone(), t_max, h, KillMode::Clock, &mut rng)?;
        Ok(match kp.outcome {
            KillOutcome::Clock(Some(t_kill)) => {
                let (x_kill, _) = kp.path.endpoint();
                (-alpha * t_kill).exp() * phi(&x_kill)
            }
            _ => 0.0,
        })
    })?;
    let lhs = ResolventEstimate {
        est: lhs_est,
        tail_bound: (-alpha * t_max).exp() * phi_sup,
    };
    let g = move |x: &State| {
        let q = (model.switching)(x);
        (-q[(k, k)]) * phi(x)
    };
    let rhs = killed_resolvent_mc(
        model,
        k,
        &g,
        model.max_switch_rate * phi_sup,
        alpha,
        x0,
        t_max,
        n_paths,
        h,
        substream_seed(seed, &[2]),
    )?;
    Ok((lhs, rhs))
}

/// Threshold rate above which the resolvent series contracts: `2 (n-1) H`.
pub fn alpha_one(model: &ModelSpec) -> f64 {
    2.0 * (model.n_regimes as f64 - 1.0) * model.lip_const
}

/// Spatial interpolation mesh configuration for the series terms.
#[derive(Debug, Clone)]
pub struct MeshConfig {
    /// Nodes per dimension (total nodes = points^dim).
    pub points_per_dim: usize,
    /// Half width around the start point; default is six diffusive standard
    /// deviations over the truncation horizon.
    pub half_width: Option<f64>,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            points_per_dim: 33,
            half_width: None,
        }
    }
}

struct Mesh {
    axes: Vec<Vec<f64>>,
}

impl Mesh {
    fn build(model: &ModelSpec, center: &State, cfg: &MeshConfig, t_max: f64) -> Result<Mesh> {
        if model.dim > 2 {
            return Err(Error::MeshDimension { dim: model.dim });
        }
        let mut a_max = 0.0f64;
        for k in 0..model.n_regimes {
            let a = model.diffusion(center, k);
            for i in 0..model.dim {
                a_max = a_max.max(a[(i, i)]);
            }
        }
        let w = cfg
            .half_width
            .unwrap_or_else(|| 6.0 * (a_max * t_max).sqrt().max(1.0));
        let n = cfg.points_per_dim.max(2);
        let axes = (0..model.dim)
            .map(|j| {
                (0..n)
                    .map(|i| center[j] - w + 2.0 * w * i as f64 / (n - 1) as f64)
                    .collect()
            })
            .collect();
        Ok(Mesh { axes })
    }

    fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    fn node(&self, idx: usize) -> State {
        let mut rem = idx;
        let mut coords = Vec::with_capacity(self.axes.len());
        for axis in &self.axes {
            coords.push(axis[rem % axis.len()]);
            rem /= axis.len();
        }
        State::from_vec(coords)
    }

    /// Multilinear interpolation with clamping outside the extent.
    fn interp(&self, values: &[f64], x: &State) -> f64 {
        match self.axes.len() {
            1 => {
                let (i0, w) = Self::locate(&self.axes[0], x[0]);
                values[i0] * (1.0 - w) + values[i0 + 1] * w
            }
            2 => {
                let nx = self.axes[0].len();
                let (i0, wx) = Self::locate(&self.axes[0], x[0]);
                let (j0, wy) = Self::locate(&self.axes[1], x[1]);
                let v = |i: usize, j: usize| values[j * nx + i];
                (1.0 - wy) * ((1.0 - wx) * v(i0, j0) + wx * v(i0 + 1, j0))
                    + wy * ((1.0 - wx) * v(i0, j0 + 1) + wx * v(i0 + 1, j0 + 1))
            }
            _ => unreachable!("mesh dimension checked at build"),
        }
    }

    fn locate(axis: &[f64], x: f64) -> (usize, f64) {
        let n = axis.len();
        if x <= axis[0] {
            return (0, 0.0);
        }
        if x >= axis[n - 1] {
            return (n - 2, 1.0);
        }
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if axis[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo, (x - axis[lo]) / (axis[lo + 1] - axis[lo]))
    }
}

/// Result of the killed-resolvent series evaluation.
#[derive(Debug, Clone)]
pub struct SeriesResult {
    /// Truncated series value at the start point.
    pub estimate: f64,
    /// Monte Carlo standard error of the truncated series at the start point
    /// (interpolated node errors combined over terms).
    pub estimate_se: f64,
    /// Per-term values at the start point.
    pub term_values: Vec<f64>,
    /// Per-term mesh sup norms summed over regimes, `Σ_k ||ψ_i^{(k)}||`.
    pub term_norms: Vec<f64>,
    /// Standard errors at the arg-sup nodes, combined over regimes.
    pub term_norm_ses: Vec<f64>,
    /// Rigorous truncation bound `2^{-m_max} * n * f_sup / alpha`.
    pub residual_bound: f64,
}

/// Evaluate the resolvent series up to `m_max` terms on a spatial mesh.
///
/// Each term applies the killed resolvent of every regime to the previous
/// term's mesh interpolant; nesting through interpolation instead of
/// path-recursive Monte Carlo keeps the variance per term flat.
#[allow(clippy::too_many_arguments)]
pub fn resolvent_series(
    model: &ModelSpec,
    f: &(dyn Fn(&State, Regime) -> f64 + Sync),
    f_sup: f64,
    alpha: f64,
    x0: &State,
    k0: Regime,
    m_max: usize,
    mesh_cfg: &MeshConfig,
    inner_paths: usize,
    h: f64,
    seed: u64,
) -> Result<SeriesResult> {
    let alpha_min = alpha_one(model);
    if alpha < alpha_min {
        return Err(Error::AlphaTooSmall {
            alpha,
            alpha_min,
        });
    }
    let t_max = ((1.0e3f64).ln() / alpha).max(h);
    let mesh = Mesh::build(model, x0, mesh_cfg, t_max)?;
    let n_nodes = mesh.node_count();
    let n_regimes = model.n_regimes;

    // values[k][node], ses[k][node] for the current term
    let mut prev_values: Vec<Vec<f64>> = Vec::new();
    let mut term_values = Vec::with_capacity(m_max + 1);
    let mut term_norms = Vec::with_capacity(m_max + 1);
    let mut term_norm_ses = Vec::with_capacity(m_max + 1);
    let mut estimate = 0.0;
    let mut estimate_var = 0.0;

    for term in 0..=m_max {
        let prev = std::mem::take(&mut prev_values);
        let jobs: Vec<(Regime, usize)> = (0..n_regimes)
            .flat_map(|k| (0..n_nodes).map(move |node| (k, node)))
            .collect();
        let results: Vec<Result<(f64, f64)>> =
            ensemble_map(jobs.len(), substream_seed(seed, &[term as u64]), |j, _| {
                let (k, node) = jobs[j];
                let start = mesh.node(node);
                let node_seed = substream_seed(seed, &[term as u64, k as u64, node as u64]);
                let integrand = |x: &State| -> f64 {
                    if term == 0 {
                        f(x, k)
                    } else {
                        let q = (model.switching)(x);
                        let mut s = 0.0;
                        for l in 0..n_regimes {
                            if l != k {
                                s += q[(k, l)] * mesh.interp(&prev[l], x);
                            }
                        }
                        s
                    }
                };
                let sup = if term == 0 {
                    f_sup
                } else {
                    model.max_switch_rate * f_sup / alpha
                };
                let r = killed_resolvent_mc(
                    model, k, &integrand, sup, alpha, &start, t_max, inner_paths, h, node_seed,
                )?;
                Ok((r.est.value, r.est.se))
            });
        let mut values: Vec<Vec<f64>> = vec![vec![0.0; n_nodes]; n_regimes];
        let mut ses: Vec<Vec<f64>> = vec![vec![0.0; n_nodes]; n_regimes];
        for (j, r) in results.into_iter().enumerate() {
            let (k, node) = jobs[j];
            let (v, se) = r?;
            values[k][node] = v;
            ses[k][node] = se;
        }
        // term value at the start point and mesh sup norms per regime
        let term_at_start = mesh.interp(&values[k0], x0);
        estimate += term_at_start;
        estimate_var += mesh.interp(&ses[k0], x0).powi(2);
        term_values.push(term_at_start);
        let mut norm = 0.0;
        let mut se_sq = 0.0;
        for k in 0..n_regimes {
            let (mut best, mut best_se) = (0.0f64, 0.0f64);
            for node in 0..n_nodes {
                if values[k][node].abs() > best {
                    best = values[k][node].abs();
                    best_se = ses[k][node];
                }
            }
            norm += best;
            se_sq += best_se * best_se;
        }
        term_norms.push(norm);
        term_norm_ses.push(se_sq.sqrt());
        prev_values = values;
    }

    Ok(SeriesResult {
        estimate,
        estimate_se: estimate_var.sqrt(),
        term_values,
        term_norms,
        term_norm_ses,
        residual_bound: 0.5f64.powi(m_max as i32) * n_regimes as f64 * f_sup / alpha,
    })
}

/// Truncated transition-probability series for hitting `A x {l}` at time `t`.
///
/// The `m`-th term samples ordered switch times uniformly on the simplex
/// (importance weight `t^m / m!`), runs killed weight-mode segments between
/// them, and chains the off-diagonal switch rates over all regime sequences
/// `k = l_0 -> ... -> l_m = l` with consecutive regimes distinct.
#[allow(clippy::too_many_arguments)]
pub fn transition_series_mc(
    model: &ModelSpec,
    x0: &State,
    k0: Regime,
    target: &Hyperrect,
    target_regime: Regime,
    t: f64,
    m_max: usize,
    n_outer: usize,
    h: f64,
    seed: u64,
) -> Result<MCEstimate> {
    if m_max > 2 {
        return Err(Error::TruncationTooLarge(m_max));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidArgument("time must be positive".into()));
    }
    let sequences = regime_sequences(model.n_regimes, k0, target_regime, m_max);
    try_ensemble_mean(n_outer, seed, |_, mut rng| {
        let mut total = 0.0;
        for seq in &sequences {
            total += sample_sequence_term(model, x0, seq, target, t, h, &mut rng)?;
        }
        Ok(total)
    })
}

/// All regime sequences `k0 = l_0, ..., l_m = l` with `l_i != l_{i+1}`, for
/// `m <= m_max`.
fn regime_sequences(
    n_regimes: usize,
    k0: Regime,
    l_end: Regime,
    m_max: usize,
) -> Vec<Vec<Regime>> {
    let mut out = Vec::new();
    let mut stack: Vec<Vec<Regime>> = vec![vec![k0]];
    while let Some(seq) = stack.pop() {
        let m = seq.len() - 1;
        if *seq.last().unwrap() == l_end {
            out.push(seq.clone());
        }
        if m < m_max {
            for l in 0..n_regimes {
                if l != *seq.last().unwrap() {
                    let mut next = seq.clone();
                    next.push(l);
                    stack.push(next);
                }
            }
        }
    }
    out
}

fn sample_sequence_term(
    model: &ModelSpec,
    x0: &State,
    seq: &[Regime],
    target: &Hyperrect,
    t: f64,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    use rand::Rng;
    let m = seq.len() - 1;
    // ordered switch times on (0, t)
    let mut times: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * t).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut boundaries = Vec::with_capacity(m + 2);
    boundaries.push(0.0);
    boundaries.extend_from_slice(&times);
    boundaries.push(t);

    let mut weight = simplex_weight(t, m);
    let mut x = x0.clone();
    for (i, &k) in seq.iter().enumerate() {
        let duration = boundaries[i + 1] - boundaries[i];
        if duration > 0.0 {
            let kp = simulate_killed(model, k, x, duration, h, KillMode::Weight, rng)?;
            weight *= kp.survival_value();
            x = kp.path.endpoint().0;
        }
        if i < m {
            let q = (model.switching)(&x);
            weight *= q[(k, seq[i + 1])];
        }
    }
    if target.contains(&x) {
        Ok(weight)
    } else {
        Ok(0.0)
    }
}

fn simplex_weight(t: f64, m: usize) -> f64 {
    let mut w = 1.0;
    for i in 1..=m {
        w *= t / i as f64;
    }
    w
}

/// Probability mass beyond `m` switches of a Poisson(rate * t) switch count,
/// the analytic bound on what a truncated transition series omits under
/// constant rates.
pub fn poisson_tail_beyond(rate_t: f64, m: usize) -> f64 {
    let mut term = (-rate_t).exp();
    let mut cum = term;
    for i in 1..=m {
        term *= rate_t / i as f64;
        cum += term;
    }
    (1.0 - cum).max(0.0)
}
