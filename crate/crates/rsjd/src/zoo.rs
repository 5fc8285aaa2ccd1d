//! Built-in model zoo and its JSON configuration format.
//!
//! The programmatic API accepts arbitrary callables; the file format only
//! reaches these built-ins: constant coefficients, OU drift, sinusoidal
//! switching rates, the two-regime benchmark, and a unit-diffusion model for
//! reflection-coupling studies.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    LevyKernelSpec, ModelSpec, ReflectionModulus, Rho, ThinnedComponent,
};

/// Top-level model configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub n0: usize,
    #[serde(default = "default_eps0")]
    pub eps0: f64,
    #[serde(rename = "H")]
    pub h_const: f64,
    pub qbar: f64,
    #[serde(default)]
    pub lambda0: f64,
    #[serde(default = "RhoConfig::default")]
    pub rho: RhoConfig,
    pub model: BuiltinModel,
}

fn default_eps0() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RhoConfig {
    Linear {
        #[serde(default = "default_scale")]
        scale: f64,
    },
    Log,
}

fn default_scale() -> f64 {
    1.0
}

impl Default for RhoConfig {
    fn default() -> Self {
        RhoConfig::Linear { scale: 1.0 }
    }
}

impl RhoConfig {
    fn to_rho(&self) -> Rho {
        match self {
            RhoConfig::Linear { scale } => Rho::Linear { scale: *scale },
            RhoConfig::Log => Rho::LogLinear,
        }
    }
}

/// Jump-size laws available to the built-ins. Sizes act along the first
/// coordinate axis with a symmetric random sign unless a full vector is
/// given.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JumpSizeConfig {
    /// All jumps equal to the given vector.
    PointMass { value: Vec<f64> },
    /// `sign * (min + Exp(rate))` along the first axis; `min >= eps0` keeps
    /// every jump in the uncompensated range.
    SymmetricShiftedExp { min: f64, rate: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JumpConfig {
    pub rate: f64,
    pub size: JumpSizeConfig,
}

/// Built-in coefficient selectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BuiltinModel {
    /// Constant coefficients per regime and a constant rate matrix.
    Constant {
        drift: Vec<Vec<f64>>,
        sigma: Vec<f64>,
        q: Vec<Vec<f64>>,
        #[serde(default)]
        jump: Option<JumpConfig>,
    },
    /// Mean-reverting drift `rate_k (mean_k - x)` per regime.
    OuDrift {
        rate: Vec<f64>,
        mean: Vec<Vec<f64>>,
        sigma: Vec<f64>,
        q: Vec<Vec<f64>>,
        #[serde(default)]
        jump: Option<JumpConfig>,
    },
    /// Two regimes with rates `base ± amplitude sin(x_1)` and OU drift.
    SinusoidalSwitch {
        base: f64,
        amplitude: f64,
        ou_rate: f64,
        ou_means: [f64; 2],
        sigma: [f64; 2],
        #[serde(default)]
        jump: Option<JumpConfig>,
    },
    /// The standard two-regime benchmark: d = 1, OU drift towards ±0.5,
    /// sigma (1.0, 0.8), switching rates `1 ± 0.5 sin(x)`, compound-Poisson
    /// jumps of size `±(1 + Exp(2))`.
    TwoRegimeBenchmark {
        #[serde(default = "default_benchmark_jump_rate")]
        jump_rate: f64,
    },
    /// Single regime, zero drift, unit diffusion, no jumps; the reference
    /// case for reflection-coupling laws.
    UnitDiffusion,
}

fn default_benchmark_jump_rate() -> f64 {
    1.0
}

fn jump_kernel(dim: usize, cfg: &JumpConfig) -> LevyKernelSpec {
    let rate = cfg.rate;
    let sampler: crate::model::JumpSamplerFn = match &cfg.size {
        JumpSizeConfig::PointMass { value } => {
            let v = DVector::from_column_slice(value);
            Box::new(move |_: &mut dyn RngCore| v.clone())
        }
        JumpSizeConfig::SymmetricShiftedExp { min, rate } => {
            let (min, rate) = (*min, *rate);
            Box::new(move |rng: &mut dyn RngCore| {
                let u1 = uniform01(rng);
                let u2 = uniform01(rng);
                let sign = if u1 < 0.5 { -1.0 } else { 1.0 };
                let mag = min + (-(1.0 - u2).ln()) / rate;
                let mut v = DVector::zeros(dim);
                v[0] = sign * mag;
                v
            })
        }
    };
    LevyKernelSpec {
        large: ThinnedComponent {
            mass: rate,
            sampler,
            accept: Box::new(|_, _, _| 1.0),
        },
        small: None,
        total_bound: rate,
    }
}

fn uniform01(rng: &mut dyn RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn constant_q(rows: &[Vec<f64>]) -> crate::model::SwitchingFn {
    let n = rows.len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let m = DMatrix::from_row_slice(n, n, &flat);
    Box::new(move |_| m.clone())
}

/// Build the model described by a configuration.
pub fn build_model(cfg: &ModelConfig) -> Result<ModelSpec> {
    let dim = cfg.d;
    let n = cfg.n0;
    if dim == 0 || n == 0 {
        return Err(Error::Config("d and n0 must be positive".into()));
    }
    let rho = cfg.rho.to_rho();
    let reflection_modulus = if cfg.lambda0 > 0.0 {
        // All built-ins have x-independent diffusion factors and dissipative
        // drifts, so a flat modulus is valid.
        Some(ReflectionModulus {
            delta0: 1.0,
            theta: Box::new(|_| 0.0),
        })
    } else {
        None
    };

    let spec = match &cfg.model {
        BuiltinModel::Constant {
            drift,
            sigma,
            q,
            jump,
        } => {
            check_regime_lists(n, &[drift.len(), sigma.len(), q.len()])?;
            let drifts: Vec<DVector<f64>> = drift
                .iter()
                .map(|b| DVector::from_column_slice(b))
                .collect();
            let sigmas = sigma.clone();
            let kernels = match jump {
                Some(j) => (0..n).map(|_| jump_kernel(dim, j)).collect(),
                None => vec![],
            };
            ModelSpec {
                dim,
                n_regimes: n,
                drift: Box::new(move |_, k| drifts[k].clone()),
                sigma: Box::new(move |_, k| DMatrix::identity(dim, dim) * sigmas[k]),
                kernels,
                switching: constant_q(q),
                comp_radius: cfg.eps0,
                lip_const: cfg.h_const,
                rho,
                ellipticity: cfg.lambda0,
                reflection_modulus,
                max_switch_rate: cfg.qbar,
            }
        }
        BuiltinModel::OuDrift {
            rate,
            mean,
            sigma,
            q,
            jump,
        } => {
            check_regime_lists(n, &[rate.len(), mean.len(), sigma.len(), q.len()])?;
            let rates = rate.clone();
            let means: Vec<DVector<f64>> =
                mean.iter().map(|m| DVector::from_column_slice(m)).collect();
            let sigmas = sigma.clone();
            let kernels = match jump {
                Some(j) => (0..n).map(|_| jump_kernel(dim, j)).collect(),
                None => vec![],
            };
            ModelSpec {
                dim,
                n_regimes: n,
                drift: Box::new(move |x, k| (&means[k] - x) * rates[k]),
                sigma: Box::new(move |_, k| DMatrix::identity(dim, dim) * sigmas[k]),
                kernels,
                switching: constant_q(q),
                comp_radius: cfg.eps0,
                lip_const: cfg.h_const,
                rho,
                ellipticity: cfg.lambda0,
                reflection_modulus,
                max_switch_rate: cfg.qbar,
            }
        }
        BuiltinModel::SinusoidalSwitch {
            base,
            amplitude,
            ou_rate,
            ou_means,
            sigma,
            jump,
        } => {
            if n != 2 {
                return Err(Error::Config(
                    "sinusoidal switching is a two-regime selector".into(),
                ));
            }
            let (base, amp) = (*base, *amplitude);
            if amp.abs() > base {
                return Err(Error::Config(
                    "amplitude must not exceed the base rate (rates stay nonnegative)".into(),
                ));
            }
            let (kappa, means, sigmas) = (*ou_rate, *ou_means, *sigma);
            let kernels = match jump {
                Some(j) => (0..n).map(|_| jump_kernel(dim, j)).collect(),
                None => vec![],
            };
            ModelSpec {
                dim,
                n_regimes: 2,
                drift: Box::new(move |x, k| {
                    let mut m = DVector::zeros(x.len());
                    m[0] = means[k];
                    (m - x) * kappa
                }),
                sigma: Box::new(move |_, k| DMatrix::identity(dim, dim) * sigmas[k]),
                kernels,
                switching: Box::new(move |x| {
                    let q12 = base + amp * x[0].sin();
                    let q21 = base - amp * x[0].sin();
                    DMatrix::from_row_slice(2, 2, &[-q12, q12, q21, -q21])
                }),
                comp_radius: cfg.eps0,
                lip_const: cfg.h_const,
                rho,
                ellipticity: cfg.lambda0,
                reflection_modulus,
                max_switch_rate: cfg.qbar,
            }
        }
        BuiltinModel::TwoRegimeBenchmark { jump_rate } => {
            let mut bench_cfg = benchmark_config(*jump_rate);
            bench_cfg.eps0 = cfg.eps0;
            return build_model(&bench_cfg);
        }
        BuiltinModel::UnitDiffusion => ModelSpec {
            dim,
            n_regimes: 1,
            drift: Box::new(move |_, _| DVector::zeros(dim)),
            sigma: Box::new(move |_, _| DMatrix::identity(dim, dim)),
            kernels: vec![],
            switching: Box::new(|_| DMatrix::zeros(1, 1)),
            comp_radius: cfg.eps0,
            lip_const: cfg.h_const,
            rho,
            ellipticity: cfg.lambda0,
            reflection_modulus,
            max_switch_rate: cfg.qbar.max(1.0),
        },
    };
    Ok(spec)
}

fn check_regime_lists(n: usize, lens: &[usize]) -> Result<()> {
    if lens.iter().any(|&l| l != n) {
        return Err(Error::Config(
            "per-regime parameter lists must have length n0".into(),
        ));
    }
    Ok(())
}

/// Configuration of the standard two-regime benchmark.
pub fn benchmark_config(jump_rate: f64) -> ModelConfig {
    ModelConfig {
        d: 1,
        n0: 2,
        eps0: 1.0,
        h_const: 1.5,
        qbar: 1.5,
        lambda0: 0.5,
        rho: RhoConfig::Linear { scale: 1.0 },
        model: BuiltinModel::SinusoidalSwitch {
            base: 1.0,
            amplitude: 0.5,
            ou_rate: 1.0,
            ou_means: [0.5, -0.5],
            sigma: [1.0, 0.8],
            jump: Some(JumpConfig {
                rate: jump_rate,
                size: JumpSizeConfig::SymmetricShiftedExp { min: 1.0, rate: 2.0 },
            }),
        },
    }
}

/// The standard two-regime benchmark model: d = 1, OU drift, switching rates
/// `1 ± 0.5 sin(x)` in `[0.5, 1.5]`, compound-Poisson jumps of magnitude
/// `1 + Exp(2)` with random sign.
pub fn benchmark_two_regime(jump_rate: f64) -> ModelSpec {
    build_model(&benchmark_config(jump_rate)).expect("benchmark config is valid")
}

/// Unit-diffusion single-regime model (`b = 0`, `a = I`, no jumps) with a
/// full ellipticity floor; the pure reflection-coupling case.
pub fn unit_diffusion(dim: usize) -> ModelSpec {
    build_model(&ModelConfig {
        d: dim,
        n0: 1,
        eps0: 1.0,
        h_const: 1.0,
        qbar: 1.0,
        lambda0: 1.0,
        rho: RhoConfig::Linear { scale: 1.0 },
        model: BuiltinModel::UnitDiffusion,
    })
    .expect("unit diffusion config is valid")
}

/// Two-state chain with constant symmetric rate `c` and no diffusion, the
/// closed-form reference for resolvent and transition tests.
pub fn constant_rate_chain(c: f64) -> ModelSpec {
    build_model(&ModelConfig {
        d: 1,
        n0: 2,
        eps0: 1.0,
        h_const: c,
        qbar: c,
        lambda0: 0.0,
        rho: RhoConfig::Linear { scale: 1.0 },
        model: BuiltinModel::Constant {
            drift: vec![vec![0.0], vec![0.0]],
            sigma: vec![0.0, 0.0],
            q: vec![vec![-c, c], vec![c, -c]],
            jump: None,
        },
    })
    .expect("chain config is valid")
}

/// Two-state chain with constant rates and unit diffusion, for transition
/// kernel comparisons that need a continuous component.
pub fn constant_rate_diffusive(c: f64) -> ModelSpec {
    build_model(&ModelConfig {
        d: 1,
        n0: 2,
        eps0: 1.0,
        h_const: c,
        qbar: c,
        lambda0: 0.0,
        rho: RhoConfig::Linear { scale: 1.0 },
        model: BuiltinModel::Constant {
            drift: vec![vec![0.0], vec![0.0]],
            sigma: vec![1.0, 1.0],
            q: vec![vec![-c, c], vec![c, -c]],
            jump: None,
        },
    })
    .expect("chain config is valid")
}

/// Parse a model configuration from JSON text.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    Ok(serde_json::from_str(text)?)
}
