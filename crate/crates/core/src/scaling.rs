//! Desk-scale checks of the three scaling laws and the covering-number
//! constants of deep function classes.
//!
//! * [`gd_rate_experiment`]: gradient descent on a quadratic converges like
//!   `β^K` with `β = 1 − μ/G`.
//! * [`model_size_experiment`]: fixed-point residuals of an averaged operator
//!   stay below `‖f₀ − f*‖/√(γ(K+1))`.
//! * [`data_size_experiment`]: the gap between empirical and true mean of a
//!   bounded loss decays like `N^{-1/2}`.
//! * [`joint_law_report`]: `β^K + P^{-1/2} + N^{-1/2}` on a grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::Block;
use crate::error::{Error, Result};
use crate::lipnum::{empirical_sup_jacobian, DomainSampler};
use crate::matrix::Matrix;
use crate::report::{ext_f64, fmt_real};
use crate::seed::{gaussian_matrix, Seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Law {
    /// `y = prefactor · parameter^x`
    Exponential,
    /// `y = prefactor · x^parameter`
    Power,
}

/// A least-squares fit in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub law: Law,
    /// Base `β` for exponential laws, exponent for power laws.
    pub parameter: f64,
    pub prefactor: f64,
    pub r_squared: f64,
    pub series: Vec<(f64, f64)>,
}

impl ScalingFit {
    pub fn predict(&self, x: f64) -> f64 {
        match self.law {
            Law::Exponential => self.prefactor * self.parameter.powf(x),
            Law::Power => self.prefactor * x.powf(self.parameter),
        }
    }

    /// CSV with columns `x,y,fit,residual`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,fit,residual\n");
        for &(x, y) in &self.series {
            let f = self.predict(x);
            out.push_str(&format!("{},{},{},{}\n", fmt_real(x), fmt_real(y), fmt_real(f), fmt_real(y - f)));
        }
        out
    }
}

/// Slope, intercept and R² of an ordinary least-squares line.
pub(crate) fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r2 = if syy > 0.0 {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    } else if sse == 0.0 {
        1.0
    } else {
        0.0
    };
    (slope, intercept, r2)
}

fn check_series(series: &[(f64, f64)], positive_x: bool) -> Result<()> {
    if series.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "a fit needs at least 3 points, got {}",
            series.len()
        )));
    }
    for &(x, y) in series {
        if !(y > 0.0) || !y.is_finite() || !x.is_finite() || (positive_x && !(x > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "point ({x}, {y}) cannot be taken to log space"
            )));
        }
    }
    Ok(())
}

/// Fits `y = C·x^p` by least squares on `(log x, log y)`.
pub fn fit_power_law(series: &[(f64, f64)]) -> Result<ScalingFit> {
    check_series(series, true)?;
    let xs: Vec<f64> = series.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = series.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, r_squared) = least_squares(&xs, &ys);
    Ok(ScalingFit {
        law: Law::Power,
        parameter: slope,
        prefactor: intercept.exp(),
        r_squared,
        series: series.to_vec(),
    })
}

/// Fits `y = C·β^x` by least squares on `(x, log y)`.
pub fn fit_exponential(series: &[(f64, f64)]) -> Result<ScalingFit> {
    check_series(series, false)?;
    let xs: Vec<f64> = series.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = series.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, r_squared) = least_squares(&xs, &ys);
    Ok(ScalingFit {
        law: Law::Exponential,
        parameter: slope.exp(),
        prefactor: intercept.exp(),
        r_squared,
        series: series.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Training steps

pub const GD_BURN_IN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdReport {
    pub mu: f64,
    pub g: f64,
    /// `1 − μ/G`
    pub predicted_beta: f64,
    /// `‖W_k − W*‖` for `k = 0..=K`
    pub errors: Vec<f64>,
    /// Exponential fit over the steps after burn-in that stay above the
    /// rounding floor.
    pub fit: ScalingFit,
    pub flags: Vec<String>,
}

/// Gradient descent with step `1/G` on `½ Σ λ_j (w_j − w*_j)²`, the `λ_j`
/// evenly spaced over `[μ, G]`, started from zero with a seeded minimiser.
pub fn gd_rate_experiment(mu: f64, g: f64, dim: usize, k: usize, seed: Seed) -> Result<GdReport> {
    if !(mu > 0.0 && mu <= g && g.is_finite()) {
        return Err(Error::InvalidArgument(format!("need 0 < mu <= G, got mu={mu}, G={g}")));
    }
    if dim == 0 || k == 0 {
        return Err(Error::InvalidArgument("dim and K must be positive".into()));
    }
    let lambdas: Vec<f64> = (0..dim)
        .map(|j| {
            if dim == 1 {
                mu
            } else {
                mu + (g - mu) * j as f64 / (dim - 1) as f64
            }
        })
        .collect();
    let w_star = gaussian_matrix(1, dim, 1.0, &mut seed.rng()).into_vec();
    let w_star_norm = w_star.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut w = vec![0.0; dim];
    let err = |w: &[f64]| -> f64 {
        w.iter()
            .zip(&w_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut errors = vec![err(&w)];
    for _ in 0..k {
        for ((wi, ws), l) in w.iter_mut().zip(&w_star).zip(&lambdas) {
            *wi -= (l / g) * (*wi - ws);
        }
        errors.push(err(&w));
    }
    // Below this the iterates only move by rounding.
    let floor = 64.0 * f64::EPSILON * (1.0 + w_star_norm);
    let usable: Vec<(f64, f64)> = errors
        .iter()
        .enumerate()
        .skip(GD_BURN_IN.min(k))
        .take_while(|(_, e)| **e > floor)
        .map(|(i, e)| (i as f64, *e))
        .collect();
    let mut flags = Vec::new();
    let fit = if usable.len() >= 3 {
        fit_exponential(&usable)?
    } else {
        flags.push("floor-reached".into());
        ScalingFit {
            law: Law::Exponential,
            parameter: 0.0,
            prefactor: errors[0],
            r_squared: 1.0,
            series: errors.iter().enumerate().map(|(i, e)| (i as f64, *e)).collect(),
        }
    };
    Ok(GdReport {
        mu,
        g,
        predicted_beta: 1.0 - mu / g,
        errors,
        fit,
        flags,
    })
}

// ---------------------------------------------------------------------------
// Model size

/// `T = (1 − α)·I + α·F` with `F` nonexpansive.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedOperator {
    pub f: Block,
    pub alpha: f64,
}

impl AveragedOperator {
    pub fn new(f: Block, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(AveragedOperator { f, alpha })
    }

    /// `γ = (1 − α)/α`: `‖Tf − f*‖² ≤ ‖f − f*‖² − γ‖Tf − f‖²` for every fixed
    /// point `f*`.
    pub fn gamma(&self) -> f64 {
        (1.0 - self.alpha) / self.alpha
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        x.scale(1.0 - self.alpha).axpy(self.alpha, &self.f.apply(x)?)
    }
}

/// `T = ½(P_A + P_B)` for the lines through the origin of `ℝ²` at angles 0
/// and `theta`, written as an averaged operator with `α = ½` and
/// `F = ½(R_A + R_B)`, the mean of the two reflections.
pub fn averaged_projection(theta: f64) -> Result<AveragedOperator> {
    let reflection = |t: f64| {
        let (s, c) = (2.0 * t).sin_cos();
        Matrix::from_rows(&[&[c, s], &[s, -c]])
    };
    let f = reflection(0.0).add(&reflection(theta))?.scale(0.5);
    AveragedOperator::new(Block::linear(f)?, 0.5)
}

/// `T = (1 − α)I + α·R_θ` for the plane rotation `R_θ`, fixed point 0.
pub fn averaged_rotation(theta: f64, alpha: f64) -> Result<AveragedOperator> {
    let (s, c) = theta.sin_cos();
    let r = Matrix::from_rows(&[&[c, s], &[-s, c]]);
    AveragedOperator::new(Block::linear(r)?, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSizeReport {
    pub alpha: f64,
    pub gamma: f64,
    /// `‖Tf_K − f_K‖` for `K = 0..=Kmax`
    pub residuals: Vec<f64>,
    /// `‖f₀ − f*‖/√(γ(K+1))`
    pub bounds: Vec<f64>,
    pub bound_ok: bool,
    pub violations: usize,
    /// Power-law fit of the residuals against `K + 1`, when at least three
    /// residuals are positive.
    pub fit: Option<ScalingFit>,
    pub assumptions: Vec<String>,
    pub flags: Vec<String>,
}

/// Runs `f_{k+1} = T f_k` and checks the residual envelope at every `K`.
///
/// Without a supplied fixed point, `f*` is taken as the iterate after
/// `20·Kmax` further steps.
pub fn model_size_experiment(
    op: &AveragedOperator,
    f0: &Matrix,
    k_max: usize,
    fixed_point: Option<&Matrix>,
) -> Result<ModelSizeReport> {
    let sampler = DomainSampler::ball(f0.rows(), f0.cols(), (2.0 * f0.frobenius()).max(1.0));
    let l = empirical_sup_jacobian(&op.f, &sampler, 32, Seed::default())?;
    if l > 1.0 + 1e-3 {
        return Err(Error::InvalidArgument(format!(
            "F is not nonexpansive: sampled Lipschitz estimate {l}"
        )));
    }
    let mut flags = Vec::new();
    let f_star = match fixed_point {
        Some(p) => p.clone(),
        None => {
            flags.push("fixed-point-by-iteration".into());
            let mut f = f0.clone();
            for _ in 0..20 * k_max.max(50) {
                f = op.apply(&f)?;
            }
            f
        }
    };
    let dist0 = f0.sub(&f_star)?.frobenius();
    let gamma = op.gamma();
    let mut residuals = Vec::with_capacity(k_max + 1);
    let mut bounds = Vec::with_capacity(k_max + 1);
    let mut f = f0.clone();
    for kk in 0..=k_max {
        let tf = op.apply(&f)?;
        residuals.push(tf.sub(&f)?.frobenius());
        bounds.push(dist0 / (gamma * (kk + 1) as f64).sqrt());
        f = tf;
    }
    let violations = residuals.iter().zip(&bounds).filter(|(r, b)| r > b).count();
    let positive: Vec<(f64, f64)> = residuals
        .iter()
        .enumerate()
        .filter(|(_, r)| **r > 0.0)
        .map(|(i, r)| ((i + 1) as f64, *r))
        .collect();
    let fit = if positive.len() >= 3 {
        Some(fit_power_law(&positive)?)
    } else {
        flags.push("residuals-vanish".into());
        None
    };
    Ok(ModelSizeReport {
        alpha: op.alpha,
        gamma,
        residuals,
        bounds,
        bound_ok: violations == 0,
        violations,
        fit,
        assumptions: vec!["bounded linear regularity ‖f − f*‖ ≤ C‖f − Tf‖ (not checked)".into()],
        flags,
    })
}

// ---------------------------------------------------------------------------
// Data size

/// Bounded loss distributions on `[0, G]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossDistribution {
    Uniform { g: f64 },
    /// `0` or `G` with probability one half each.
    TwoPoint { g: f64 },
    Constant { value: f64 },
}

impl LossDistribution {
    fn mean(&self) -> f64 {
        match *self {
            LossDistribution::Uniform { g } | LossDistribution::TwoPoint { g } => g / 2.0,
            LossDistribution::Constant { value } => value,
        }
    }

    fn draw(&self, rng: &mut impl rand::Rng) -> f64 {
        match *self {
            LossDistribution::Uniform { g } => g * rng.gen::<f64>(),
            LossDistribution::TwoPoint { g } => {
                if rng.gen::<bool>() {
                    g
                } else {
                    0.0
                }
            }
            LossDistribution::Constant { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSizeReport {
    pub distribution: LossDistribution,
    pub trials: usize,
    /// `(N, mean over trials of |empirical mean − true mean|)`
    pub gaps: Vec<(f64, f64)>,
    pub fit: Option<ScalingFit>,
    pub flags: Vec<String>,
}

/// Mean absolute gap between the empirical and the true mean loss over
/// `trials` independent samples of each size `N`, with a power-law fit.
pub fn data_size_experiment(
    ns: &[usize],
    trials: usize,
    distribution: LossDistribution,
    seed: Seed,
) -> Result<DataSizeReport> {
    if ns.is_empty() || ns.windows(2).any(|w| w[1] <= w[0]) || ns[0] == 0 {
        return Err(Error::InvalidArgument("sample sizes must be positive and increasing".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let truth = distribution.mean();
    let gaps: Vec<(f64, f64)> = ns
        .iter()
        .enumerate()
        .map(|(a, &n)| {
            let per_trial: Vec<f64> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = seed.derive(a as u64).derive(t as u64).rng();
                    // Centred accumulation: a zero-variance loss gives an exact 0.
                    let dev: f64 = (0..n).map(|_| distribution.draw(&mut rng) - truth).sum();
                    (dev / n as f64).abs()
                })
                .collect();
            (n as f64, per_trial.iter().sum::<f64>() / trials as f64)
        })
        .collect();
    let mut flags = Vec::new();
    if trials < 30 {
        flags.push("fewer-than-30-trials".into());
    }
    let fit = if gaps.iter().all(|g| g.1 > 0.0) && gaps.len() >= 3 {
        Some(fit_power_law(&gaps)?)
    } else {
        flags.push("degenerate-fit: zero gaps".into());
        None
    };
    Ok(DataSizeReport {
        distribution,
        trials,
        gaps,
        fit,
        flags,
    })
}

// ---------------------------------------------------------------------------
// Joint law

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Identity,
    /// `g(δ) = exp(−δ)`, the accuracy-style reading of the error.
    NegExp,
}

impl Link {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Link::Identity => v,
            Link::NegExp => (-v).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPoint {
    pub k: f64,
    pub p: f64,
    pub n: f64,
    pub steps_term: f64,
    pub model_term: f64,
    pub data_term: f64,
    /// `β^K + P^{a} + N^{b}` with the fitted exponents.
    pub composite: f64,
    /// `β^K + P^{-1/2} + N^{-1/2}`
    pub reference: f64,
    pub linked: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLawReport {
    pub beta: f64,
    pub model_exponent: f64,
    pub data_exponent: f64,
    pub link: Link,
    pub points: Vec<JointPoint>,
}

/// Evaluates the composite bound on a `(K, P, N)` grid from the three fitted
/// components.
pub fn joint_law_report(
    gd: &ScalingFit,
    model: &ScalingFit,
    data: &ScalingFit,
    grid: &[(f64, f64, f64)],
    link: Link,
) -> Result<JointLawReport> {
    if gd.law != Law::Exponential || model.law != Law::Power || data.law != Law::Power {
        return Err(Error::InvalidArgument(
            "joint law needs an exponential step fit and power-law size fits".into(),
        ));
    }
    let beta = gd.parameter;
    let points = grid
        .iter()
        .map(|&(k, p, n)| {
            let steps_term = beta.powf(k);
            let model_term = p.powf(model.parameter);
            let data_term = n.powf(data.parameter);
            let composite = steps_term + model_term + data_term;
            JointPoint {
                k,
                p,
                n,
                steps_term,
                model_term,
                data_term,
                composite,
                reference: steps_term + p.powf(-0.5) + n.powf(-0.5),
                linked: link.apply(composite),
            }
        })
        .collect();
    Ok(JointLawReport {
        beta,
        model_exponent: model.parameter,
        data_exponent: data.parameter,
        link,
        points,
    })
}

impl JointLawReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("K,P,N,steps_term,model_term,data_term,composite,reference,linked\n");
        for p in &self.points {
            let row = [
                p.k,
                p.p,
                p.n,
                p.steps_term,
                p.model_term,
                p.data_term,
                p.composite,
                p.reference,
                p.linked,
            ]
            .map(fmt_real)
            .join(",");
            out.push_str(&row);
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Covering constants

/// Per-layer weight-norm bounds `[B₁, B₂, B₃]` (the MLP form ignores `B₃`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerBounds {
    /// A finite network with exactly these layers.
    Given { layers: Vec<[f64; 3]> },
    /// The same bounds at every depth.
    Uniform { bounds: [f64; 3] },
    /// `B_{k·} = C_W ρ^k` for `k ≥ 1`.
    Decay { c_w: f64, rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoveringSpec {
    pub bounds: LayerBounds,
    #[serde(default = "one")]
    pub l_sigma: f64,
    /// Input-norm bound of the second MLP sub-layer.
    #[serde(default = "one")]
    pub b_z: f64,
    /// Uniform contraction factor for the MLP form; defaults to
    /// `L_σ B₁ B₂` layer by layer.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_truncation")]
    pub truncation_k: usize,
    #[serde(default = "default_tail_tolerance")]
    pub tail_tolerance: f64,
}

fn one() -> f64 {
    1.0
}

fn default_truncation() -> usize {
    200
}

fn default_tail_tolerance() -> f64 {
    1e-9
}

impl CoveringSpec {
    pub fn new(bounds: LayerBounds) -> Self {
        CoveringSpec {
            bounds,
            l_sigma: 1.0,
            b_z: 1.0,
            gamma: None,
            truncation_k: default_truncation(),
            tail_tolerance: default_tail_tolerance(),
        }
    }

    fn depth(&self) -> usize {
        match &self.bounds {
            LayerBounds::Given { layers } => layers.len(),
            _ => self.truncation_k,
        }
    }

    /// Bounds of layer `k`, counted from 1.
    fn layer(&self, k: usize) -> [f64; 3] {
        match &self.bounds {
            LayerBounds::Given { layers } => layers[k - 1],
            LayerBounds::Uniform { bounds } => *bounds,
            LayerBounds::Decay { c_w, rho } => [c_w * rho.powi(k as i32); 3],
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |v: f64| !(v >= 0.0 && v.is_finite());
        if bad(self.l_sigma) || bad(self.b_z) || !(self.tail_tolerance > 0.0) {
            return Err(Error::InvalidArgument("covering constants must be finite and nonnegative".into()));
        }
        match &self.bounds {
            LayerBounds::Given { layers } => {
                if layers.iter().flatten().any(|v| bad(*v)) {
                    return Err(Error::InvalidArgument("layer bounds must be finite and nonnegative".into()));
                }
            }
            LayerBounds::Uniform { bounds } => {
                if bounds.iter().any(|v| bad(*v)) {
                    return Err(Error::InvalidArgument("layer bounds must be finite and nonnegative".into()));
                }
            }
            LayerBounds::Decay { c_w, rho } => {
                if bad(*c_w) || !(*rho >= 0.0 && *rho < 1.0) {
                    return Err(Error::InvalidArgument("decay needs C_W >= 0 and 0 <= rho < 1".into()));
                }
            }
        }
        if self.depth() == 0 {
            return Err(Error::InvalidArgument("covering depth must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerTerm {
    pub k: usize,
    /// Factor carried from layer `k − 1` into layer `k`.
    pub decay: f64,
    /// Layer's own contribution.
    pub term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveringReport {
    /// `C^{(K)} = Σ_{k ≤ K} (Π_{j = k+1}^{K} g_j)·T_k`
    pub value: f64,
    /// Bound on `|C^{(∞)} − C^{(K)}|`; zero for a finite network.
    #[serde(with = "ext_f64")]
    pub tail_bound: f64,
    pub depth: usize,
    pub per_layer: Vec<LayerTerm>,
    pub flags: Vec<String>,
}

impl CoveringReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,decay,term\n");
        for t in &self.per_layer {
            out.push_str(&format!("{},{},{}\n", t.k, fmt_real(t.decay), fmt_real(t.term)));
        }
        out
    }
}

/// `(g_k, T_k)` for layer bounds `b`.
type LayerRule<'a> = &'a dyn Fn([f64; 3]) -> (f64, f64);

fn covering_sum(spec: &CoveringSpec, rule: LayerRule) -> Result<CoveringReport> {
    let depth = spec.depth();
    let mut value = 0.0;
    let mut per_layer = Vec::with_capacity(depth);
    for k in 1..=depth {
        let (g, t) = rule(spec.layer(k));
        value = g * value + t;
        per_layer.push(LayerTerm { k, decay: g, term: t });
    }
    let mut flags = Vec::new();
    let tail_bound = match &spec.bounds {
        LayerBounds::Given { .. } => 0.0,
        LayerBounds::Uniform { bounds } => {
            let (g, t) = rule(*bounds);
            if g >= 1.0 {
                if t > 0.0 {
                    return Err(Error::SeriesDivergent(format!(
                        "layer decay factor {g} >= 1 at every depth with per-layer term {t} > 0"
                    )));
                }
                flags.push("inconclusive-tail".into());
                f64::INFINITY
            } else {
                (t / (1.0 - g) - value).abs()
            }
        }
        LayerBounds::Decay { .. } => {
            // Bounds shrink with depth, so layer K+1 dominates every later
            // one and the envelope limit lies in [0, T/(1 − g)].
            let (g, t) = rule(spec.layer(depth + 1));
            if g >= 1.0 {
                flags.push("inconclusive-tail".into());
                f64::INFINITY
            } else {
                (t / (1.0 - g) - value).abs().max(value)
            }
        }
    };
    if tail_bound > spec.tail_tolerance {
        flags.push("tail-exceeds-tolerance".into());
    }
    Ok(CoveringReport {
        value,
        tail_bound,
        depth,
        per_layer,
        flags,
    })
}

/// Covering constant of a deep two-layer-MLP class under uniform contraction.
pub fn mlp_covering_constant(spec: &CoveringSpec) -> Result<CoveringReport> {
    spec.validate()?;
    if let Some(g) = spec.gamma {
        if !(0.0..1.0).contains(&g) {
            return Err(Error::InvalidArgument(format!("contraction factor must lie in [0, 1), got {g}")));
        }
    }
    let check_depth = match &spec.bounds {
        LayerBounds::Decay { .. } => 1,
        _ => spec.depth(),
    };
    for k in 1..=check_depth {
        let [b1, b2, _] = spec.layer(k);
        let product = spec.l_sigma * b1 * b2;
        let limit = spec.gamma.unwrap_or(1.0);
        let violated = match spec.gamma {
            Some(_) => product > limit,
            None => product >= 1.0,
        };
        if violated {
            return Err(Error::ContractionViolated { layer: k, product });
        }
    }
    let (ls, bz, gamma) = (spec.l_sigma, spec.b_z, spec.gamma);
    let rule = move |[b1, b2, _]: [f64; 3]| {
        let m3 = gamma.unwrap_or(ls * b1 * b2);
        let term = ls.powf(2.0 / 3.0) * ((b1 * (bz * b2).powi(2)).cbrt() + (bz * b2 * b1 * b1).cbrt());
        (m3.powf(2.0 / 3.0), term)
    };
    let mut report = covering_sum(spec, &rule)?;
    if spec.gamma.is_none() {
        report.flags.push("contraction-from-layer-bounds".into());
    }
    Ok(report)
}

/// Covering constant of a deep transformer class with layer-wise decay
/// factors `γ_j = L_σ^{2/3}(B_{j2}B_{j3}(1 + 4B_{j1}))^{2/3}`.
pub fn transformer_covering_constant(spec: &CoveringSpec) -> Result<CoveringReport> {
    spec.validate()?;
    let ls = spec.l_sigma;
    let rule = move |[b1, b2, b3]: [f64; 3]| {
        let gamma = ls.powf(2.0 / 3.0) * (b2 * b3 * (1.0 + 4.0 * b1)).powf(2.0 / 3.0);
        let term = b1.cbrt() * (2.0 * ls * b2 * b3).powf(2.0 / 3.0)
            + b2.cbrt() * (ls * b3).powf(2.0 / 3.0)
            + (ls * b3).cbrt();
        (gamma, term)
    };
    covering_sum(spec, &rule)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_and_exponential_fits() {
        let s: Vec<(f64, f64)> = (1..=20).map(|i| (i as f64, (i as f64).powf(-0.5))).collect();
        let f = fit_power_law(&s).unwrap();
        assert!((f.parameter + 0.5).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12);
        let s: Vec<(f64, f64)> = (0..30).map(|i| (i as f64, 3.0 * 0.9f64.powi(i))).collect();
        let f = fit_exponential(&s).unwrap();
        assert!((f.parameter - 0.9).abs() < 1e-12);
        assert!((f.prefactor - 3.0).abs() < 1e-10);
    }

    #[test]
    fn fits_reject_bad_series() {
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.5)]).is_err());
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
        assert!(fit_power_law(&[(0.0, 1.0), (2.0, 1.0), (3.0, 1.0)]).is_err());
        assert!(fit_exponential(&[(0.0, 1.0), (2.0, 1.0), (3.0, 1.0)]).is_ok());
    }

    #[test]
    fn gd_single_step_when_perfectly_conditioned() {
        let r = gd_rate_experiment(10.0, 10.0, 4, 1, Seed::default()).unwrap();
        assert!(r.errors[1] <= 1e-12);
        assert_eq!(r.fit.parameter, 0.0);
        assert!(r.flags.iter().any(|f| f == "floor-reached"));
        assert!(gd_rate_experiment(2.0, 1.0, 4, 10, Seed::default()).is_err());
    }

    #[test]
    fn identity_averaged_operator_has_zero_residuals() {
        let op = AveragedOperator::new(Block::identity(2), 0.5).unwrap();
        let f0 = Matrix::row_vector(&[1.0, -2.0]);
        let r = model_size_experiment(&op, &f0, 20, None).unwrap();
        assert!(r.residuals.iter().all(|v| *v == 0.0));
        assert!(r.bound_ok && r.fit.is_none());
    }

    #[test]
    fn expansive_f_is_rejected() {
        let op = AveragedOperator::new(Block::linear(Matrix::identity(2).scale(1.5)).unwrap(), 0.5).unwrap();
        assert!(model_size_experiment(&op, &Matrix::row_vector(&[1.0, 0.0]), 5, None).is_err());
    }

    #[test]
    fn constant_losses_are_flagged() {
        let r = data_size_experiment(&[4, 8, 16], 30, LossDistribution::Constant { value: 0.3 }, Seed::default())
            .unwrap();
        assert!(r.gaps.iter().all(|g| g.1 == 0.0));
        assert!(r.fit.is_none());
    }

    #[test]
    fn joint_law_grid_point() {
        let gd = ScalingFit { law: Law::Exponential, parameter: 0.9, prefactor: 1.0, r_squared: 1.0, series: vec![] };
        let half = ScalingFit { law: Law::Power, parameter: -0.5, prefactor: 1.0, r_squared: 1.0, series: vec![] };
        let r = joint_law_report(&gd, &half, &half, &[(10.0, 100.0, 100.0)], Link::Identity).unwrap();
        assert!((r.points[0].steps_term - 0.34868).abs() < 5e-6);
        assert!((r.points[0].composite - 0.5487).abs() < 5e-5);
    }

    #[test]
    fn zero_bounds_give_zero_constants() {
        let z = CoveringSpec::new(LayerBounds::Uniform { bounds: [0.0; 3] });
        assert_eq!(mlp_covering_constant(&z).unwrap().value, 0.0);
        assert_eq!(transformer_covering_constant(&z).unwrap().value, 0.0);
    }

    #[test]
    fn constant_transformer_bounds_diverge() {
        let s = CoveringSpec::new(LayerBounds::Uniform { bounds: [1.0; 3] });
        assert!(matches!(transformer_covering_constant(&s), Err(Error::SeriesDivergent(_))));
    }

    #[test]
    fn mlp_contraction_is_enforced() {
        let mut s = CoveringSpec::new(LayerBounds::Given { layers: vec![[0.5, 0.5, 0.0], [2.0, 1.0, 0.0]] });
        s.gamma = Some(0.5);
        assert!(matches!(
            mlp_covering_constant(&s),
            Err(Error::ContractionViolated { layer: 2, .. })
        ));
    }
}
