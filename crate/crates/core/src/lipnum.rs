//! Lipschitz-type constants of blocks.
//!
//! Three quantities are distinguished:
//!
//! * `L(T) = sup_x ‖T′(x)‖₂`, the Lipschitz constant of `T` in its own norm;
//! * the Lip number `Lip(T) = lim_n L(Tⁿ)^{1/n}`, which does not depend on the
//!   choice of equivalent norm and plays the role of a spectral radius;
//! * the Dahlquist margin `m(−F) = lim_{h→0⁺} (1 − L(I + hF))/h`, whose sign
//!   decides whether `I + F` is nonexpansive for small residual weights.
//!
//! Closed-form upper bounds come from [`analytic_lip_bound`]. Sampled
//! estimates are lower bounds of the corresponding suprema; nothing here
//! certifies a global supremum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{Block, Head, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::matrix::{spectral_norm, symmetric_max_eigenvalue, Matrix};
use crate::report::ext_f64;
use crate::seed::{uniform_ball, uniform_sphere, Seed};

/// Where sample points are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Uniform in the Frobenius ball.
    #[default]
    Ball,
    /// Uniform on the bounding sphere.
    Sphere,
    /// Points on the bounding sphere where one attention row splits its
    /// weight evenly between two keys, the switching set of the softmax.
    /// Only the attention that reads the raw input is targeted; blocks
    /// without one get plain sphere samples.
    SoftmaxTie,
}

/// Bounded sampling domain for the empirical estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSampler {
    pub rows: usize,
    pub cols: usize,
    pub radius: f64,
    #[serde(default)]
    pub kind: SamplerKind,
}

pub const DEFAULT_RADIUS: f64 = 10.0;
pub const DEFAULT_SAMPLES: usize = 64;

impl DomainSampler {
    pub fn ball(rows: usize, cols: usize, radius: f64) -> Self {
        DomainSampler {
            rows,
            cols,
            radius,
            kind: SamplerKind::Ball,
        }
    }

    pub fn sphere(rows: usize, cols: usize, radius: f64) -> Self {
        DomainSampler {
            rows,
            cols,
            radius,
            kind: SamplerKind::Sphere,
        }
    }

    pub fn softmax_tie(rows: usize, cols: usize, radius: f64) -> Self {
        DomainSampler {
            rows,
            cols,
            radius,
            kind: SamplerKind::SoftmaxTie,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sampling radius must be finite and positive, got {}",
                self.radius
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidArgument("sampling shape must be nonempty".into()));
        }
        Ok(())
    }

    /// Sample `i` is drawn from its own derived stream, so the set of points
    /// does not depend on evaluation order.
    pub fn sample(&self, seed: Seed, i: usize) -> Matrix {
        let mut rng = seed.derive(i as u64).rng();
        match self.kind {
            SamplerKind::Ball => uniform_ball(self.rows, self.cols, self.radius, &mut rng),
            SamplerKind::Sphere | SamplerKind::SoftmaxTie => {
                uniform_sphere(self.rows, self.cols, self.radius, &mut rng)
            }
        }
    }

    /// Sample `i` adapted to `b`; differs from [`DomainSampler::sample`] only
    /// for [`SamplerKind::SoftmaxTie`].
    pub fn sample_for(&self, b: &Block, seed: Seed, i: usize) -> Matrix {
        if self.kind != SamplerKind::SoftmaxTie {
            return self.sample(seed, i);
        }
        let mut rng = seed.derive(i as u64).rng();
        let x = uniform_sphere(self.rows, self.cols, 1.0, &mut rng);
        let tied = input_attention(b)
            .and_then(|(heads, _)| softmax_tie(&x, &heads[i % heads.len()], i))
            .unwrap_or(x);
        let norm = tied.frobenius();
        tied.scale(self.radius / norm)
    }
}

/// Heads and logit scale of the attention that sees the block input directly.
fn input_attention(b: &Block) -> Option<(&[Head], usize)> {
    match b {
        Block::SelfAttention(a) => Some((std::slice::from_ref(&a.head), a.scale_dim)),
        Block::MultiHeadSelfAttention(a) => Some((&a.heads, a.scale_dim)),
        Block::PostLnTransformer(t) => Some((&t.attn.heads, t.attn.scale_dim)),
        Block::Residual { inner, .. } => input_attention(inner),
        Block::Stack { blocks, .. } => blocks.first().and_then(input_attention),
        _ => None,
    }
}

/// Moves one key row of `x` so that query row `i mod s` gives equal logits
/// to its current favourite key and a second key. The logits are quadratic
/// forms in `x`, so the tie survives any rescaling of `x`.
fn softmax_tie(x: &Matrix, head: &Head, i: usize) -> Option<Matrix> {
    let s = x.rows();
    let q = i % s;
    // g·x_j is the (unscaled) logit of key j for query q
    let g = Matrix::row_vector(x.row(q))
        .matmul(&head.wq)
        .ok()?
        .matmul(&head.wk.transpose())
        .ok()?;
    let gg = g.dot(&g).ok()?;
    if gg == 0.0 {
        return None;
    }
    let logit = |m: &Matrix, j: usize| -> f64 { g.row(0).iter().zip(m.row(j)).map(|(a, b)| a * b).sum() };
    let top = (0..s).max_by(|&a, &b| logit(x, a).total_cmp(&logit(x, b)))?;
    let others: Vec<usize> = (0..s).filter(|&j| j != q && j != top).collect();
    if others.is_empty() {
        return None;
    }
    let j2 = others[(i / s) % others.len()];
    let shift = (logit(x, top) - logit(x, j2)) / gg;
    let mut out = x.clone();
    for (v, gv) in out.row_mut(j2).iter_mut().zip(g.row(0)) {
        *v += shift * gv;
    }
    Some(out)
}

/// Default central-difference step at `x`.
pub fn default_step(x: &Matrix) -> f64 {
    1e-5 * (1.0 + x.frobenius())
}

/// Dense Jacobian of `b` at `x` in the row-major flattening, assembled column
/// by column from central differences along the unit basis.
pub fn jacobian(b: &Block, x: &Matrix, h: f64) -> Result<Matrix> {
    let n = x.rows() * x.cols();
    let mut jac = Matrix::zeros(n, n);
    let mut dir = Matrix::zeros(x.rows(), x.cols());
    for j in 0..n {
        dir.as_mut_slice()[j] = 1.0;
        let col = b.jvp(x, &dir, h)?;
        dir.as_mut_slice()[j] = 0.0;
        for (i, v) in col.as_slice().iter().enumerate() {
            jac.set(i, j, *v);
        }
    }
    Ok(jac)
}

/// Jacobian of `b` at `x`, multiplied out over stack members by the chain
/// rule. Each leaf is differenced with the step `rel_step·(1 + ‖input‖_F)` of
/// its own input, so a deep stack never sees one step that is too large for
/// its later layers. `None` when a ReLU pre-activation lies within ten steps
/// of its kink.
pub fn local_jacobian(b: &Block, x: &Matrix, rel_step: f64) -> Result<Option<Matrix>> {
    match b {
        Block::Stack { blocks, .. } if !blocks.is_empty() => {
            let mut input = x.clone();
            let mut acc: Option<Matrix> = None;
            for blk in blocks {
                let Some(j) = local_jacobian(blk, &input, rel_step)? else {
                    return Ok(None);
                };
                acc = Some(match acc {
                    None => j,
                    Some(a) => j.matmul(&a)?.ensure_finite("jacobian product")?,
                });
                input = blk.apply(&input)?;
            }
            Ok(acc)
        }
        _ => {
            let h = rel_step * (1.0 + x.frobenius());
            if !b.is_smooth() {
                let mut margin = f64::INFINITY;
                b.apply_with_margin(x, &mut margin)?;
                if margin < 10.0 * h {
                    return Ok(None);
                }
            }
            jacobian(b, x, h).map(Some)
        }
    }
}

/// Spectral radius of a square matrix from the growth `‖Aᵏv‖^{1/k}`, refined
/// by the ratio of the last two growth factors.
pub fn spectral_radius_by_growth(a: &Matrix, steps: usize, seed: Seed) -> Result<f64> {
    let n = a.rows();
    let mut v = crate::seed::gaussian_matrix(n, 1, 1.0, &mut seed.rng());
    let nv = v.frobenius();
    v = v.scale(1.0 / nv);
    let mut log_growth = Vec::with_capacity(steps);
    for _ in 0..steps.max(2) {
        v = a.matmul(&v)?;
        let nv = v.frobenius();
        if nv == 0.0 {
            return Ok(0.0);
        }
        log_growth.push(nv.ln());
        v = v.scale(1.0 / nv);
    }
    // Average the per-step log growth over the second half: for a complex
    // dominant pair the single-step ratio oscillates, its average does not.
    let tail = &log_growth[log_growth.len() / 2..];
    Ok((tail.iter().sum::<f64>() / tail.len() as f64).exp())
}

/// Result of sampling `‖T′(x)‖₂` over a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianSample {
    /// max over kept samples of `‖T′(x)‖₂`
    pub sup: f64,
    /// min over kept samples of the smallest singular value of `T′(x)`
    pub inf: Option<f64>,
    /// max over kept samples of the spectral radius of `T′(x)`
    pub sup_spectral_radius: f64,
    pub kept: usize,
    pub excluded_kinks: usize,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOptions {
    pub n_samples: usize,
    /// Also compute the smallest singular value per sample.
    pub with_inf: bool,
    /// Relative finite-difference step (scaled by `1 + ‖x‖_F`).
    pub rel_step: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            n_samples: DEFAULT_SAMPLES,
            with_inf: false,
            rel_step: 1e-5,
        }
    }
}

struct PointEstimate {
    norm: f64,
    inf: Option<f64>,
    radius: f64,
}

fn point_estimate(b: &Block, x: &Matrix, opts: &EstimatorOptions, seed: Seed) -> Result<Option<PointEstimate>> {
    let Some(jac) = local_jacobian(b, x, opts.rel_step)? else {
        return Ok(None);
    };
    let norm = jacobian_norm(&jac)?;
    let inf = if opts.with_inf {
        Some(smallest_singular_value(&jac, norm)?)
    } else {
        None
    };
    let radius = spectral_radius_by_growth(&jac, 64, seed)?;
    Ok(Some(PointEstimate { norm, inf, radius }))
}

/// `‖J‖₂` by power iteration; when the top two singular values nearly
/// coincide and the iteration stalls, by a full symmetric eigensolve of `JᵀJ`.
fn jacobian_norm(jac: &Matrix) -> Result<f64> {
    match spectral_norm(jac) {
        Err(Error::NonConvergence { .. }) => {
            let gram = jac.transpose().matmul(jac)?;
            Ok(symmetric_max_eigenvalue(&gram)?.max(0.0).sqrt())
        }
        other => other,
    }
}

fn smallest_singular_value(jac: &Matrix, top: f64) -> Result<f64> {
    // λ_min(JᵀJ) = −λ_max(−JᵀJ)
    let gram = jac.transpose().matmul(jac)?;
    let lam = -symmetric_max_eigenvalue(&gram.scale(-1.0))?;
    Ok(lam.max(0.0).sqrt().min(top))
}

/// Sampled estimate of `L(T) = sup_x ‖T′(x)‖₂` over the sampler's domain.
///
/// Each sample's Jacobian is assembled from central differences, then its
/// norm is taken by power iteration on `JᵀJ`. ReLU blocks skip samples that
/// sit within `10h` of a kink. The reduction is an ordered max, so the result
/// does not depend on thread scheduling.
pub fn sample_jacobian(
    b: &Block,
    sampler: &DomainSampler,
    opts: &EstimatorOptions,
    seed: Seed,
) -> Result<JacobianSample> {
    sampler.validate()?;
    if opts.n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if sampler.cols != b.width() {
        return Err(Error::shape("sampler", (sampler.rows, b.width()), (sampler.rows, sampler.cols)));
    }
    let results = (0..opts.n_samples)
        .into_par_iter()
        .map(|i| {
            let x = sampler.sample_for(b, seed, i);
            point_estimate(b, &x, opts, seed.derive(1 << 32 | i as u64))
        })
        .collect::<Vec<_>>();
    let mut sup = 0.0f64;
    let mut sup_rho = 0.0f64;
    let mut inf: Option<f64> = None;
    let mut kept = 0;
    let mut excluded = 0;
    for r in results {
        match r? {
            Some(p) => {
                kept += 1;
                sup = sup.max(p.norm);
                sup_rho = sup_rho.max(p.radius);
                if let Some(v) = p.inf {
                    inf = Some(inf.map_or(v, |m| m.min(v)));
                }
            }
            None => excluded += 1,
        }
    }
    if kept == 0 {
        return Err(Error::Degenerate(format!(
            "all {excluded} samples fell on ReLU kinks"
        )));
    }
    let mut flags = vec!["sampled-lower-bound".to_string()];
    if excluded > 0 {
        flags.push(format!("relu-kink-excluded:{excluded}"));
    }
    Ok(JacobianSample {
        sup,
        inf,
        sup_spectral_radius: sup_rho,
        kept,
        excluded_kinks: excluded,
        flags,
    })
}

/// Sampled estimate of `L(T)`; see [`sample_jacobian`].
pub fn empirical_sup_jacobian(b: &Block, sampler: &DomainSampler, n_samples: usize, seed: Seed) -> Result<f64> {
    let opts = EstimatorOptions {
        n_samples,
        ..Default::default()
    };
    Ok(sample_jacobian(b, sampler, &opts, seed)?.sup)
}

/// `[L̂(Tᵐ)]^{1/m}` for `m = 1, 2, 4, …` up to `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipNumberEstimate {
    /// `(m, [L̂(Tᵐ)]^{1/m})`
    pub sequence: Vec<(usize, f64)>,
    /// The root at the largest `m`.
    pub value: f64,
    /// `[L̂(T^{2k}) / L̂(T^{k})]^{1/k}` for the two largest powers of two `k`,
    /// `2k`; the constant prefactor of `L(Tᵐ)` cancels, so this converges to
    /// the Lip number much faster than the plain root.
    pub extrapolated: f64,
}

/// Powers `1, 2, 4, …` below `n`, followed by `n` itself.
pub fn power_schedule(n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut m = 1;
    while m < n {
        out.push(m);
        m *= 2;
    }
    out.push(n.max(1));
    out
}

/// Estimate of `Lip(T) = lim [L(Tⁿ)]^{1/n}` from the sampled sup-Jacobian of the
/// `m`-fold composition.
///
/// Overflow inside the composition surfaces as a divergence error, which by
/// itself says `L(Tᵐ)` is astronomically large.
pub fn empirical_lip_number(
    b: &Block,
    n: usize,
    sampler: &DomainSampler,
    n_samples: usize,
    seed: Seed,
) -> Result<LipNumberEstimate> {
    if n == 0 {
        return Err(Error::InvalidArgument("power n must be at least 1".into()));
    }
    let mut sequence = Vec::new();
    let mut raw = Vec::new();
    for m in power_schedule(n) {
        let composed = if m == 1 { b.clone() } else { b.repeat(m) };
        let l = empirical_sup_jacobian(&composed, sampler, n_samples, seed)?;
        raw.push((m, l));
        sequence.push((m, l.powf(1.0 / m as f64)));
    }
    let value = sequence.last().map(|p| p.1).unwrap_or(0.0);
    let doubling: Vec<&(usize, f64)> = raw
        .iter()
        .filter(|(m, _)| m.is_power_of_two())
        .collect();
    let extrapolated = match doubling.as_slice() {
        [.., (k, lk), (k2, l2k)] if *k2 == 2 * *k && *lk > 0.0 => (l2k / lk).powf(1.0 / *k as f64),
        _ => value,
    };
    Ok(LipNumberEstimate {
        sequence,
        value,
        extrapolated,
    })
}

/// Default step schedule for the Dahlquist margin.
pub const ACCRETIVITY_STEPS: [f64; 3] = [1e-2, 1e-3, 1e-4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccretivityReport {
    /// Estimate of `m(−F)`; `I + F` is accretive-compatible when this is `≥ 0`.
    pub margin: f64,
    pub h_schedule: Vec<f64>,
    /// `(1 − L̂(I + hF))/h` per step.
    pub raw: Vec<f64>,
    pub extrapolated: bool,
}

/// `(1 − ‖I + hJ‖₂)/h`, evaluated through `‖I + hJ‖² = 1 + h·λ_max(J + Jᵀ + hJᵀJ)`
/// so that no catastrophic cancellation occurs for small `h`.
pub fn margin_quotient(jac: &Matrix, h: f64) -> Result<f64> {
    let jt = jac.transpose();
    let sym = jac.add(&jt)?.axpy(h, &jt.matmul(jac)?)?;
    let lam = symmetric_max_eigenvalue(&sym)?;
    let arg = 1.0 + h * lam;
    if arg < 0.0 {
        // ‖I + hJ‖ = 0 only if J = −I/h
        return Ok(1.0 / h);
    }
    Ok(-lam / (1.0 + arg.sqrt()))
}

/// Sampled Dahlquist margin `m(−F) = lim_{h→0⁺}(1 − L(I + hF))/h`.
///
/// The Jacobian of `F` is assembled once per sample and reused for every `h`,
/// so all steps see the same points. The limit is taken by linear
/// extrapolation through the two smallest steps when the quotients are
/// monotone in `h`; otherwise the smallest-step value is returned with
/// `extrapolated = false`.
pub fn accretivity_margin(
    f: &Block,
    sampler: &DomainSampler,
    n_samples: usize,
    seed: Seed,
) -> Result<AccretivityReport> {
    accretivity_margin_with(f, sampler, n_samples, seed, &ACCRETIVITY_STEPS)
}

pub fn accretivity_margin_with(
    f: &Block,
    sampler: &DomainSampler,
    n_samples: usize,
    seed: Seed,
    steps: &[f64],
) -> Result<AccretivityReport> {
    sampler.validate()?;
    if steps.len() < 3 || steps.windows(2).any(|w| w[1] >= w[0]) || steps.iter().any(|h| *h <= 0.0) {
        return Err(Error::InvalidArgument(
            "need at least three strictly decreasing positive steps".into(),
        ));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let per_sample = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let x = sampler.sample_for(f, seed, i);
            let Some(jac) = local_jacobian(f, &x, 1e-5)? else {
                return Ok(None);
            };
            steps
                .iter()
                .map(|&s| margin_quotient(&jac, s))
                .collect::<Result<Vec<f64>>>()
                .map(Some)
        })
        .collect::<Vec<Result<Option<Vec<f64>>>>>();
    let mut raw = vec![f64::INFINITY; steps.len()];
    let mut kept = 0;
    for r in per_sample {
        if let Some(q) = r? {
            kept += 1;
            for (acc, v) in raw.iter_mut().zip(q) {
                *acc = acc.min(v);
            }
        }
    }
    if kept == 0 {
        return Err(Error::Degenerate("all samples fell on ReLU kinks".into()));
    }
    let k = steps.len();
    let tol = 1e-9 * (1.0 + raw.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let increasing = raw.windows(2).all(|w| w[1] >= w[0] - tol);
    let decreasing = raw.windows(2).all(|w| w[1] <= w[0] + tol);
    let (margin, extrapolated) = if increasing || decreasing {
        let (h1, h2) = (steps[k - 2], steps[k - 1]);
        let (q1, q2) = (raw[k - 2], raw[k - 1]);
        (q2 - (q1 - q2) * h2 / (h1 - h2), true)
    } else {
        (raw[k - 1], false)
    };
    Ok(AccretivityReport {
        margin,
        h_schedule: steps.to_vec(),
        raw,
        extrapolated,
    })
}

/// Settings for [`analytic_lip_bound`] that only matter for kinds whose bound
/// depends on sampled evidence or on the sequence length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticOptions {
    /// Sequence length `s`, used to turn per-row LayerNorm bounds into a
    /// Frobenius radius.
    pub seq_len: usize,
    /// Accretivity test for pre-LN blocks.
    pub accretivity_samples: usize,
    pub accretivity_radius: f64,
    pub accretivity_tol: f64,
    pub seed: Seed,
}

impl AnalyticOptions {
    pub fn new(seq_len: usize) -> Self {
        AnalyticOptions {
            seq_len,
            accretivity_samples: 16,
            accretivity_radius: DEFAULT_RADIUS,
            accretivity_tol: 1e-3,
            seed: Seed::default(),
        }
    }
}

fn sn(m: &Matrix) -> f64 {
    // Power iteration on weight matrices of the sizes used here converges
    // well inside the default budget; fall back to the last estimate
    // otherwise.
    match spectral_norm(m) {
        Ok(v) => v,
        Err(Error::NonConvergence { estimate, .. }) => estimate,
        Err(_) => f64::INFINITY,
    }
}

fn head_bound(h: &Head, scale_dim: usize, radius: f64) -> f64 {
    if radius.is_infinite() {
        return f64::INFINITY;
    }
    sn(&h.wv) * (1.0 + radius * radius / (scale_dim as f64).sqrt() * sn(&h.wk) * sn(&h.wq))
}

fn mha_bound(a: &MultiHeadAttention, radius: f64) -> f64 {
    if radius.is_infinite() {
        return f64::INFINITY;
    }
    let sq: f64 = a
        .heads
        .iter()
        .map(|h| head_bound(h, a.scale_dim, radius).powi(2))
        .sum();
    sn(&a.wo) * sq.sqrt()
}

/// Closed-form upper bound on `Lip(T)` over inputs with `‖X‖_F ≤ radius`.
///
/// Attention kinds return `∞` for an unbounded domain; post-LN blocks return
/// `∞` unconditionally. Pre-LN blocks return 1 when both residual branches pass
/// the sampled accretivity test, and the product-of-norms bound otherwise.
/// Stacks multiply member bounds, propagating the input radius through the
/// stack.
pub fn analytic_lip_bound(b: &Block, radius: f64, opts: &AnalyticOptions) -> Result<f64> {
    Ok(analytic_with_radius(b, radius, opts)?.0)
}

/// Returns `(bound, output radius bound)`.
fn analytic_with_radius(b: &Block, radius: f64, opts: &AnalyticOptions) -> Result<(f64, f64)> {
    let s = opts.seq_len.max(1);
    let zero_out = |blk: &Block| -> f64 {
        blk.apply(&Matrix::zeros(s, blk.width()))
            .map(|y| y.frobenius())
            .unwrap_or(f64::INFINITY)
    };
    let generic_radius = |bound: f64, blk: &Block| bound * radius + zero_out(blk);
    let ln_cap = |ln: &crate::blocks::LayerNorm| (s as f64).sqrt() * ln.row_output_bound();
    let out = match b {
        Block::Linear(l) => {
            let v = sn(&l.weight);
            (v, v * radius)
        }
        Block::Mlp2(m) => {
            let v = m.activation.lipschitz() * sn(&m.w1) * sn(&m.w2);
            (v, generic_radius(v, b))
        }
        Block::LayerNorm(ln) => {
            let v = ln.gamma.max_abs() / ln.epsilon.sqrt();
            (v, ln_cap(ln))
        }
        Block::SelfAttention(a) => {
            let v = head_bound(&a.head, a.scale_dim, radius);
            (v, generic_radius(v, b))
        }
        Block::MultiHeadSelfAttention(a) => {
            let v = mha_bound(a, radius);
            (v, generic_radius(v, b))
        }
        Block::Residual { inner, alpha } => {
            let (v, r) = analytic_with_radius(inner, radius, opts)?;
            (1.0 + alpha.abs() * v, radius + alpha.abs() * r)
        }
        Block::PostLnTransformer(t) => (f64::INFINITY, ln_cap(&t.ln)),
        Block::PreLnTransformer(t) => {
            let fallback = {
                let l_ln = t.ln.gamma.max_abs() / t.ln.epsilon.sqrt();
                let l_mlp = t.mlp.activation.lipschitz() * sn(&t.mlp.w1) * sn(&t.mlp.w2);
                let l_msa = mha_bound(&t.attn, ln_cap(&t.ln));
                (1.0 + t.alpha.abs() * l_mlp * l_ln) * (1.0 + t.alpha.abs() * l_msa * l_ln)
            };
            let sampler = DomainSampler::ball(s, t.ln.width(), opts.accretivity_radius);
            let accretive = |branch: Block| -> Result<bool> {
                let scaled = Block::Stack {
                    width: branch.width(),
                    blocks: vec![branch, Block::Linear(crate::blocks::Linear::new(
                        Matrix::identity(t.ln.width()).scale(t.alpha),
                    )?)],
                };
                let rep = accretivity_margin(&scaled, &sampler, opts.accretivity_samples, opts.seed)?;
                Ok(rep.margin >= -opts.accretivity_tol)
            };
            let v = if accretive(t.mlp_branch())? && accretive(t.attention_branch())? {
                1.0
            } else {
                fallback
            };
            (v, generic_radius(v.min(fallback), b))
        }
        Block::Stack { blocks, .. } => {
            let mut r = radius;
            let mut prod = 1.0;
            for blk in blocks {
                let (v, next) = analytic_with_radius(blk, r, opts)?;
                prod *= v;
                r = next;
            }
            (prod, r)
        }
        Block::Padded { inner, .. } => analytic_with_radius(inner, radius, opts)?,
    };
    Ok(out)
}

/// Everything known about the Lipschitz behaviour of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipReport {
    pub kind: String,
    #[serde(with = "ext_f64")]
    pub analytic_upper: f64,
    pub empirical_sup_jacobian: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empirical_inf_jacobian: Option<f64>,
    pub empirical_sup_spectral_radius: f64,
    #[serde(with = "ext_f64")]
    pub empirical_lip: f64,
    pub lip_sequence: Vec<(usize, f64)>,
    pub n_used: usize,
    pub samples: usize,
    #[serde(with = "ext_f64")]
    pub domain_radius: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipOptions {
    pub sampler: DomainSampler,
    pub n_samples: usize,
    /// Largest power for the Lip-number sequence.
    pub n_power: usize,
    pub with_inf: bool,
    pub seed: Seed,
}

impl LipOptions {
    pub fn new(sampler: DomainSampler) -> Self {
        LipOptions {
            sampler,
            n_samples: DEFAULT_SAMPLES,
            n_power: 1,
            with_inf: false,
            seed: Seed::default(),
        }
    }
}

/// Analytic bound plus sampled estimates for one block.
pub fn lip_report(b: &Block, opts: &LipOptions) -> Result<LipReport> {
    let mut analytic = AnalyticOptions::new(opts.sampler.rows);
    analytic.seed = opts.seed;
    let analytic_upper = analytic_lip_bound(b, opts.sampler.radius, &analytic)?;
    let est = EstimatorOptions {
        n_samples: opts.n_samples,
        with_inf: opts.with_inf,
        ..Default::default()
    };
    let sample = sample_jacobian(b, &opts.sampler, &est, opts.seed)?;
    let mut flags = sample.flags.clone();
    let (empirical_lip, lip_sequence) = if opts.n_power > 1 {
        match empirical_lip_number(b, opts.n_power, &opts.sampler, opts.n_samples, opts.seed) {
            Ok(l) => (l.value, l.sequence),
            Err(e) if e.is_divergence() => {
                flags.push("composition-diverged".into());
                (f64::INFINITY, vec![(1, sample.sup)])
            }
            Err(e) => return Err(e),
        }
    } else {
        (sample.sup, vec![(1, sample.sup)])
    };
    if analytic_upper.is_infinite() {
        flags.push("analytic-bound-infinite".into());
    }
    if matches!(b, Block::PreLnTransformer(_)) && analytic_upper == 1.0 {
        flags.push("bound-from-sampled-accretivity".into());
    }
    Ok(LipReport {
        kind: b.kind_name().to_string(),
        analytic_upper,
        empirical_sup_jacobian: sample.sup,
        empirical_inf_jacobian: sample.inf,
        empirical_sup_spectral_radius: sample.sup_spectral_radius,
        empirical_lip,
        lip_sequence,
        n_used: opts.n_power,
        samples: sample.kept,
        domain_radius: opts.sampler.radius,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{Activation, LayerNorm, Mlp2};

    fn lin(m: Matrix) -> Block {
        Block::linear(m).unwrap()
    }

    #[test]
    fn analytic_linear_and_mlp() {
        let o = AnalyticOptions::new(1);
        let b = lin(Matrix::diag(&[2.0, 0.5]));
        assert!((analytic_lip_bound(&b, 10.0, &o).unwrap() - 2.0).abs() < 1e-10);
        let rot = Matrix::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
        let mlp = Block::Mlp2(Mlp2::new(rot.clone(), rot, Activation::Relu).unwrap());
        assert!((analytic_lip_bound(&mlp, 10.0, &o).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn analytic_layernorm_bound() {
        let ln = Block::LayerNorm(LayerNorm::standard(4, 1e-4));
        let v = analytic_lip_bound(&ln, 1.0, &AnalyticOptions::new(2)).unwrap();
        assert!((v - 100.0).abs() < 1e-9);
    }

    #[test]
    fn identity_accretivity() {
        let s = DomainSampler::ball(1, 3, 1.0);
        let neg = lin(Matrix::identity(3).scale(-1.0));
        let r = accretivity_margin(&neg, &s, 4, Seed::default()).unwrap();
        assert!((r.margin - 1.0).abs() < 1e-9, "{r:?}");
        assert!(r.extrapolated);
        let pos = lin(Matrix::identity(3));
        let r = accretivity_margin(&pos, &s, 4, Seed::default()).unwrap();
        assert!((r.margin + 1.0).abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn accretivity_schedule_validated() {
        let s = DomainSampler::ball(1, 2, 1.0);
        let b = Block::identity(2);
        assert!(accretivity_margin_with(&b, &s, 2, Seed::default(), &[1e-3, 1e-2, 1e-4]).is_err());
        assert!(accretivity_margin_with(&b, &s, 2, Seed::default(), &[1e-2, 1e-3]).is_err());
    }

    #[test]
    fn power_schedule_shape() {
        assert_eq!(power_schedule(1), vec![1]);
        assert_eq!(power_schedule(32), vec![1, 2, 4, 8, 16, 32]);
        assert_eq!(power_schedule(5), vec![1, 2, 4, 5]);
    }

    #[test]
    fn unbounded_sampler_rejected() {
        let s = DomainSampler::ball(1, 2, f64::INFINITY);
        assert!(empirical_sup_jacobian(&Block::identity(2), &s, 4, Seed::default()).is_err());
        let s = DomainSampler::ball(1, 2, 1.0);
        assert!(empirical_sup_jacobian(&Block::identity(2), &s, 0, Seed::default()).is_err());
    }

    #[test]
    fn all_kink_samples_is_degenerate() {
        // W₁ = 0 puts every pre-activation exactly on the kink.
        let mlp = Block::Mlp2(Mlp2::new(Matrix::zeros(2, 2), Matrix::identity(2), Activation::Relu).unwrap());
        let s = DomainSampler::ball(1, 2, 1.0);
        assert!(matches!(
            empirical_sup_jacobian(&mlp, &s, 8, Seed::default()),
            Err(Error::Degenerate(_))
        ));
    }
}
