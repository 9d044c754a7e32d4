//! Does a stack of blocks have a limit architecture?
//!
//! [`iterate`] follows the orbit `f_{k+1} = T_{k+1} f_k`. [`condensing_profile`]
//! measures how fast the blocks approach a common operator, and [`classify`]
//! combines per-block Lip evidence with the profile into a verdict.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::Block;
use crate::error::{Error, Result};
use crate::lipnum::{lip_report, DomainSampler, LipOptions, LipReport};
use crate::matrix::Matrix;
use crate::scaling::{fit_exponential, fit_power_law, Law};
use crate::seed::Seed;

/// Iteration stops once `‖f_k‖_F` exceeds this.
pub const DIVERGENCE_GUARD: f64 = 1e12;

/// Tolerance on `Lip ≤ 1` for sampled evidence.
pub const LIP_TOLERANCE: f64 = 1e-3;

/// What to iterate.
#[derive(Debug, Clone, Copy)]
pub enum Orbit<'a> {
    /// `T_1, …, T_K` applied in order.
    Stack(&'a [Block]),
    /// One operator applied `count` times.
    Fixed { block: &'a Block, count: usize },
}

impl Orbit<'_> {
    fn len(&self) -> usize {
        match self {
            Orbit::Stack(b) => b.len(),
            Orbit::Fixed { count, .. } => *count,
        }
    }

    fn block(&self, k: usize) -> &Block {
        match self {
            Orbit::Stack(b) => &b[k],
            Orbit::Fixed { block, .. } => block,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `f₀, f₁, …`, all finite
    pub states: Vec<Matrix>,
    /// `‖f_{k+1} − f_k‖_F`
    pub cauchy_deltas: Vec<f64>,
    /// `‖T_{k+1} f_k − f_k‖_F`; for a fixed operator this also covers the
    /// final state, `‖T f_K − f_K‖`.
    pub residuals: Vec<f64>,
    /// Step at which the state became non-finite or passed the guard.
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub steps: usize,
    pub diverged_at: Option<usize>,
    pub final_norm: f64,
    pub final_delta: Option<f64>,
    /// Largest delta over the last 10% of steps.
    pub tail_max_delta: Option<f64>,
}

impl Trajectory {
    pub fn summary(&self) -> TrajectorySummary {
        let n = self.cauchy_deltas.len();
        let tail = &self.cauchy_deltas[n - n.div_ceil(10)..];
        TrajectorySummary {
            steps: n,
            diverged_at: self.diverged_at,
            final_norm: self.states.last().map_or(0.0, Matrix::frobenius),
            final_delta: self.cauchy_deltas.last().copied(),
            tail_max_delta: tail.iter().copied().reduce(f64::max),
        }
    }
}

/// Pads `x` with zero columns up to `width`.
fn widen(x: &Matrix, width: usize) -> Result<Matrix> {
    x.pad(x.rows(), width)
}

/// Runs the orbit from `f0`. Blocks of different widths are padded to the
/// widest one, and so is `f0`.
pub fn iterate(orbit: Orbit, f0: &Matrix) -> Result<Trajectory> {
    let k = orbit.len();
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one step".into()));
    }
    let width = match orbit {
        Orbit::Stack(b) => b.iter().map(Block::width).max().unwrap_or(0),
        Orbit::Fixed { block, .. } => block.width(),
    }
    .max(f0.cols());
    let padded: Vec<Block> = match orbit {
        Orbit::Stack(b) => b
            .iter()
            .map(|x| x.pad_to_width(width))
            .collect::<Result<_>>()?,
        Orbit::Fixed { block, .. } => vec![block.pad_to_width(width)?],
    };
    let orbit = match orbit {
        Orbit::Stack(_) => Orbit::Stack(&padded),
        Orbit::Fixed { count, .. } => Orbit::Fixed {
            block: &padded[0],
            count,
        },
    };
    let mut f = widen(f0, width)?;
    if !f.is_finite() {
        return Err(Error::InvalidArgument("initial state must be finite".into()));
    }
    let mut states = vec![f.clone()];
    let mut deltas = Vec::with_capacity(k);
    let mut diverged_at = None;
    for step in 0..k {
        let next = match orbit.block(step).apply(&f) {
            Ok(v) if v.frobenius() <= DIVERGENCE_GUARD => v,
            Ok(_) => {
                diverged_at = Some(step + 1);
                break;
            }
            Err(e) if e.is_divergence() => {
                diverged_at = Some(step + 1);
                break;
            }
            Err(e) => return Err(e),
        };
        deltas.push(next.sub(&f)?.frobenius());
        f = next;
        states.push(f.clone());
    }
    let mut residuals = deltas.clone();
    if let (Orbit::Fixed { block, .. }, None) = (orbit, diverged_at) {
        match block.apply(&f) {
            Ok(v) => residuals.push(v.sub(&f)?.frobenius()),
            Err(e) if e.is_divergence() => residuals.push(f64::INFINITY),
            Err(e) => return Err(e),
        }
    }
    Ok(Trajectory {
        states,
        cauchy_deltas: deltas,
        residuals,
        diverged_at,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Summable,
    Divergent,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Identity,
    Supplied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    /// `geometric` (`C·ρ^i`) or `power` (`C·i^{-p}`)
    pub model: String,
    /// `ρ` or `p`
    pub parameter: f64,
    pub r_squared: f64,
    /// First and last block index (1-based) in the fit window.
    pub window: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensingProfile {
    /// `ε̂_i = max_X ‖T_i X − T X‖_F`, `i = 1..=K`
    pub epsilons: Vec<f64>,
    pub candidate_kind: CandidateKind,
    pub tail_fit: Option<TailFit>,
    pub summable_verdict: Verdict,
    /// Values at or below this are rounding noise and are left out of the fit.
    pub noise_floor: f64,
}

pub const GEOMETRIC_RHO_MAX: f64 = 0.99;
pub const POWER_P_MIN: f64 = 1.05;
pub const MIN_R_SQUARED: f64 = 0.95;

/// Measures `ε̂_i` on the probe set and decides summability from the tail.
///
/// Both `C·ρ^i` and `C·i^{-p}` are fitted by least squares on logs over the
/// second half of the indices whose `ε̂_i` lies above rounding noise; the fit
/// with the larger R² is kept. The profile is summable when that fit is
/// geometric with `ρ < 0.99` or a power with `p > 1.05`, at R² ≥ 0.95, and
/// divergent when `ε̂_i` does not decrease over the last half of the stack.
pub fn condensing_profile(
    blocks: &[Block],
    candidate: Option<&Block>,
    probe_set: &[Matrix],
) -> Result<CondensingProfile> {
    if probe_set.is_empty() {
        return Err(Error::InvalidArgument("probe set is empty".into()));
    }
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("no blocks to profile".into()));
    }
    if probe_set.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("probe set must be finite".into()));
    }
    let width = blocks[0].width();
    let identity = Block::identity(width);
    let cand = candidate.unwrap_or(&identity);
    let reference: Vec<Matrix> = probe_set
        .iter()
        .map(|x| cand.apply(x))
        .collect::<Result<_>>()?;
    // (ε̂_i, scale of the compared outputs)
    let measured: Vec<(f64, f64)> = blocks
        .par_iter()
        .map(|b| {
            let mut eps = 0.0f64;
            let mut scale = 0.0f64;
            for (x, r) in probe_set.iter().zip(&reference) {
                let y = b.apply(x)?;
                eps = eps.max(y.sub(r)?.frobenius());
                scale = scale.max(y.frobenius() + r.frobenius());
            }
            Ok((eps, scale))
        })
        .collect::<Result<Vec<_>>>()?;
    let epsilons: Vec<f64> = measured.iter().map(|m| m.0).collect();
    let noise_floor = 64.0 * f64::EPSILON * measured.iter().map(|m| m.1).fold(0.0, f64::max);
    let (tail_fit, verdict) = decide(&epsilons, noise_floor);
    Ok(CondensingProfile {
        epsilons,
        candidate_kind: if candidate.is_some() {
            CandidateKind::Supplied
        } else {
            CandidateKind::Identity
        },
        tail_fit,
        summable_verdict: verdict,
        noise_floor,
    })
}

fn decide(eps: &[f64], floor: f64) -> (Option<TailFit>, Verdict) {
    if eps.iter().all(|e| *e <= floor) {
        return (None, Verdict::Summable);
    }
    let k = eps.len();
    let last_half = &eps[k / 2..];
    let non_decreasing = last_half.len() >= 2 && last_half.windows(2).all(|w| w[1] >= w[0]);
    // Indices (1-based) whose values are above noise, up to the first that
    // drops below it.
    let usable: Vec<(f64, f64)> = eps
        .iter()
        .enumerate()
        .take_while(|(_, e)| **e > floor)
        .map(|(i, e)| ((i + 1) as f64, *e))
        .collect();
    let window = if usable.len() >= 6 {
        &usable[usable.len() / 2..]
    } else {
        &usable[..]
    };
    let fit = if window.len() >= 3 {
        let geo = fit_exponential(window).ok();
        let pow = fit_power_law(window).ok();
        let span = (window[0].0 as usize, window[window.len() - 1].0 as usize);
        match (geo, pow) {
            (Some(g), Some(p)) => Some(if g.r_squared >= p.r_squared { g } else { p }),
            (g, p) => g.or(p),
        }
        .map(|f| TailFit {
            model: match f.law {
                Law::Exponential => "geometric".into(),
                Law::Power => "power".into(),
            },
            parameter: match f.law {
                Law::Exponential => f.parameter,
                Law::Power => -f.parameter,
            },
            r_squared: f.r_squared,
            window: span,
        })
    } else {
        None
    };
    if non_decreasing {
        return (fit, Verdict::Divergent);
    }
    let summable = fit.as_ref().is_some_and(|f| {
        f.r_squared >= MIN_R_SQUARED
            && match f.model.as_str() {
                "geometric" => f.parameter < GEOMETRIC_RHO_MAX,
                _ => f.parameter > POWER_P_MIN,
            }
    });
    // A profile that falls to rounding noise before six usable points has
    // reached zero, which is summable however the few points fit.
    let hit_floor = usable.len() < k && usable.len() < 6;
    let verdict = if summable || hit_floor {
        Verdict::Summable
    } else {
        Verdict::Inconclusive
    };
    (fit, verdict)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every block is the same operator.
    SingleOperator,
    /// Blocks are drawn from a finite set of operators.
    FiniteCollection,
    /// An arbitrary sequence of operators.
    Countable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    StableArchitecture,
    UnstableArchitecture,
    Inconclusive,
}

/// Inputs to [`classify`].
#[derive(Debug, Clone, Default)]
pub struct Evidence {
    pub per_block_lip: Vec<LipReport>,
    /// Indices of distinct operators among the blocks, for the finite mode.
    pub distinct: Option<Vec<usize>>,
    pub profile: Option<CondensingProfile>,
    pub trajectory: Option<TrajectorySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackDiagnosis {
    pub mode: Mode,
    pub per_block_lip: Vec<LipReport>,
    /// 1-based indices of blocks whose Lip estimate exceeds `1 + tol`.
    pub k0_violations: Vec<usize>,
    /// Last violating index.
    pub k0: Option<usize>,
    pub profile: Option<CondensingProfile>,
    pub classification: Classification,
    pub trajectory_summary: Option<TrajectorySummary>,
    pub assumptions: Vec<String>,
    pub reasons: Vec<String>,
}

/// Lip estimate used for the `Lip ≤ 1` test: the analytic bound when finite
/// and smaller, otherwise the sampled estimate.
pub fn lip_estimate(r: &LipReport) -> f64 {
    r.analytic_upper.min(r.empirical_lip)
}

/// Applies the existence conditions for `mode` to the evidence.
///
/// * single operator: stable iff `Lip ≤ 1 + tol`;
/// * finite collection: stable iff every distinct operator has
///   `Lip ≤ 1 + tol`, assuming (unchecked) a common fixed point;
/// * countable: stable iff no block in the second half of the stack violates
///   `Lip ≤ 1 + tol` and the condensing profile is summable.
///
/// A stack is unstable when violations persist to the last block or the
/// trajectory diverged.
pub fn classify(mode: Mode, evidence: &Evidence, tol: f64) -> Result<StackDiagnosis> {
    let lips = &evidence.per_block_lip;
    if lips.is_empty() {
        return Err(Error::MissingEvidence("per-block Lip reports".into()));
    }
    let violating = |r: &LipReport| lip_estimate(r) > 1.0 + tol;
    let k0_violations: Vec<usize> = lips
        .iter()
        .enumerate()
        .filter(|(_, r)| violating(r))
        .map(|(i, _)| i + 1)
        .collect();
    let k0 = k0_violations.last().copied();
    let diverged = evidence
        .trajectory
        .as_ref()
        .is_some_and(|t| t.diverged_at.is_some());
    let mut assumptions = Vec::new();
    let mut reasons = Vec::new();
    if diverged {
        reasons.push("trajectory diverged".into());
    }
    let classification = match mode {
        Mode::SingleOperator => {
            if violating(&lips[0]) || diverged {
                reasons.push(format!("Lip estimate {} > 1", lip_estimate(&lips[0])));
                Classification::UnstableArchitecture
            } else {
                reasons.push("single operator with Lip <= 1".into());
                Classification::StableArchitecture
            }
        }
        Mode::FiniteCollection => {
            assumptions.push("the operators share a common fixed point (not checked)".into());
            let distinct: Vec<usize> = evidence
                .distinct
                .clone()
                .unwrap_or_else(|| (0..lips.len()).collect());
            let bad: Vec<usize> = distinct.iter().copied().filter(|&i| violating(&lips[i])).collect();
            if bad.is_empty() && !diverged {
                reasons.push("every distinct operator has Lip <= 1".into());
                Classification::StableArchitecture
            } else {
                if !bad.is_empty() {
                    reasons.push(format!("operators {bad:?} have Lip > 1"));
                }
                Classification::UnstableArchitecture
            }
        }
        Mode::Countable => {
            let profile = evidence
                .profile
                .as_ref()
                .ok_or_else(|| Error::MissingEvidence("condensing profile".into()))?;
            let k = lips.len();
            let persisting = k0 == Some(k);
            let tail_ok = k0.map_or(true, |i| i <= k / 2);
            if persisting || diverged {
                if persisting {
                    reasons.push("Lip > 1 persists to the last block".into());
                }
                Classification::UnstableArchitecture
            } else if tail_ok && profile.summable_verdict == Verdict::Summable {
                reasons.push(format!(
                    "Lip <= 1 beyond block {} and summable condensing profile",
                    k0.unwrap_or(0)
                ));
                Classification::StableArchitecture
            } else {
                if !tail_ok {
                    reasons.push(format!("last violation at block {} of {k}", k0.unwrap_or(0)));
                }
                if profile.summable_verdict != Verdict::Summable {
                    reasons.push(format!("condensing profile is {:?}", profile.summable_verdict));
                }
                Classification::Inconclusive
            }
        }
    };
    Ok(StackDiagnosis {
        mode,
        per_block_lip: lips.clone(),
        k0_violations,
        k0,
        profile: evidence.profile.clone(),
        classification,
        trajectory_summary: evidence.trajectory.clone(),
        assumptions,
        reasons,
    })
}

/// Settings for [`diagnose`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnoseOptions {
    pub sampler: DomainSampler,
    pub lip_samples: usize,
    pub probe_samples: usize,
    pub tol: f64,
    pub seed: Seed,
}

impl DiagnoseOptions {
    pub fn new(sampler: DomainSampler) -> Self {
        DiagnoseOptions {
            sampler,
            lip_samples: 16,
            probe_samples: 32,
            tol: LIP_TOLERANCE,
            seed: Seed::default(),
        }
    }
}

/// Indices of the first occurrence of each distinct block.
pub fn distinct_blocks(blocks: &[Block]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        if !out.iter().any(|&j| blocks[j] == *b) {
            out.push(i);
        }
    }
    out
}

/// Gathers all evidence for `blocks` and classifies it: per-block Lip
/// reports, the condensing profile against the identity on a seeded probe
/// set, and the trajectory from the first probe point.
pub fn diagnose(blocks: &[Block], mode: Mode, opts: &DiagnoseOptions) -> Result<StackDiagnosis> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("no blocks to diagnose".into()));
    }
    let distinct = distinct_blocks(blocks);
    let mut lip_opts = LipOptions::new(opts.sampler);
    lip_opts.n_samples = opts.lip_samples;
    lip_opts.seed = opts.seed.derive(0);
    // Identical blocks share one report.
    let mut reports: Vec<Option<LipReport>> = vec![None; blocks.len()];
    for &i in &distinct {
        reports[i] = Some(lip_report(&blocks[i], &lip_opts)?);
    }
    let per_block_lip = blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let j = distinct.iter().copied().find(|&j| blocks[j] == *b).unwrap_or(i);
            reports[j].clone().expect("distinct blocks were reported")
        })
        .collect();
    let probe_seed = opts.seed.derive(1);
    let probe_sampler = DomainSampler::ball(opts.sampler.rows, opts.sampler.cols, opts.sampler.radius);
    let probes: Vec<Matrix> = (0..opts.probe_samples.max(1))
        .map(|i| probe_sampler.sample(probe_seed, i))
        .collect();
    let profile = condensing_profile(blocks, None, &probes)?;
    let trajectory = iterate(Orbit::Stack(blocks), &probes[0])?.summary();
    classify(
        mode,
        &Evidence {
            per_block_lip,
            distinct: Some(distinct),
            profile: Some(profile),
            trajectory: Some(trajectory),
        },
        opts.tol,
    )
}
