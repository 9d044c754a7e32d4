use std::path::PathBuf;

use liparch::limitarch::{diagnose, iterate, lip_estimate, DiagnoseOptions, Orbit};
use liparch::lipnum::{lip_report, LipOptions, LipReport};
use liparch::probe::{heatmap_svg, run_probe, spearman};
use liparch::report::fmt_real;
use liparch::scaling::{
    averaged_projection, averaged_rotation, data_size_experiment, gd_rate_experiment, joint_law_report,
    mlp_covering_constant, model_size_experiment, transformer_covering_constant, AveragedOperator, ScalingFit,
};
use liparch::weights::validate_weights;
use liparch::{Block, Error, Matrix, Seed};
use serde::Serialize;
use serde_json::json;

use crate::config::{
    self, ConfigError, CoveringConfig, CoveringForm, Experiment, LimitConfig, LipConfig, OperatorSpec,
    ProbeRunConfig, Source, StackConfig,
};
use crate::output::OutputDir;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Divergence(String),
    Io(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Divergence(_) => EXIT_DIVERGENCE,
            Failure::Io(_) => EXIT_IO,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Divergence(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Io(_) => Failure::Io(m),
            Error::Divergence { .. } | Error::SeriesDivergent(_) | Error::NonConvergence { .. } | Error::Degenerate(_) => {
                Failure::Divergence(m)
            }
            _ => Failure::Validation(m),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(m) => Failure::Io(m),
            ConfigError::Invalid(m) => Failure::Validation(m),
        }
    }
}

type Outcome = Result<i32, Failure>;

/// Command-line overrides shared by all subcommands.
pub struct Overrides {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Resolved run context.
struct Run {
    base: PathBuf,
    root: u64,
    out: OutputDir,
}

impl Run {
    fn new(o: &Overrides, base: PathBuf, seed: Option<u64>, output_dir: Option<&PathBuf>) -> Result<Run, Failure> {
        let dir = match (&o.out, output_dir) {
            (Some(d), _) => d.clone(),
            (None, Some(d)) => base.join(d),
            (None, None) => PathBuf::from("liparch-out"),
        };
        Ok(Run {
            base,
            root: o.seed.or(seed).unwrap_or(0),
            out: OutputDir::create(&dir)?,
        })
    }

    /// Seed for building fixture weights.
    fn weights_seed(&self) -> Seed {
        Seed::new(self.root, 0)
    }

    /// Seed for sampling and estimation.
    fn sample_seed(&self) -> Seed {
        Seed::new(self.root, 1)
    }

    fn write(&self, name: &str, text: &str) -> Result<(), Failure> {
        self.out.write(name, text.as_bytes())?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), Failure> {
        self.out.write_json(name, value)?;
        Ok(())
    }
}

fn source_label(s: &Source) -> serde_json::Value {
    match s {
        Source::Weights { path } => json!({ "kind": "weights", "path": path }),
        Source::Matrices { matrices } => json!({ "kind": "matrices", "count": matrices.len() }),
        Source::PostLn { width, count } => json!({ "kind": "post_ln", "width": width, "count": count }),
        Source::PreLnDecay {
            width,
            count,
            scale,
            decay,
        } => json!({ "kind": "pre_ln_decay", "width": width, "count": count, "scale": scale, "decay": decay }),
        Source::Gpt2Like { width, count, scale } => {
            json!({ "kind": "gpt2_like", "width": width, "count": count, "scale": scale })
        }
        Source::Condensing {
            width,
            count,
            rate,
            contracting,
        } => json!({ "kind": "condensing", "width": width, "count": count, "rate": rate, "contracting": contracting }),
        Source::Harmonic { width, count } => json!({ "kind": "harmonic", "width": width, "count": count }),
        Source::Rotations { width, count } => json!({ "kind": "rotations", "width": width, "count": count }),
        Source::ScaledIdentity { width, count, c } => {
            json!({ "kind": "scaled_identity", "width": width, "count": count, "c": c })
        }
    }
}

fn real(v: f64) -> String {
    fmt_real(v)
}

// ---------------------------------------------------------------------------

pub fn lip(o: &Overrides) -> Outcome {
    let (cfg, base): (LipConfig, _) = config::read(&o.config)?;
    let run = Run::new(o, base, cfg.seed, cfg.output_dir.as_ref())?;
    let loaded = cfg.source.load(&run.base, run.weights_seed())?;
    let mut csv = String::from("block,kind,analytic_upper,empirical_sup_jacobian,empirical_lip,n_used\n");
    let mut entries = Vec::new();
    for (i, b) in loaded.blocks.iter().enumerate() {
        let mut opts = LipOptions::new(cfg.sampler.build(b.width(), loaded.seq_len)?);
        opts.n_samples = cfg.samples;
        opts.n_power = cfg.n_power;
        opts.with_inf = cfg.with_inf;
        opts.seed = run.sample_seed().derive(i as u64);
        match lip_report(b, &opts) {
            Ok(r) => {
                println!(
                    "lip block {}: kind={} analytic_upper={} sup_jacobian={} lip={}",
                    i + 1,
                    r.kind,
                    real(r.analytic_upper),
                    real(r.empirical_sup_jacobian),
                    real(r.empirical_lip)
                );
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    i + 1,
                    r.kind,
                    real(r.analytic_upper),
                    real(r.empirical_sup_jacobian),
                    real(r.empirical_lip),
                    r.n_used
                ));
                entries.push(json!({ "block": i + 1, "status": "ok", "report": r }));
            }
            // Divergence is a result here, not a failure.
            Err(e) if e.is_divergence() => {
                println!("lip block {}: diverged ({e})", i + 1);
                csv.push_str(&format!("{},{},nan,nan,inf,0\n", i + 1, b.kind_name()));
                entries.push(json!({ "block": i + 1, "status": "diverged", "error": e.to_string() }));
            }
            Err(e) => return Err(e.into()),
        }
    }
    run.write("lip.csv", &csv)?;
    run.write_json(
        "lip.json",
        &json!({
            "command": "lip",
            "seed": run.root,
            "source": source_label(&cfg.source),
            "blocks": entries,
        }),
    )?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------

pub fn stack(o: &Overrides) -> Outcome {
    let (cfg, base): (StackConfig, _) = config::read(&o.config)?;
    let run = Run::new(o, base, cfg.seed, cfg.output_dir.as_ref())?;
    let loaded = cfg.source.load(&run.base, run.weights_seed())?;
    let validation = match &loaded.weights {
        Some(p) => Some(validate_weights(p)?),
        None => None,
    };
    let blocks = loaded.blocks;
    let stack = Block::stack(blocks.clone())?;
    let sampler = cfg.sampler.build(stack.width(), loaded.seq_len)?;
    let mut opts = LipOptions::new(sampler);
    opts.n_samples = cfg.samples;
    opts.seed = run.sample_seed();
    let report = lip_report(&stack, &opts);

    let f0 = sampler.sample(run.sample_seed().derive(u64::MAX), 0);
    let traj = iterate(Orbit::Stack(&blocks), &f0)?;
    let mut csv = String::from("step,norm,delta\n");
    for (k, s) in traj.states.iter().enumerate() {
        let delta = if k == 0 { String::new() } else { real(traj.cauchy_deltas[k - 1]) };
        csv.push_str(&format!("{k},{},{delta}\n", real(s.frobenius())));
    }
    let summary = traj.summary();
    let (status, report) = match report {
        Ok(r) => ("ok", Some(r)),
        Err(e) if e.is_divergence() => ("diverged", None),
        Err(e) => return Err(e.into()),
    };
    let diverged = status == "diverged" || summary.diverged_at.is_some();
    run.write("stack_trajectory.csv", &csv)?;
    run.write_json(
        "stack.json",
        &json!({
            "command": "stack",
            "seed": run.root,
            "source": source_label(&cfg.source),
            "blocks": blocks.len(),
            "status": if diverged { "diverged" } else { "ok" },
            "report": report,
            "trajectory": summary,
            "validation": validation,
        }),
    )?;
    match &report {
        Some(r) => println!(
            "stack of {}: analytic_upper={} sup_jacobian={} final_norm={}{}",
            blocks.len(),
            real(r.analytic_upper),
            real(r.empirical_sup_jacobian),
            real(summary.final_norm),
            summary
                .diverged_at
                .map(|k| format!(" diverged_at={k}"))
                .unwrap_or_default()
        ),
        None => println!("stack of {}: sup-Jacobian estimate diverged", blocks.len()),
    }
    if let Some(v) = &validation {
        println!(
            "weights: tensors={} blocks={} round_trip={}",
            v.tensors,
            v.blocks,
            v.manifest_round_trip && v.payload_round_trip
        );
    }
    Ok(if diverged { EXIT_DIVERGENCE } else { EXIT_OK })
}

// ---------------------------------------------------------------------------

fn block_csv(reports: &[LipReport], k0: &[usize]) -> String {
    let mut csv = String::from("block,kind,analytic_upper,empirical_lip,lip_estimate,violates\n");
    for (i, r) in reports.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            r.kind,
            real(r.analytic_upper),
            real(r.empirical_lip),
            real(lip_estimate(r)),
            k0.contains(&(i + 1))
        ));
    }
    csv
}

pub fn limit(o: &Overrides) -> Outcome {
    let (cfg, base): (LimitConfig, _) = config::read(&o.config)?;
    let run = Run::new(o, base, cfg.seed, cfg.output_dir.as_ref())?;
    let loaded = cfg.source.load(&run.base, run.weights_seed())?;
    let width = loaded.blocks[0].width();
    let mut opts = DiagnoseOptions::new(cfg.sampler.build(width, loaded.seq_len)?);
    opts.lip_samples = cfg.lip_samples;
    opts.probe_samples = cfg.probe_samples;
    opts.tol = cfg.tol;
    opts.seed = run.sample_seed();
    match diagnose(&loaded.blocks, cfg.mode, &opts) {
        Ok(d) => {
            run.write("limit_blocks.csv", &block_csv(&d.per_block_lip, &d.k0_violations))?;
            if let Some(p) = &d.profile {
                let mut csv = String::from("i,epsilon\n");
                for (i, e) in p.epsilons.iter().enumerate() {
                    csv.push_str(&format!("{},{}\n", i + 1, real(*e)));
                }
                run.write("limit_profile.csv", &csv)?;
            }
            run.write_json(
                "limit.json",
                &json!({
                    "command": "limit",
                    "seed": run.root,
                    "source": source_label(&cfg.source),
                    "status": "ok",
                    "diagnosis": d,
                }),
            )?;
            let verdict = d.profile.as_ref().map(|p| format!("{:?}", p.summable_verdict));
            println!(
                "limit {} blocks: {:?} k0={} profile={}",
                loaded.blocks.len(),
                d.classification,
                d.k0.map(|k| k.to_string()).unwrap_or_else(|| "none".into()),
                verdict.unwrap_or_else(|| "none".into())
            );
            Ok(EXIT_OK)
        }
        Err(e) if e.is_divergence() => {
            run.write_json(
                "limit.json",
                &json!({
                    "command": "limit",
                    "seed": run.root,
                    "source": source_label(&cfg.source),
                    "status": "diverged",
                    "error": e.to_string(),
                }),
            )?;
            println!("limit {} blocks: diverged ({e})", loaded.blocks.len());
            Ok(EXIT_OK)
        }
        Err(e) => Err(e.into()),
    }
}

// ---------------------------------------------------------------------------

fn operator(spec: &OperatorSpec) -> liparch::Result<AveragedOperator> {
    match *spec {
        OperatorSpec::Projection { theta } => averaged_projection(theta),
        OperatorSpec::Rotation { theta, alpha } => averaged_rotation(theta, alpha),
    }
}

fn row(values: &[f64]) -> Result<Matrix, Failure> {
    if values.is_empty() {
        return Err(Failure::Validation("f0 must be nonempty".into()));
    }
    Ok(Matrix::from_rows(&[values]))
}

fn residual_csv(r: &liparch::scaling::ModelSizeReport) -> String {
    let mut csv = String::from("K,residual,bound\n");
    for (k, (res, b)) in r.residuals.iter().zip(&r.bounds).enumerate() {
        csv.push_str(&format!("{k},{},{}\n", real(*res), real(*b)));
    }
    csv
}

fn gap_csv(r: &liparch::scaling::DataSizeReport) -> String {
    match &r.fit {
        Some(f) => f.to_csv(),
        None => {
            let mut csv = String::from("x,y\n");
            for (n, g) in &r.gaps {
                csv.push_str(&format!("{},{}\n", real(*n), real(*g)));
            }
            csv
        }
    }
}

fn fit_line(f: &ScalingFit) -> String {
    format!("{:?} parameter={} r2={}", f.law, real(f.parameter), real(f.r_squared))
}

fn required_fit(fit: Option<ScalingFit>, what: &str) -> Result<ScalingFit, Failure> {
    fit.ok_or_else(|| Failure::Divergence(format!("{what} produced too few positive points to fit")))
}

pub fn scaling(o: &Overrides) -> Outcome {
    let (cfg, base): (Experiment, _) = config::read(&o.config)?;
    let (seed, output_dir) = cfg.common();
    let run = Run::new(o, base, seed, output_dir)?;
    let name = cfg.name();
    let seed = run.sample_seed();
    let (csv, report) = match &cfg {
        Experiment::Gd { mu, g, k, dim, .. } => {
            let r = gd_rate_experiment(*mu, *g, *dim, *k, seed)?;
            println!("scaling gd: beta={} predicted={}", real(r.fit.parameter), real(r.predicted_beta));
            (r.fit.to_csv(), serde_json::to_value(&r))
        }
        Experiment::ModelSize { operator: op, f0, k_max, .. } => {
            let op = operator(op)?;
            let f0 = row(f0)?;
            let zero = Matrix::zeros(1, f0.cols());
            let r = model_size_experiment(&op, &f0, *k_max, Some(&zero))?;
            println!(
                "scaling model_size: violations={} gamma={}{}",
                r.violations,
                real(r.gamma),
                r.fit.as_ref().map(|f| format!(" {}", fit_line(f))).unwrap_or_default()
            );
            (residual_csv(&r), serde_json::to_value(&r))
        }
        Experiment::DataSize {
            ns,
            trials,
            distribution,
            ..
        } => {
            let r = data_size_experiment(ns, *trials, *distribution, seed)?;
            println!(
                "scaling data_size: {}",
                r.fit.as_ref().map(fit_line).unwrap_or_else(|| "no fit (zero gaps)".into())
            );
            (gap_csv(&r), serde_json::to_value(&r))
        }
        Experiment::Joint {
            gd,
            model_size,
            data_size,
            grid,
            link,
            ..
        } => {
            let g = gd_rate_experiment(gd.mu, gd.g, gd.dim, gd.k, seed.derive(0))?;
            let op = operator(&model_size.operator)?;
            let f0 = row(&model_size.f0)?;
            let zero = Matrix::zeros(1, f0.cols());
            let m = model_size_experiment(&op, &f0, model_size.k_max, Some(&zero))?;
            let d = data_size_experiment(&data_size.ns, data_size.trials, data_size.distribution, seed.derive(1))?;
            let model_fit = required_fit(m.fit.clone(), "model-size experiment")?;
            let data_fit = required_fit(d.fit.clone(), "data-size experiment")?;
            let grid: Vec<(f64, f64, f64)> = grid.iter().map(|p| (p[0], p[1], p[2])).collect();
            let r = joint_law_report(&g.fit, &model_fit, &data_fit, &grid, *link)?;
            println!(
                "scaling joint: beta={} model_exponent={} data_exponent={} points={}",
                real(r.beta),
                real(r.model_exponent),
                real(r.data_exponent),
                r.points.len()
            );
            (r.to_csv(), serde_json::to_value(&r))
        }
    };
    let report = report.map_err(|e| Failure::Io(e.to_string()))?;
    run.write(&format!("scaling_{name}.csv"), &csv)?;
    run.write_json(
        &format!("scaling_{name}.json"),
        &json!({ "command": "scaling", "experiment": name, "seed": run.root, "report": report }),
    )?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------

pub fn covering(o: &Overrides) -> Outcome {
    let (cfg, base): (CoveringConfig, _) = config::read(&o.config)?;
    let run = Run::new(o, base, cfg.seed, cfg.output_dir.as_ref())?;
    let form = match cfg.form {
        CoveringForm::Mlp => "mlp",
        CoveringForm::Transformer => "transformer",
    };
    let result = match cfg.form {
        CoveringForm::Mlp => mlp_covering_constant(&cfg.spec),
        CoveringForm::Transformer => transformer_covering_constant(&cfg.spec),
    };
    match result {
        Ok(r) => {
            run.write("covering.csv", &r.to_csv())?;
            run.write_json(
                "covering.json",
                &json!({ "command": "covering", "form": form, "status": "ok", "report": r }),
            )?;
            println!(
                "covering {form}: value={} tail_bound={} depth={}",
                real(r.value),
                real(r.tail_bound),
                r.depth
            );
            Ok(EXIT_OK)
        }
        Err(e @ Error::SeriesDivergent(_)) => {
            run.write_json(
                "covering.json",
                &json!({ "command": "covering", "form": form, "status": "divergent", "error": e.to_string() }),
            )?;
            println!("covering {form}: divergent ({e})");
            Ok(EXIT_DIVERGENCE)
        }
        Err(e) => Err(e.into()),
    }
}

// ---------------------------------------------------------------------------

pub fn probe(o: &Overrides) -> Outcome {
    let (cfg, base): (ProbeRunConfig, _) = config::read(&o.config)?;
    let run = Run::new(o, base, cfg.seed, cfg.output_dir.as_ref())?;
    let loaded = cfg.source.load(&run.base, run.weights_seed())?;
    let stack = Block::stack(loaded.blocks)?;
    let r = run_probe(&stack, &cfg.probe, run.sample_seed())?;
    let csv = r.to_csv();
    run.write("probe.csv", &csv)?;
    let index: Vec<f64> = (1..=r.depth).map(|i| i as f64).collect();
    let rho = spearman(&index, &r.deepest_mean_d());
    let flagged = r.cells.iter().filter(|c| !c.flags.is_empty()).count();
    run.write_json(
        "probe.json",
        &json!({
            "command": "probe",
            "seed": run.root,
            "source": source_label(&cfg.source),
            "depth": r.depth,
            "injection_layers": r.injection_layers,
            "spearman_deepest_mean_d": if rho.is_nan() { None } else { Some(rho) },
            "flagged_cells": flagged,
            "cells": r.cells,
        }),
    )?;
    // Heatmaps are drawn from the CSV text that was just written.
    if let Some(h) = &cfg.heatmap {
        for &k in &h.layers {
            let svg = heatmap_svg(&csv, k, &h.column)?;
            run.write(&format!("probe_k{k}_{}.svg", h.column), &svg)?;
        }
    }
    println!(
        "probe {} layers: injection_layers={:?} spearman_deepest={} flagged_cells={flagged}",
        r.depth,
        r.injection_layers,
        real(rho)
    );
    Ok(EXIT_OK)
}

/// Runs `f`, printing failures to stderr, and returns the exit status.
pub fn dispatch(f: fn(&Overrides) -> Outcome, o: &Overrides) -> i32 {
    match f(o) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("liparch: {}", e.message());
            e.code()
        }
    }
}
