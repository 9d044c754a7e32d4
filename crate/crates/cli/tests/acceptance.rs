//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.
//!
//! The lines are written to the process stdout handle directly so they show
//! up without `--nocapture`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use liparch::fixtures::{condensing_stack, harmonic_stack, post_ln_stack, pre_ln_decay_stack, unit_perturbation, TransformerDims};
use liparch::limitarch::{condensing_profile, diagnose, iterate, Classification, DiagnoseOptions, Mode, Orbit, Verdict};
use liparch::lipnum::{empirical_lip_number, empirical_sup_jacobian, sample_jacobian, DomainSampler, EstimatorOptions};
use liparch::report::fmt_real;
use liparch::{Block, Matrix, Seed};
use liparch_oracle as oracle;
use serde_json::{json, Value};

struct Suite {
    dir: PathBuf,
    env: Vec<(&'static str, &'static str)>,
}

struct Check {
    pass: bool,
    detail: String,
}

impl Suite {
    fn save(&self, name: &str, bytes: &[u8]) {
        fs::write(self.dir.join(name), bytes).unwrap();
    }

    fn save_json(&self, name: &str, v: &Value) {
        self.save(name, &serde_json::to_vec_pretty(v).unwrap());
    }

    /// Runs a subcommand on `config`, writing into `<dir>/<tag>/`.
    fn cli(&self, command: &str, tag: &str, config: Value) -> (i32, PathBuf) {
        let cfg_dir = self.dir.join("configs");
        fs::create_dir_all(&cfg_dir).unwrap();
        let cfg = cfg_dir.join(format!("{tag}.json"));
        fs::write(&cfg, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
        let out = self.dir.join(tag);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_liparch"));
        cmd.args([command, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env_remove("LIPARCH_FAULT")
            .env_remove("LIPARCH_THREADS");
        for (k, v) in &self.env {
            cmd.env(k, v);
        }
        let o = cmd.output().unwrap();
        assert!(o.stderr.is_empty() || o.status.code() != Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        (o.status.code().unwrap_or(-1), out)
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn f(v: &Value) -> f64 {
    match v {
        Value::String(s) if s == "inf" => f64::INFINITY,
        other => other.as_f64().unwrap_or(f64::NAN),
    }
}

fn from_dense(d: &oracle::Dense) -> Matrix {
    let rows: Vec<&[f64]> = d.iter().map(|r| r.as_slice()).collect();
    Matrix::from_rows(&rows)
}

// ---------------------------------------------------------------------------

fn lip_oracle(s: &Suite) -> Check {
    let mut csv = String::from("n,estimate,oracle,relative_error\n");
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let n = 2 + (i as usize * 48) / 49;
        let d = oracle::random_dense(n, n, 5000 + i);
        let want = oracle::spectral_norm(&d);
        let got = empirical_sup_jacobian(
            &Block::linear(from_dense(&d)).unwrap(),
            &DomainSampler::ball(1, n, 1.0),
            2,
            Seed::new(1, i),
        )
        .unwrap();
        let rel = (got - want).abs() / want;
        worst = worst.max(rel);
        csv.push_str(&format!("{n},{},{},{}\n", fmt_real(got), fmt_real(want), fmt_real(rel)));
    }
    s.save("c01_linear.csv", csv.as_bytes());
    Check {
        pass: worst <= 1e-6,
        detail: format!("50 blocks 2x2..50x50, max relative error {worst:.2e}"),
    }
}

fn shear_separation(s: &Suite) -> Check {
    let shear = Block::linear(Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]])).unwrap();
    let sampler = DomainSampler::ball(1, 2, 1.0);
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let sup = empirical_sup_jacobian(&shear, &sampler, 8, Seed::new(2, 0)).unwrap();
    let est = empirical_lip_number(&shear, 32, &sampler, 8, Seed::new(2, 0)).unwrap();
    let a = vec![vec![1.0, 1.0], vec![0.0, 1.0]];
    let want = oracle::spectral_norm(&oracle::matpow(&a, 32)).powf(1.0 / 32.0);
    let monotone = est.sequence.windows(2).all(|w| w[1].1 < w[0].1);
    let rel = (est.value - want).abs() / want;
    s.save_json("c02_shear.json", &json!({ "sup_jacobian": sup, "estimate": est, "oracle_n32": want }));
    Check {
        pass: monotone && rel <= 0.05 && (sup - phi).abs() <= 1e-6,
        detail: format!(
            "L = {sup:.9} (phi {phi:.9}), Lip at n=32 {:.4} vs oracle {want:.4} ({:.1}%), decreasing: {monotone}",
            est.value,
            100.0 * rel
        ),
    }
}

fn ln_dichotomy(s: &Suite) -> Check {
    let dims = TransformerDims::small(8);
    let (code, out) = s.cli(
        "limit",
        "c03_post_ln",
        json!({
            "source": { "kind": "post_ln", "width": 8, "count": 48 },
            "mode": "countable",
            "sampler": { "rows": 2, "radius": 1.0 },
            "seed": 3,
        }),
    );
    let post = read_json(&out.join("limit.json"));
    let post_class = post["diagnosis"]["classification"].as_str().unwrap_or("").to_string();
    let post_diverged = !post["diagnosis"]["trajectory_summary"]["diverged_at"].is_null();

    // Local Lipschitz growth with the domain radius, on softmax switching points.
    let blocks: Vec<Block> = post_ln_stack(&dims, 48, Seed::new(3, 0)).unwrap().layers().into_iter().cloned().collect();
    let opts = EstimatorOptions {
        n_samples: 64,
        ..Default::default()
    };
    let mut ratios: Vec<f64> = blocks
        .iter()
        .map(|b| {
            let at = |r: f64| {
                sample_jacobian(b, &DomainSampler::softmax_tie(2, 8, r), &opts, Seed::new(3, 1))
                    .unwrap()
                    .sup
            };
            at(100.0) / at(1.0)
        })
        .collect();
    let mut csv = String::from("block,growth_b100_over_b1\n");
    for (i, r) in ratios.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, fmt_real(*r)));
    }
    s.save("c03_post_ln_growth.csv", csv.as_bytes());
    ratios.sort_by(f64::total_cmp);
    let median = ratios[ratios.len() / 2];
    let tenfold = ratios.iter().filter(|r| **r >= 10.0).count();
    let post_ok = code == 0 && post_class == "UnstableArchitecture" && (post_diverged || median >= 10.0);

    let (code, out) = s.cli(
        "limit",
        "c03_pre_ln",
        json!({
            "source": { "kind": "pre_ln_decay", "width": 8, "count": 48, "scale": 1e-3, "decay": 0.8 },
            "mode": "countable",
            "sampler": { "rows": 2, "radius": 1.0 },
            "seed": 4,
        }),
    );
    let pre = read_json(&out.join("limit.json"));
    let pre_class = pre["diagnosis"]["classification"].as_str().unwrap_or("").to_string();
    let accretive = pre["diagnosis"]["per_block_lip"]
        .as_array()
        .map(|a| a.iter().all(|r| f(&r["analytic_upper"]) <= 1.0))
        .unwrap_or(false);
    let deep: Vec<Block> = pre_ln_decay_stack(&dims, 200, 1e-3, 0.8, Seed::new(4, 0))
        .unwrap()
        .layers()
        .into_iter()
        .cloned()
        .collect();
    let f0 = DomainSampler::ball(2, 8, 1.0).sample(Seed::new(4, 1), 0);
    let traj = iterate(Orbit::Stack(&deep[..200]), &f0).unwrap().summary();
    s.save_json("c03_pre_ln_trajectory.json", &serde_json::to_value(&traj).unwrap());
    let tail = traj.tail_max_delta.unwrap_or(f64::INFINITY);
    let pre_ok = code == 0 && pre_class == "StableArchitecture" && accretive && tail < 1e-6;

    Check {
        pass: post_ok && pre_ok,
        detail: format!(
            "post-LN {post_class} (trajectory diverged: {post_diverged}; B=100/B=1 growth median {median:.1}x, \
             min {:.1}x, {tenfold}/48 blocks >= 10x); pre-LN {pre_class}, accretive bound 1 on all blocks: \
             {accretive}, Cauchy tail at K=200 {tail:.1e}",
            ratios[0]
        ),
    }
}

fn single_operator(s: &Suite) -> Check {
    let mut rows = Vec::new();
    let mut ok = true;
    for c in [0.5, 0.9, 1.0, 1.1, 2.0] {
        let b = Block::linear(Matrix::identity(3).scale(c)).unwrap();
        let d = diagnose(&[b], Mode::SingleOperator, &DiagnoseOptions::new(DomainSampler::ball(2, 3, 1.0))).unwrap();
        let stable = d.classification == Classification::StableArchitecture;
        ok &= stable == (c <= 1.0);
        rows.push(json!({ "c": c, "classification": d.classification }));
    }
    s.save_json("c04_single_operator.json", &Value::Array(rows.clone()));
    let labels: Vec<String> = rows
        .iter()
        .map(|r| format!("{}:{}", r["c"], if r["classification"] == "StableArchitecture" { "S" } else { "U" }))
        .collect();
    Check {
        pass: ok,
        detail: labels.join(" "),
    }
}

fn condensing_recovery(s: &Suite) -> Check {
    let p = unit_perturbation(4, Seed::new(2, 0)).unwrap();
    let sampler = DomainSampler::ball(2, 4, 1.0);
    let probes: Vec<Matrix> = (0..32).map(|i| sampler.sample(Seed::new(2, 1), i)).collect();
    let cond = condensing_profile(&condensing_stack(&p, 30, 0.5).unwrap(), None, &probes).unwrap();
    let harm = condensing_profile(&harmonic_stack(&p, 48).unwrap(), None, &probes).unwrap();
    s.save_json("c05_profiles.json", &json!({ "condensing": cond, "harmonic": harm }));
    let rho = cond.tail_fit.as_ref().filter(|t| t.model == "geometric").map(|t| t.parameter);
    let pass = rho.is_some_and(|r| (0.45..=0.55).contains(&r))
        && cond.summable_verdict == Verdict::Summable
        && harm.summable_verdict != Verdict::Summable;
    Check {
        pass,
        detail: format!(
            "rho {:.4} ({:?}); harmonic {:?} with {} p = {:.3}",
            rho.unwrap_or(f64::NAN),
            cond.summable_verdict,
            harm.summable_verdict,
            harm.tail_fit.as_ref().map(|t| t.model.as_str()).unwrap_or("no"),
            harm.tail_fit.as_ref().map(|t| t.parameter).unwrap_or(f64::NAN)
        ),
    }
}

fn gd_rate(s: &Suite) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for (mu, g) in [(1.0, 10.0), (1.0, 100.0), (5.0, 10.0)] {
        let tag = format!("c06_gd_{mu}_{g}");
        let (code, out) = s.cli("scaling", &tag, json!({ "experiment": "gd", "mu": mu, "G": g, "K": 500, "seed": 6 }));
        let beta = f(&read_json(&out.join("scaling_gd.json"))["report"]["fit"]["parameter"]);
        let want = 1.0 - mu / g;
        let rel = (beta - want).abs() / want;
        ok &= code == 0 && rel <= 0.02;
        parts.push(format!("({mu},{g}) {beta:.5} vs {want} ({:.2}%)", 100.0 * rel));
    }
    Check {
        pass: ok,
        detail: parts.join(", "),
    }
}

fn model_size(s: &Suite) -> Check {
    let (code, out) = s.cli(
        "scaling",
        "c07_model_size",
        json!({
            "experiment": "model_size",
            "operator": { "kind": "projection", "theta": 0.3 },
            "f0": [1.0, 0.5],
            "k_max": 10000,
        }),
    );
    let r = &read_json(&out.join("scaling_model_size.json"))["report"];
    let violations = r["violations"].as_u64().unwrap_or(u64::MAX);
    let checked = r["residuals"].as_array().map(Vec::len).unwrap_or(0);
    Check {
        pass: code == 0 && violations == 0 && r["bound_ok"] == true && checked == 10_001,
        detail: format!("averaged projection, gamma {}, K = 0..=10000, {violations} violations", f(&r["gamma"])),
    }
}

fn data_size(s: &Suite) -> Check {
    let ns: Vec<usize> = (2..=14).map(|e| 1usize << e).collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for (tag, dist) in [
        ("uniform", json!({ "kind": "uniform", "g": 1.0 })),
        ("two_point", json!({ "kind": "two_point", "g": 1.0 })),
    ] {
        let (code, out) = s.cli(
            "scaling",
            &format!("c08_{tag}"),
            json!({ "experiment": "data_size", "ns": ns, "trials": 100, "distribution": dist, "seed": 8 }),
        );
        let p = f(&read_json(&out.join("scaling_data_size.json"))["report"]["fit"]["parameter"]);
        ok &= code == 0 && (-0.6..=-0.4).contains(&p);
        parts.push(format!("{tag} {p:.4}"));
    }
    Check {
        pass: ok,
        detail: format!("exponents over N = 2^2..2^14: {}", parts.join(", ")),
    }
}

fn covering(s: &Suite) -> Check {
    let (c1, out) = s.cli(
        "covering",
        "c09_mlp",
        json!({ "form": "mlp", "spec": { "bounds": { "kind": "uniform", "bounds": [0.8, 0.9, 0.0] }, "gamma": 0.75, "truncation_k": 200 } }),
    );
    let mlp = f(&read_json(&out.join("covering.json"))["report"]["value"]);
    let want = oracle::uniform_mlp_covering(1.0, 1.0, 0.8, 0.9, 0.75, 200);
    let decay = |k: usize| {
        let (code, out) = s.cli(
            "covering",
            &format!("c09_decay_{k}"),
            json!({ "form": "transformer", "spec": { "bounds": { "kind": "decay", "c_w": 1.0, "rho": 0.5 }, "truncation_k": k } }),
        );
        (code, f(&read_json(&out.join("covering.json"))["report"]["value"]))
    };
    let ((c2, v100), (c3, v200)) = (decay(100), decay(200));
    let (c4, out) = s.cli(
        "covering",
        "c09_constant",
        json!({ "form": "transformer", "spec": { "bounds": { "kind": "uniform", "bounds": [1.0, 1.0, 1.0] } } }),
    );
    let rejected = c4 == 3 && read_json(&out.join("covering.json"))["status"] == "divergent";
    let (c5, out) = s.cli(
        "covering",
        "c09_one_layer",
        json!({ "form": "transformer", "spec": { "bounds": { "kind": "given", "layers": [[1.0, 1.0, 1.0]] } } }),
    );
    let gamma = f(&read_json(&out.join("covering.json"))["report"]["per_layer"][0]["decay"]);
    let pass = [c1, c2, c3, c5] == [0; 4]
        && (mlp - want).abs() <= 1e-9
        && (v100 - v200).abs() < 1e-9
        && rejected
        && (gamma - 5f64.powf(2.0 / 3.0)).abs() < 1e-12;
    Check {
        pass,
        detail: format!(
            "MLP {mlp:.12} vs series {want:.12}; decay K=100 vs 200 differ {:.1e}; constant bounds rejected: \
             {rejected} (gamma {gamma:.6})",
            (v100 - v200).abs()
        ),
    }
}

fn probe_signatures(s: &Suite) -> Check {
    let inputs = json!({ "kind": "ball", "count": 16, "rows": 2, "radius": 1.0 });
    let spearman_of = |tag: &str, source: Value| {
        let (code, out) = s.cli("probe", tag, json!({ "source": source, "probe": { "inputs": inputs }, "seed": 10 }));
        (code, f(&read_json(&out.join("probe.json"))["spearman_deepest_mean_d"]), out)
    };
    let (c1, cond, _) = spearman_of("c10_condensing", json!({ "kind": "condensing", "width": 4, "count": 32, "rate": 0.5 }));
    let (c2, rot, _) = spearman_of("c10_rotations", json!({ "kind": "rotations", "width": 4, "count": 32 }));
    let (c3, _, out) = spearman_of("c10_identity", json!({ "kind": "scaled_identity", "width": 4, "count": 20, "c": 1.0 }));
    let csv = fs::read_to_string(out.join("probe.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    // columns k,i,mean_d,var_d,mean_s,var_s,n
    let exact = rows.len() == 5 * 20 && rows.iter().all(|r| r[2] == 0.0 && r[3] == 0.0 && r[4] == 1.0 && r[5] == 0.0);
    Check {
        pass: [c1, c2, c3] == [0; 3] && cond <= -0.9 && rot > -0.3 && exact,
        detail: format!(
            "Spearman condensing {cond:.3}, rotations {rot:.3}; identity exact on {} cells: {exact}",
            rows.len()
        ),
    }
}

// ---------------------------------------------------------------------------

type Criterion = (u8, &'static str, f64, fn(&Suite) -> Check);

const CRITERIA: [Criterion; 10] = [
    (1, "Lip oracle equivalence", 10.0, lip_oracle),
    (2, "Lip number vs norm separation", 5.0, shear_separation),
    (3, "Pre-/Post-LN dichotomy", 60.0, ln_dichotomy),
    (4, "single-operator dichotomy", f64::INFINITY, single_operator),
    (5, "condensing profile recovery", 10.0, condensing_recovery),
    (6, "GD rate", 1.0, gd_rate),
    (7, "model-size bound", 5.0, model_size),
    (8, "data-size law", 10.0, data_size),
    (9, "covering constants", f64::INFINITY, covering),
    (10, "probe signatures", 30.0, probe_signatures),
];

struct Line {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn run_suite(suite: &Suite) -> Vec<Line> {
    fs::create_dir_all(&suite.dir).unwrap();
    CRITERIA
        .iter()
        .map(|&(id, name, limit, f)| {
            let start = Instant::now();
            let c = f(suite);
            let secs = start.elapsed().as_secs_f64();
            let timing = if limit.is_finite() {
                format!("{secs:.2} s, limit {limit} s")
            } else {
                format!("{secs:.2} s")
            };
            Line {
                id,
                name,
                pass: c.pass && secs < limit,
                detail: format!("{} [{timing}]", c.detail),
            }
        })
        .collect()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism(a: &Path, b: &Path) -> Check {
    let fa = files_under(a);
    let fb = files_under(b);
    let rel = |root: &Path, v: &[PathBuf]| -> Vec<PathBuf> {
        v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect()
    };
    let (ra, rb) = (rel(a, &fa), rel(b, &fb));
    // Config files embed nothing run-specific either, so they are compared too.
    let differing: Vec<String> = ra
        .iter()
        .filter(|r| fs::read(a.join(r)).ok() != fs::read(b.join(r)).ok())
        .map(|r| r.display().to_string())
        .collect();
    let artifacts = ra
        .iter()
        .filter(|r| matches!(r.extension().and_then(|e| e.to_str()), Some("csv" | "json")))
        .count();
    Check {
        pass: ra == rb && differing.is_empty() && artifacts > 0,
        detail: if differing.is_empty() && ra == rb {
            format!("{artifacts} CSV/JSON artifacts byte-identical across two runs (second run single-threaded)")
        } else {
            format!("file sets equal: {}; differing: {differing:?}", ra == rb)
        },
    }
}

fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

#[test]
fn acceptance_criteria() {
    let root = tempfile::tempdir().unwrap();
    let first = Suite {
        dir: root.path().join("run1"),
        env: vec![],
    };
    let second = Suite {
        dir: root.path().join("run2"),
        env: vec![("LIPARCH_THREADS", "1")],
    };
    let mut lines = run_suite(&first);
    for l in &lines {
        emit(&format!(
            "criterion {:>2} {}: {} - {}",
            l.id,
            if l.pass { "PASS" } else { "FAIL" },
            l.name,
            l.detail
        ));
    }
    run_suite(&second);
    let c = determinism(&first.dir, &second.dir);
    emit(&format!(
        "criterion 11 {}: determinism - {}",
        if c.pass { "PASS" } else { "FAIL" },
        c.detail
    ));
    lines.push(Line {
        id: 11,
        name: "determinism",
        pass: c.pass,
        detail: c.detail,
    });
    let failed: Vec<u8> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
