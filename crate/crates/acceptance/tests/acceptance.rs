//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use oracle::{kmeans_optimum, kmedoids_optimum, random_points, two_blobs, Lcg};
use serde_json::Value;
use tokpool::filterlab::{verify_equivalence, verify_with, KeyNorms};
use tokpool::io::write_matrix;
use tokpool::pooling::{token_pool, InitPolicy, PoolMethod, PoolSpec};
use tokpool::scoring::significance;
use tokpool::transformer::{block_forward, synth_weights, AttentionMaps, BlockOptions};
use tokpool::{AttentionMode, Matrix, ModelConfig, Rng, TokenSet};

/// Relative tolerance on flop cells.
const FLOP_REL_TOL: f64 = 0.02;
const VIT_B_384_ATTENTION_REL_TOL: f64 = 0.015;
const FC_SHARE_MIN: f64 = 0.80;
const ATTENTION_SHARE_MAX: f64 = 0.15;
const OVERHEAD_FACTOR: f64 = 2.0;
const OVERHEAD_REF: f64 = 0.1e9;
const BASE_REL_TOL: f64 = 0.05;
const BASE_REFS: [f64; 2] = [4.3e9, 4.4e9];
const FILTER_TOL: f64 = 1e-9;
const FILTER_PROBES: u64 = 120;
const ORACLE_INSTANCES: u64 = 60;
const ORACLE_SLACK: f64 = 1e-9;
const SCORE_SUM_TOL: f64 = 1e-9;
const SCORE_INSTANCES: u64 = 60;
const WEIGHTED_INSTANCES: u64 = 24;
const UNIFORM_WEIGHT: f64 = 0.37;
const HULL_TOL: f64 = 1e-12;
const SPARSITY5: [usize; 12] = [194, 183, 142, 89, 41, 20, 10, 7, 0, 0, 0, 0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// Runs the command-line front end in process.
fn tokpool(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("tokpool").chain(args.iter().copied());
    let code = tokpool_cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned())
}

fn cost_json(config: &str, extra: &[&str]) -> Value {
    let path = fixture(config);
    let mut args = vec!["cost", "--config", path.to_str().unwrap(), "--format", "json"];
    args.extend_from_slice(extra);
    let (code, out) = tokpool(&args);
    assert_eq!(code, 0, "cost {config} failed");
    serde_json::from_str(&out).expect("cost json")
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn table_one() -> Outcome {
    // Gflops per category: attention, qkv, oproj, mlp, total
    let expected: [(&str, [f64; 5]); 4] = [
        ("vit-b-384.json", [6.18, 12.25, 4.08, 32.67, 55.5]),
        ("vit-b.json", [0.72, 4.18, 1.39, 11.15, 17.6]),
        ("deit-s.json", [0.36, 1.05, 0.35, 2.79, 4.6]),
        ("deit-ti.json", [0.18, 0.26, 0.09, 0.70, 1.3]),
    ];
    let names = ["attention", "qkv", "oproj", "mlp", "total"];
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for (config, cells) in expected {
        let v = cost_json(config, &[]);
        let t = &v["totals"];
        let got = [
            t["attention"].as_f64().unwrap(),
            t["qkv"].as_f64().unwrap(),
            t["oproj"].as_f64().unwrap(),
            t["mlp"].as_f64().unwrap(),
            v["grand_total"].as_f64().unwrap(),
        ];
        for i in 0..5 {
            let err = rel(got[i] / 1e9, cells[i]);
            worst = worst.max(err);
            let tol = if config == "vit-b-384.json" && i == 0 { VIT_B_384_ATTENTION_REL_TOL } else { FLOP_REL_TOL };
            if err >= tol {
                failures.push(format!("{config} {} {:.4} vs {} ({:.1}%)", names[i], got[i] / 1e9, cells[i], 100.0 * err));
            }
        }
    }
    if failures.is_empty() {
        outcome(true, format!("20 cells, worst relative error {:.2}%", 100.0 * worst))
    } else {
        outcome(false, failures.join("; "))
    }
}

fn bottleneck() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for config in ["vit-b-384.json", "vit-b.json", "deit-s.json", "deit-ti.json"] {
        let f = &cost_json(config, &[])["fractions"];
        let fc = f["qkv"].as_f64().unwrap() + f["oproj"].as_f64().unwrap() + f["mlp"].as_f64().unwrap();
        let attn = f["attention"].as_f64().unwrap();
        pass &= fc > FC_SHARE_MIN && attn < ATTENTION_SHARE_MAX;
        parts.push(format!("{} fc {:.1}% attn {:.1}%", config.trim_end_matches(".json"), 100.0 * fc, 100.0 * attn));
    }
    outcome(pass, parts.join(", "))
}

fn overhead() -> Outcome {
    let v = cost_json("deit-s-sparsity-0.json", &["--clustering", "kmedoids"]);
    let clustering = v["totals"]["clustering"].as_f64().unwrap();
    let base = v["grand_total"].as_f64().unwrap() - clustering;
    let ratio = clustering / OVERHEAD_REF;
    let ok_overhead = ratio <= OVERHEAD_FACTOR && ratio >= 1.0 / OVERHEAD_FACTOR;
    let ok_base = BASE_REFS.iter().all(|r| rel(base, *r) < BASE_REL_TOL);
    outcome(
        ok_overhead && ok_base,
        format!("kmedoids overhead {:.3} Gflops (x{ratio:.2} of 0.1), base {:.3} Gflops", clustering / 1e9, base / 1e9),
    )
}

fn filter_suite() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for seed in 0..FILTER_PROBES {
        let n = 1 + (rng.next_u64() % 64) as usize;
        let m = 1 + (rng.next_u64() % 32) as usize;
        let alpha = 0.1 + 9.9 * rng.uniform();
        let r = verify_equivalence(n, m, alpha, seed, FILTER_TOL).expect("probe");
        worst = worst.max(r.max_abs_dev);
        pass &= r.pass;
    }
    let counter = verify_with(16, 8, 3.0, 7, FILTER_TOL, KeyNorms::Uniform { lo: 0.5, hi: 2.0 }).expect("probe");
    let (code, _) = tokpool(&["verify-filter", "--n", "16", "--m", "8", "--alpha", "3", "--seed", "7"]);
    outcome(
        pass && !counter.pass && code == 0,
        format!(
            "{FILTER_PROBES} probes max dev {worst:.2e}; counterexample dev {:.2e}; cli exit {code}",
            counter.max_abs_dev
        ),
    )
}

fn tokens(points: &[Vec<f64>]) -> TokenSet {
    TokenSet::new(Matrix::from_rows(points).unwrap()).unwrap()
}

fn unprotected(method: PoolMethod, k: usize) -> PoolSpec {
    PoolSpec {
        protect_first: false,
        max_iters: 100,
        ..PoolSpec::new(method, k)
    }
}

fn bits(r: &[f64]) -> Vec<u64> {
    r.iter().map(|v| v.to_bits()).collect()
}

fn clustering_oracle() -> Outcome {
    let mut rng = Lcg(31);
    let mut bad = Vec::new();
    for case in 0..ORACLE_INSTANCES {
        let n = 2 + rng.below(7);
        let k = 1 + rng.below(3.min(n - 1));
        let dim = 1 + rng.below(3);
        let pts = random_points(&mut rng, n, dim);
        let t = tokens(&pts);
        let init = if case % 2 == 0 { InitPolicy::TopkWeight } else { InitPolicy::Random };
        for (method, opt) in [
            (PoolMethod::Kmeans, kmeans_optimum(&pts, k)),
            (PoolMethod::Kmedoids, kmedoids_optimum(&pts, k)),
        ] {
            let spec = PoolSpec { init, seed: case, ..unprotected(method, k) };
            let (out, r) = token_pool(&t, &spec).unwrap();
            if r.iterations >= spec.max_iters {
                bad.push(format!("case {case} {} did not converge", method.name()));
            }
            if r.loss < opt - ORACLE_SLACK {
                bad.push(format!("case {case} {} below optimum", method.name()));
            }
            if !r.loss_history.windows(2).all(|w| w[1] <= w[0]) {
                bad.push(format!("case {case} {} loss increased", method.name()));
            }
            if let Some(idx) = &r.medoid_indices {
                for (row, &i) in out.features.row_iter().zip(idx) {
                    if bits(row) != bits(t.features.row(i)) {
                        bad.push(format!("case {case} medoid row differs from input"));
                    }
                }
            }
        }
    }
    let mut blobs = 0;
    for _ in 0..20 {
        let n = 4 + rng.below(5);
        let pts = two_blobs(&mut rng, n, 2);
        let t = tokens(&pts);
        for (method, opt) in [
            (PoolMethod::Kmeans, kmeans_optimum(&pts, 2)),
            (PoolMethod::Kmedoids, kmedoids_optimum(&pts, 2)),
        ] {
            let (_, r) = token_pool(&t, &unprotected(method, 2)).unwrap();
            if (r.loss - opt).abs() > ORACLE_SLACK {
                bad.push(format!("two-blob {} loss {} vs optimum {opt}", method.name(), r.loss));
            }
        }
        blobs += 1;
    }
    if bad.is_empty() {
        outcome(true, format!("{ORACLE_INSTANCES} random instances, {blobs} two-blob fixtures"))
    } else {
        outcome(false, bad.join("; "))
    }
}

fn weighted_reduces() -> Outcome {
    let mut rng = Lcg(77);
    let mut bad = 0;
    for seed in 0..WEIGHTED_INSTANCES {
        let n = 4 + rng.below(12);
        let dim = 1 + rng.below(5);
        let pts = random_points(&mut rng, n, dim);
        let t = tokens(&pts).with_weights(vec![UNIFORM_WEIGHT; n]).unwrap();
        let k = 1 + rng.below(n - 1);
        let init = if seed % 2 == 0 { InitPolicy::TopkWeight } else { InitPolicy::Random };
        for (plain, weighted) in [(PoolMethod::Kmeans, PoolMethod::Wkmeans), (PoolMethod::Kmedoids, PoolMethod::Wkmedoids)] {
            let spec = |m| PoolSpec { init, seed, ..PoolSpec::new(m, k) };
            let (a, ra) = token_pool(&t, &spec(plain)).unwrap();
            let (b, rb) = token_pool(&t, &spec(weighted)).unwrap();
            let same = bits(a.features.data()) == bits(b.features.data())
                && ra.assignment == rb.assignment
                && bits(ra.centers.data()) == bits(rb.centers.data())
                // weighted loss carries the constant weight as a factor
                && (rb.loss - UNIFORM_WEIGHT * ra.loss).abs() <= 1e-12 * (1.0 + ra.loss);
            bad += usize::from(!same);
        }
    }
    outcome(bad == 0, format!("{} comparisons, {bad} mismatches", 2 * WEIGHTED_INSTANCES))
}

fn stochastic(rng: &mut Rng, n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for r in 0..n {
        let row = m.row_mut(r);
        row.iter_mut().for_each(|v| *v = rng.uniform() + 1e-3);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    m
}

fn significance_invariant() -> Outcome {
    let mut rng = Rng::new(5);
    let mut worst: f64 = 0.0;
    for _ in 0..SCORE_INSTANCES {
        let h = 1 + (rng.next_u64() % 8) as usize;
        let n = 1 + (rng.next_u64() % 40) as usize;
        let maps = AttentionMaps::new((0..h).map(|_| stochastic(&mut rng, n)).collect()).unwrap();
        let s = significance(&maps).unwrap();
        worst = worst.max((s.total() - (h * n) as f64).abs());
    }
    let cfg = ModelConfig::new(2, 16, 4, 9);
    let w = synth_weights(&cfg, 8).unwrap();
    let x = Matrix::new(9, 16, (0..144).map(|_| rng.normal()).collect()).unwrap();
    let plain = TokenSet::new(x).unwrap();
    let counted = plain.clone().with_counts(vec![1.0; 9]).unwrap();
    let mut identical = true;
    for b in &w {
        let a = block_forward(&plain, b, AttentionMode::Standard, BlockOptions::default()).unwrap();
        let c = block_forward(&counted, b, AttentionMode::Carry, BlockOptions::default()).unwrap();
        identical &= bits(a.features.data()) == bits(c.features.data());
    }
    outcome(
        worst <= SCORE_SUM_TOL && identical,
        format!("{SCORE_INSTANCES} maps, max |sum - HN| {worst:.2e}; carry with unit counts bit-identical: {identical}"),
    )
}

fn end_to_end() -> Outcome {
    let deit_s = ModelConfig::new(12, 64, 4, 50);
    let schedule = deit_s.rescale_schedule(&SPARSITY5, 196);
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("desk.json");
    let cfg = serde_json::json!({"layers": 12, "dim": 64, "heads": 4, "mlp_ratio": 4, "tokens": 50, "schedule": schedule});
    std::fs::write(&config, cfg.to_string()).unwrap();
    let input = dir.path().join("x.tpm");
    let mut rng = Rng::new(12);
    write_matrix(&input, &Matrix::new(50, 64, (0..50 * 64).map(|_| rng.normal()).collect()).unwrap()).unwrap();
    let out = dir.path().join("o.tpm");
    let trace = dir.path().join("trace.json");
    let mut bad = Vec::new();
    for method in ["kmedoids", "kmeans", "wkmedoids", "importance"] {
        let (code, _) = tokpool(&[
            "forward", "--config", config.to_str().unwrap(), "--seed", "3", "--input", input.to_str().unwrap(),
            "--out", out.to_str().unwrap(), "--trace", trace.to_str().unwrap(), "--pool-method", method,
        ]);
        if code != 0 {
            bad.push(format!("{method}: exit {code}"));
            continue;
        }
        let t: Value = serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
        let t = t.as_array().unwrap();
        let mut n = 50u64;
        for (l, layer) in t.iter().enumerate() {
            let tin = layer["tokens_in"].as_u64().unwrap();
            let tout = layer["tokens_out"].as_u64().unwrap();
            if tin != n || tout != n.min(schedule[l] as u64 + 1) {
                bad.push(format!("{method}: layer {} counts {tin}->{tout}", l + 1));
            }
            if layer["finite"] != true {
                bad.push(format!("{method}: layer {} non-finite", l + 1));
            }
            if layer["hull_excess"].as_f64().unwrap() >= HULL_TOL {
                bad.push(format!("{method}: layer {} leaves value hull", l + 1));
            }
            n = tout;
        }
    }
    if bad.is_empty() {
        outcome(true, format!("schedule {schedule:?}, 4 pooling methods"))
    } else {
        outcome(false, bad.join("; "))
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 8] = [
        ("flop breakdown table", table_one, None),
        ("fully-connected bottleneck", bottleneck, None),
        ("clustering overhead", overhead, None),
        ("attention/filter equivalence", filter_suite, Some(Duration::from_secs(5))),
        ("clustering oracle", clustering_oracle, Some(Duration::from_secs(10))),
        ("weighted reduces to unweighted", weighted_reduces, None),
        ("significance invariant", significance_invariant, None),
        ("end-to-end pipeline", end_to_end, Some(Duration::from_secs(5))),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let mut o = check();
        let elapsed = start.elapsed();
        if let Some(b) = budget {
            if elapsed > b {
                o.pass = false;
                o.detail.push_str(&format!("; took {elapsed:.2?}, budget {b:?}"));
            }
        }
        failed += usize::from(!o.pass);
        println!("{} {name}: {} ({elapsed:.2?})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
