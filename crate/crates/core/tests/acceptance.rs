//! One line per acceptance criterion; exits non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rankjump::experiment::{self, preset, read_ratios_csv, BranchPhase, ExperimentSummary};
use rankjump::landscape::{lambda_continuation, Classification, ContinuationOptions};
use rankjump::linnet::{balanced_factorization, ArchSpec};
use rankjump::objective::CompletionProblem;
use rankjump::optimizer::Segment;
use rankjump::verify::{self, SuiteOutcome};

struct Outcome {
    passed: bool,
    detail: String,
}

fn from_suite(s: rankjump::Result<SuiteOutcome>) -> Outcome {
    match s {
        Ok(s) => Outcome {
            passed: s.passed,
            detail: format!("{} checks, {} failures; {}", s.checks, s.failures, s.detail),
        },
        Err(e) => Outcome {
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    o.detail.push_str(&format!("; {:.2} s (limit {} s)", took.as_secs_f64(), limit.as_secs()));
    if took > limit {
        o.passed = false;
    }
    o
}

fn run_preset(cfg: &experiment::ExperimentConfig) -> (tempfile::TempDir, ExperimentSummary) {
    let dir = tempfile::tempdir().expect("temporary directory");
    let summary = experiment::run_experiment(cfg, dir.path()).expect("experiment runs");
    (dir, summary)
}

fn fig1_jump_and_offshoots() -> Outcome {
    let cfg = preset("fig1").unwrap();
    let high_noise_end = cfg.schedule[0].end + 10_000;
    let (dir, summary) = run_preset(&cfg);
    let mut problems = Vec::new();
    let mut jumpers = 0;
    let (mut post, mut pre) = (0, 0);
    for run in &summary.runs {
        let stored = read_ratios_csv(&dir.path().join(&run.csv)).unwrap();
        let recomputed = experiment::detect_jump_in(&stored, cfg.jump.threshold, cfg.jump.sustain);
        if recomputed != run.jump_step {
            problems.push(format!("seed {}: summary jump {:?} but CSV gives {:?}", run.seed, run.jump_step, recomputed));
        }
        let Some(jump) = run.jump_step.filter(|&j| j <= high_noise_end) else {
            continue;
        };
        jumpers += 1;
        for o in &run.offshoots {
            let err = o.relative_error.unwrap_or(f64::INFINITY);
            match o.phase {
                BranchPhase::PostJump => {
                    post += 1;
                    if err.is_nan() || err > 0.10 {
                        problems.push(format!("seed {} offshoot {} after jump {jump}: error {err:.3}", run.seed, o.branch_step));
                    }
                }
                BranchPhase::PreJump => {
                    pre += 1;
                    if err.is_nan() || err <= 0.5 {
                        problems.push(format!("seed {} offshoot {} before jump {jump}: error {err:.3}", run.seed, o.branch_step));
                    }
                }
                _ => {}
            }
        }
    }
    if jumpers == 0 {
        problems.push("no seed jumped".into());
    }
    Outcome {
        passed: problems.is_empty(),
        detail: format!(
            "{jumpers}/{} seeds jumped; {post} post-jump and {pre} pre-jump offshoots checked{}",
            summary.runs.len(),
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    }
}

fn fig2_depth_effect() -> Outcome {
    let cfg = preset("fig2").unwrap();
    let window = cfg.schedule[1].end;
    let (_dir, summary) = run_preset(&cfg);
    let count = |depth: usize| {
        summary
            .runs
            .iter()
            .filter(|r| r.depth == Some(depth) && r.jump_step.is_some_and(|j| j < window))
            .count()
    };
    let (l3, l4) = (count(3), count(4));
    Outcome {
        passed: l4 > l3,
        detail: format!("jumps before step {window}: L=4 {l4}/5, L=3 {l3}/5"),
    }
}

fn fig3_without_noise() -> Outcome {
    let mut cfg = preset("fig3").unwrap();
    let grid = cfg.grid.as_mut().unwrap();
    grid.noise_durations = Some(vec![0]);
    grid.epsilons = Some(grid.epsilons.take().unwrap().into_iter().filter(|&e| e <= 0.25).collect());
    let (_dir, summary) = run_preset(&cfg);
    let mut parts = Vec::new();
    let mut passed = true;
    for cell in &summary.cells {
        let over = summary
            .runs
            .iter()
            .filter(|r| r.cell == cell.cell)
            .filter(|r| r.final_numeric_rank == Some(2) && r.classification == Some(Classification::RankOverestimating))
            .count();
        passed &= over >= 4;
        parts.push(format!("{}: {over}/{} rank 2", cell.cell, cell.seeds));
    }
    Outcome {
        passed,
        detail: parts.join(", "),
    }
}

fn one_way() -> Outcome {
    let mut cfg = preset("fig1").unwrap();
    cfg.seeds = (0..20).collect();
    cfg.offshoots = None;
    cfg.diagnostics_every = 0;
    cfg.schedule = vec![
        cfg.schedule[0],
        Segment {
            end: 100_000,
            ..cfg.schedule[1]
        },
    ];
    match experiment::one_way_audit(&cfg) {
        Ok(entries) => {
            let reverse: Vec<String> = entries
                .iter()
                .filter_map(|e| e.reverse_jump_step.map(|s| format!("seed {} at {s}", e.seed)))
                .collect();
            let jumped = entries.iter().filter(|e| e.jump_step.is_some()).count();
            let diverged = entries.iter().filter(|e| e.diverged.is_some()).count();
            Outcome {
                passed: reverse.is_empty() && diverged == 0,
                detail: format!(
                    "{} seeds x {} steps: {jumped} jumped, {diverged} diverged, reverse jumps: {}",
                    entries.len(),
                    cfg.schedule[1].end,
                    if reverse.is_empty() { "none".into() } else { reverse.join(", ") }
                ),
            }
        }
        Err(e) => Outcome {
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn closure() -> Outcome {
    let compliant = from_suite(verify::closure_suite(20, 500, 5));
    let audit = one_way();
    Outcome {
        passed: compliant.passed && audit.passed && compliant.detail.contains("10000 step-checks"),
        detail: format!("compliant: {}; one-way audit: {}", compliant.detail, audit.detail),
    }
}

fn continuation() -> rankjump::Result<(bool, bool, String)> {
    let p = CompletionProblem::two_by_two(0.25)?;
    let arch = ArchSpec::uniform(2, 2, 3, 2)?;
    let start = balanced_factorization(p.target(), &arch)?;
    let n = 16;
    let (hi, lo): (f64, f64) = (0.05, 5e-3);
    let lambdas: Vec<f64> = (0..n)
        .map(|k| if k == n - 1 { lo } else { hi * (lo / hi).powf(k as f64 / (n - 1) as f64) })
        .collect();
    let path = lambda_continuation(&p, 1, &lambdas, &start, &ContinuationOptions::default())?;
    let complete = !path.truncated() && path.points.len() == n && path.points.iter().all(|q| q.converged);
    let monotone = complete && path.points.windows(2).all(|w| w[1].cost < w[0].cost);
    let last = path.points.last().unwrap();
    let reaches = complete && (last.lambda - lo).abs() < 1e-15 && last.cost <= 1e-4;
    Ok((
        monotone,
        reaches,
        format!(
            "{} of {n} grid points, rank 1 throughout: {}, cost {:.4e} at lambda {:.1e} -> {:.4e} at lambda {:.1e}",
            path.points.len(),
            !path.truncated(),
            path.points[0].cost,
            path.points[0].lambda,
            last.cost,
            last.lambda
        ),
    ))
}

fn main() {
    let mut results: Vec<(&str, &str, Outcome)> = Vec::new();
    let mut record = |id: &'static str, name: &'static str, f: &dyn Fn() -> Outcome| {
        let o = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| Outcome {
            passed: false,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
            ),
        });
        println!("criterion {id:<3} {} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    record("1", "gradient correctness", &|| {
        timed(Duration::from_secs(5), || from_suite(verify::gradient_suite(50, 1)))
    });
    record("2", "representation cost identity", &|| {
        timed(Duration::from_secs(120), || from_suite(verify::representation_suite(100, 10, 2)))
    });
    record("3", "critical-point balancedness", &|| from_suite(verify::balance_suite(20, 3)));
    record("4", "residual bound", &|| from_suite(verify::residual_bound_suite(1000, 4)));
    record("5", "closure and one-way audit", &closure);
    record("6", "reachability mechanics", &|| from_suite(verify::reachability_suite(20, 6)));
    record("7", "fig1 preset: jump and offshoots", &fig1_jump_and_offshoots);
    record("8", "fig2 preset: depth effect", &fig2_depth_effect);
    record("9", "fig3 preset: no noise phase", &fig3_without_noise);
    record("10", "hessian at the origin", &|| from_suite(verify::hessian_origin_suite(10)));
    let path = continuation();
    record("11a", "continuation cost monotone", &|| match &path {
        Ok((m, _, d)) => Outcome { passed: *m, detail: d.clone() },
        Err(e) => Outcome { passed: false, detail: format!("error: {e}") },
    });
    record("11b", "continuation cost <= 1e-4 at lambda 5e-3", &|| match &path {
        Ok((_, r, d)) => Outcome { passed: *r, detail: d.clone() },
        Err(e) => Outcome { passed: false, detail: format!("error: {e}") },
    });
    record("12", "output soft-rank ceiling", &|| from_suite(verify::soft_rank_ceiling_suite(1000, 12)));

    let failed: Vec<&str> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
