//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ersatz_cli::commands::strictly_decreasing_to_zero;
use ersatz_core::data::{DataTerm, TerminalData};
use ersatz_core::estimates::*;
use ersatz_core::grid::{build_grid, Domain};
use ersatz_core::pucci::*;
use ersatz_core::reference::*;
use ersatz_core::solver::*;
use ersatz_core::stencil::{build_standard_stencil, build_stencil_with_radius};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

static SOLVES: AtomicUsize = AtomicUsize::new(0);
static BOUND_VIOLATIONS: AtomicUsize = AtomicUsize::new(0);

/// Every solve in the suite goes through here so the sup-norm bound is
/// checked on all of them.
fn bounded(cfg: &SolveConfig, traj: &Trajectory) {
    SOLVES.fetch_add(1, Ordering::Relaxed);
    if traj.sup_abs() > sup_norm_bound(cfg, traj.data_sup_abs()) + 1e-12 {
        BOUND_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
    }
}

fn run(cfg: &SolveConfig) -> Trajectory {
    let traj = solve(cfg).expect("solve");
    bounded(cfg, &traj);
    traj
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit, || format!("took {:.2} s, budget {limit} s", elapsed.as_secs_f64()))
}

fn sym2(a: f64, b: f64, c: f64) -> SymMatrix {
    SymMatrix::from_rows(&[vec![a, b], vec![b, c]]).unwrap()
}

fn heat_exact() -> Outcome {
    let start = Instant::now();
    let cfg = heat_quadratic(1.0 / 16.0, 100.0).map_err(|e| e.to_string())?;
    let traj = run(&cfg);
    let elapsed = start.elapsed();
    let grid = traj.grid();
    let mut err: f64 = 0.0;
    for (i, &t) in traj.times().iter().enumerate() {
        let slice = traj.slice(i).unwrap();
        for &n in grid.nodes() {
            let x = grid.coords(n);
            err = err.max((slice[n] - (x[0] * x[0] + x[1] * x[1] + 4.0 * (HEAT_HORIZON - t))).abs());
        }
    }
    ensure(err <= 5e-13, || format!("sup error {err:.3e} > 5e-13"))?;
    within(elapsed, 5.0)?;
    Ok(format!("sup error {err:.3e}, {} steps", traj.steps()))
}

fn fourier_error(h: f64) -> f64 {
    let cfg = torus_sine(h).unwrap().with_store(StorePolicy::FinalWithProbes(vec![]));
    let traj = run(&cfg);
    let grid = traj.grid();
    grid.nodes()
        .iter()
        .map(|&n| (traj.initial()[n] - torus_sine_exact(0.0, grid.coords(n)[0])).abs())
        .fold(0.0, f64::max)
}

fn fourier() -> Outcome {
    let start = Instant::now();
    let (e1, e2) = (fourier_error(1.0 / 64.0), fourier_error(1.0 / 128.0));
    let elapsed = start.elapsed();
    ensure(e1 <= 8e-3, || format!("error {e1:.3e} at h = 1/64"))?;
    ensure(e1 / e2 >= 3.0, || format!("ratio {:.3}", e1 / e2))?;
    within(elapsed, 10.0)?;
    Ok(format!("e(1/64) = {e1:.3e}, e(1/128) = {e2:.3e}, ratio {:.2}", e1 / e2))
}

/// Maximum of `Σ λ_k z_k` over the vertices of `[δ̂/2, 2/δ̂]^m`.
fn vertex_max(z: &[f64], hat_delta: f64) -> f64 {
    let (lo, hi) = (0.5 * hat_delta, 2.0 / hat_delta);
    (0..1u32 << z.len())
        .map(|mask| z.iter().enumerate().map(|(k, zk)| if mask >> k & 1 == 1 { hi * zk } else { lo * zk }).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

fn script_p_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let hd = if i % 2 == 0 { 0.24 } else { rng.random_range(0.01..1.0) };
        let scale = 10f64.powi(rng.random_range(-3..4));
        let z: Vec<f64> = (0..4).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let p = eval_script_p(&z, hd).map_err(|e| e.to_string())?;
        worst = worst.max((p - vertex_max(&z, hd)).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("max deviation {worst:.3e}"))
}

fn random_s_delta(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> SymMatrix {
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = theta.sin_cos();
    let (e1, e2) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
    sym2(c * c * e1 + s * s * e2, c * s * (e1 - e2), s * s * e1 + c * c * e2)
}

fn decomposition() -> Outcome {
    let delta = 0.5;
    let s = build_stencil_with_radius(2, 4).map_err(|e| e.to_string())?;
    let hd = feasible_hat_delta(&s, delta, 64).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut infeasible, mut out_of_bounds) = (0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = random_s_delta(&mut rng, delta / 4.0, 4.0 / delta);
        match decompose_matrix(&a, &s, hd) {
            Ok(dec) => {
                worst = worst.max(dec.residual).max(reconstruct(&dec.weights, &s).max_abs_diff(&a));
                if dec.weights.iter().any(|w| *w < hd - 1e-12 || *w > 1.0 / hd + 1e-12) {
                    out_of_bounds += 1;
                }
            }
            Err(_) => infeasible += 1,
        }
    }
    ensure(infeasible == 0, || format!("{infeasible} infeasible"))?;
    ensure(out_of_bounds == 0, || format!("{out_of_bounds} decompositions leave the weight window"))?;
    ensure(worst <= 1e-9, || format!("residual {worst:.3e}"))?;
    Ok(format!("hat_delta {hd:.3e}, max residual {worst:.3e}"))
}

fn domination() -> Outcome {
    let delta = 0.5;
    let s = build_stencil_with_radius(2, 4).map_err(|e| e.to_string())?;
    let hd = feasible_hat_delta(&s, delta, 64).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let scale = 10f64.powi(rng.random_range(-2..3));
        let u = sym2(
            scale * rng.random_range(-1.0..1.0),
            scale * rng.random_range(-1.0..1.0),
            scale * rng.random_range(-1.0..1.0),
        );
        let abs_eig: f64 = u.eigenvalues().iter().map(|e| e.abs()).sum();
        let lhs = eval_p(&u, &s, hd).map_err(|e| e.to_string())?;
        let rhs = eval_p0(&u, delta).map_err(|e| e.to_string())? + delta / 4.0 * abs_eig;
        worst = worst.max(rhs - lhs);
    }
    ensure(worst <= 1e-9, || format!("deficit {worst:.3e}"))?;
    Ok(format!("largest rhs - lhs {worst:.3e}"))
}

fn random_data(rng: &mut ChaCha8Rng) -> TerminalData {
    let terms = (0..3)
        .map(|_| DataTerm::Trig {
            frequency: vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
            amplitude: rng.random_range(0.0..0.05),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    TerminalData::new(terms, rng.random_range(-0.1..0.1))
}

fn monotone_and_comparison() -> Outcome {
    let cfg = isaacs(1.0 / 16.0, 1.0).map_err(|e| e.to_string())?;
    let times = cfg.prepare().map_err(|e| e.to_string())?;
    let grid = Arc::clone(&cfg.grid);
    let nodes = grid.nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mono: f64 = 0.0;
    for _ in 0..100 {
        let i = rng.random_range(1..times.len());
        let (tl, te) = (times[i], times[i - 1]);
        let base: Vec<f64> = (0..grid.len())
            .map(|n| (cfg.data)(tl, grid.coords(n)) + rng.random_range(-1e-2..1e-2))
            .collect();
        let (v, _) = scheme_update(&cfg, &base, tl, te).map_err(|e| e.to_string())?;
        let mut bumped = base.clone();
        for _ in 0..rng.random_range(1..8) {
            bumped[nodes[rng.random_range(0..nodes.len())]] += rng.random_range(0.0..0.1);
        }
        let (w, _) = scheme_update(&cfg, &bumped, tl, te).map_err(|e| e.to_string())?;
        mono = nodes.iter().fold(mono, |acc, &n| acc.max(v[n] - w[n]));
    }
    let mut comparison: f64 = 0.0;
    for _ in 0..20 {
        let g = random_data(&mut rng).to_fn(ISAACS_HORIZON);
        let lower_data = Arc::clone(&g);
        let (c, a) = (rng.random_range(0.0..0.02), rng.random_range(0.0..0.02));
        let upper_data: ersatz_core::data::DataFn = Arc::new(move |t, x| g(t, x) + c + a * (1.0 + (3.0 * x[0] - x[1]).sin()));
        let lower = run(&cfg.clone().with_data(lower_data));
        let upper = run(&cfg.clone().with_data(upper_data));
        for i in 0..=lower.steps() {
            let (l, u) = (lower.slice(i).unwrap(), upper.slice(i).unwrap());
            comparison = nodes.iter().fold(comparison, |acc, &n| acc.max(l[n] - u[n]));
        }
    }
    ensure(mono <= 1e-12, || format!("monotonicity violation {mono:.3e}"))?;
    ensure(comparison <= 1e-12, || format!("comparison violation {comparison:.3e}"))?;
    Ok(format!("worst monotonicity {mono:.1e}, worst comparison {comparison:.1e}"))
}

fn k_sweep_check() -> Outcome {
    let start = Instant::now();
    let cfg = isaacs(1.0 / 32.0, 1.0).map_err(|e| e.to_string())?.with_store(StorePolicy::FinalWithProbes(vec![]));
    let ks: Vec<f64> = (0..=8).map(|i| f64::from(1u32 << i)).collect();
    let sweep = k_sweep(&cfg, &ks).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    for e in &sweep {
        bounded(&cfg.clone().with_op(cfg.op.with_big_k(e.big_k).unwrap()), &e.trajectory);
    }
    let pos = sweep[1..].iter().map(|e| e.max_positive_increment.unwrap()).fold(0.0, f64::max);
    let inc: Vec<f64> = sweep[1..].iter().map(|e| e.sup_increment.unwrap()).collect();
    let fractions: Vec<f64> = sweep.iter().map(|e| e.trajectory.active_fraction()).collect();
    ensure(pos <= 1e-12, || format!("positive increment {pos:.3e}"))?;
    ensure(inc.windows(2).all(|w| w[1] <= w[0]), || format!("increments not shrinking: {inc:?}"))?;
    let last = *inc.last().unwrap();
    ensure(last <= 1e-4, || format!("final increment {last:.3e}"))?;
    ensure(strictly_decreasing_to_zero(&fractions), || format!("active fractions {fractions:?}"))?;
    within(elapsed, 120.0)?;
    Ok(format!("increments {:.2e} -> {last:.2e}, fractions {:.3} -> {}", inc[0], fractions[0], fractions[8]))
}

fn estimate_boundedness() -> Outcome {
    let mut reports = Vec::new();
    for n in [16.0, 32.0, 64.0] {
        let cfg = isaacs(1.0 / n, 1.0).map_err(|e| e.to_string())?.with_store(StorePolicy::FinalWithProbes(vec![]));
        let mut acc = EstimateAccumulator::new(&cfg, EstimateOptions::default());
        let traj = solve_with_observer(&cfg, &mut acc).map_err(|e| e.to_string())?;
        bounded(&cfg, &traj);
        reports.push(acc.finish().map_err(|e| e.to_string())?);
    }
    let rows = refinement_boundedness(&reports).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for field in ["first_diff_sup", "weighted_second_diff_sup", "time_diff_sup", "boundary_wedge_constant"] {
        let row = rows.iter().find(|r| r.field == field).ok_or_else(|| format!("{field} missing"))?;
        ensure(row.max_ratio < GROWTH_LIMIT, || format!("{field} grows {:.3}x: {:?}", row.max_ratio, row.values))?;
        summary.push(format!("{field} {:.2}x", row.max_ratio));
    }
    Ok(summary.join(", "))
}

fn inequality_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..100_000 {
        let r = rng.random_range(2i64..40);
        let len = (2 * r + 3) as usize;
        let w: Vec<f64> = match trial % 3 {
            0 => (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            1 => {
                let (a, f, p) = (rng.random_range(-5.0..5.0), rng.random_range(0.0..1.0), rng.random_range(0.0..6.3));
                (0..len).map(|i| a * (f * i as f64 + p).sin()).collect()
            }
            _ => {
                let (a, b, c) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1e-2..1e-2));
                (0..len).map(|i| a + b * i as f64 + c * (i * i) as f64).collect()
            }
        };
        let check = interpolation_inequality_check(&w, r).map_err(|e| e.to_string())?;
        ensure(check.pass, || format!("interpolation fails at r = {r}: {check:?}"))?;
    }
    let s = build_standard_stencil(2).map_err(|e| e.to_string())?;
    let h = 0.125;
    let grid = Arc::new(build_grid(Domain::Box { lower: vec![0.0; 2], upper: vec![1.0; 2] }, &s, h).map_err(|e| e.to_string())?);
    for _ in 0..100 {
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..2.0)).collect();
        // admissible: h·b⁻ ≤ a on the axis directions
        let b: Vec<f64> = (0..2).map(|k| rng.random_range(-1.0..1.0f64).max(-a[k] / h)).collect();
        let (eta_amp, bdry) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let p = LinearProblem {
            grid: Arc::clone(&grid),
            a,
            b,
            c: rng.random_range(-1.0..1.0),
            eta: Arc::new(move |t, x| eta_amp * (3.0 * x[0] - x[1] + t).cos()),
            boundary: Arc::new(move |t, x| bdry * (x[0] + 2.0 * x[1]).sin() + t),
            horizon: rng.random_range(0.01..0.2),
        };
        let report = max_principle_check(&p).map_err(|e| e.to_string())?;
        ensure(report.pass(), || format!("maximum principle fails: {report:?}"))?;
    }
    let (solves, violations) = (SOLVES.load(Ordering::Relaxed), BOUND_VIOLATIONS.load(Ordering::Relaxed));
    ensure(solves > 0 && violations == 0, || format!("sup-norm bound broken on {violations} of {solves} solves"))?;
    Ok(format!("1e5 interpolation, 100 maximum principle, sup-norm bound on {solves} solves"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Every output file but the wall-clock timings, plus the exit status and streams.
fn cli_run(args: &[&str], out: &Path) -> Vec<(String, Vec<u8>)> {
    let o = Command::new(env!("CARGO_BIN_EXE_ersatz"))
        .args(args)
        .args(["--out", out.to_str().unwrap(), "--seed", "11"])
        .output()
        .expect("spawn ersatz");
    let stderr = String::from_utf8_lossy(&o.stderr).replace(out.to_str().unwrap(), "<out>");
    let mut files = vec![
        ("status".to_string(), format!("{:?}", o.status.code()).into_bytes()),
        ("stdout".to_string(), o.stdout),
        ("stderr".to_string(), stderr.into_bytes()),
    ];
    if let Ok(dir) = fs::read_dir(out) {
        let mut found: Vec<(String, Vec<u8>)> = dir
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap() != "timings.toml")
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        found.sort();
        files.extend(found);
    }
    files
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for entry in fs::read_dir(configs()).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        for cmd in ["solve", "verify", "sweep-k", "refine-h"] {
            runs.push((cmd, path.clone()));
        }
    }
    runs.sort();
    let mut files = 0;
    for (i, (cmd, path)) in runs.iter().enumerate() {
        let args = [*cmd, "--config", path.to_str().unwrap()];
        let a = cli_run(&args, &tmp.path().join(format!("{i}a")));
        let b = cli_run(&args, &tmp.path().join(format!("{i}b")));
        let name = format!("{cmd} {}", path.file_name().unwrap().to_string_lossy());
        ensure(a.len() == b.len(), || format!("{name}: file sets differ"))?;
        for (x, y) in a.iter().zip(&b) {
            ensure(x == y, || format!("{name}: {} differs", x.0))?;
        }
        files += a.len() - 3;
    }
    Ok(format!("{} runs, {files} files byte-identical", runs.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("exact quadratic solution", heat_exact),
        ("Fourier oracle on the torus", fourier),
        ("closed-form P equals vertex maximum", script_p_oracle),
        ("stencil decomposition soundness", decomposition),
        ("domination inequality", domination),
        ("monotone scheme and comparison", monotone_and_comparison),
        ("K-sweep monotone convergence", k_sweep_check),
        ("estimate boundedness under refinement", estimate_boundedness),
        ("inequality fuzz and sup-norm bound", inequality_fuzz),
        ("byte-identical reruns", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail} ({secs:.2} s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:>2} {name}: {why} ({secs:.2} s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
