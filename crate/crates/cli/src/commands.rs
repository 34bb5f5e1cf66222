use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ersatz_core::estimates::{refinement_boundedness, EstimateAccumulator, EstimateOptions, EstimateReport};
use ersatz_core::hamiltonian::{
    check_monotone_in_u0, check_growth_bound, check_stencil_ellipticity, make_bellman, make_isaacs, make_linear_strict,
    upper_barrier_excess, SampleSpec,
};
use ersatz_core::pucci::{check_s_delta, decompose_matrix, feasible_hat_delta, SymMatrix};
use ersatz_core::solver::{
    h_refine_observed, k_sweep, picard_final_interval, residual_sup, scheme_update, solve, solve_with_observer,
    sup_norm_bound, StorePolicy, K_MONOTONICITY_TOL,
};
use ersatz_core::stencil::{build_standard_stencil, build_stencil_with_radius};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{HamiltonianSection, LoadedConfig, RowSpec};
use crate::error::{CliError, EXIT_NUMERICAL, EXIT_VALIDATION};
use crate::output::{num, opt, OutputDir};

const DEFAULT_OUT: &str = "ersatz-out";

/// Tolerance of the property suites run by `verify`.
const PROPERTY_TOL: f64 = 1e-12;

pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn prepare(loaded: &mut LoadedConfig, opts: &RunOptions) -> Result<OutputDir, CliError> {
    if let Some(seed) = opts.seed {
        loaded.config.run.seed = seed;
    }
    let out = match (&opts.out, &loaded.config.run.out) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => PathBuf::from(DEFAULT_OUT),
    };
    OutputDir::create(&out)
}

fn estimate_options(seed: u64) -> EstimateOptions {
    EstimateOptions { seed, ..EstimateOptions::default() }
}

fn push_estimates(entries: &mut Vec<(String, String)>, report: &EstimateReport) {
    for (k, v) in report.fields() {
        entries.push((k.to_string(), num(v)));
    }
}

fn entry(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

pub fn cmd_solve(mut loaded: LoadedConfig, opts: &RunOptions) -> Result<(), CliError> {
    let mut out = prepare(&mut loaded, opts)?;
    let seed = loaded.config.run.seed;
    let start = Instant::now();
    let h = loaded.h_values(false)?[0];
    let k = loaded.k_values(false)?[0];
    let cfg = loaded.solve_config(h, k, seed)?;
    let setup = start.elapsed();
    let start = Instant::now();
    let mut acc = EstimateAccumulator::new(&cfg, estimate_options(seed));
    let traj = solve_with_observer(&cfg, &mut acc)?;
    let report = acc.finish()?;
    let solving = start.elapsed();

    let bound = sup_norm_bound(&cfg, traj.data_sup_abs());
    let mut entries = vec![
        entry("h", num(h)),
        entry("K", num(k)),
        entry("hat_delta", num(cfg.op.params().hat_delta)),
        entry("steps", traj.steps()),
        entry("tau", num(traj.tau())),
        entry("interior_nodes", cfg.grid.interior().len()),
        entry("sup_abs", num(traj.sup_abs())),
        entry("sup_norm_bound", num(bound)),
        entry("sup_norm_bound_holds", traj.sup_abs() <= bound + 1e-12),
    ];
    if traj.is_full() {
        entries.push(entry("residual_sup", num(residual_sup(&traj, &cfg)?)));
    }
    push_estimates(&mut entries, &report);
    let start = Instant::now();
    out.write_slices("slice.csv", &traj)?;
    out.write_report("solve", &entries)?;
    let writing = start.elapsed();
    out.finish("solve", &loaded.config, &[("setup", setup), ("solve", solving), ("write", writing)])
}

pub fn cmd_sweep_k(mut loaded: LoadedConfig, opts: &RunOptions) -> Result<(), CliError> {
    let mut out = prepare(&mut loaded, opts)?;
    let seed = loaded.config.run.seed;
    let h = loaded.h_values(false)?[0];
    let ks = loaded.k_values(true)?;
    let start = Instant::now();
    let cfg = loaded
        .solve_config(h, ks[0], seed)?
        .with_store(StorePolicy::FinalWithProbes(Vec::new()));
    let sweep = k_sweep(&cfg, &ks)?;
    let elapsed = start.elapsed();

    let header: Vec<String> =
        ["K", "steps", "active_fraction", "sup_increment", "max_positive_increment"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = sweep
        .iter()
        .map(|e| {
            vec![
                num(e.big_k),
                e.trajectory.steps().to_string(),
                num(e.trajectory.active_fraction()),
                opt(e.sup_increment),
                opt(e.max_positive_increment),
            ]
        })
        .collect();
    out.write_csv("sweep.csv", &header, &rows)?;

    let increments: Vec<f64> = sweep.iter().filter_map(|e| e.sup_increment).collect();
    let fractions: Vec<f64> = sweep.iter().map(|e| e.trajectory.active_fraction()).collect();
    let worst_positive = sweep.iter().filter_map(|e| e.max_positive_increment).fold(0.0, f64::max);
    let entries = vec![
        entry("h", num(h)),
        entry("K_values", ks.len()),
        entry("max_positive_increment", num(worst_positive)),
        entry("monotone_in_K", worst_positive <= K_MONOTONICITY_TOL),
        entry("increments_shrinking", increments.windows(2).all(|w| w[1] <= w[0])),
        entry("final_increment", opt(increments.last().copied())),
        entry("active_fraction_decreasing", strictly_decreasing_to_zero(&fractions)),
    ];
    out.write_report("sweep-k", &entries)?;
    out.finish("sweep-k", &loaded.config, &[("sweep", elapsed)])
}

/// Strictly decreasing while positive, and zero from some point on.
pub fn strictly_decreasing_to_zero(v: &[f64]) -> bool {
    let zero_from = v.iter().position(|x| *x == 0.0);
    let Some(z) = zero_from else { return false };
    v[..z].windows(2).all(|w| w[1] < w[0]) && v[z..].iter().all(|x| *x == 0.0)
}

pub fn cmd_refine_h(mut loaded: LoadedConfig, opts: &RunOptions) -> Result<(), CliError> {
    let mut out = prepare(&mut loaded, opts)?;
    let seed = loaded.config.run.seed;
    let hs = loaded.h_values(true)?;
    let k = loaded.k_values(false)?[0];
    let start = Instant::now();
    let resolved = loaded.resolve(k, seed)?;
    let configs = hs
        .iter()
        .map(|&h| Ok(loaded.solve_config_from(&resolved, h)?.with_store(StorePolicy::FinalWithProbes(Vec::new()))))
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut reports = Vec::new();
    let rows = h_refine_observed(
        &configs,
        |i| EstimateAccumulator::new(&configs[i], estimate_options(seed)),
        |_, acc, _| {
            reports.push(acc.finish()?);
            Ok(())
        },
    )?;
    let elapsed = start.elapsed();

    let fields: Vec<&str> = reports[0].fields().iter().map(|(n, _)| *n).collect();
    let mut header: Vec<String> = ["h", "steps", "sup_diff", "order"].map(String::from).to_vec();
    header.extend(fields.iter().map(|f| f.to_string()));
    let table: Vec<Vec<String>> = rows
        .iter()
        .zip(&reports)
        .map(|(r, rep)| {
            let mut row = vec![num(r.h), r.steps.to_string(), opt(r.sup_diff), opt(r.order)];
            row.extend(fields.iter().map(|f| opt(rep.get(f))));
            row
        })
        .collect();
    out.write_csv("convergence.csv", &header, &table)?;

    let mut entries = vec![entry("K", num(k)), entry("levels", hs.len())];
    if reports.len() >= 3 {
        for b in refinement_boundedness(&reports)? {
            entries.push(entry(&format!("{}.max_ratio", b.field), num(b.max_ratio)));
            entries.push(entry(&format!("{}.flagged", b.field), b.flagged));
        }
    }
    out.write_report("refine-h", &entries)?;
    out.finish("refine-h", &loaded.config, &[("refine", elapsed)])
}

fn assumption(msg: String) -> CliError {
    CliError::new("assumption-violated", msg, EXIT_VALIDATION)
}

fn property(msg: String) -> CliError {
    CliError::new("property-violation", msg, EXIT_NUMERICAL)
}

fn rows_of(section: &HamiltonianSection) -> Vec<&RowSpec> {
    match section {
        HamiltonianSection::Bellman { rows } => rows.iter().collect(),
        HamiltonianSection::Isaacs { groups } => groups.iter().flat_map(|g| &g.rows).collect(),
        _ => Vec::new(),
    }
}

pub fn cmd_verify(mut loaded: LoadedConfig, opts: &RunOptions) -> Result<(), CliError> {
    let mut out = prepare(&mut loaded, opts)?;
    let seed = loaded.config.run.seed;
    let h = loaded.h_values(false)?[0];
    let k = loaded.k_values(false)?[0];
    let start = Instant::now();
    let resolved = loaded.resolve(k, seed)?;
    let params = resolved.params;
    let ham = Arc::clone(&resolved.ham);
    let mut entries = vec![entry("h", num(h)), entry("K", num(k)), entry("hat_delta", num(params.hat_delta))];

    // assumption checkers
    match &loaded.config.hamiltonian {
        HamiltonianSection::Linear { nu, drift, zeroth, .. } => {
            make_linear_strict(nu.clone(), drift.clone(), *zeroth, None, params.hat_delta)?;
        }
        HamiltonianSection::Bellman { .. } => {
            let rows = rows_of(&loaded.config.hamiltonian).into_iter().map(|r| r.to_row()).collect();
            make_bellman(rows)?.check_window(params.hat_delta)?;
        }
        HamiltonianSection::Isaacs { groups } => {
            let g = groups.iter().map(|g| g.rows.iter().map(RowSpec::to_row).collect()).collect();
            make_isaacs(g)?.check_window(params.hat_delta)?;
        }
        HamiltonianSection::Diffusion { .. } => {}
    }
    let spec = SampleSpec { seed, ..SampleSpec::default() };
    check_stencil_ellipticity(ham.as_ref(), params.hat_delta, &spec).into_result()?;
    entries.push(entry("stencil_ellipticity", "pass"));
    let mono = check_monotone_in_u0(ham.as_ref(), &spec);
    if !mono.passed() {
        return Err(assumption(format!("operator increases in u0: {mono:?}")));
    }
    entries.push(entry("nonincreasing_in_u0", "pass"));
    let growth = check_growth_bound(ham.as_ref(), params.k0, &spec);
    entries.push(entry("growth_excess", num(growth)));
    if growth > params.h_bar + 1e-9 {
        return Err(assumption(format!(
            "|H(u0, grad, 0)| exceeds K0(|u0| + |grad|) + H_bar by {:e}",
            growth - params.h_bar
        )));
    }
    let barrier = upper_barrier_excess(ham.as_ref(), &params, &spec);
    entries.push(entry("upper_barrier_excess", num(barrier)));
    if barrier > 1e-9 {
        return Err(assumption(format!("operator exceeds its upper barrier by {barrier:e}")));
    }
    let checks = start.elapsed();

    // solve, measure and run the property suites
    let start = Instant::now();
    let cfg = loaded.solve_config_from(&resolved, h)?.with_store(StorePolicy::Full);
    let mut acc = EstimateAccumulator::new(&cfg, estimate_options(seed));
    let traj = solve_with_observer(&cfg, &mut acc)?;
    let report = acc.finish()?;
    let residual = residual_sup(&traj, &cfg)?;
    entries.push(entry("residual_sup", num(residual)));
    let scale = 1.0 + traj.sup_abs();
    if residual > 1e-8 * scale / traj.tau().min(1.0) {
        return Err(property(format!("stored trajectory does not satisfy the scheme: residual {residual:e}")));
    }
    let bound = sup_norm_bound(&cfg, traj.data_sup_abs());
    entries.push(entry("sup_abs", num(traj.sup_abs())));
    entries.push(entry("sup_norm_bound", num(bound)));
    if traj.sup_abs() > bound + 1e-12 {
        return Err(property(format!("sup |v| = {} exceeds the bound {bound}", traj.sup_abs())));
    }
    entries.push(entry("picard_final_interval", num(picard_final_interval(&traj, &cfg, 5)?)));

    let n = traj.steps();
    let times = traj.times();
    let later = traj.slice(n).expect("full trajectory");
    let (base, _) = scheme_update(&cfg, later, times[n], times[n - 1])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = cfg.grid.nodes();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut bumped = later.to_vec();
        let node = nodes[rng.random_range(0..nodes.len())];
        bumped[node] += rng.random_range(1e-6..1e-2) * scale;
        let (w, _) = scheme_update(&cfg, &bumped, times[n], times[n - 1])?;
        worst = nodes.iter().map(|&i| base[i] - w[i]).fold(worst, f64::max);
    }
    entries.push(entry("monotone_scheme_violation", num(worst)));
    if worst > PROPERTY_TOL * scale {
        return Err(property(format!("raising one value lowered the update by {worst:e}")));
    }

    let data = Arc::clone(&cfg.data);
    let shift = 0.01 * scale;
    let upper = solve(&cfg.clone().with_data(Arc::new(move |t, x| data(t, x) + shift)))?;
    let mut comparison: f64 = 0.0;
    for i in 0..=n {
        let (a, b) = (traj.slice(i).expect("full"), upper.slice(i).expect("full"));
        comparison = nodes.iter().map(|&j| a[j] - b[j]).fold(comparison, f64::max);
    }
    entries.push(entry("comparison_violation", num(comparison)));
    if comparison > PROPERTY_TOL * scale {
        return Err(property(format!("larger data gave a smaller solution by {comparison:e}")));
    }
    push_estimates(&mut entries, &report);
    let suites = start.elapsed();
    out.write_report("verify", &entries)?;
    out.finish("verify", &loaded.config, &[("checks", checks), ("suites", suites)])
}

pub struct DecomposeArgs {
    pub matrix: String,
    pub delta: f64,
    pub hat_delta: Option<f64>,
    pub radius: i64,
}

/// `"a,b;c,d"` rows separated by semicolons.
pub fn parse_matrix(text: &str) -> Result<SymMatrix, CliError> {
    let bad = |m: String| CliError::new("invalid-parameter", m, EXIT_VALIDATION);
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|r| {
            r.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| bad(format!("matrix entry {v:?}: {e}"))))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    Ok(SymMatrix::from_rows(&rows)?)
}

pub fn cmd_decompose(args: &DecomposeArgs) -> Result<String, CliError> {
    let a = parse_matrix(&args.matrix)?;
    let d = a.dim() as i64;
    let stencil = if args.radius == 1 { build_standard_stencil(d)? } else { build_stencil_with_radius(d, args.radius)? };
    let hat_delta = match args.hat_delta {
        Some(v) => v,
        None => feasible_hat_delta(&stencil, args.delta, 64)?,
    };
    let dec = decompose_matrix(&a, &stencil, hat_delta)?;
    let mut text = format!(
        "hat_delta = {}\nin_S_delta = {}\nslack = {}\nresidual = {}\n",
        num(hat_delta),
        check_s_delta(&a, args.delta),
        num(dec.slack),
        num(dec.residual)
    );
    text.push_str("k,l,lambda\n");
    for (k, (l, w)) in stencil.iter().zip(&dec.weights).enumerate() {
        let l: Vec<String> = l.iter().map(|v| v.to_string()).collect();
        text.push_str(&format!("{},\"({})\",{}\n", k + 1, l.join(","), num(*w)));
    }
    Ok(text)
}

pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    let source = std::fs::read_to_string(path).map_err(|e| CliError::io(&format!("cannot read {}", path.display()), e))?;
    crate::config::parse(&source, &path.display().to_string())
}
