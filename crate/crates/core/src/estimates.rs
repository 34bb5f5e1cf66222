//! Measured counterparts of the a priori estimates, and the standalone
//! discrete inequalities (interpolation, maximum principle) as checkers.

use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::DataFn;
use crate::error::{Error, Result};
use crate::exec::{max_over, Backend};
use crate::grid::{second_quotient, Grid, NodeKind};
use crate::solver::{time_grid, SliceObserver, SolveConfig, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    /// Hölder exponent of the empirical quotient.
    pub alpha: f64,
    /// Sampled point pairs for the Lipschitz and Hölder fields.
    pub pairs: usize,
    pub seed: u64,
    /// Time slices retained for the pair sampling.
    pub max_snapshots: usize,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions { alpha: 0.5, pairs: 20_000, seed: 0, max_snapshots: 33 }
    }
}

/// Measured constants. Fields that do not apply to the mode are `None`:
/// the ρ-weighted ones on the torus, the global second differences on
/// bounded domains.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub boundary_wedge_constant: Option<f64>,
    pub time_diff_sup: f64,
    pub first_diff_sup: f64,
    pub weighted_second_diff_sup: Option<f64>,
    pub global_second_diff_sup: Option<f64>,
    pub lipschitz_modulus: f64,
    pub holder_alpha: f64,
    pub holder_quotient: f64,
    pub active_set_fraction: f64,
}

impl EstimateReport {
    /// `(name, value)` for every field present, in a fixed order.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        if let Some(v) = self.boundary_wedge_constant {
            out.push(("boundary_wedge_constant", v));
        }
        out.push(("time_diff_sup", self.time_diff_sup));
        out.push(("first_diff_sup", self.first_diff_sup));
        if let Some(v) = self.weighted_second_diff_sup {
            out.push(("weighted_second_diff_sup", v));
        }
        if let Some(v) = self.global_second_diff_sup {
            out.push(("global_second_diff_sup", v));
        }
        out.push(("lipschitz_modulus", self.lipschitz_modulus));
        out.push(("holder_alpha", self.holder_alpha));
        out.push(("holder_quotient", self.holder_quotient));
        out.push(("active_set_fraction", self.active_set_fraction));
        out
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.fields().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        self.fields().iter().map(|(k, v)| format!("{k} = {v:.16e}\n")).collect()
    }
}

/// Streaming evaluation of [`EstimateReport`]: every field but the sampled
/// ones is a running sup over slices, so no trajectory has to be kept.
pub struct EstimateAccumulator {
    data: DataFn,
    backend: Backend,
    options: EstimateOptions,
    grid: Option<Arc<Grid>>,
    times: Vec<f64>,
    snapshot_at: Vec<usize>,
    snapshots: Vec<(usize, Vec<f64>)>,
    wedge: f64,
    time_diff: f64,
    first_diff: f64,
    weighted: f64,
    global: f64,
    active: usize,
    steps: usize,
}

impl EstimateAccumulator {
    pub fn new(config: &SolveConfig, options: EstimateOptions) -> Self {
        EstimateAccumulator {
            data: Arc::clone(&config.data),
            backend: config.backend,
            options,
            grid: None,
            times: Vec::new(),
            snapshot_at: Vec::new(),
            snapshots: Vec::new(),
            wedge: 0.0,
            time_diff: 0.0,
            first_diff: 0.0,
            weighted: 0.0,
            global: 0.0,
            active: 0,
            steps: 0,
        }
    }

    pub fn finish(mut self) -> Result<EstimateReport> {
        let grid = self.grid.take().ok_or_else(|| Error::InsufficientData("no slice was observed".into()))?;
        if self.steps == 0 {
            return Err(Error::InsufficientData("no time step was observed".into()));
        }
        self.snapshots.sort_by_key(|(i, _)| *i);
        let (lipschitz, holder) = self.sampled_quotients(&grid);
        let periodic = grid.is_periodic();
        Ok(EstimateReport {
            boundary_wedge_constant: (!periodic).then_some(self.wedge),
            time_diff_sup: self.time_diff,
            first_diff_sup: self.first_diff,
            weighted_second_diff_sup: (!periodic).then_some(self.weighted),
            global_second_diff_sup: periodic.then_some(self.global),
            lipschitz_modulus: lipschitz,
            holder_alpha: self.options.alpha,
            holder_quotient: holder,
            active_set_fraction: self.active as f64 / (self.steps * grid.interior().len()) as f64,
        })
    }

    fn sampled_quotients(&self, grid: &Grid) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed);
        let nodes = grid.nodes();
        let snaps = &self.snapshots;
        let alpha = self.options.alpha;
        let h = grid.h();
        let (mut lip, mut hol) = (0.0f64, 0.0f64);
        for _ in 0..self.options.pairs {
            let (x, y) = (nodes[rng.random_range(0..nodes.len())], nodes[rng.random_range(0..nodes.len())]);
            let (i, j) = (rng.random_range(0..snaps.len()), rng.random_range(0..snaps.len()));
            let dist = grid.distance(grid.coords(x), grid.coords(y));
            let (si, sj) = (&snaps[i], &snaps[j]);
            if x != y {
                lip = lip.max((si.1[x] - si.1[y]).abs() / (dist + h));
            }
            let dt = (self.times[si.0] - self.times[sj.0]).abs();
            let denom = dt.powf(alpha / 2.0) + dist.powf(alpha);
            if denom > 0.0 {
                hol = hol.max((si.1[x] - sj.1[y]).abs() / denom);
            }
        }
        (lip, hol)
    }
}

impl SliceObserver for EstimateAccumulator {
    fn begin(&mut self, grid: &Arc<Grid>, times: &[f64]) {
        self.grid = Some(Arc::clone(grid));
        self.times = times.to_vec();
        let n = times.len() - 1;
        let s = self.options.max_snapshots.max(2);
        let mut at: Vec<usize> = (0..s).map(|j| ((j * n) as f64 / (s - 1) as f64).round() as usize).collect();
        at.dedup();
        self.snapshot_at = at;
    }

    fn observe(&mut self, index: usize, values: &[f64], later: Option<&[f64]>, active: Option<usize>) {
        let grid = Arc::clone(self.grid.as_ref().expect("begin precedes observe"));
        let t = self.times[index];
        let h = grid.h();
        let stencil = grid.stencil();
        let m = stencil.len();
        let interior = grid.interior();
        let backend = self.backend;

        if let (Some(later), Some(count)) = (later, active) {
            let tau = self.times[index + 1] - t;
            let nodes = grid.nodes();
            let td = max_over(backend, nodes.len(), |i| (values[nodes[i]] - later[nodes[i]]).abs() / tau);
            self.time_diff = self.time_diff.max(td);
            self.active += count;
            self.steps += 1;
        }

        let fd = max_over(backend, interior.len(), |r| {
            let c = values[interior[r]];
            (0..m).map(|k| (values[grid.forward_neighbor(r, k)] - c).abs()).sum::<f64>() / h
        });
        self.first_diff = self.first_diff.max(fd);

        if grid.is_periodic() {
            let gs = max_over(backend, interior.len(), |r| {
                let c = values[interior[r]];
                (0..m)
                    .map(|k| second_quotient(values[grid.forward_neighbor(r, k)], c, values[grid.backward_neighbor(r, k)], h).abs())
                    .sum::<f64>()
            });
            self.global = self.global.max(gs);
        } else {
            let cut = 6.0 * stencil.radius() * h;
            let ws = max_over(backend, interior.len(), |r| {
                let node = interior[r];
                let weight = (grid.rho(node) - cut).max(0.0);
                if weight == 0.0 {
                    return 0.0;
                }
                let c = values[node];
                let top = (0..m)
                    .map(|k| second_quotient(values[grid.forward_neighbor(r, k)], c, values[grid.backward_neighbor(r, k)], h).abs())
                    .fold(0.0, f64::max);
                weight * top
            });
            self.weighted = self.weighted.max(ws);
            let data = &self.data;
            let wedge = max_over(backend, interior.len(), |r| {
                let node = interior[r];
                (values[node] - data(t, grid.coords(node))).abs() / grid.rho(node)
            });
            self.wedge = self.wedge.max(wedge);
        }

        if self.snapshot_at.binary_search(&index).is_ok() {
            self.snapshots.push((index, values.to_vec()));
        }
    }
}

/// Every field by exhaustive sweep over a full trajectory.
pub fn measure(traj: &Trajectory, config: &SolveConfig, options: EstimateOptions) -> Result<EstimateReport> {
    let mut acc = EstimateAccumulator::new(config, options);
    traj.replay(&mut acc)?;
    acc.finish()
}

/// Solves and measures in one pass without storing the trajectory.
pub fn solve_and_measure(config: &SolveConfig, options: EstimateOptions) -> Result<(Trajectory, EstimateReport)> {
    let mut acc = EstimateAccumulator::new(config, options);
    let traj = crate::solver::solve_with_observer(config, &mut acc)?;
    Ok((traj, acc.finish()?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// `|w(1) − w(0)| ≤ (r/2)·max_{|i|≤r}|w(i+1) − 2w(i) + w(i−1)| + (4/r)·max_{|i|≤r}|w(i)|`
/// for `w` given on `−r−1..=r+1` (so `w[0]` is `w(−r−1)`).
pub fn interpolation_inequality_check(w: &[f64], r: i64) -> Result<InequalityCheck> {
    if r < 2 {
        return Err(Error::InvalidRange(r));
    }
    let ru = r as usize;
    if w.len() < 2 * ru + 3 {
        return Err(Error::InvalidParameter(format!("need {} values for r = {r}, got {}", 2 * ru + 3, w.len())));
    }
    let at = |i: i64| w[(i + r + 1) as usize];
    let lhs = (at(1) - at(0)).abs();
    let mut second: f64 = 0.0;
    let mut size: f64 = 0.0;
    for i in -r..=r {
        second = second.max((at(i + 1) - 2.0 * at(i) + at(i - 1)).abs());
        size = size.max(at(i).abs());
    }
    let rhs = r as f64 / 2.0 * second + 4.0 / r as f64 * size;
    Ok(InequalityCheck { lhs, rhs, pass: lhs <= rhs + 1e-12 })
}

/// Constant-coefficient linear problem
/// `∂_t v + Σ a_k Δ_{h,l_k} v + Σ b_k δ_{h,e_k} v − c v = −η`
/// with `v = boundary` on the collar and at `t = T`.
#[derive(Clone)]
pub struct LinearProblem {
    pub grid: Arc<Grid>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
    pub eta: DataFn,
    pub boundary: DataFn,
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPrincipleReport {
    pub sup_v: f64,
    pub bound: f64,
    pub eta_plus: f64,
    pub boundary_plus: f64,
    /// First (node, t) exceeding the bound.
    pub violation: Option<(usize, f64)>,
}

impl MaxPrincipleReport {
    pub fn pass(&self) -> bool {
        self.violation.is_none()
    }
}

/// Marches the linear scheme with a monotone time step and checks
/// `v ≤ T e^{c̄T} sup η⁺ + e^{c̄T} sup_{boundary} v⁺`, `c̄ = c⁻`.
pub fn max_principle_check(p: &LinearProblem) -> Result<MaxPrincipleReport> {
    let grid = &p.grid;
    let (d, m) = (grid.dim(), grid.stencil().len());
    if p.a.len() != m {
        return Err(Error::DimensionMismatch { expected: m, found: p.a.len() });
    }
    if p.b.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: p.b.len() });
    }
    let h = grid.h();
    if let Some(k) = (0..m).find(|&k| !(p.a[k] >= 0.0)) {
        return Err(Error::CoefficientConditionsViolated(format!("a_{k} = {} is negative", p.a[k])));
    }
    if let Some(k) = (0..d).find(|&k| h * (-p.b[k]).max(0.0) > p.a[k]) {
        return Err(Error::CoefficientConditionsViolated(format!("h * b_{k}^- = {} exceeds a_{k} = {}", h * (-p.b[k]).max(0.0), p.a[k])));
    }
    if !(p.horizon > 0.0 && p.c.is_finite()) {
        return Err(Error::InvalidParameter("horizon must be positive and c finite".into()));
    }
    let rate = 2.0 * p.a.iter().sum::<f64>() / (h * h) + p.b.iter().map(|b| b.abs()).sum::<f64>() / h + p.c.abs();
    let tau = if rate > 0.0 { 0.9 / rate } else { p.horizon };
    let times = time_grid(p.horizon, tau);
    let n = times.len() - 1;

    let mut v = vec![0.0; grid.len()];
    let mut boundary_plus: f64 = 0.0;
    for &node in grid.nodes() {
        v[node] = (p.boundary)(p.horizon, grid.coords(node));
        boundary_plus = boundary_plus.max(v[node]);
    }
    let mut history = vec![(n, v.clone())];
    let mut eta_plus: f64 = 0.0;
    let mut next = v.clone();
    for i in (0..n).rev() {
        let (tl, te) = (times[i + 1], times[i]);
        let dt = tl - te;
        for (r, &node) in grid.interior().iter().enumerate() {
            let c0 = v[node];
            let mut lv = -p.c * c0;
            for k in 0..m {
                let f = v[grid.forward_neighbor(r, k)];
                let b = v[grid.backward_neighbor(r, k)];
                lv += p.a[k] * second_quotient(f, c0, b, h);
                if k < d {
                    lv += p.b[k] * (f - c0) / h;
                }
            }
            let eta = (p.eta)(tl, grid.coords(node));
            eta_plus = eta_plus.max(eta);
            next[node] = c0 + dt * (lv + eta);
        }
        for &node in grid.nodes() {
            if grid.kind(node) == NodeKind::Collar {
                next[node] = (p.boundary)(te, grid.coords(node));
                boundary_plus = boundary_plus.max(next[node]);
            }
        }
        std::mem::swap(&mut v, &mut next);
        history.push((i, v.clone()));
    }
    let cbar = (-p.c).max(0.0);
    let growth = (cbar * p.horizon).exp();
    let bound = p.horizon * growth * eta_plus + growth * boundary_plus;
    let mut sup_v = f64::NEG_INFINITY;
    let mut violation = None;
    for (i, slice) in history.iter().rev() {
        for &node in grid.nodes() {
            sup_v = sup_v.max(slice[node]);
            if violation.is_none() && slice[node] > bound + 1e-12 {
                violation = Some((node, times[*i]));
            }
        }
    }
    Ok(MaxPrincipleReport { sup_v, bound, eta_plus, boundary_plus, violation })
}

/// Growth of one report field across refinement levels.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundednessRow {
    pub field: &'static str,
    pub values: Vec<f64>,
    /// Largest ratio between consecutive levels (values below the noise
    /// floor count as ratio 0).
    pub max_ratio: f64,
    pub flagged: bool,
}

pub const GROWTH_LIMIT: f64 = 1.5;
const NOISE_FLOOR: f64 = 1e-9;

/// Flags report fields growing by more than 1.5× per halving of `h`.
/// Diagnostic only.
pub fn refinement_boundedness(reports: &[EstimateReport]) -> Result<Vec<BoundednessRow>> {
    if reports.len() < 3 {
        return Err(Error::InsufficientData(format!("need at least 3 refinement levels, got {}", reports.len())));
    }
    let names: Vec<&'static str> = reports[0].fields().iter().map(|(n, _)| *n).filter(|n| *n != "holder_alpha").collect();
    Ok(names
        .into_iter()
        .map(|field| {
            let values: Vec<f64> = reports.iter().map(|r| r.get(field).unwrap_or(f64::NAN)).collect();
            let max_ratio = values
                .windows(2)
                .map(|w| {
                    if w[1] <= NOISE_FLOOR {
                        0.0
                    } else if w[0] <= NOISE_FLOOR {
                        f64::INFINITY
                    } else {
                        w[1] / w[0]
                    }
                })
                .fold(0.0, f64::max);
            BoundednessRow { field, values, max_ratio, flagged: !(max_ratio <= GROWTH_LIMIT) }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, Domain};
    use crate::stencil::build_standard_stencil;

    #[test]
    fn interpolation_examples() {
        let w: Vec<f64> = (-3..=3).map(|i| i as f64).collect();
        let c = interpolation_inequality_check(&w, 2).unwrap();
        assert_eq!((c.lhs, c.rhs, c.pass), (1.0, 4.0, true));
        let w: Vec<f64> = (-4..=4).map(|i| (i * i) as f64).collect();
        let c = interpolation_inequality_check(&w, 3).unwrap();
        // max over |i| ≤ 3 of |w(i)| is 9
        assert_eq!(c.lhs, 1.0);
        assert!((c.rhs - 15.0).abs() < 1e-12);
        assert_eq!(interpolation_inequality_check(&w, 1).unwrap_err(), Error::InvalidRange(1));
    }

    fn box_grid(h: f64) -> Arc<Grid> {
        let s = build_standard_stencil(2).unwrap();
        Arc::new(build_grid(Domain::Box { lower: vec![0.0; 2], upper: vec![1.0; 2] }, &s, h).unwrap())
    }

    #[test]
    fn max_principle_examples() {
        let p = LinearProblem {
            grid: box_grid(0.125),
            a: vec![1.0, 1.0, 0.5, 0.5],
            b: vec![0.5, -0.5],
            c: 0.0,
            eta: Arc::new(|_, _| 1.0),
            boundary: Arc::new(|_, _| 0.0),
            horizon: 0.1,
        };
        let r = max_principle_check(&p).unwrap();
        assert!(r.pass() && r.sup_v <= 0.1 + 1e-12);
        let neg = LinearProblem { eta: Arc::new(|_, x| -x[0]), boundary: Arc::new(|_, x| -x[1]), c: 2.0, ..p.clone() };
        assert!(max_principle_check(&neg).unwrap().sup_v <= 1e-12);
        let bad = LinearProblem { b: vec![-100.0, 0.0], ..p };
        assert_eq!(max_principle_check(&bad).unwrap_err().code(), "coefficient-conditions-violated");
    }

    #[test]
    fn boundedness_flags() {
        let base = EstimateReport {
            boundary_wedge_constant: Some(1.0),
            time_diff_sup: 1.0,
            first_diff_sup: 1.0,
            weighted_second_diff_sup: Some(1.0),
            global_second_diff_sup: None,
            lipschitz_modulus: 1.0,
            holder_alpha: 0.5,
            holder_quotient: 1.0,
            active_set_fraction: 0.0,
        };
        let grown = EstimateReport { time_diff_sup: 2.0, ..base.clone() };
        let rows = refinement_boundedness(&[base.clone(), base.clone(), grown]).unwrap();
        let flagged: Vec<_> = rows.iter().filter(|r| r.flagged).map(|r| r.field).collect();
        assert_eq!(flagged, vec!["time_diff_sup"]);
        assert!(refinement_boundedness(&[base.clone(), base]).is_err());
    }
}
