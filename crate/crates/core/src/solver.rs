//! Explicit backward time marching of
//! `v(t − τ, x) = v(t, x) + τ · max(ℋ(v, δ_h v, Δ_h v, t, x), 𝒫(Δ_h v) − K)`
//! with the collar pinned to the data, plus the `K`-sweep and
//! `h`-refinement drivers.

use std::sync::Arc;

use crate::data::DataFn;
use crate::error::{Error, Result};
use crate::exec::{for_each_indexed, Backend};
use crate::grid::{second_quotient, Grid, NodeKind};
use crate::hamiltonian::{check_stencil_ellipticity, Branch, ErsatzOperator, SampleSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeStep {
    Auto { safety: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Cylinder,
    /// Torus grids standing in for the whole space.
    WholeSpace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StorePolicy {
    Full,
    /// Keeps the `t = T` and `t = 0` slices and the full history of the
    /// listed nodes.
    FinalWithProbes(Vec<usize>),
}

#[derive(Clone)]
pub struct SolveConfig {
    pub grid: Arc<Grid>,
    pub op: ErsatzOperator,
    pub data: DataFn,
    pub horizon: f64,
    pub time_step: TimeStep,
    pub mode: Mode,
    pub store: StorePolicy,
    pub backend: Backend,
    /// When false, CFL and drift checks are skipped; used to inject
    /// instabilities on purpose.
    pub enforce_cfl: bool,
    /// Sampled slope certification of the Hamiltonian before stepping.
    pub certify: bool,
}

impl SolveConfig {
    /// Auto time step with safety 0.9, full storage, mode read off the grid.
    pub fn new(grid: Arc<Grid>, op: ErsatzOperator, data: DataFn, horizon: f64) -> Self {
        let mode = if grid.is_periodic() { Mode::WholeSpace } else { Mode::Cylinder };
        SolveConfig {
            grid,
            op,
            data,
            horizon,
            time_step: TimeStep::Auto { safety: 0.9 },
            mode,
            store: StorePolicy::Full,
            backend: Backend::default(),
            enforce_cfl: true,
            certify: true,
        }
    }

    pub fn with_time_step(mut self, time_step: TimeStep) -> Self {
        self.time_step = time_step;
        self
    }

    pub fn with_store(mut self, store: StorePolicy) -> Self {
        self.store = store;
        self
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_op(mut self, op: ErsatzOperator) -> Self {
        self.op = op;
        self
    }

    pub fn with_data(mut self, data: DataFn) -> Self {
        self.data = data;
        self
    }

    pub fn without_cfl_enforcement(mut self) -> Self {
        self.enforce_cfl = false;
        self
    }

    /// Validates the configuration and returns the time grid.
    pub fn prepare(&self) -> Result<Vec<f64>> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon T = {} must be positive", self.horizon)));
        }
        let grid = &self.grid;
        if grid.dim() != self.op.stencil().dim() || grid.stencil() != self.op.stencil() {
            return Err(Error::InvalidSpec("grid and operator use different stencils".into()));
        }
        match self.mode {
            Mode::WholeSpace if !grid.is_periodic() => {
                return Err(Error::InvalidSpec("whole-space mode needs a torus grid".into()))
            }
            Mode::Cylinder if grid.is_periodic() => {
                return Err(Error::InvalidSpec("cylinder mode needs a bounded domain".into()))
            }
            Mode::Cylinder if !grid.kinds().contains(&NodeKind::Collar) => {
                return Err(Error::InvalidSpec("cylinder grid has an empty boundary collar".into()))
            }
            _ => {}
        }
        if let StorePolicy::FinalWithProbes(probes) = &self.store {
            if let Some(p) = probes.iter().find(|&&p| p >= grid.len() || grid.kind(p) == NodeKind::Absent) {
                return Err(Error::InvalidParameter(format!("probe {p} is not a grid node")));
            }
        }
        if self.certify {
            let spec = SampleSpec { count: 64, ..SampleSpec::default() };
            check_stencil_ellipticity(self.op.ham().as_ref(), self.op.params().hat_delta, &spec).into_result()?;
        }
        let h = grid.h();
        let tau = match self.time_step {
            TimeStep::Auto { safety } => {
                let valid = safety > 0.0 && (safety <= 1.0 || !self.enforce_cfl);
                if !valid || !safety.is_finite() {
                    return Err(Error::InvalidParameter(format!("CFL safety factor {safety} must lie in (0, 1]")));
                }
                cfl_time_step(&self.op, h, safety)?
            }
            TimeStep::Fixed(tau) => {
                if !(tau.is_finite() && tau > 0.0) {
                    return Err(Error::InvalidParameter(format!("time step {tau} must be positive")));
                }
                let max_tau = cfl_time_step(&self.op, h, 1.0)?;
                if self.enforce_cfl && tau > max_tau * (1.0 + 1e-12) {
                    return Err(Error::RefuseToStep { tau, max_tau });
                }
                tau
            }
        };
        if self.enforce_cfl {
            check_drift_condition(&self.op, h)?;
        }
        Ok(time_grid(self.horizon, tau))
    }
}

/// `safety / (2m·L_z/h² + d·L_g/h + L₀)`.
pub fn cfl_time_step_from_bounds(l_z: f64, l_g: f64, l_0: f64, d: usize, m: usize, h: f64, safety: f64) -> Result<f64> {
    if !(h > 0.0 && safety > 0.0) || l_z < 0.0 || l_g < 0.0 || l_0 < 0.0 {
        return Err(Error::InvalidParameter("CFL inputs must be positive".into()));
    }
    let denom = 2.0 * m as f64 * l_z / (h * h) + d as f64 * l_g / h + l_0;
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(Error::InvalidParameter("CFL denominator must be positive and finite".into()));
    }
    Ok(safety / denom)
}

/// Time step keeping the explicit update monotone for both branches; the
/// `𝒫` branch contributes slope `2/δ̂` in every `z_k`.
pub fn cfl_time_step(op: &ErsatzOperator, h: f64, safety: f64) -> Result<f64> {
    let lip = op.ham().lipschitz();
    let l_z = lip.z.max(2.0 / op.params().hat_delta);
    cfl_time_step_from_bounds(l_z, lip.grad, lip.u0, op.stencil().dim(), op.stencil().len(), h, safety)
}

/// Forward first differences stay monotone only while `h·|b| ≤ a` along
/// every coordinate direction.
pub fn check_drift_condition(op: &ErsatzOperator, h: f64) -> Result<()> {
    let lip = op.ham().lipschitz();
    let (lhs, rhs) = (h * lip.grad, lip.z_axis_min);
    if lhs > rhs {
        return Err(Error::DriftConditionViolated { lhs, rhs });
    }
    Ok(())
}

/// `0 = t_0 < … < t_N = T` with `t_N − t_{N−k} = kτ`; the first interval
/// absorbs the remainder.
pub fn time_grid(horizon: f64, tau: f64) -> Vec<f64> {
    let n = ((horizon / tau) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let mut times: Vec<f64> = (0..=n).map(|i| horizon - (n - i) as f64 * tau).collect();
    times[0] = 0.0;
    times[n] = horizon;
    times
}

/// Receives every slice as it is produced, from `t = T` down to `t = 0`.
pub trait SliceObserver {
    fn begin(&mut self, _grid: &Arc<Grid>, _times: &[f64]) {}

    /// `index` points into the time grid; `later` is the slice at
    /// `times[index + 1]` and `active` counts the interior nodes updated
    /// through the `𝒫` branch (both absent for the terminal slice).
    fn observe(&mut self, index: usize, values: &[f64], later: Option<&[f64]>, active: Option<usize>);
}

pub struct NoObserver;

impl SliceObserver for NoObserver {
    fn observe(&mut self, _: usize, _: &[f64], _: Option<&[f64]>, _: Option<usize>) {}
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    grid: Arc<Grid>,
    times: Vec<f64>,
    stored: Vec<usize>,
    slices: Vec<Vec<f64>>,
    /// `𝒫`-branch flags per node, one vector per stored slice.
    slice_active: Vec<Vec<bool>>,
    /// `branch_counts[i]`: interior nodes on the `𝒫` branch in the update
    /// producing `times[i]`.
    branch_counts: Vec<usize>,
    final_active: Vec<bool>,
    probes: Vec<usize>,
    /// One row per time index, one column per probe.
    probe_values: Vec<Vec<f64>>,
    sup_abs: f64,
    data_sup_abs: f64,
}

impl Trajectory {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// The nominal step; only the first interval may be shorter.
    pub fn tau(&self) -> f64 {
        let n = self.times.len();
        self.times[n - 1] - self.times[n - 2]
    }

    pub fn is_full(&self) -> bool {
        self.stored.len() == self.times.len()
    }

    /// Slice at time index `i`, if stored.
    pub fn slice(&self, i: usize) -> Option<&[f64]> {
        self.stored.binary_search(&i).ok().map(|k| self.slices[k].as_slice())
    }

    /// Mutable access for tampering tests.
    pub fn slice_mut(&mut self, i: usize) -> Option<&mut [f64]> {
        self.stored.binary_search(&i).ok().map(|k| self.slices[k].as_mut_slice())
    }

    /// Per-node `𝒫`-branch flags of the update producing stored slice `i`;
    /// all false for the terminal slice.
    pub fn slice_active(&self, i: usize) -> Option<&[bool]> {
        self.stored.binary_search(&i).ok().map(|k| self.slice_active[k].as_slice())
    }

    /// Time indices of the stored slices, ascending.
    pub fn stored_indices(&self) -> &[usize] {
        &self.stored
    }

    pub fn initial(&self) -> &[f64] {
        &self.slices[0]
    }

    pub fn terminal(&self) -> &[f64] {
        self.slices.last().expect("trajectory has a terminal slice")
    }

    pub fn branch_counts(&self) -> &[usize] {
        &self.branch_counts
    }

    /// Per node: whether the update producing `t = 0` took the `𝒫` branch.
    pub fn final_active(&self) -> &[bool] {
        &self.final_active
    }

    /// Share of (interior node, step) pairs updated through the `𝒫` branch.
    pub fn active_fraction(&self) -> f64 {
        let total = self.steps() * self.grid.interior().len();
        self.branch_counts.iter().sum::<usize>() as f64 / total as f64
    }

    pub fn probes(&self) -> &[usize] {
        &self.probes
    }

    pub fn probe_values(&self) -> &[Vec<f64>] {
        &self.probe_values
    }

    /// `sup |v|` over every node and time.
    pub fn sup_abs(&self) -> f64 {
        self.sup_abs
    }

    /// `sup |g|` over the values the data supplied: the terminal slice and
    /// the collar at every time.
    pub fn data_sup_abs(&self) -> f64 {
        self.data_sup_abs
    }

    /// Replays the stored slices through an observer; needs a full trajectory.
    pub fn replay(&self, observer: &mut dyn SliceObserver) -> Result<()> {
        if !self.is_full() {
            return Err(Error::InsufficientData("replay needs every time slice".into()));
        }
        observer.begin(&self.grid, &self.times);
        let n = self.steps();
        observer.observe(n, &self.slices[n], None, None);
        for i in (0..n).rev() {
            observer.observe(i, &self.slices[i], Some(&self.slices[i + 1]), Some(self.branch_counts[i]));
        }
        Ok(())
    }
}

/// Per-node value of `H_{K,h}[v](t, x)` and its branch, at interior rank `rank`.
#[inline]
fn operator_at(
    op: &ErsatzOperator,
    grid: &Grid,
    later: &[f64],
    t: f64,
    rank: usize,
    scratch: &mut (Vec<f64>, Vec<f64>),
) -> (f64, Branch) {
    let (grad, z) = scratch;
    let node = grid.interior()[rank];
    let h = grid.h();
    let c = later[node];
    let d = grad.len();
    for (k, zk) in z.iter_mut().enumerate() {
        let f = later[grid.forward_neighbor(rank, k)];
        let b = later[grid.backward_neighbor(rank, k)];
        *zk = second_quotient(f, c, b, h);
        if k < d {
            grad[k] = (f - c) / h;
        }
    }
    op.eval(c, grad, z, t, grid.coords(node))
}

fn scratch_for(op: &ErsatzOperator) -> impl Fn() -> (Vec<f64>, Vec<f64>) + Sync + Send {
    let (d, m) = (op.stencil().dim(), op.stencil().len());
    move || (vec![0.0; d], vec![0.0; m])
}

/// One backward step from `t_later` to `t_earlier`: interior nodes are
/// updated by the scheme, collar nodes take `g(t_earlier, ·)`.
/// Returns the new slice and the per-node `𝒫`-branch flags.
pub fn scheme_update(config: &SolveConfig, later: &[f64], t_later: f64, t_earlier: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    let grid = &config.grid;
    if later.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), found: later.len() });
    }
    let mut out = vec![0.0; grid.len()];
    let mut active = vec![false; grid.len()];
    let mut buf = vec![(0.0, false); grid.interior().len()];
    step_into(config, later, t_later, t_earlier, &mut buf, &mut out, &mut active);
    Ok((out, active))
}

fn step_into(
    config: &SolveConfig,
    later: &[f64],
    t_later: f64,
    t_earlier: f64,
    buf: &mut [(f64, bool)],
    out: &mut [f64],
    active: &mut [bool],
) -> usize {
    let grid = &config.grid;
    let op = &config.op;
    let tau = t_later - t_earlier;
    for_each_indexed(config.backend, buf, scratch_for(op), |scratch, rank, slot| {
        let (val, branch) = operator_at(op, grid, later, t_later, rank, scratch);
        *slot = (later[grid.interior()[rank]] + tau * val, branch == Branch::P);
    });
    let mut count = 0;
    for (&node, &(v, p)) in grid.interior().iter().zip(buf.iter()) {
        out[node] = v;
        active[node] = p;
        count += p as usize;
    }
    if config.mode == Mode::Cylinder {
        for &node in grid.nodes() {
            if grid.kind(node) == NodeKind::Collar {
                out[node] = (config.data)(t_earlier, grid.coords(node));
                active[node] = false;
            }
        }
    }
    count
}

/// Advances one solve step by step; shared by [`solve`] and [`k_sweep`].
struct Stepper<'a> {
    config: &'a SolveConfig,
    times: Arc<Vec<f64>>,
    /// Time index of `cur`.
    index: usize,
    cur: Vec<f64>,
    prev: Vec<f64>,
    buf: Vec<(f64, bool)>,
    active: Vec<bool>,
    count: usize,
    sup_abs: f64,
    data_sup_abs: f64,
}

impl<'a> Stepper<'a> {
    fn new(config: &'a SolveConfig, times: Arc<Vec<f64>>) -> Result<Self> {
        let grid = &config.grid;
        let n = times.len() - 1;
        let mut cur = vec![0.0; grid.len()];
        let mut data_sup_abs: f64 = 0.0;
        for &node in grid.nodes() {
            let v = (config.data)(times[n], grid.coords(node));
            if !v.is_finite() {
                return Err(Error::InvalidSpec(format!("terminal data is not finite at node {node}")));
            }
            cur[node] = v;
            data_sup_abs = data_sup_abs.max(v.abs());
        }
        Ok(Stepper {
            config,
            index: n,
            prev: vec![0.0; grid.len()],
            buf: vec![(0.0, false); grid.interior().len()],
            active: vec![false; grid.len()],
            count: 0,
            sup_abs: data_sup_abs,
            data_sup_abs,
            cur,
            times,
        })
    }

    fn advance(&mut self) -> Result<()> {
        let i = self.index - 1;
        let (t_later, t_earlier) = (self.times[i + 1], self.times[i]);
        std::mem::swap(&mut self.cur, &mut self.prev);
        self.count = step_into(self.config, &self.prev, t_later, t_earlier, &mut self.buf, &mut self.cur, &mut self.active);
        self.index = i;
        let grid = &self.config.grid;
        let mut sup = self.sup_abs;
        for &node in grid.nodes() {
            let v = self.cur[node];
            if !v.is_finite() {
                return Err(Error::DivergenceDetected { step: self.times.len() - 1 - i, t: t_earlier });
            }
            sup = sup.max(v.abs());
        }
        self.sup_abs = sup;
        if self.config.mode == Mode::Cylinder {
            for &node in grid.nodes() {
                if grid.kind(node) == NodeKind::Collar {
                    self.data_sup_abs = self.data_sup_abs.max(self.cur[node].abs());
                }
            }
        }
        Ok(())
    }
}

/// Collects the stored parts of a trajectory as the stepper produces them.
struct Recorder {
    full: bool,
    probes: Vec<usize>,
    stored: Vec<(usize, Vec<f64>, Vec<bool>)>,
    probe_values: Vec<Vec<f64>>,
    branch_counts: Vec<usize>,
}

impl Recorder {
    fn new(store: &StorePolicy, n: usize) -> Self {
        let (full, probes) = match store {
            StorePolicy::Full => (true, Vec::new()),
            StorePolicy::FinalWithProbes(p) => (false, p.clone()),
        };
        Recorder {
            full,
            probes,
            stored: Vec::new(),
            probe_values: vec![Vec::new(); if full { 0 } else { n + 1 }],
            branch_counts: vec![0; n],
        }
    }

    fn record(&mut self, index: usize, n: usize, values: &[f64], step: Option<(usize, &[bool])>) {
        if let Some((c, _)) = step {
            self.branch_counts[index] = c;
        }
        if self.full || index == 0 || index == n {
            let active = step.map_or_else(|| vec![false; values.len()], |(_, a)| a.to_vec());
            self.stored.push((index, values.to_vec(), active));
        }
        if !self.full {
            self.probe_values[index] = self.probes.iter().map(|&p| values[p]).collect();
        }
    }

    fn finish(mut self, stepper: &Stepper<'_>) -> Trajectory {
        self.stored.reverse();
        let mut stored = Vec::with_capacity(self.stored.len());
        let mut slices = Vec::with_capacity(self.stored.len());
        let mut slice_active = Vec::with_capacity(self.stored.len());
        for (i, v, a) in self.stored {
            stored.push(i);
            slices.push(v);
            slice_active.push(a);
        }
        Trajectory {
            grid: Arc::clone(&stepper.config.grid),
            times: stepper.times.as_ref().clone(),
            stored,
            slices,
            slice_active,
            branch_counts: self.branch_counts,
            final_active: stepper.active.clone(),
            probes: self.probes,
            probe_values: self.probe_values,
            sup_abs: stepper.sup_abs,
            data_sup_abs: stepper.data_sup_abs,
        }
    }
}

pub fn solve(config: &SolveConfig) -> Result<Trajectory> {
    solve_with_observer(config, &mut NoObserver)
}

pub fn solve_with_observer(config: &SolveConfig, observer: &mut dyn SliceObserver) -> Result<Trajectory> {
    let times = Arc::new(config.prepare()?);
    let n = times.len() - 1;
    let mut stepper = Stepper::new(config, Arc::clone(&times))?;
    let mut rec = Recorder::new(&config.store, n);
    observer.begin(&config.grid, &times);
    observer.observe(n, &stepper.cur, None, None);
    rec.record(n, n, &stepper.cur, None);
    while stepper.index > 0 {
        stepper.advance()?;
        let i = stepper.index;
        observer.observe(i, &stepper.cur, Some(&stepper.prev), Some(stepper.count));
        rec.record(i, n, &stepper.cur, Some((stepper.count, &stepper.active)));
    }
    Ok(rec.finish(&stepper))
}

/// `sup` over interior nodes and steps of
/// `|(v(t_{i+1}) − v(t_i))/τ_i + H_{K,h}[v(t_{i+1})]|`.
pub fn residual_sup(traj: &Trajectory, config: &SolveConfig) -> Result<f64> {
    if !traj.is_full() {
        return Err(Error::InsufficientData("residual needs every time slice".into()));
    }
    let grid = &config.grid;
    let times = traj.times();
    let mut worst: f64 = 0.0;
    let mut buf = vec![0.0; grid.interior().len()];
    for i in 0..traj.steps() {
        let later = &traj.slices[i + 1];
        let earlier = &traj.slices[i];
        let tau = times[i + 1] - times[i];
        for_each_indexed(config.backend, &mut buf, scratch_for(&config.op), |s, rank, out| {
            let (val, _) = operator_at(&config.op, grid, later, times[i + 1], rank, s);
            let node = grid.interior()[rank];
            *out = ((later[node] - earlier[node]) / tau + val).abs();
        });
        worst = buf.iter().copied().fold(worst, f64::max);
    }
    Ok(worst)
}

/// Re-solves the last interval `[t_0, t_1]` by fixed-point iteration of
/// `w = v(t_1) + Δ·H_{K,h}[(w + v(t_1))/2]` at the midpoint time, and
/// returns `sup |w − v(t_0)|` over interior nodes. The collar of `w`
/// holds the data at `t_0`.
pub fn picard_final_interval(traj: &Trajectory, config: &SolveConfig, iterations: usize) -> Result<f64> {
    let (Some(v0), Some(v1)) = (traj.slice(0), traj.slice(1)) else {
        return Err(Error::InsufficientData("Picard check needs the slices at t_0 and t_1".into()));
    };
    let grid = &config.grid;
    let times = traj.times();
    let (dt, t_mid) = (times[1] - times[0], 0.5 * (times[0] + times[1]));
    let mut w = v1.to_vec();
    if config.mode == Mode::Cylinder {
        for &node in grid.nodes() {
            if grid.kind(node) == NodeKind::Collar {
                w[node] = (config.data)(times[0], grid.coords(node));
            }
        }
    }
    let mut mid = vec![0.0; grid.len()];
    let mut scratch = scratch_for(&config.op)();
    for _ in 0..iterations {
        for &node in grid.nodes() {
            mid[node] = 0.5 * (w[node] + v1[node]);
        }
        let next: Vec<f64> = (0..grid.interior().len())
            .map(|rank| {
                let (val, _) = operator_at(&config.op, grid, &mid, t_mid, rank, &mut scratch);
                v1[grid.interior()[rank]] + dt * val
            })
            .collect();
        for (&node, v) in grid.interior().iter().zip(next) {
            w[node] = v;
        }
    }
    Ok(grid.interior().iter().map(|&n| (w[n] - v0[n]).abs()).fold(0.0, f64::max))
}

/// `e^{L₀T}(T·(H̄ + K) + sup|g|)` with the constants of the configuration.
pub fn sup_norm_bound(config: &SolveConfig, data_sup: f64) -> f64 {
    let l0 = config.op.ham().lipschitz().u0;
    let p = config.op.params();
    (l0 * config.horizon).exp() * (config.horizon * (p.h_bar + p.big_k) + data_sup)
}

#[derive(Debug, Clone)]
pub struct KSweepEntry {
    pub big_k: f64,
    pub trajectory: Trajectory,
    /// `sup |v_K − v_{K_prev}|` over every node and time.
    pub sup_increment: Option<f64>,
    /// `sup (v_K − v_{K_prev})⁺`.
    pub max_positive_increment: Option<f64>,
}

/// Tolerance on `(v_{K'} − v_K)⁺` for `K < K'`.
pub const K_MONOTONICITY_TOL: f64 = 1e-12;

/// Solves for every `K` in lockstep on one time grid, comparing
/// consecutive values of `K` at every slice.
pub fn k_sweep(config: &SolveConfig, k_values: &[f64]) -> Result<Vec<KSweepEntry>> {
    if k_values.is_empty() {
        return Err(Error::InvalidParameter("K list is empty".into()));
    }
    if k_values.iter().any(|k| !(*k > 0.0 && k.is_finite())) || k_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("K values must be positive and strictly ascending".into()));
    }
    if !config.op.ham().flags().nonincreasing_in_u0 {
        return Err(Error::InvalidSpec("K-sweep needs a Hamiltonian nonincreasing in u0".into()));
    }
    let configs: Vec<SolveConfig> = k_values
        .iter()
        .map(|&k| Ok(config.clone().with_op(config.op.with_big_k(k)?)))
        .collect::<Result<_>>()?;
    let times = Arc::new(configs[0].prepare()?);
    for c in &configs[1..] {
        if c.prepare()? != *times {
            return Err(Error::InvalidSpec("time grids differ across K".into()));
        }
    }
    let n = times.len() - 1;
    let mut steppers: Vec<Stepper> = configs.iter().map(|c| Stepper::new(c, Arc::clone(&times))).collect::<Result<_>>()?;
    let mut recs: Vec<Recorder> = configs.iter().map(|c| Recorder::new(&c.store, n)).collect();
    for (s, r) in steppers.iter().zip(recs.iter_mut()) {
        r.record(n, n, &s.cur, None);
    }
    let pairs = k_values.len() - 1;
    let mut sup_inc = vec![0.0f64; pairs];
    let mut pos_inc = vec![0.0f64; pairs];
    let nodes = config.grid.nodes();
    while steppers[0].index > 0 {
        for (s, r) in steppers.iter_mut().zip(recs.iter_mut()) {
            s.advance()?;
            r.record(s.index, n, &s.cur, Some((s.count, &s.active)));
        }
        for j in 0..pairs {
            let (lo, hi) = (&steppers[j].cur, &steppers[j + 1].cur);
            let mut sup: f64 = 0.0;
            let mut pos = f64::NEG_INFINITY;
            for &node in nodes {
                let diff = hi[node] - lo[node];
                sup = sup.max(diff.abs());
                pos = pos.max(diff);
            }
            if pos > K_MONOTONICITY_TOL {
                return Err(Error::MonotonicityCheckFailed { k_low: k_values[j], k_high: k_values[j + 1], violation: pos });
            }
            sup_inc[j] = sup_inc[j].max(sup);
            pos_inc[j] = pos_inc[j].max(pos.max(0.0));
        }
    }
    Ok(steppers
        .iter()
        .zip(recs)
        .enumerate()
        .map(|(j, (s, r))| KSweepEntry {
            big_k: k_values[j],
            trajectory: r.finish(s),
            sup_increment: (j > 0).then(|| sup_inc[j - 1]),
            max_positive_increment: (j > 0).then(|| pos_inc[j - 1]),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementRow {
    pub h: f64,
    pub steps: usize,
    /// `sup |v_h − v_{h_prev}|` at `t = 0` on the coarsest lattice.
    pub sup_diff: Option<f64>,
    /// `log(e_{i−1}/e_i) / log(h_{i−1}/h_i)`.
    pub order: Option<f64>,
}

/// Integer refinement ratio `coarse / fine`, if any.
fn refinement_ratio(coarse: f64, fine: f64) -> Option<i64> {
    let r = coarse / fine;
    let k = r.round();
    ((r - k).abs() <= 1e-9 * r && k >= 1.0).then_some(k as i64)
}

/// Values of `fine` at the nodes of `coarse`, in `coarse.nodes()` order.
pub fn restrict_to_lattice(coarse: &Grid, fine: &Grid, values: &[f64]) -> Result<Vec<f64>> {
    if coarse.domain() != fine.domain() {
        return Err(Error::IncompatibleRefinement("grids live on different domains".into()));
    }
    let ratio = refinement_ratio(coarse.h(), fine.h())
        .ok_or_else(|| Error::IncompatibleRefinement(format!("h = {} does not divide {}", fine.h(), coarse.h())))?;
    coarse
        .nodes()
        .iter()
        .map(|&node| {
            let idx: Vec<i64> = coarse.lattice_index(node).iter().map(|i| i * ratio).collect();
            fine.node_at(&idx)
                .map(|f| values[f])
                .ok_or_else(|| Error::IncompatibleRefinement(format!("coarse node {idx:?} missing from the fine grid")))
        })
        .collect()
}

/// Solves each configuration (descending `h`) and compares successive
/// `t = 0` slices on the coarsest lattice.
pub fn h_refine(configs: &[SolveConfig]) -> Result<Vec<RefinementRow>> {
    h_refine_with(configs, |_, _| Ok(()))
}

/// As [`h_refine`], handing every trajectory to `inspect` before it is
/// dropped.
pub fn h_refine_with(configs: &[SolveConfig], mut inspect: impl FnMut(usize, &Trajectory) -> Result<()>) -> Result<Vec<RefinementRow>> {
    h_refine_observed(configs, |_| NoObserver, |i, _, traj| inspect(i, traj))
}

/// As [`h_refine_with`], streaming every level through its own observer.
pub fn h_refine_observed<O: SliceObserver>(
    configs: &[SolveConfig],
    mut observer_for: impl FnMut(usize) -> O,
    mut inspect: impl FnMut(usize, O, &Trajectory) -> Result<()>,
) -> Result<Vec<RefinementRow>> {
    if configs.len() < 2 {
        return Err(Error::InvalidParameter("refinement needs at least two grids".into()));
    }
    if configs.windows(2).any(|w| w[1].grid.h() >= w[0].grid.h()) {
        return Err(Error::InvalidParameter("h values must be strictly descending".into()));
    }
    let coarse = Arc::clone(&configs[0].grid);
    let mut rows = Vec::with_capacity(configs.len());
    let mut prev: Option<Vec<f64>> = None;
    for (i, c) in configs.iter().enumerate() {
        restrict_to_lattice(&coarse, &c.grid, &vec![0.0; c.grid.len()])?;
        let mut observer = observer_for(i);
        let traj = solve_with_observer(c, &mut observer)?;
        inspect(i, observer, &traj)?;
        let restricted = restrict_to_lattice(&coarse, &c.grid, traj.initial())?;
        let sup_diff = prev
            .as_ref()
            .map(|p| p.iter().zip(&restricted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let order = match (rows.last(), sup_diff) {
            (Some(RefinementRow { sup_diff: Some(e_prev), h: h_prev, .. }), Some(e)) if e > 0.0 => {
                Some((e_prev / e).ln() / (h_prev / c.grid.h()).ln())
            }
            _ => None,
        };
        rows.push(RefinementRow { h: c.grid.h(), steps: traj.steps(), sup_diff, order });
        prev = Some(restricted);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TerminalData;
    use crate::grid::{build_grid, Domain};
    use crate::hamiltonian::make_linear;
    use crate::pucci::EllipticityParams;
    use crate::stencil::build_standard_stencil;

    #[test]
    fn cfl_examples() {
        let tau = cfl_time_step_from_bounds(4.0, 0.0, 0.0, 2, 4, 0.1, 0.9).unwrap();
        assert!((tau - 2.8125e-4).abs() < 1e-18);
        let half = cfl_time_step_from_bounds(4.0, 0.0, 0.0, 2, 4, 0.05, 0.9).unwrap();
        assert!((half - tau / 4.0).abs() < 1e-18);
        let h = 1.0 / 32.0;
        assert_eq!(cfl_time_step_from_bounds(1.0, 0.0, 0.0, 1, 1, h, 1.0).unwrap(), h * h / 2.0);
    }

    #[test]
    fn time_grid_lands_on_zero() {
        let t = time_grid(0.1, 0.03);
        assert_eq!(t.len(), 5);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[4], 0.1);
        assert!((t[1] - 0.01).abs() < 1e-15);
        assert_eq!(time_grid(1.0, 0.25).len(), 5);
    }

    fn heat_config(h: f64) -> SolveConfig {
        let s = build_standard_stencil(2).unwrap();
        let grid = Arc::new(build_grid(Domain::Box { lower: vec![0.0; 2], upper: vec![1.0; 2] }, &s, h).unwrap());
        let ham = make_linear(vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0], 0.0, None).unwrap();
        let params = EllipticityParams { delta: 0.99, hat_delta: 0.2475, check_delta: 0.5, k0: 0.0, h_bar: 0.0, big_k: 100.0 };
        let op = ErsatzOperator::new(Arc::new(ham), params, s).unwrap();
        SolveConfig::new(grid, op, TerminalData::quadratic_norm(2, 4.0).to_fn(0.1), 0.1)
    }

    #[test]
    fn constant_data_is_a_fixed_point() {
        let cfg = heat_config(0.125).with_data(Arc::new(|_, _| 2.5));
        let traj = solve(&cfg).unwrap();
        for i in 0..=traj.steps() {
            assert!(cfg.grid.nodes().iter().all(|&n| traj.slice(i).unwrap()[n] == 2.5));
        }
    }

    #[test]
    fn quadratic_exactness_small() {
        let cfg = heat_config(0.125);
        let traj = solve(&cfg).unwrap();
        let times = traj.times();
        let mut worst: f64 = 0.0;
        for (i, t) in times.iter().enumerate() {
            for &n in cfg.grid.nodes() {
                worst = worst.max((traj.slice(i).unwrap()[n] - (cfg.data)(*t, cfg.grid.coords(n))).abs());
            }
        }
        assert!(worst <= 5e-13, "{worst}");
        assert_eq!(traj.active_fraction(), 0.0);
        assert!(residual_sup(&traj, &cfg).unwrap() <= 1e-10);
    }

    #[test]
    fn fixed_step_above_cfl_is_refused() {
        let cfg = heat_config(0.125);
        let max_tau = cfl_time_step(&cfg.op, 0.125, 1.0).unwrap();
        let err = solve(&cfg.clone().with_time_step(TimeStep::Fixed(2.0 * max_tau))).unwrap_err();
        assert_eq!(err.code(), "refuse-to-step");
        assert!(solve(&cfg.with_time_step(TimeStep::Fixed(0.5 * max_tau))).is_ok());
    }

    #[test]
    fn drift_condition() {
        let s = build_standard_stencil(1).unwrap();
        let grid = Arc::new(build_grid(Domain::Torus { period: vec![1.0] }, &s, 0.25).unwrap());
        let ham = make_linear(vec![1.0], vec![-8.0], 0.0, None).unwrap();
        let params = EllipticityParams { delta: 0.99, hat_delta: 0.2475, check_delta: 0.5, k0: 0.0, h_bar: 0.0, big_k: 1.0 };
        let op = ErsatzOperator::new(Arc::new(ham), params, s).unwrap();
        let cfg = SolveConfig::new(grid, op, Arc::new(|_, _| 0.0), 0.1);
        assert_eq!(solve(&cfg).unwrap_err().code(), "drift-condition-violated");
    }

    #[test]
    fn probes_only_keep_ends() {
        let cfg = heat_config(0.125);
        let probe = cfg.grid.node_at(&[4, 4]).unwrap();
        let traj = solve(&cfg.clone().with_store(StorePolicy::FinalWithProbes(vec![probe]))).unwrap();
        assert!(!traj.is_full());
        assert!(traj.slice(1).is_none());
        assert_eq!(traj.probe_values().len(), traj.steps() + 1);
        assert_eq!(residual_sup(&traj, &cfg).unwrap_err().code(), "insufficient-data");
        let full = solve(&cfg).unwrap();
        assert_eq!(full.initial(), traj.initial());
    }

    #[test]
    fn mode_mismatch() {
        let mut cfg = heat_config(0.125);
        cfg.mode = Mode::WholeSpace;
        assert_eq!(solve(&cfg).unwrap_err().code(), "invalid-spec");
    }
}
