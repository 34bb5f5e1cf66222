//! Hamiltonians in stencil form `ℋ(u0, grad, z, t, x)`, where `z` holds the
//! pure second differences along the stencil and `grad` the forward first
//! differences along the coordinate axes, plus the ersatz operator
//! `max(ℋ, 𝒫 − K)` and sampled checkers for the structural assumptions.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pucci::{check_s_delta, decompose_matrix, script_p, EllipticityParams, SymMatrix};
use crate::stencil::StencilSet;

pub type SourceFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> SymMatrix + Send + Sync>;
pub type LowerOrderFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;

/// Declared Lipschitz constants of `ℋ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzBounds {
    /// Largest slope in any single `z_k`.
    pub z: f64,
    /// Smallest slope in the coordinate components `z_1..z_d`; bounds the
    /// drift the forward first differences can absorb monotonically.
    pub z_axis_min: f64,
    /// Largest slope in any single `grad_i`.
    pub grad: f64,
    pub u0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HamiltonianFlags {
    pub independent_of_u0: bool,
    pub nonincreasing_in_u0: bool,
    pub time_dependent: bool,
}

pub trait StencilHamiltonian: Send + Sync {
    fn dim(&self) -> usize;
    fn stencil_len(&self) -> usize;
    fn eval(&self, u0: f64, grad: &[f64], z: &[f64], t: f64, x: &[f64]) -> f64;
    fn lipschitz(&self) -> LipschitzBounds;
    /// Components `z_k` that `ℋ` depends on; the others must be ignored.
    fn active_components(&self) -> Vec<bool>;
    fn flags(&self) -> HamiltonianFlags;
}

impl fmt::Debug for dyn StencilHamiltonian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StencilHamiltonian")
            .field("dim", &self.dim())
            .field("stencil_len", &self.stencil_len())
            .field("lipschitz", &self.lipschitz())
            .finish()
    }
}

/// `Σ ν_k z_k + ⟨b, grad⟩ + c·u0 + f(t, x)`.
#[derive(Clone)]
pub struct LinearHamiltonian {
    nu: Vec<f64>,
    drift: Vec<f64>,
    zeroth: f64,
    source: Option<SourceFn>,
}

impl fmt::Debug for LinearHamiltonian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearHamiltonian")
            .field("nu", &self.nu)
            .field("drift", &self.drift)
            .field("zeroth", &self.zeroth)
            .field("has_source", &self.source.is_some())
            .finish()
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn make_linear(nu: Vec<f64>, drift: Vec<f64>, zeroth: f64, source: Option<SourceFn>) -> Result<LinearHamiltonian> {
    let d = drift.len();
    if d == 0 {
        return Err(Error::InvalidDimension(0));
    }
    if nu.len() < d {
        return Err(Error::DimensionMismatch { expected: d, found: nu.len() });
    }
    if !all_finite(&nu) || !all_finite(&drift) || !zeroth.is_finite() {
        return Err(Error::InvalidParameter("linear coefficients must be finite".into()));
    }
    if nu.iter().any(|v| *v < 0.0) {
        return Err(Error::EllipticityViolation("negative second-order weight".into()));
    }
    Ok(LinearHamiltonian { nu, drift, zeroth, source })
}

/// As [`make_linear`], additionally requiring every nonzero weight to lie in
/// `[δ̂, 1/δ̂]` and the first `d` weights to be nonzero.
pub fn make_linear_strict(
    nu: Vec<f64>,
    drift: Vec<f64>,
    zeroth: f64,
    source: Option<SourceFn>,
    hat_delta: f64,
) -> Result<LinearHamiltonian> {
    let ham = make_linear(nu, drift, zeroth, source)?;
    check_weight_row(&ham.nu, ham.drift.len(), hat_delta)?;
    Ok(ham)
}

fn check_weight_row(weights: &[f64], d: usize, hat_delta: f64) -> Result<()> {
    for (k, w) in weights.iter().enumerate() {
        let active = *w != 0.0 || k < d;
        if active && !(*w >= hat_delta && *w <= 1.0 / hat_delta) {
            return Err(Error::EllipticityViolation(format!(
                "weight {w} on component {k} outside [{hat_delta}, {}]",
                1.0 / hat_delta
            )));
        }
    }
    Ok(())
}

impl LinearHamiltonian {
    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn drift(&self) -> &[f64] {
        &self.drift
    }

    pub fn zeroth(&self) -> f64 {
        self.zeroth
    }
}

impl StencilHamiltonian for LinearHamiltonian {
    fn dim(&self) -> usize {
        self.drift.len()
    }

    fn stencil_len(&self) -> usize {
        self.nu.len()
    }

    #[inline]
    fn eval(&self, u0: f64, grad: &[f64], z: &[f64], t: f64, x: &[f64]) -> f64 {
        let mut v = self.zeroth * u0;
        for (n, zk) in self.nu.iter().zip(z) {
            v += n * zk;
        }
        for (b, g) in self.drift.iter().zip(grad) {
            v += b * g;
        }
        if let Some(f) = &self.source {
            v += f(t, x);
        }
        v
    }

    fn lipschitz(&self) -> LipschitzBounds {
        let d = self.drift.len();
        LipschitzBounds {
            z: self.nu.iter().copied().fold(0.0, f64::max),
            z_axis_min: self.nu[..d].iter().copied().fold(f64::INFINITY, f64::min),
            grad: self.drift.iter().map(|b| b.abs()).fold(0.0, f64::max),
            u0: self.zeroth.abs(),
        }
    }

    fn active_components(&self) -> Vec<bool> {
        self.nu.iter().map(|w| *w != 0.0).collect()
    }

    fn flags(&self) -> HamiltonianFlags {
        HamiltonianFlags {
            independent_of_u0: self.zeroth == 0.0,
            nonincreasing_in_u0: self.zeroth <= 0.0,
            time_dependent: self.source.is_some(),
        }
    }
}

/// One affine row `Σ a_k z_k + ⟨b, grad⟩ + c·u0 + f`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRow {
    pub weights: Vec<f64>,
    pub drift: Vec<f64>,
    pub zeroth: f64,
    pub source: f64,
}

impl CoefficientRow {
    pub fn new(weights: Vec<f64>, drift: Vec<f64>, zeroth: f64, source: f64) -> Self {
        CoefficientRow { weights, drift, zeroth, source }
    }

    #[inline]
    fn eval(&self, u0: f64, grad: &[f64], z: &[f64]) -> f64 {
        let mut v = self.zeroth * u0 + self.source;
        for (a, zk) in self.weights.iter().zip(z) {
            v += a * zk;
        }
        for (b, g) in self.drift.iter().zip(grad) {
            v += b * g;
        }
        v
    }
}

/// `max_α min_β` over a table of affine rows. A Bellman operator is the
/// special case in which every inner group has a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct TableHamiltonian {
    groups: Vec<Vec<CoefficientRow>>,
    dim: usize,
    m: usize,
}

pub fn make_bellman(rows: Vec<CoefficientRow>) -> Result<TableHamiltonian> {
    make_isaacs(rows.into_iter().map(|r| vec![r]).collect())
}

pub fn make_isaacs(groups: Vec<Vec<CoefficientRow>>) -> Result<TableHamiltonian> {
    let first = groups
        .first()
        .and_then(|g| g.first())
        .ok_or_else(|| Error::InvalidSpec("coefficient table is empty".into()))?;
    let (dim, m) = (first.drift.len(), first.weights.len());
    if dim == 0 {
        return Err(Error::InvalidDimension(0));
    }
    for group in &groups {
        if group.is_empty() {
            return Err(Error::InvalidSpec("coefficient table has an empty inner group".into()));
        }
        for row in group {
            if row.drift.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: row.drift.len() });
            }
            if row.weights.len() != m {
                return Err(Error::DimensionMismatch { expected: m, found: row.weights.len() });
            }
            if !all_finite(&row.weights) || !all_finite(&row.drift) || !row.zeroth.is_finite() || !row.source.is_finite() {
                return Err(Error::InvalidParameter("coefficient table entries must be finite".into()));
            }
            if row.weights.iter().any(|w| *w < 0.0) {
                return Err(Error::EllipticityViolation("negative second-order weight".into()));
            }
        }
    }
    Ok(TableHamiltonian { groups, dim, m })
}

impl TableHamiltonian {
    pub fn groups(&self) -> &[Vec<CoefficientRow>] {
        &self.groups
    }

    fn rows(&self) -> impl Iterator<Item = &CoefficientRow> {
        self.groups.iter().flatten()
    }

    /// Checks every weight against `[δ̂, 1/δ̂]`.
    pub fn check_window(&self, hat_delta: f64) -> Result<()> {
        self.rows().try_for_each(|r| check_weight_row(&r.weights, self.dim, hat_delta))
    }
}

impl StencilHamiltonian for TableHamiltonian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn stencil_len(&self) -> usize {
        self.m
    }

    #[inline]
    fn eval(&self, u0: f64, grad: &[f64], z: &[f64], _t: f64, _x: &[f64]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for group in &self.groups {
            let mut inner = f64::INFINITY;
            for row in group {
                inner = inner.min(row.eval(u0, grad, z));
            }
            best = best.max(inner);
        }
        best
    }

    fn lipschitz(&self) -> LipschitzBounds {
        let mut b = LipschitzBounds { z: 0.0, z_axis_min: f64::INFINITY, grad: 0.0, u0: 0.0 };
        for r in self.rows() {
            b.z = r.weights.iter().copied().fold(b.z, f64::max);
            b.z_axis_min = r.weights[..self.dim].iter().copied().fold(b.z_axis_min, f64::min);
            b.grad = r.drift.iter().map(|x| x.abs()).fold(b.grad, f64::max);
            b.u0 = b.u0.max(r.zeroth.abs());
        }
        b
    }

    fn active_components(&self) -> Vec<bool> {
        (0..self.m).map(|k| self.rows().any(|r| r.weights[k] != 0.0)).collect()
    }

    fn flags(&self) -> HamiltonianFlags {
        HamiltonianFlags {
            independent_of_u0: self.rows().all(|r| r.zeroth == 0.0),
            nonincreasing_in_u0: self.rows().all(|r| r.zeroth <= 0.0),
            time_dependent: false,
        }
    }
}

/// `Σ λ_k(a) z_k + lower(u0, grad, t, x)` with `λ(a)` from the stencil
/// decomposition of the diffusion matrix `a(t, x, u0, grad)`.
pub struct DiffusionHamiltonian {
    a_field: MatrixField,
    lower: LowerOrderFn,
    lower_lipschitz: (f64, f64),
    stencil: StencilSet,
    hat_delta: f64,
    cache: RwLock<HashMap<Vec<u64>, Arc<Vec<f64>>>>,
}

impl fmt::Debug for DiffusionHamiltonian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionHamiltonian")
            .field("hat_delta", &self.hat_delta)
            .field("stencil_len", &self.stencil.len())
            .finish()
    }
}

/// Converts a diffusion-form operator, certifying `a ∈ S_{δ/4}` and its
/// decomposability at the sampled points of `spec` first.
///
/// `lower_lipschitz` declares the slopes of `lower` in `grad` and `u0`.
pub fn from_diffusion(
    a_field: MatrixField,
    lower: LowerOrderFn,
    lower_lipschitz: (f64, f64),
    stencil: &StencilSet,
    hat_delta: f64,
    delta: f64,
    spec: &SampleSpec,
) -> Result<DiffusionHamiltonian> {
    let ham = DiffusionHamiltonian {
        a_field,
        lower,
        lower_lipschitz,
        stencil: stencil.clone(),
        hat_delta,
        cache: RwLock::new(HashMap::new()),
    };
    let d = stencil.dim();
    for s in spec.samples(d, stencil.len()) {
        let a = (ham.a_field)(s.t, &s.x, s.u0, &s.grad);
        if a.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, found: a.dim() });
        }
        if !check_s_delta(&a, delta / 4.0) {
            return Err(Error::EllipticityViolation(format!(
                "diffusion matrix at t = {}, x = {:?} leaves S_(delta/4)",
                s.t, s.x
            )));
        }
        ham.weights(&a)?;
    }
    Ok(ham)
}

impl DiffusionHamiltonian {
    fn weights(&self, a: &SymMatrix) -> Result<Arc<Vec<f64>>> {
        let key: Vec<u64> = a.entries().iter().map(|v| v.to_bits()).collect();
        if let Some(w) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(w));
        }
        let w = Arc::new(decompose_matrix(a, &self.stencil, self.hat_delta)?.weights);
        self.cache.write().expect("cache lock").entry(key).or_insert_with(|| Arc::clone(&w));
        Ok(w)
    }

    pub fn cached_matrices(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }

    /// Decomposition weights for the matrix at the given arguments.
    pub fn weights_at(&self, t: f64, x: &[f64], u0: f64, grad: &[f64]) -> Result<Vec<f64>> {
        Ok(self.weights(&(self.a_field)(t, x, u0, grad))?.as_ref().clone())
    }
}

impl StencilHamiltonian for DiffusionHamiltonian {
    fn dim(&self) -> usize {
        self.stencil.dim()
    }

    fn stencil_len(&self) -> usize {
        self.stencil.len()
    }

    /// Returns NaN when the matrix at this point cannot be decomposed; the
    /// solver reports that as a divergence.
    fn eval(&self, u0: f64, grad: &[f64], z: &[f64], t: f64, x: &[f64]) -> f64 {
        let a = (self.a_field)(t, x, u0, grad);
        match self.weights(&a) {
            Ok(w) => w.iter().zip(z).map(|(l, zk)| l * zk).sum::<f64>() + (self.lower)(u0, grad, t, x),
            Err(_) => f64::NAN,
        }
    }

    fn lipschitz(&self) -> LipschitzBounds {
        LipschitzBounds {
            z: 1.0 / self.hat_delta,
            z_axis_min: self.hat_delta,
            grad: self.lower_lipschitz.0,
            u0: self.lower_lipschitz.1,
        }
    }

    fn active_components(&self) -> Vec<bool> {
        vec![true; self.stencil.len()]
    }

    fn flags(&self) -> HamiltonianFlags {
        HamiltonianFlags { independent_of_u0: false, nonincreasing_in_u0: false, time_dependent: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    H,
    P,
}

/// `max(ℋ, 𝒫 − K)` bundled with its constants.
#[derive(Clone)]
pub struct ErsatzOperator {
    ham: Arc<dyn StencilHamiltonian>,
    params: EllipticityParams,
    stencil: StencilSet,
}

impl fmt::Debug for ErsatzOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ErsatzOperator")
            .field("ham", &self.ham)
            .field("params", &self.params)
            .field("stencil_len", &self.stencil.len())
            .finish()
    }
}

impl ErsatzOperator {
    pub fn new(ham: Arc<dyn StencilHamiltonian>, params: EllipticityParams, stencil: StencilSet) -> Result<Self> {
        params.validate()?;
        if ham.dim() != stencil.dim() {
            return Err(Error::DimensionMismatch { expected: stencil.dim(), found: ham.dim() });
        }
        if ham.stencil_len() != stencil.len() {
            return Err(Error::DimensionMismatch { expected: stencil.len(), found: ham.stencil_len() });
        }
        Ok(ErsatzOperator { ham, params, stencil })
    }

    pub fn ham(&self) -> &Arc<dyn StencilHamiltonian> {
        &self.ham
    }

    pub fn params(&self) -> &EllipticityParams {
        &self.params
    }

    pub fn stencil(&self) -> &StencilSet {
        &self.stencil
    }

    /// Same Hamiltonian and stencil, different `K`.
    pub fn with_big_k(&self, big_k: f64) -> Result<Self> {
        let params = EllipticityParams { big_k, ..self.params };
        params.validate()?;
        Ok(ErsatzOperator { params, ..self.clone() })
    }

    #[inline]
    pub fn eval(&self, u0: f64, grad: &[f64], z: &[f64], t: f64, x: &[f64]) -> (f64, Branch) {
        let h = self.ham.eval(u0, grad, z, t, x);
        let p = script_p(z, self.params.hat_delta) - self.params.big_k;
        if p > h {
            (p, Branch::P)
        } else {
            (h, Branch::H)
        }
    }
}

pub fn ersatz_eval(op: &ErsatzOperator, u0: f64, grad: &[f64], z: &[f64], t: f64, x: &[f64]) -> (f64, Branch) {
    op.eval(u0, grad, z, t, x)
}

/// Seeded sampling box for the assumption checkers.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub seed: u64,
    pub count: usize,
    pub u0_range: (f64, f64),
    pub grad_range: (f64, f64),
    pub z_range: (f64, f64),
    pub t_range: (f64, f64),
    pub x_range: (f64, f64),
    /// Step of the divided differences.
    pub eps: f64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            seed: 0,
            count: 1000,
            u0_range: (-10.0, 10.0),
            grad_range: (-10.0, 10.0),
            z_range: (-100.0, 100.0),
            t_range: (0.0, 1.0),
            x_range: (-1.0, 1.0),
            eps: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoint {
    pub u0: f64,
    pub grad: Vec<f64>,
    pub z: Vec<f64>,
    pub t: f64,
    pub x: Vec<f64>,
}

impl SampleSpec {
    pub fn samples(&self, d: usize, m: usize) -> Vec<SamplePoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut draw = |(a, b): (f64, f64)| if a < b { rng.random_range(a..b) } else { a };
        (0..self.count)
            .map(|_| SamplePoint {
                u0: draw(self.u0_range),
                grad: (0..d).map(|_| draw(self.grad_range)).collect(),
                z: (0..m).map(|_| draw(self.z_range)).collect(),
                t: draw(self.t_range),
                x: (0..d).map(|_| draw(self.x_range)).collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeViolation {
    pub sample: usize,
    pub component: usize,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EllipticityReport {
    pub samples: usize,
    pub violations: Vec<SlopeViolation>,
}

impl EllipticityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        match self.violations.first() {
            None => Ok(()),
            Some(v) => Err(Error::EllipticityViolation(format!(
                "slope {:.6e} along component {} at sample {} ({} violations)",
                v.slope,
                v.component,
                v.sample,
                self.violations.len()
            ))),
        }
    }
}

const SLOPE_TOL: f64 = 1e-7;

/// Divided differences `(ℋ(z + ε e_k) − ℋ(z)) / ε` must lie in
/// `[δ̂, 1/δ̂]` for active components and vanish for inactive ones.
pub fn check_stencil_ellipticity(ham: &dyn StencilHamiltonian, hat_delta: f64, spec: &SampleSpec) -> EllipticityReport {
    let (d, m) = (ham.dim(), ham.stencil_len());
    let active = ham.active_components();
    let (lo, hi) = (hat_delta - SLOPE_TOL, 1.0 / hat_delta + SLOPE_TOL);
    let mut violations = Vec::new();
    // the coordinate directions carry the first differences and must be active
    for (k, a) in active.iter().enumerate().take(d) {
        if !a {
            violations.push(SlopeViolation { sample: 0, component: k, slope: 0.0 });
        }
    }
    for (i, s) in spec.samples(d, m).into_iter().enumerate() {
        let base = ham.eval(s.u0, &s.grad, &s.z, s.t, &s.x);
        let mut z = s.z.clone();
        for k in 0..m {
            z[k] += spec.eps;
            let slope = (ham.eval(s.u0, &s.grad, &z, s.t, &s.x) - base) / spec.eps;
            z[k] = s.z[k];
            let ok = if active[k] { slope >= lo && slope <= hi } else { slope.abs() <= SLOPE_TOL };
            if !ok {
                violations.push(SlopeViolation { sample: i, component: k, slope });
            }
        }
    }
    EllipticityReport { samples: spec.count, violations }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneReport {
    pub samples: usize,
    /// Largest observed `ℋ(u0') − ℋ(u0)` over pairs `u0 < u0'`.
    pub worst_increase: f64,
}

impl MonotoneReport {
    pub fn passed(&self) -> bool {
        self.worst_increase <= 1e-12
    }
}

/// Compares `ℋ` at two values of `u0` with everything else fixed.
pub fn check_monotone_in_u0(ham: &dyn StencilHamiltonian, spec: &SampleSpec) -> MonotoneReport {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xA5A5);
    let (a, b) = spec.u0_range;
    let mut worst = f64::NEG_INFINITY;
    for s in spec.samples(ham.dim(), ham.stencil_len()) {
        let other = if a < b { rng.random_range(a..b) } else { a };
        let (lo, hi) = if s.u0 <= other { (s.u0, other) } else { (other, s.u0) };
        if lo == hi {
            continue;
        }
        let diff = ham.eval(hi, &s.grad, &s.z, s.t, &s.x) - ham.eval(lo, &s.grad, &s.z, s.t, &s.x);
        worst = worst.max(diff);
    }
    MonotoneReport { samples: spec.count, worst_increase: worst }
}

fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sampled sup of `|ℋ(u0, grad, 0, t, x)| − K₀(|u0| + |grad|)`, an estimate
/// of `H̄` from below.
pub fn check_growth_bound(ham: &dyn StencilHamiltonian, k0: f64, spec: &SampleSpec) -> f64 {
    let zero = vec![0.0; ham.stencil_len()];
    spec.samples(ham.dim(), ham.stencil_len())
        .iter()
        .map(|s| ham.eval(s.u0, &s.grad, &zero, s.t, &s.x).abs() - k0 * (s.u0.abs() + euclid(&s.grad)))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest sampled excess of `ℋ` over `𝒫(z) − (δ̂/2) Σ|z_k| + K₀(|u0| + |grad|) + H̄`.
/// Inactive components are held at zero: an operator that ignores `z_k`
/// cannot satisfy the bound along `z_k`.
pub fn upper_barrier_excess(ham: &dyn StencilHamiltonian, params: &EllipticityParams, spec: &SampleSpec) -> f64 {
    let active = ham.active_components();
    spec.samples(ham.dim(), ham.stencil_len())
        .iter_mut()
        .map(|s| {
            for (z, a) in s.z.iter_mut().zip(&active) {
                if !a {
                    *z = 0.0;
                }
            }
            let h = ham.eval(s.u0, &s.grad, &s.z, s.t, &s.x);
            let bound = script_p(&s.z, params.hat_delta) - 0.5 * params.hat_delta * s.z.iter().map(|z| z.abs()).sum::<f64>()
                + params.k0 * (s.u0.abs() + euclid(&s.grad))
                + params.h_bar;
            h - bound
        })
        .fold(f64::NEG_INFINITY, f64::max)
}
