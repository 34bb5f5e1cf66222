//! Extremal operators and the rank-one stencil decomposition.
//!
//! `𝒫(z) = max { Σ a_k z_k : δ̂/2 ≤ a_k ≤ 2/δ̂ }` is a linear maximum over a
//! box, attained at a vertex, so it is evaluated in closed form. `P(u)`
//! applies `𝒫` to the pure second derivatives `⟨u l_k, l_k⟩`, and `P₀` is
//! the Pucci maximal operator over `S_{δ/2}`, computed from eigenvalues.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stencil::StencilSet;

/// Symmetric `d × d` matrix stored as its upper triangle, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    upper: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        SymMatrix { dim, upper: vec![0.0; dim * (dim + 1) / 2] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, v) in diag.iter().enumerate() {
            m.set(i, i, *v);
        }
        m
    }

    /// Builds from full rows; the input must be square and symmetric.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if d == 0 {
            return Err(Error::InvalidDimension(0));
        }
        let mut m = Self::zeros(d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch { expected: d, found: row.len() });
            }
            for j in i..d {
                let (a, b) = (row[j], rows[j][i]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidParameter(format!("matrix is not symmetric at ({i},{j})")));
                }
                m.set(i, j, a);
            }
        }
        Ok(m)
    }

    /// `Q diag(eigenvalues) Qᵀ`.
    pub fn from_eigen(q: &DMatrix<f64>, eigenvalues: &[f64]) -> Self {
        let d = eigenvalues.len();
        let mut m = Self::zeros(d);
        for i in 0..d {
            for j in i..d {
                let v: f64 = (0..d).map(|k| q[(i, k)] * eigenvalues[k] * q[(j, k)]).sum();
                m.set(i, j, v);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * self.dim - i * (i + 1) / 2 + j
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[self.slot(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.upper[s] = v;
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|i| (0..self.dim).map(|j| self.get(i, j)).collect()).collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    /// `⟨u l, l⟩` for an integer direction.
    pub fn quad_form(&self, l: &[i64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                s += self.get(i, j) * (l[i] * l[j]) as f64;
            }
        }
        s
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        match self.dim {
            1 => vec![self.upper[0]],
            2 => {
                let (a, b, c) = (self.get(0, 0), self.get(0, 1), self.get(1, 1));
                let mean = 0.5 * (a + c);
                let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                vec![mean - r, mean + r]
            }
            _ => {
                let eig = SymmetricEigen::try_new(self.to_dmatrix(), 1e-14, 0)
                    .expect("symmetric eigensolver converges");
                let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
                v.sort_by(f64::total_cmp);
                v
            }
        }
    }

    /// Upper-triangle entries, row-major.
    pub fn entries(&self) -> &[f64] {
        &self.upper
    }

    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        self.upper.iter().zip(&other.upper).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Every scalar constant the scheme consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipticityParams {
    pub delta: f64,
    pub hat_delta: f64,
    pub check_delta: f64,
    pub k0: f64,
    pub h_bar: f64,
    pub big_k: f64,
}

impl EllipticityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta = {} must lie in (0, 1)", self.delta)));
        }
        if !(self.hat_delta > 0.0 && self.hat_delta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "hat_delta = {} must lie in (0, 1]",
                self.hat_delta
            )));
        }
        if !self.hat_delta_consistent() {
            return Err(Error::InvalidParameter(format!(
                "hat_delta = {} exceeds delta / 4 = {}",
                self.hat_delta,
                self.delta / 4.0
            )));
        }
        if !(self.check_delta > 0.0 && self.check_delta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "check_delta = {} must lie in (0, 1)",
                self.check_delta
            )));
        }
        if !(self.k0 >= 0.0 && self.h_bar >= 0.0) {
            return Err(Error::InvalidParameter("K0 and H-bar must be nonnegative".into()));
        }
        if !(self.big_k > 0.0 && self.big_k.is_finite()) {
            return Err(Error::InvalidParameter(format!("K = {} must be positive", self.big_k)));
        }
        Ok(())
    }

    /// Whether `hat_delta ≤ delta / 4`, the relation under which the
    /// decomposition of `S_{δ/4}` and the domination inequality are stated.
    pub fn hat_delta_consistent(&self) -> bool {
        self.hat_delta <= self.delta / 4.0 * (1.0 + 1e-12)
    }
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} = {v} must lie in (0, 1]")))
    }
}

/// Closed-form `𝒫` without parameter validation; the solver's hot path.
#[inline]
pub fn script_p(z: &[f64], hat_delta: f64) -> f64 {
    let hi = 2.0 / hat_delta;
    let lo = 0.5 * hat_delta;
    z.iter().map(|&zk| if zk > 0.0 { hi * zk } else { lo * zk }).sum()
}

pub fn eval_script_p(z: &[f64], hat_delta: f64) -> Result<f64> {
    check_unit_interval("hat_delta", hat_delta)?;
    Ok(script_p(z, hat_delta))
}

/// `P(u) = 𝒫(⟨u l_1, l_1⟩, …, ⟨u l_m, l_m⟩)`.
pub fn eval_p(u: &SymMatrix, stencil: &StencilSet, hat_delta: f64) -> Result<f64> {
    if u.dim() != stencil.dim() {
        return Err(Error::DimensionMismatch { expected: stencil.dim(), found: u.dim() });
    }
    let z: Vec<f64> = stencil.iter().map(|l| u.quad_form(l)).collect();
    eval_script_p(&z, hat_delta)
}

/// Pucci's maximal operator `−(δ/2) Σ λ_k⁻ + (2/δ) Σ λ_k⁺`.
pub fn eval_p0(u: &SymMatrix, delta: f64) -> Result<f64> {
    check_unit_interval("delta", delta)?;
    Ok(u.eigenvalues()
        .into_iter()
        .map(|ev| if ev > 0.0 { 2.0 / delta * ev } else { 0.5 * delta * ev })
        .sum())
}

/// The cutoff `max(H, P₀ − K)`. Only an evaluator: `max(H, P − K)` equals
/// `max(max(H, P₀ − K), P − K)` whenever `P₀ ≤ P`.
pub fn pucci_cutoff(h_value: f64, u: &SymMatrix, delta: f64, big_k: f64) -> Result<f64> {
    Ok(h_value.max(eval_p0(u, delta)? - big_k))
}

/// Whether every eigenvalue of `a` lies in `[δ, 1/δ]`.
pub fn check_s_delta(a: &SymMatrix, delta: f64) -> bool {
    if !(delta > 0.0 && delta <= 1.0) {
        return false;
    }
    let tol = 1e-12;
    a.eigenvalues()
        .iter()
        .all(|&ev| ev >= delta * (1.0 - tol) && ev <= (1.0 + tol) / delta)
}

/// Result of a successful decomposition `a = Σ λ_k l_k l_kᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub weights: Vec<f64>,
    /// Optimal minimum distance of the weights to the bounds `δ̂`, `1/δ̂`.
    pub slack: f64,
    /// Entrywise maximum of `|a − Σ λ_k l_k l_kᵀ|`.
    pub residual: f64,
}

const SLACK_TOL: f64 = 1e-12;

/// Reassembles `Σ λ_k l_k l_kᵀ`.
pub fn reconstruct(weights: &[f64], stencil: &StencilSet) -> SymMatrix {
    let d = stencil.dim();
    let mut m = SymMatrix::zeros(d);
    for (w, l) in weights.iter().zip(stencil.iter()) {
        for i in 0..d {
            for j in i..d {
                let v = m.get(i, j) + w * (l[i] * l[j]) as f64;
                m.set(i, j, v);
            }
        }
    }
    m
}

fn equation_rows(stencil: &StencilSet) -> Vec<((usize, usize), Vec<f64>)> {
    let d = stencil.dim();
    let mut rows = Vec::new();
    for i in 0..d {
        for j in i..d {
            let coeffs = stencil.iter().map(|l| (l[i] * l[j]) as f64).collect();
            rows.push(((i, j), coeffs));
        }
    }
    rows
}

fn check_decomposition_inputs(a: &SymMatrix, stencil: &StencilSet, hat_delta: f64) -> Result<()> {
    if a.dim() != stencil.dim() {
        return Err(Error::DimensionMismatch { expected: stencil.dim(), found: a.dim() });
    }
    check_unit_interval("hat_delta", hat_delta)
}

/// Largest `s` such that some decomposition has every weight in
/// `[δ̂ + s, 1/δ̂ − s]`. Nonnegative iff the decomposition is feasible.
pub fn max_min_slack(a: &SymMatrix, stencil: &StencilSet, hat_delta: f64) -> Result<f64> {
    check_decomposition_inputs(a, stencil, hat_delta)?;
    Ok(slack_lp(a, stencil, hat_delta)?.0)
}

fn slack_lp(a: &SymMatrix, stencil: &StencilSet, hat_delta: f64) -> Result<(f64, Vec<f64>)> {
    let m = stencil.len();
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let lambda: Vec<_> = (0..m)
        .map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    let s = lp.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
    for &v in &lambda {
        lp.add_constraint([(v, 1.0), (s, -1.0)], ComparisonOp::Ge, hat_delta);
        lp.add_constraint([(v, 1.0), (s, 1.0)], ComparisonOp::Le, 1.0 / hat_delta);
    }
    for ((i, j), coeffs) in equation_rows(stencil) {
        let expr: Vec<_> = lambda
            .iter()
            .zip(&coeffs)
            .filter(|(_, c)| **c != 0.0)
            .map(|(v, c)| (*v, *c))
            .collect();
        lp.add_constraint(expr, ComparisonOp::Eq, a.get(i, j));
    }
    let sol = solve_lp(&lp)?;
    Ok((sol[s], lambda.iter().map(|v| sol[*v]).collect()))
}

fn solve_lp(lp: &Problem) -> Result<microlp::Solution> {
    lp.solve()
        .map_err(|e| Error::InvalidSpec(format!("linear program failed: {e:?}")))?
        .into_solution()
        .map_err(|_| Error::InvalidSpec("linear program interrupted".into()))
}

/// Finds weights `λ_k ∈ [δ̂, 1/δ̂]` with `Σ λ_k l_k l_kᵀ = a`.
///
/// The minimum slack to the bounds is maximized first; among weights
/// achieving it, the lexicographically smallest vector is returned, which
/// makes the output a deterministic function of the inputs.
pub fn decompose_matrix(a: &SymMatrix, stencil: &StencilSet, hat_delta: f64) -> Result<Decomposition> {
    check_decomposition_inputs(a, stencil, hat_delta)?;
    let (slack, first) = slack_lp(a, stencil, hat_delta)?;
    if slack < -SLACK_TOL {
        return Err(Error::DecompositionInfeasible { hat_delta, slack });
    }
    let m = stencil.len();
    let lo = hat_delta + slack - SLACK_TOL;
    let hi = 1.0 / hat_delta - slack + SLACK_TOL;
    let rows = equation_rows(stencil);
    let mut fixed: Vec<f64> = Vec::with_capacity(m);
    let mut weights = first;
    for k in 0..m {
        let mut lp = Problem::new(OptimizationDirection::Minimize);
        let lambda: Vec<_> = (0..m)
            .map(|j| {
                let upper = if j < k { fixed[j] + SLACK_TOL } else { hi };
                lp.add_var(if j == k { 1.0 } else { 0.0 }, (lo, upper.max(lo)))
            })
            .collect();
        for ((i, j), coeffs) in &rows {
            let expr: Vec<_> = lambda
                .iter()
                .zip(coeffs)
                .filter(|(_, c)| **c != 0.0)
                .map(|(v, c)| (*v, *c))
                .collect();
            lp.add_constraint(expr, ComparisonOp::Eq, a.get(*i, *j));
        }
        match solve_lp(&lp) {
            Ok(sol) => {
                weights = lambda.iter().map(|v| sol[*v]).collect();
                fixed.push(weights[k]);
            }
            // tolerance pinning lost feasibility; keep the last solution
            Err(_) => break,
        }
    }
    for w in weights.iter_mut() {
        *w = w.clamp(hat_delta, 1.0 / hat_delta);
    }
    let residual = reconstruct(&weights, stencil).max_abs_diff(a);
    Ok(Decomposition { weights, slack: slack.max(0.0), residual })
}

/// Test matrices for [`feasible_hat_delta`]: `lo·I`, `hi·I`, then extreme
/// points `Q diag(lo|hi) Qᵀ` interleaved with interior random draws.
/// The first `n` of `2n` samples coincide with the `n`-sample set.
pub fn ellipticity_test_matrices(dim: usize, delta: f64, samples: usize, seed: u64) -> Vec<SymMatrix> {
    let lo = delta / 4.0;
    let hi = 4.0 / delta;
    let mut out = vec![SymMatrix::diagonal(&vec![lo; dim]), SymMatrix::diagonal(&vec![hi; dim])];
    let mut extreme_count = 0u64;
    for i in 0..samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let interior = i % 4 == 3;
        let eig: Vec<f64> = if interior {
            (0..dim).map(|_| rng.random_range(lo..=hi)).collect()
        } else {
            let mut e: Vec<f64> = (0..dim).map(|j| if j == 0 { lo } else { hi }).collect();
            if dim > 2 {
                for ev in e.iter_mut().skip(1) {
                    *ev = if rng.random_bool(0.5) { lo } else { hi };
                }
            }
            e
        };
        let q = if dim == 2 && !interior {
            extreme_count += 1;
            rotation_2d(std::f64::consts::PI * van_der_corput(extreme_count))
        } else {
            random_rotation(dim, &mut rng)
        };
        out.push(SymMatrix::from_eigen(&q, &eig));
    }
    out
}

fn van_der_corput(mut n: u64) -> f64 {
    let mut q = 0.0;
    let mut bk = 0.5;
    while n > 0 {
        if n & 1 == 1 {
            q += bk;
        }
        bk *= 0.5;
        n >>= 1;
    }
    q
}

fn rotation_2d(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Orthogonal matrix from the QR factorization of a matrix with independent
/// uniform entries (sufficient for test coverage; not Haar-distributed).
pub fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    if dim == 1 {
        return DMatrix::from_element(1, 1, 1.0);
    }
    loop {
        let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.random_range(-1.0f64..1.0));
        if g.determinant().abs() > 1e-3 {
            return g.qr().q();
        }
    }
}

/// Floor below which the search for `δ̂` gives up.
pub const HAT_DELTA_FLOOR: f64 = 1e-6;
const HAT_DELTA_GRID_STEPS_PER_OCTAVE: f64 = 8.0;
const HAT_DELTA_SEED: u64 = 0x5EED_0001;

/// Largest `δ̂` on the geometric grid `(δ/4)·2^{−j/8}` for which every test
/// matrix of [`ellipticity_test_matrices`] decomposes. An estimate, not a
/// proof: it certifies only the sampled matrices.
pub fn feasible_hat_delta(stencil: &StencilSet, delta: f64, samples: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta = {delta} must lie in (0, 1)")));
    }
    if samples == 0 {
        return Err(Error::InvalidParameter("samples must be >= 1".into()));
    }
    let cap = delta / 4.0;
    let mats = ellipticity_test_matrices(stencil.dim(), delta, samples, HAT_DELTA_SEED);
    let candidate = |j: u32| cap * 2f64.powf(-(j as f64) / HAT_DELTA_GRID_STEPS_PER_OCTAVE);
    let feasible = |hd: f64| -> Result<bool> {
        for a in &mats {
            if slack_lp(a, stencil, hd)?.0 < -SLACK_TOL {
                return Ok(false);
            }
        }
        Ok(true)
    };
    let last = ((cap / HAT_DELTA_FLOOR).log2() * HAT_DELTA_GRID_STEPS_PER_OCTAVE).floor() as u32;
    if feasible(candidate(0))? {
        return Ok(candidate(0));
    }
    if !feasible(candidate(last))? {
        return Err(Error::SearchFailed { floor: HAT_DELTA_FLOOR });
    }
    // invariant: candidate(bad) infeasible, candidate(good) feasible
    let (mut bad, mut good) = (0u32, last);
    while good - bad > 1 {
        let mid = (bad + good) / 2;
        if feasible(candidate(mid))? {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Ok(candidate(good))
}
