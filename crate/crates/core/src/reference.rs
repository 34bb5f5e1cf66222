//! Reference problems with known behavior, shared by the test suites, the
//! benchmarks and the command-line presets.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use crate::data::{DataTerm, TerminalData};
use crate::error::Result;
use crate::grid::{build_grid, Domain};
use crate::hamiltonian::{make_isaacs, make_linear, CoefficientRow, ErsatzOperator, TableHamiltonian};
use crate::pucci::EllipticityParams;
use crate::solver::SolveConfig;
use crate::stencil::build_standard_stencil;

/// `δ = 0.96`, `δ̂ = 0.24`: the window `[0.24, 4.1667]` contains every
/// weight used below.
pub fn reference_params(big_k: f64) -> EllipticityParams {
    EllipticityParams { delta: 0.96, hat_delta: 0.24, check_delta: 0.5, k0: 0.0, h_bar: 0.0, big_k }
}

pub const HEAT_HORIZON: f64 = 0.1;

/// Heat equation `∂_t v + Δ_{e_1} v + Δ_{e_2} v = 0` on `[0, 1]²` with data
/// `|x|² + 4(T − t)`, which the scheme reproduces exactly.
pub fn heat_quadratic(h: f64, big_k: f64) -> Result<SolveConfig> {
    let s = build_standard_stencil(2)?;
    let grid = build_grid(Domain::Box { lower: vec![0.0; 2], upper: vec![1.0; 2] }, &s, h)?;
    let ham = make_linear(vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0], 0.0, None)?;
    let op = ErsatzOperator::new(Arc::new(ham), reference_params(big_k), s)?;
    let data = TerminalData::quadratic_norm(2, 4.0);
    Ok(SolveConfig::new(Arc::new(grid), op, data.to_fn(HEAT_HORIZON), HEAT_HORIZON))
}

pub const SINE_HORIZON: f64 = 0.05;

/// One-dimensional periodic heat equation with data `sin(2πx)`; the exact
/// solution is `e^{−4π²(T−t)} sin(2πx)`.
pub fn torus_sine(h: f64) -> Result<SolveConfig> {
    let s = build_standard_stencil(1)?;
    let grid = build_grid(Domain::Torus { period: vec![1.0] }, &s, h)?;
    let ham = make_linear(vec![1.0], vec![0.0], 0.0, None)?;
    // large enough that the 𝒫 branch never engages on this data
    let op = ErsatzOperator::new(Arc::new(ham), reference_params(1000.0), s)?;
    let data = TerminalData::new(vec![DataTerm::Trig { frequency: vec![1.0], amplitude: 1.0, phase: 0.0 }], 0.0);
    Ok(SolveConfig::new(Arc::new(grid), op, data.to_fn(SINE_HORIZON), SINE_HORIZON))
}

pub fn torus_sine_exact(t: f64, x: f64) -> f64 {
    let k = 2.0 * std::f64::consts::PI;
    (-k * k * (SINE_HORIZON - t)).exp() * (k * x).sin()
}

/// Non-convex `max_α min_β` operator with weights in `[1/2, 2]`, small
/// drift and nonpositive zeroth-order terms.
pub fn isaacs_hamiltonian() -> TableHamiltonian {
    let row = |w: [f64; 4], b: [f64; 2], c: f64, f: f64| CoefficientRow::new(w.to_vec(), b.to_vec(), c, f);
    make_isaacs(vec![
        vec![
            row([2.0, 0.5, 0.75, 0.75], [0.3, 0.0], 0.0, 0.0),
            row([0.5, 2.0, 0.75, 0.75], [0.0, -0.2], -0.5, 0.2),
        ],
        vec![
            row([1.0, 1.0, 2.0, 0.5], [-0.1, 0.1], 0.0, -0.1),
            row([1.0, 1.0, 0.5, 2.0], [0.0, 0.0], -0.25, 0.1),
        ],
    ])
    .expect("valid table")
}

pub const ISAACS_HORIZON: f64 = 0.05;
pub const ISAACS_HALF_WIDTH: f64 = 1.25;

pub fn isaacs_data() -> TerminalData {
    let a = ISAACS_AMPLITUDE;
    TerminalData::new(
        vec![
            DataTerm::Trig { frequency: vec![0.3, 0.2], amplitude: a, phase: FRAC_PI_2 },
            DataTerm::Trig { frequency: vec![-0.2, 0.35], amplitude: 0.5 * a, phase: FRAC_PI_2 },
        ],
        0.0,
    )
}

pub const ISAACS_AMPLITUDE: f64 = 0.02;

/// The Isaacs operator on `[−1.25, 1.25]²` with trigonometric data.
pub fn isaacs(h: f64, big_k: f64) -> Result<SolveConfig> {
    let s = build_standard_stencil(2)?;
    let w = ISAACS_HALF_WIDTH;
    let grid = build_grid(Domain::Box { lower: vec![-w; 2], upper: vec![w; 2] }, &s, h)?;
    let ham = isaacs_hamiltonian();
    // |b|·|grad| + |c|·|u0| ≤ K₀|u'| with K₀ = 0.5, and |f| ≤ 0.2
    let params = EllipticityParams { k0: 0.5, h_bar: 0.2, ..reference_params(big_k) };
    let op = ErsatzOperator::new(Arc::new(ham), params, s)?;
    Ok(SolveConfig::new(Arc::new(grid), op, isaacs_data().to_fn(ISAACS_HORIZON), ISAACS_HORIZON))
}
