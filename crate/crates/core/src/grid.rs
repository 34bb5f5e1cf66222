//! Lattice `hℤ^d` restricted to a domain, node classification into the
//! interior set `Ω^h` and the boundary collar, and the difference operators
//! `δ_{h,l}` and `Δ_{h,l}`.
//!
//! Nodes are addressed by integer multi-indices; a coordinate is always
//! `index * h`, never accumulated.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::stencil::StencilSet;

const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    /// Axis-aligned box `Π (lower_i, upper_i)`.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    /// Periodic cell `Π [0, period_i)`; stands in for the whole space.
    Torus { period: Vec<f64> },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Box { lower, .. } => lower.len(),
            Domain::Ball { center, .. } => center.len(),
            Domain::Torus { period } => period.len(),
        }
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self, Domain::Torus { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::InvalidDimension(0));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Domain::Box { lower, upper } => {
                if lower.len() != upper.len() {
                    return Err(Error::DimensionMismatch { expected: lower.len(), found: upper.len() });
                }
                if !finite(lower) || !finite(upper) || lower.iter().zip(upper).any(|(a, b)| b <= a) {
                    return Err(Error::InvalidParameter("box needs finite lower < upper on every axis".into()));
                }
            }
            Domain::Ball { center, radius } => {
                if !finite(center) || !(radius.is_finite() && *radius > 0.0) {
                    return Err(Error::InvalidParameter("ball needs a finite center and radius > 0".into()));
                }
            }
            Domain::Torus { period } => {
                if !finite(period) || period.iter().any(|p| *p <= 0.0) {
                    return Err(Error::InvalidParameter("torus periods must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// `dist(x, ℝ^d \ Ω)`, clamped at zero; infinite on the torus.
    pub fn rho(&self, x: &[f64]) -> f64 {
        match self {
            Domain::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(xi, (lo, hi))| (xi - lo).min(hi - xi))
                .fold(f64::INFINITY, f64::min)
                .max(0.0),
            Domain::Ball { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                (radius - r2.sqrt()).max(0.0)
            }
            Domain::Torus { .. } => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Lattice point of the bounding box that is not in the closed domain.
    Absent,
    /// `Ω̄ \ Ω^h`: pinned to the data at every time.
    Collar,
    Interior,
}

#[derive(Debug, Clone)]
pub struct Grid {
    domain: Domain,
    stencil: StencilSet,
    h: f64,
    shape: Vec<usize>,
    origin: Vec<i64>,
    strides: Vec<usize>,
    kinds: Vec<NodeKind>,
    rho: Vec<f64>,
    coords: Vec<f64>,
    nodes: Vec<usize>,
    interior: Vec<usize>,
    /// Per interior rank: `m` forward neighbors `x + h l_k`, then `m`
    /// backward neighbors `x − h l_k`.
    neighbors: Vec<usize>,
}

/// Builds the lattice, its node classification and the neighbor table.
///
/// A node is interior iff `ρ(x) > λh`, which places every `x ± h l_k` inside
/// the domain.
pub fn build_grid(domain: Domain, stencil: &StencilSet, h: f64) -> Result<Grid> {
    domain.validate()?;
    let d = domain.dim();
    if stencil.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, found: stencil.dim() });
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidParameter(format!("grid spacing h = {h} must be positive")));
    }

    let (origin, shape): (Vec<i64>, Vec<usize>) = match &domain {
        Domain::Box { lower, upper } => (0..d)
            .map(|i| {
                let lo = snap_ceil(lower[i] / h);
                let hi = snap_floor(upper[i] / h);
                (lo, (hi - lo + 1).max(0) as usize)
            })
            .unzip(),
        Domain::Ball { center, radius } => (0..d)
            .map(|i| {
                let lo = snap_ceil((center[i] - radius) / h);
                let hi = snap_floor((center[i] + radius) / h);
                (lo, (hi - lo + 1).max(0) as usize)
            })
            .unzip(),
        Domain::Torus { period } => {
            let mut shape = Vec::with_capacity(d);
            for p in period {
                let n = (p / h).round();
                if (n * h - p).abs() > SNAP * p.max(1.0) || n < 3.0 {
                    return Err(Error::InvalidParameter(format!(
                        "torus period {p} is not a multiple (>= 3) of h = {h}"
                    )));
                }
                shape.push(n as usize);
            }
            (vec![0; d], shape)
        }
    };

    let total: usize = shape.iter().product();
    let mut strides = vec![1usize; d];
    for i in (0..d.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }

    let lambda_h = stencil.radius() * h;
    let mut kinds = vec![NodeKind::Absent; total];
    let mut rho = vec![0.0; total];
    let mut coords = vec![0.0; total * d];
    let mut index = vec![0i64; d];
    for flat in 0..total {
        unflatten(flat, &shape, &origin, &mut index);
        let x = &mut coords[flat * d..(flat + 1) * d];
        for (xi, ii) in x.iter_mut().zip(&index) {
            *xi = *ii as f64 * h;
        }
        let present = match &domain {
            Domain::Box { .. } | Domain::Torus { .. } => true,
            Domain::Ball { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                r2.sqrt() <= radius * (1.0 + 1e-12)
            }
        };
        if !present {
            continue;
        }
        let r = domain.rho(x);
        rho[flat] = r;
        kinds[flat] = if r > lambda_h * (1.0 + 1e-10) {
            NodeKind::Interior
        } else {
            NodeKind::Collar
        };
    }

    let nodes: Vec<usize> = (0..total).filter(|&f| kinds[f] != NodeKind::Absent).collect();
    let interior: Vec<usize> = (0..total).filter(|&f| kinds[f] == NodeKind::Interior).collect();
    if interior.is_empty() {
        return Err(Error::GridTooCoarse { nodes: nodes.len() });
    }

    let mut grid = Grid {
        domain,
        stencil: stencil.clone(),
        h,
        shape,
        origin,
        strides,
        kinds,
        rho,
        coords,
        nodes,
        interior,
        neighbors: Vec::new(),
    };
    let m = stencil.len();
    let mut neighbors = Vec::with_capacity(grid.interior.len() * 2 * m);
    let mut idx = vec![0i64; d];
    let mut shifted = vec![0i64; d];
    for &node in &grid.interior {
        grid.lattice_index_into(node, &mut idx);
        for sign in [1i64, -1] {
            for l in stencil.iter() {
                for ((s, i), c) in shifted.iter_mut().zip(&idx).zip(l) {
                    *s = i + sign * c;
                }
                let nb = grid.node_at(&shifted).ok_or_else(|| Error::StencilOutOfDomain {
                    node,
                    vector: l.iter().map(|c| sign * c).collect(),
                })?;
                neighbors.push(nb);
            }
        }
    }
    grid.neighbors = neighbors;
    Ok(grid)
}

impl Grid {
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn stencil(&self) -> &StencilSet {
        &self.stencil
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_periodic(&self) -> bool {
        self.domain.is_periodic()
    }

    /// Size of the flat index space (bounding box), including absent points.
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Flat indices of all present nodes, ascending.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Flat indices of `Ω^h`, ascending. The position of a node in this slice
    /// is its interior rank.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn kind(&self, node: usize) -> NodeKind {
        self.kinds[node]
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    pub fn is_interior(&self, node: usize) -> bool {
        self.kinds[node] == NodeKind::Interior
    }

    pub fn rho(&self, node: usize) -> f64 {
        self.rho[node]
    }

    pub fn coords(&self, node: usize) -> &[f64] {
        let d = self.dim();
        &self.coords[node * d..(node + 1) * d]
    }

    /// Neighbor `x + h l_k` of the interior node with the given rank.
    #[inline]
    pub fn forward_neighbor(&self, rank: usize, k: usize) -> usize {
        self.neighbors[rank * 2 * self.stencil.len() + k]
    }

    /// Neighbor `x − h l_k` of the interior node with the given rank.
    #[inline]
    pub fn backward_neighbor(&self, rank: usize, k: usize) -> usize {
        let m = self.stencil.len();
        self.neighbors[rank * 2 * m + m + k]
    }

    pub fn lattice_index(&self, node: usize) -> Vec<i64> {
        let mut idx = vec![0; self.dim()];
        self.lattice_index_into(node, &mut idx);
        idx
    }

    fn lattice_index_into(&self, node: usize, out: &mut [i64]) {
        unflatten(node, &self.shape, &self.origin, out);
    }

    /// Flat index of the lattice point `index * h`, wrapping on the torus.
    pub fn node_at(&self, index: &[i64]) -> Option<usize> {
        if index.len() != self.dim() {
            return None;
        }
        let periodic = self.is_periodic();
        let mut flat = 0usize;
        for i in 0..self.dim() {
            let n = self.shape[i] as i64;
            let mut local = index[i] - self.origin[i];
            if periodic {
                local = local.rem_euclid(n);
            } else if local < 0 || local >= n {
                return None;
            }
            flat += local as usize * self.strides[i];
        }
        (self.kinds[flat] != NodeKind::Absent).then_some(flat)
    }

    /// Euclidean distance between two nodes, using the nearest periodic image
    /// on the torus.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match &self.domain {
            Domain::Torus { period } => a
                .iter()
                .zip(b)
                .zip(period)
                .map(|((x, y), p)| {
                    let mut r = (x - y).abs() % p;
                    if r > p / 2.0 {
                        r = p - r;
                    }
                    r * r
                })
                .sum::<f64>()
                .sqrt(),
            _ => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

fn unflatten(flat: usize, shape: &[usize], origin: &[i64], out: &mut [i64]) {
    let mut rem = flat;
    for i in (0..shape.len()).rev() {
        out[i] = (rem % shape[i]) as i64 + origin[i];
        rem /= shape[i];
    }
}

fn snap_ceil(x: f64) -> i64 {
    let r = x.round();
    if (x - r).abs() <= SNAP * x.abs().max(1.0) {
        r as i64
    } else {
        x.ceil() as i64
    }
}

fn snap_floor(x: f64) -> i64 {
    let r = x.round();
    if (x - r).abs() <= SNAP * x.abs().max(1.0) {
        r as i64
    } else {
        x.floor() as i64
    }
}

/// One real value per flat grid index; absent points carry zero.
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), found: values.len() });
        }
        if let Some(&n) = grid.nodes().iter().find(|&&n| !values[n].is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite value at node {n}")));
        }
        Ok(GridFunction { grid, values })
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut values = vec![0.0; grid.len()];
        for &n in grid.nodes() {
            values[n] = f(grid.coords(n));
        }
        GridFunction { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn shifted(&self, node: usize, l: &[i64], sign: i64) -> Result<f64> {
        let mut idx = self.grid.lattice_index(node);
        for (i, c) in idx.iter_mut().zip(l) {
            *i += sign * c;
        }
        self.grid
            .node_at(&idx)
            .map(|nb| self.values[nb])
            .ok_or_else(|| Error::StencilOutOfDomain {
                node,
                vector: l.iter().map(|c| sign * c).collect(),
            })
    }
}

/// `δ_{h,l} f(x) = (f(x + hl) − f(x)) / h`.
pub fn first_diff(f: &GridFunction, l: &[i64], node: usize) -> Result<f64> {
    check_vector(f, l)?;
    let fwd = f.shifted(node, l, 1)?;
    Ok((fwd - f.values[node]) / f.grid.h())
}

/// `Δ_{h,l} f(x) = (f(x + hl) − 2 f(x) + f(x − hl)) / h²`.
pub fn second_diff(f: &GridFunction, l: &[i64], node: usize) -> Result<f64> {
    check_vector(f, l)?;
    let fwd = f.shifted(node, l, 1)?;
    let bwd = f.shifted(node, l, -1)?;
    let h = f.grid.h();
    Ok(second_quotient(fwd, f.values[node], bwd, h))
}

#[inline]
pub(crate) fn second_quotient(fwd: f64, center: f64, bwd: f64, h: f64) -> f64 {
    ((fwd - center) + (bwd - center)) / (h * h)
}

/// Forward differences along `e_1..e_d` and second differences along every
/// stencil representative, in stencil order.
pub fn diff_vectors(f: &GridFunction, node: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let stencil = f.grid.stencil();
    let d = stencil.dim();
    let grad = (0..d)
        .map(|k| first_diff(f, stencil.vector(k), node))
        .collect::<Result<Vec<_>>>()?;
    let z = stencil
        .iter()
        .map(|l| second_diff(f, l, node))
        .collect::<Result<Vec<_>>>()?;
    Ok((grad, z))
}

fn check_vector(f: &GridFunction, l: &[i64]) -> Result<()> {
    if l.len() != f.grid.dim() {
        return Err(Error::DimensionMismatch { expected: f.grid.dim(), found: l.len() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stencil::build_standard_stencil;

    fn unit_box(d: usize) -> Domain {
        Domain::Box { lower: vec![0.0; d], upper: vec![1.0; d] }
    }

    #[test]
    fn coarse_box_has_no_interior() {
        let s = build_standard_stencil(2).unwrap();
        let err = build_grid(unit_box(2), &s, 0.5).unwrap_err();
        assert_eq!(err, Error::GridTooCoarse { nodes: 9 });
        // independently: every one of the 3x3 lattice points has rho <= lambda h
        let lambda_h = 0.5 * 2f64.sqrt();
        for i in 0..3 {
            for j in 0..3 {
                let x = [i as f64 * 0.5, j as f64 * 0.5];
                assert!(unit_box(2).rho(&x) <= lambda_h);
            }
        }
    }

    #[test]
    fn center_is_interior_at_eighth() {
        let s = build_standard_stencil(2).unwrap();
        let g = build_grid(unit_box(2), &s, 0.125).unwrap();
        let c = g.node_at(&[4, 4]).unwrap();
        assert_eq!(g.coords(c), &[0.5, 0.5]);
        assert_eq!(g.rho(c), 0.5);
        assert!(g.is_interior(c));
        assert_eq!(g.nodes().len(), 81);
    }

    #[test]
    fn torus_all_interior() {
        let s = build_standard_stencil(1).unwrap();
        let g = build_grid(Domain::Torus { period: vec![1.0] }, &s, 0.25).unwrap();
        assert_eq!(g.nodes().len(), 4);
        assert_eq!(g.interior().len(), 4);
        assert!(g.rho(0).is_infinite());
        // wraparound
        assert_eq!(g.forward_neighbor(3, 0), 0);
        assert_eq!(g.backward_neighbor(0, 0), 3);
    }

    #[test]
    fn torus_rejects_non_multiple_period() {
        let s = build_standard_stencil(1).unwrap();
        assert!(build_grid(Domain::Torus { period: vec![1.0] }, &s, 0.3).is_err());
    }

    #[test]
    fn ball_rho_and_membership() {
        let s = build_standard_stencil(2).unwrap();
        let g = build_grid(Domain::Ball { center: vec![0.0, 0.0], radius: 1.0 }, &s, 0.25).unwrap();
        for &n in g.nodes() {
            let x = g.coords(n);
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            assert!(r <= 1.0 + 1e-12);
            assert!((g.rho(n) - (1.0 - r).max(0.0)).abs() < 1e-15);
        }
        let absent = (0..g.len()).filter(|&f| g.kind(f) == NodeKind::Absent).count();
        assert!(absent > 0);
    }

    #[test]
    fn spike_second_diff() {
        let s = build_standard_stencil(1).unwrap();
        let g = Arc::new(build_grid(Domain::Torus { period: vec![2.0] }, &s, 0.5).unwrap());
        let node = g.node_at(&[1]).unwrap();
        let f = GridFunction::from_fn(g.clone(), |x| if x[0] == 0.5 { 1.0 } else { 0.0 });
        assert_eq!(second_diff(&f, &[1], node).unwrap(), -8.0);
    }

    #[test]
    fn affine_and_quadratic_exactness() {
        let s = build_standard_stencil(2).unwrap();
        let g = Arc::new(build_grid(unit_box(2), &s, 0.125).unwrap());
        let c = [0.3, -1.7];
        let affine = GridFunction::from_fn(g.clone(), |x| c[0] * x[0] + c[1] * x[1] + 0.25);
        let a = [[1.5, 0.25], [0.25, -0.5]];
        let quad = GridFunction::from_fn(g.clone(), |x| {
            let ax = [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]];
            x[0] * ax[0] + x[1] * ax[1]
        });
        for &n in g.interior() {
            for l in s.iter() {
                let cl = c[0] * l[0] as f64 + c[1] * l[1] as f64;
                assert!((first_diff(&affine, l, n).unwrap() - cl).abs() < 1e-12);
                assert!(second_diff(&affine, l, n).unwrap().abs() < 1e-11);
                let (l0, l1) = (l[0] as f64, l[1] as f64);
                let all = l0 * (a[0][0] * l0 + a[0][1] * l1) + l1 * (a[1][0] * l0 + a[1][1] * l1);
                assert!((second_diff(&quad, l, n).unwrap() - 2.0 * all).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn diff_vectors_of_norm_squared() {
        let s = build_standard_stencil(2).unwrap();
        let h = 0.125;
        let g = Arc::new(build_grid(unit_box(2), &s, h).unwrap());
        let f = GridFunction::from_fn(g.clone(), |x| x[0] * x[0] + x[1] * x[1]);
        let k = GridFunction::from_fn(g.clone(), |_| 3.0);
        for &n in g.interior() {
            let x = g.coords(n).to_vec();
            let (grad, z) = diff_vectors(&f, n).unwrap();
            assert!((grad[0] - (2.0 * x[0] + h)).abs() < 1e-12);
            assert!((grad[1] - (2.0 * x[1] + h)).abs() < 1e-12);
            for (zk, want) in z.iter().zip([2.0, 2.0, 4.0, 4.0]) {
                assert!((zk - want).abs() < 1e-10);
            }
            let (g0, z0) = diff_vectors(&k, n).unwrap();
            assert!(g0.iter().chain(&z0).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn collar_node_errors() {
        let s = build_standard_stencil(2).unwrap();
        let g = Arc::new(build_grid(unit_box(2), &s, 0.125).unwrap());
        let corner = g.node_at(&[0, 0]).unwrap();
        let f = GridFunction::from_fn(g, |x| x[0]);
        let err = second_diff(&f, &[1, 0], corner).unwrap_err();
        assert_eq!(err.code(), "stencil-out-of-domain");
        assert!(first_diff(&f, &[1, 0], corner).is_ok());
    }
}
