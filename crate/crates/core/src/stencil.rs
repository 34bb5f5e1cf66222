//! The finite set of lattice directions the scheme differentiates along.
//!
//! One representative is kept per `±l` pair: second differences and the
//! rank-one matrices `l lᵀ` do not see the sign, and the first `d` entries are
//! always the coordinate vectors so that forward first differences can be
//! read off the same table.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StencilSet {
    dim: usize,
    vectors: Vec<i64>,
    radius: f64,
}

impl StencilSet {
    /// Builds a stencil from explicit representatives, checking that it
    /// starts with `e_1..e_d` and contains every `e_i ± e_j`.
    pub fn from_vectors(dim: usize, vectors: Vec<Vec<i64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension(0));
        }
        let mut flat = Vec::with_capacity(vectors.len() * dim);
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
            }
            if v.iter().all(|&c| c == 0) {
                return Err(Error::InvalidSpec("zero stencil vector".into()));
            }
            flat.extend_from_slice(v);
        }
        let stencil = StencilSet { dim, radius: max_norm(dim, &flat), vectors: flat };
        for i in 0..dim {
            if stencil.vector(i) != unit(dim, i).as_slice() {
                return Err(Error::InvalidSpec(format!("stencil vector {i} must be e_{}", i + 1)));
            }
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                for sign in [1, -1] {
                    let mut v = unit(dim, i);
                    v[j] = sign;
                    if stencil.position(&v).is_none() {
                        return Err(Error::InvalidSpec(format!("stencil lacks {v:?}")));
                    }
                }
            }
        }
        for a in 0..stencil.len() {
            for b in (a + 1)..stencil.len() {
                let (va, vb) = (stencil.vector(a), stencil.vector(b));
                if va == vb || va.iter().zip(vb).all(|(x, y)| *x == -*y) {
                    return Err(Error::InvalidSpec(format!("duplicate direction {va:?}")));
                }
            }
        }
        Ok(stencil)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored representatives `m`.
    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, k: usize) -> &[i64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[i64]> + '_ {
        self.vectors.chunks_exact(self.dim)
    }

    /// Radius of the smallest closed ball centred at the origin containing
    /// the symmetrized set.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Index of `v` or of `-v` among the representatives.
    pub fn position(&self, v: &[i64]) -> Option<usize> {
        self.iter().position(|l| l == v || l.iter().zip(v).all(|(a, b)| *a == -*b))
    }

    /// The symmetrized set `{±l_1, …, ±l_m}`.
    pub fn symmetrized(&self) -> Vec<Vec<i64>> {
        self.iter()
            .flat_map(|l| [l.to_vec(), l.iter().map(|c| -c).collect()])
            .collect()
    }
}

/// `e_1..e_d`, then `e_i + e_j` and `e_i − e_j` for `i < j` in lexicographic
/// order: `d²` vectors in total.
pub fn build_standard_stencil(d: i64) -> Result<StencilSet> {
    if d <= 0 {
        return Err(Error::InvalidDimension(d));
    }
    let d = d as usize;
    StencilSet::from_vectors(d, standard_vectors(d))
}

/// All primitive integer vectors with max-norm at most `r`, standard stencil
/// first and the remainder sorted by length, then lexicographically.
///
/// Richer stencils are needed before the rank-one decomposition can cover
/// badly conditioned ellipticity classes: the standard stencil only
/// represents diagonally dominant matrices.
pub fn build_stencil_with_radius(d: i64, r: i64) -> Result<StencilSet> {
    if d <= 0 {
        return Err(Error::InvalidDimension(d));
    }
    if r < 1 {
        return Err(Error::InvalidParameter(format!("stencil radius {r} must be >= 1")));
    }
    let d = d as usize;
    let mut vectors = standard_vectors(d);
    let mut extra = Vec::new();
    let side = (2 * r + 1) as usize;
    let total = side.pow(d as u32);
    for code in 0..total {
        let mut rem = code;
        let mut v = vec![0i64; d];
        for c in v.iter_mut() {
            *c = (rem % side) as i64 - r;
            rem /= side;
        }
        v.reverse();
        let Some(first) = v.iter().copied().find(|&c| c != 0) else {
            continue;
        };
        if first < 0 || gcd_all(&v) != 1 || vectors.contains(&v) {
            continue;
        }
        extra.push(v);
    }
    extra.sort_by(|a, b| norm2(a).cmp(&norm2(b)).then_with(|| a.cmp(b)));
    vectors.extend(extra);
    StencilSet::from_vectors(d, vectors)
}

fn standard_vectors(d: usize) -> Vec<Vec<i64>> {
    let mut out: Vec<Vec<i64>> = (0..d).map(|i| unit(d, i)).collect();
    for sign in [1, -1] {
        for i in 0..d {
            for j in (i + 1)..d {
                let mut v = unit(d, i);
                v[j] = sign;
                out.push(v);
            }
        }
    }
    out
}

fn unit(d: usize, i: usize) -> Vec<i64> {
    let mut v = vec![0; d];
    v[i] = 1;
    v
}

fn norm2(v: &[i64]) -> i64 {
    v.iter().map(|c| c * c).sum()
}

fn max_norm(dim: usize, flat: &[i64]) -> f64 {
    flat.chunks_exact(dim)
        .map(|v| (norm2(v) as f64).sqrt())
        .fold(0.0, f64::max)
}

fn gcd_all(v: &[i64]) -> i64 {
    v.iter().fold(0, |g, &c| gcd(g, c.abs()))
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_d1() {
        let s = build_standard_stencil(1).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.vector(0), &[1]);
        assert_eq!(s.radius(), 1.0);
    }

    #[test]
    fn standard_d2() {
        let s = build_standard_stencil(2).unwrap();
        let v: Vec<_> = s.iter().map(|l| l.to_vec()).collect();
        assert_eq!(v, vec![vec![1, 0], vec![0, 1], vec![1, 1], vec![1, -1]]);
        assert!((s.radius() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn standard_d3_enumeration() {
        let s = build_standard_stencil(3).unwrap();
        assert_eq!(s.len(), 9);
        assert!((s.radius() - 2f64.sqrt()).abs() < 1e-15);
        // independent enumeration: every e_i ± e_j must be present, nothing else
        let mut expected = Vec::new();
        for i in 0..3 {
            let mut e = vec![0; 3];
            e[i] = 1;
            expected.push(e);
        }
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                for sj in [1, -1] {
                    let mut v = vec![0; 3];
                    v[i] = 1;
                    v[j] = sj;
                    expected.push(v);
                }
            }
        }
        for v in &expected {
            assert!(s.position(v).is_some(), "{v:?} missing");
        }
        let sym = s.symmetrized();
        for v in &sym {
            let neg: Vec<i64> = v.iter().map(|c| -c).collect();
            assert!(sym.contains(&neg));
        }
    }

    #[test]
    fn invalid_dimension() {
        assert_eq!(build_standard_stencil(0).unwrap_err().code(), "invalid-dimension");
        assert_eq!(build_standard_stencil(-3).unwrap_err(), Error::InvalidDimension(-3));
    }

    #[test]
    fn radius_one_in_2d_is_standard() {
        assert_eq!(build_stencil_with_radius(2, 1).unwrap(), build_standard_stencil(2).unwrap());
    }

    #[test]
    fn radius_stencil_counts() {
        // primitive vectors in the square of side 2r+1, halved
        assert_eq!(build_stencil_with_radius(2, 2).unwrap().len(), 8);
        assert_eq!(build_stencil_with_radius(2, 4).unwrap().len(), 24);
        assert_eq!(build_stencil_with_radius(3, 1).unwrap().len(), 13);
        let s = build_stencil_with_radius(2, 3).unwrap();
        assert_eq!(s.vector(0), &[1, 0]);
        assert_eq!(s.vector(1), &[0, 1]);
        assert!((s.radius() - 13f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_malformed() {
        assert!(StencilSet::from_vectors(2, vec![vec![1, 0], vec![0, 1]]).is_err());
        assert!(StencilSet::from_vectors(
            2,
            vec![vec![1, 0], vec![0, 1], vec![1, 1], vec![1, -1], vec![-1, -1]]
        )
        .is_err());
    }
}
