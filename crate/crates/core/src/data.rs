//! Closed catalog of terminal/boundary data `g(t, x)`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::pucci::SymMatrix;

pub type DataFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub enum DataTerm {
    /// `scale · ⟨A(x − s), x − s⟩`.
    Quadratic { matrix: SymMatrix, shift: Vec<f64>, scale: f64 },
    /// `amplitude · sin(2π⟨k, x⟩ + phase)`.
    Trig { frequency: Vec<f64>, amplitude: f64, phase: f64 },
    Constant(f64),
}

/// `g(t, x) = Σ terms(x) + time_rate · (T − t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalData {
    pub terms: Vec<DataTerm>,
    pub time_rate: f64,
}

impl DataTerm {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            DataTerm::Quadratic { matrix, shift, scale } => {
                let d = shift.len();
                let mut s = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        s += matrix.get(i, j) * (x[i] - shift[i]) * (x[j] - shift[j]);
                    }
                }
                scale * s
            }
            DataTerm::Trig { frequency, amplitude, phase } => {
                let arg: f64 = frequency.iter().zip(x).map(|(k, xi)| k * xi).sum();
                amplitude * (2.0 * PI * arg + phase).sin()
            }
            DataTerm::Constant(c) => *c,
        }
    }

    fn sup_abs_bound(&self, radius: f64) -> f64 {
        match self {
            DataTerm::Quadratic { matrix, scale, .. } => {
                let ev = matrix.eigenvalues();
                let top = ev.iter().map(|e| e.abs()).fold(0.0, f64::max);
                scale.abs() * top * radius * radius
            }
            DataTerm::Trig { amplitude, .. } => amplitude.abs(),
            DataTerm::Constant(c) => c.abs(),
        }
    }
}

impl TerminalData {
    pub fn new(terms: Vec<DataTerm>, time_rate: f64) -> Self {
        TerminalData { terms, time_rate }
    }

    /// `|x|² + rate·(T − t)`.
    pub fn quadratic_norm(dim: usize, time_rate: f64) -> Self {
        TerminalData::new(
            vec![DataTerm::Quadratic { matrix: SymMatrix::identity(dim), shift: vec![0.0; dim], scale: 1.0 }],
            time_rate,
        )
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !self.time_rate.is_finite() {
            return Err(Error::InvalidParameter("time_rate must be finite".into()));
        }
        for t in &self.terms {
            let (ok, found) = match t {
                DataTerm::Quadratic { matrix, shift, scale } => (
                    matrix.dim() == dim
                        && shift.len() == dim
                        && scale.is_finite()
                        && matrix.entries().iter().chain(shift).all(|v| v.is_finite()),
                    shift.len().max(matrix.dim()),
                ),
                DataTerm::Trig { frequency, amplitude, phase } => (
                    frequency.len() == dim && frequency.iter().chain([amplitude, phase]).all(|v| v.is_finite()),
                    frequency.len(),
                ),
                DataTerm::Constant(c) => (c.is_finite(), dim),
            };
            if !ok {
                if found != dim {
                    return Err(Error::DimensionMismatch { expected: dim, found });
                }
                return Err(Error::InvalidParameter("data term entries must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64, x: &[f64], horizon: f64) -> f64 {
        self.terms.iter().map(|term| term.eval(x)).sum::<f64>() + self.time_rate * (horizon - t)
    }

    pub fn to_fn(&self, horizon: f64) -> DataFn {
        let me = self.clone();
        Arc::new(move |t, x| me.eval(t, x, horizon))
    }

    /// Crude upper bound of `sup |g|` over `[0, T] × {|x − shift| ≤ radius}`.
    pub fn sup_abs_bound(&self, radius: f64, horizon: f64) -> f64 {
        self.terms.iter().map(|t| t.sup_abs_bound(radius)).sum::<f64>() + self.time_rate.abs() * horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_values() {
        let g = TerminalData::quadratic_norm(2, 4.0);
        assert_eq!(g.eval(0.05, &[0.5, 0.25], 0.1), 0.3125 + 0.2);
        let trig = TerminalData::new(vec![DataTerm::Trig { frequency: vec![1.0], amplitude: 2.0, phase: 0.0 }], 0.0);
        assert!((trig.eval(0.0, &[0.25], 1.0) - 2.0).abs() < 1e-15);
        let c = TerminalData::new(vec![DataTerm::Constant(3.0)], 0.0);
        assert_eq!(c.to_fn(1.0)(0.7, &[0.1, 0.2]), 3.0);
    }

    #[test]
    fn validation() {
        let bad = TerminalData::new(vec![DataTerm::Trig { frequency: vec![1.0], amplitude: 1.0, phase: 0.0 }], 0.0);
        assert_eq!(bad.validate(2).unwrap_err().code(), "dimension-mismatch");
        assert!(TerminalData::quadratic_norm(3, 0.0).validate(3).is_ok());
    }
}
