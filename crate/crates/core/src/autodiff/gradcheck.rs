//! Central finite-difference oracle for analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::graph::{Graph, Var};

/// Settings for a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub tensor: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<Mismatch>,
}

impl GradCheck {
    pub fn new(epsilon: f64) -> Self {
        GradCheck {
            epsilon,
            max_coords: None,
            seed: 0,
        }
    }

    pub fn max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Compares the backward sweep of `f` at `point` against central differences.
    ///
    /// `f` receives a fresh graph with one trainable leaf per point tensor and
    /// must return a scalar; it is called repeatedly and must be deterministic.
    pub fn run<T, F>(&self, mut f: F, point: &[Tensor<T>]) -> Result<GradCheckReport>
    where
        T: Scalar,
        F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
    {
        let mut eval = |values: &[Tensor<T>], want_grad: bool| -> Result<(f64, Vec<Vec<T>>)> {
            let mut graph = Graph::new();
            let leaves: Vec<Var> = values.iter().map(|t| graph.param(t)).collect();
            let out = f(&mut graph, &leaves)?;
            if graph.value(out).numel() != 1 {
                return Err(Error::dim("finite_difference_check", "function must return a scalar"));
            }
            let y = graph.value(out).data()[0].as_f64();
            if !want_grad {
                return Ok((y, Vec::new()));
            }
            let grads = graph.backward(out)?;
            let g = leaves
                .iter()
                .zip(values)
                .map(|(&v, t)| {
                    grads
                        .get(v)
                        .map(<[T]>::to_vec)
                        .unwrap_or_else(|| vec![T::zero(); t.numel()])
                })
                .collect();
            Ok((y, g))
        };

        let (_, analytic) = eval(point, true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<Tensor<T>> = point.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            coords_checked: 0,
            worst: None,
        };
        for ti in 0..point.len() {
            let n = point[ti].numel();
            let coords: Vec<usize> = match self.max_coords {
                Some(m) if m < n => {
                    let mut c = sample(&mut rng, n, m).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..n).collect(),
            };
            for coord in coords {
                let orig = point[ti].data()[coord];
                work[ti].data_mut()[coord] = T::from_f64(orig.as_f64() + self.epsilon);
                let (plus, _) = eval(&work, false)?;
                work[ti].data_mut()[coord] = T::from_f64(orig.as_f64() - self.epsilon);
                let (minus, _) = eval(&work, false)?;
                work[ti].data_mut()[coord] = orig;

                let numeric = (plus - minus) / (2.0 * self.epsilon);
                let a = analytic[ti][coord].as_f64();
                let rel = (a - numeric).abs() / a.abs().max(1.0);
                report.coords_checked += 1;
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(rel);
                    report.worst = Some(Mismatch {
                        tensor: ti,
                        coord,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
        Ok(report)
    }
}

/// Maximum relative error between analytic and central-difference gradients
/// of `f` at `point`, over every coordinate.
pub fn finite_difference_check<T, F>(f: F, point: &[Tensor<T>], epsilon: f64) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    GradCheck::new(epsilon).run(f, point).map(|r| r.max_rel_error)
}
