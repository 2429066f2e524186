//! Restorers with one free output vector per query.
//!
//! For a finite data distribution and random inpainting, the conditional
//! objective at a query `(Ã, y)` is a finite weighted least-squares problem:
//! enumerate every atom `x⁽ʲ⁾` and every operator `A` compatible with the
//! query, weight each by its joint probability times the Gaussian density of
//! `y`, and score `h` through `A`. A table of such cells is the
//! population-level version of the training objective, free of any network
//! capacity limits.

use nalgebra::{DMatrix, DVector};

use crate::corruption::{Mask, Operator};
use crate::error::{Error, Result};
use crate::oracle::FiniteDistribution;
use crate::training::{clip_grad_norm, Adam, Objective, OptimizerSpec};

/// Largest ambient dimension for which masks are enumerated.
pub const MAX_ENUM_DIM: usize = 16;

/// One weighted residual `w · ½‖A h − v‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub weight: f64,
    pub op: Operator,
    pub values: Vec<f64>,
}

/// All terms for one query; weights sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub terms: Vec<Term>,
}

/// Exact stationary point of a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSolution {
    /// Numerical rank of `Σ w AᵀA`.
    pub rank: usize,
    /// The unique minimiser, present only when the normal matrix is full
    /// rank.
    pub value: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularProblem {
    pub n: usize,
    pub cells: Vec<Cell>,
}

impl Cell {
    pub fn loss(&self, h: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for t in &self.terms {
            let ah = t.op.apply(h)?;
            total += t.weight * 0.5 * ah.iter().zip(&t.values).map(|(a, v)| (a - v) * (a - v)).sum::<f64>();
        }
        Ok(total)
    }

    pub fn gradient(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; h.len()];
        for t in &self.terms {
            let resid: Vec<f64> = t.op.apply(h)?.iter().zip(&t.values).map(|(a, v)| a - v).collect();
            for (gi, bi) in g.iter_mut().zip(t.op.apply_transpose(&resid)?) {
                *gi += t.weight * bi;
            }
        }
        Ok(g)
    }

    /// Solves `(Σ w AᵀA) h = Σ w Aᵀv`.
    pub fn solve(&self, n: usize) -> CellSolution {
        let mut m = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for t in &self.terms {
            m += t.op.gram() * t.weight;
            b += DVector::from_vec(t.op.apply_transpose(&t.values).expect("term dimensions checked")) * t.weight;
        }
        let svd = m.clone().svd(true, true);
        let top = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-12 * top.max(f64::MIN_POSITIVE)).count();
        let value = if rank == n {
            m.lu().solve(&b).map(|v| v.as_slice().to_vec())
        } else {
            None
        };
        CellSolution { rank, value }
    }
}

impl TabularProblem {
    pub fn solve(&self) -> Vec<CellSolution> {
        self.cells.iter().map(|c| c.solve(self.n)).collect()
    }

    /// Fits every cell from `init` with Adam on the exact cell loss.
    pub fn fit(&self, init: Vec<Vec<f64>>, spec: &OptimizerSpec) -> Result<Vec<Vec<f64>>> {
        spec.validate()?;
        if init.len() != self.cells.len() {
            return Err(Error::Dimension { expected: self.cells.len(), got: init.len() });
        }
        let mut table = init;
        for (cell, h) in self.cells.iter().zip(table.iter_mut()) {
            let mut adam = Adam::new(self.n, spec);
            for step in 1..=spec.steps {
                let mut g = cell.gradient(h)?;
                clip_grad_norm(&mut g, spec.clip_max_norm);
                adam.update(h, &g, spec.lr_at(step));
            }
        }
        Ok(table)
    }
}

fn log_gauss_iso(y: &[f64], mean: &[f64], obs: &Mask, sigma: f64) -> f64 {
    obs.observed().map(|i| -0.5 * ((y[i] - mean[i]) / sigma).powi(2)).sum()
}

fn log_prob(prob: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        count as f64 * prob.ln()
    }
}

/// Builds the cells for random inpainting over a finite distribution.
///
/// Each query is `(mask, y)` where the mask is what the restorer is
/// conditioned on: `Ã` for [`Objective::Ambient`], `A` for
/// [`Objective::Naive`] and the identity for [`Objective::Clean`]. Terms
/// enumerate the atoms and, for the ambient objective, every `A ≥ Ã`, with
/// weight `π_j · P(A) · P(Ã | A) · N(y; Ã x⁽ʲ⁾, σ²)` normalised per cell.
pub fn inpainting_problem(
    dist: &FiniteDistribution,
    p: f64,
    delta: f64,
    queries: &[(Mask, Vec<f64>)],
    sigma: f64,
    objective: Objective,
) -> Result<TabularProblem> {
    let n = dist.dim();
    if n > MAX_ENUM_DIM {
        return Err(Error::Config(format!("enumeration is limited to {MAX_ENUM_DIM} dimensions")));
    }
    if !(sigma > 0.0) {
        return Err(Error::ZeroSigma(sigma));
    }
    let mut cells = Vec::with_capacity(queries.len());
    for (q, y) in queries {
        if q.len() != n || y.len() != n {
            return Err(Error::Dimension { expected: n, got: q.len().min(y.len()) });
        }
        if objective == Objective::Clean && q.observed_count() != n {
            return Err(Error::Contract("clean queries must observe every coordinate".into()));
        }
        let loss_ops: Vec<(Mask, f64)> = match objective {
            Objective::Ambient => {
                let erased: Vec<usize> = (0..n).filter(|&i| !q.is_observed(i)).collect();
                (0..1usize << erased.len())
                    .map(|bits| {
                        let mut diag = q.as_slice().to_vec();
                        for (k, &i) in erased.iter().enumerate() {
                            if bits >> k & 1 == 1 {
                                diag[i] = 1;
                            }
                        }
                        let kept_a = diag.iter().filter(|&&v| v == 1).count();
                        let kept_t = q.observed_count();
                        let lp = log_prob(1.0 - p, kept_a)
                            + log_prob(p, n - kept_a)
                            + log_prob(1.0 - delta, kept_t)
                            + log_prob(delta, kept_a - kept_t);
                        (Mask::new(diag).expect("0/1 entries"), lp)
                    })
                    .filter(|(_, lp)| lp.is_finite())
                    .collect()
            }
            Objective::Naive | Objective::Clean => vec![(q.clone(), 0.0)],
        };
        let mut raw = Vec::new();
        for (atom, &pi) in dist.atoms().iter().zip(dist.probs()) {
            let ll = pi.ln() + log_gauss_iso(y, atom, q, sigma);
            for (a, lp) in &loss_ops {
                let op = Operator::Mask(a.clone());
                let values = op.apply(atom)?;
                raw.push((ll + lp, op, values));
            }
        }
        let top = raw.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = raw.iter().map(|r| (r.0 - top).exp()).sum();
        let terms = raw
            .into_iter()
            .map(|(lw, op, values)| Term { weight: (lw - top).exp() / total, op, values })
            .collect();
        cells.push(Cell { terms });
    }
    Ok(TabularProblem { n, cells })
}

/// Every 0/1 mask of length `n`.
pub fn all_masks(n: usize) -> Vec<Mask> {
    (0..1usize << n)
        .map(|bits| Mask::new((0..n).map(|i| (bits >> i & 1) as u8).collect()).expect("0/1 entries"))
        .collect()
}
