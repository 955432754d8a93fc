//! One-dimensional Wasserstein distances by sorting, and an exact
//! small-instance transport solver used as an oracle.

use std::cmp::Ordering;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Indices that sort `v` ascending; ties keep their original order.
pub fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

fn check_order(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::invalid(format!(
            "Wasserstein order p must be >= 1, got {p}"
        )));
    }
    Ok(())
}

/// Column-wise `W_p^p` between the empirical measures in the columns of
/// `a` and `b` (both `[n, L]`), returned as `[L]`. The sort permutation is
/// frozen at forward time and gradients flow through the gather.
pub fn wasserstein_1d_pow_columns(tape: &mut Tape, a: Var, b: Var, p: f64) -> Result<Var> {
    check_order(p)?;
    let sa = tape.shape(a).to_vec();
    let sb = tape.shape(b).to_vec();
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::Shape {
            op: "wasserstein_1d",
            lhs: sa,
            rhs: sb,
        });
    }
    if sa[0] != sb[0] {
        return Err(Error::invalid(format!(
            "wasserstein_1d needs equal sample counts, got {} and {}",
            sa[0], sb[0]
        )));
    }
    let (n, cols) = (sa[0], sa[1]);
    if n == 0 {
        return Err(Error::invalid("wasserstein_1d of empty samples"));
    }
    let sorted = |tape: &mut Tape, x: Var| -> Result<Var> {
        let d = tape.data(x);
        let mut index = Vec::with_capacity(n * cols);
        let mut col = vec![0.0; n];
        for l in 0..cols {
            for (r, c) in col.iter_mut().enumerate() {
                *c = d[r * cols + l];
            }
            index.extend(argsort(&col).into_iter().map(|r| r * cols + l));
        }
        tape.gather(x, index, &[cols, n])
    };
    let sa = sorted(tape, a)?;
    let sb = sorted(tape, b)?;
    let diff = tape.sub(sa, sb)?;
    let mut cost = tape.abs(diff);
    if p != 1.0 {
        cost = tape.pow(cost, p)?;
    }
    tape.mean(cost, Some(1))
}

/// Column-wise `W_p` (`[L]`).
pub fn wasserstein_1d_columns(tape: &mut Tape, a: Var, b: Var, p: f64) -> Result<Var> {
    let wpp = wasserstein_1d_pow_columns(tape, a, b, p)?;
    if p == 1.0 {
        Ok(wpp)
    } else {
        tape.pow(wpp, 1.0 / p)
    }
}

fn as_column(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Tensor::new(vec![v.len(), 1], v.to_vec()).expect("column"))
}

/// `W_p` between two equal-size 1-D samples (order irrelevant).
pub fn wasserstein_1d(a: &[f64], b: &[f64], p: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let va = as_column(&mut tape, a);
    let vb = as_column(&mut tape, b);
    let w = wasserstein_1d_columns(&mut tape, va, vb, p)?;
    Ok(tape.data(w)[0])
}

/// `W_p^p` between two equal-size 1-D samples.
pub fn wasserstein_1d_pow(a: &[f64], b: &[f64], p: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let va = as_column(&mut tape, a);
    let vb = as_column(&mut tape, b);
    let w = wasserstein_1d_pow_columns(&mut tape, va, vb, p)?;
    Ok(tape.data(w)[0])
}

/// Transport between two uniform empirical measures of equal size given
/// the ground-cost matrix `cost[r][g] = c(x_r, x_g)^p`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingProblem {
    cost: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtSolution {
    /// `W_p^p`: mean transported cost under the optimal assignment.
    pub cost: f64,
    /// `assignment[r] = g`
    pub assignment: Vec<usize>,
}

impl OtSolution {
    /// The coupling matrix of the assignment, with mass `1/n` per matched pair.
    pub fn coupling(&self) -> Vec<Vec<f64>> {
        let n = self.assignment.len();
        let mut c = vec![vec![0.0; n]; n];
        for (r, &g) in self.assignment.iter().enumerate() {
            c[r][g] = 1.0 / n as f64;
        }
        c
    }
}

pub const ORACLE_MAX_N: usize = 10;

impl CouplingProblem {
    pub fn new(cost: Vec<Vec<f64>>) -> Result<Self> {
        let n = cost.len();
        if n == 0 || cost.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("cost matrix must be square and nonempty"));
        }
        Ok(CouplingProblem { cost })
    }

    /// Euclidean ground cost raised to `p` between equal-size point sets.
    pub fn from_points(xs: &[Vec<f64>], ys: &[Vec<f64>], p: f64) -> Result<Self> {
        check_order(p)?;
        if xs.len() != ys.len() {
            return Err(Error::invalid("point sets must have equal size"));
        }
        let cost = xs
            .iter()
            .map(|x| {
                ys.iter()
                    .map(|y| {
                        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                        d2.sqrt().powf(p)
                    })
                    .collect()
            })
            .collect();
        CouplingProblem::new(cost)
    }

    pub fn len(&self) -> usize {
        self.cost.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cost.is_empty()
    }
}

/// Exact optimum over all assignments by dynamic programming over subsets.
/// Uniform-weight measures of equal size always admit a permutation optimum.
pub fn ot_oracle_exact(problem: &CouplingProblem) -> Result<OtSolution> {
    let n = problem.len();
    if n > ORACLE_MAX_N {
        return Err(Error::invalid(format!(
            "exact oracle limited to n <= {ORACLE_MAX_N}, got {n}"
        )));
    }
    let full = 1usize << n;
    let mut best = vec![f64::INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    best[0] = 0.0;
    for mask in 0..full {
        if best[mask].is_infinite() {
            continue;
        }
        let row = mask.count_ones() as usize;
        if row == n {
            continue;
        }
        for g in 0..n {
            if mask & (1 << g) != 0 {
                continue;
            }
            let next = mask | (1 << g);
            let c = best[mask] + problem.cost[row][g];
            if c.partial_cmp(&best[next]) == Some(Ordering::Less) {
                best[next] = c;
                choice[next] = g;
            }
        }
    }
    let mut assignment = vec![0; n];
    let mut mask = full - 1;
    for row in (0..n).rev() {
        let g = choice[mask];
        assignment[row] = g;
        mask &= !(1 << g);
    }
    Ok(OtSolution {
        cost: best[full - 1] / n as f64,
        assignment,
    })
}
