//! Defining functions and (generalized) sliced Wasserstein distances.
//!
//! A defining function `ge(x, theta)` pushes a `d`-dimensional measure onto
//! the real line: the projected measure places the mass of `x` at
//! `t = ge(x, theta)`. The GSWD integral over `theta` is estimated by the
//! average of `W_p` over `L` slices.
//!
//! * `Linear`: `ge(x, theta) = <x, theta>` with unit `theta` (plain SWD).
//! * `OddPoly`: `ge(x, theta) = <m3(x), theta>` where `m3` lists every
//!   degree-3 monomial `x_a x_b x_c` (`a <= b <= c`) and `theta` is unit-norm.
//! * `Neural`: the `l`-th output of an MLP critic. Its head has no bias and
//!   unit-norm columns; the network is not degree-one homogeneous in all of
//!   its parameters.
//!
//! The first two are linear in `theta`, hence degree-one homogeneous.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ot::wasserstein_1d_columns;
use crate::autodiff::{OptimizerState, ParamStore, Tape, Tensor, Var};
use crate::encoders::{Dense, Mlp};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SliceFamily {
    Linear,
    OddPoly,
    #[default]
    Neural,
}

/// Degree-3 monomial index triples for dimension `d`, in lexicographic order.
pub fn cubic_monomials(d: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a in 0..d {
        for b in a..d {
            for c in b..d {
                out.push([a, b, c]);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefiningFunction {
    pub family: SliceFamily,
    pub input_dim: usize,
    pub slices: usize,
    pub params: ParamStore,
    net: Option<(Mlp, Dense)>,
}

fn unit_columns(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let mut data: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    normalize_columns(&mut data, rows, cols);
    Tensor::new(vec![rows, cols], data).expect("shape")
}

fn normalize_columns(data: &mut [f64], rows: usize, cols: usize) {
    for c in 0..cols {
        let n = (0..rows)
            .map(|r| data[r * cols + c].powi(2))
            .sum::<f64>()
            .sqrt();
        if n > 0.0 {
            for r in 0..rows {
                data[r * cols + c] /= n;
            }
        }
    }
}

impl DefiningFunction {
    /// Linear slices from explicit directions `theta: [d, L]`.
    pub fn linear(theta: Tensor) -> Result<Self> {
        if theta.rank() != 2 {
            return Err(Error::invalid(
                "linear slices need a [d, L] direction matrix",
            ));
        }
        let (d, l) = (theta.shape()[0], theta.shape()[1]);
        let mut params = ParamStore::new();
        params.insert("theta", theta);
        Ok(DefiningFunction {
            family: SliceFamily::Linear,
            input_dim: d,
            slices: l,
            params,
            net: None,
        })
    }

    /// Cubic slices from coefficients `theta: [#monomials(d), L]`.
    pub fn odd_poly(input_dim: usize, theta: Tensor) -> Result<Self> {
        let k = cubic_monomials(input_dim).len();
        if theta.rank() != 2 || theta.shape()[0] != k {
            return Err(Error::invalid(format!(
                "cubic slices in d={input_dim} need [{k}, L] coefficients, got {:?}",
                theta.shape()
            )));
        }
        let l = theta.shape()[1];
        let mut params = ParamStore::new();
        params.insert("theta", theta);
        Ok(DefiningFunction {
            family: SliceFamily::OddPoly,
            input_dim,
            slices: l,
            params,
            net: None,
        })
    }

    pub fn sample_linear(d: usize, slices: usize, rng: &mut impl Rng) -> Self {
        Self::linear(unit_columns(d, slices, rng)).expect("valid shape")
    }

    pub fn sample_odd_poly(d: usize, slices: usize, rng: &mut impl Rng) -> Self {
        let k = cubic_monomials(d).len();
        Self::odd_poly(d, unit_columns(k, slices, rng)).expect("valid shape")
    }

    /// Trainable critic `d -> hidden (ReLU) -> L`.
    pub fn neural(d: usize, hidden: &[usize], slices: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let mut widths = vec![d];
        widths.extend_from_slice(hidden);
        let body = Mlp::new(&mut params, "critic.body", &widths, true, rng);
        let last = *widths.last().expect("nonempty");
        let head = Dense::new(&mut params, "critic.head", last, slices, false, rng);
        let mut df = DefiningFunction {
            family: SliceFamily::Neural,
            input_dim: d,
            slices,
            params,
            net: Some((body, head)),
        };
        df.normalize_head();
        df
    }

    /// Rescale each head column (one per slice) to unit norm.
    pub fn normalize_head(&mut self) {
        if let Some((_, head)) = &self.net {
            let w = self.params.get_mut(head.weight);
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            normalize_columns(w.data_mut(), rows, cols);
        }
    }

    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.attach(tape, trainable)
    }

    /// Project `x: [n, d]` onto every slice: `[n, L]`.
    pub fn project(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::Shape {
                op: "project",
                lhs: s,
                rhs: vec![self.input_dim],
            });
        }
        match self.family {
            SliceFamily::Linear => tape.matmul(x, vars[0]),
            SliceFamily::OddPoly => {
                let n = s[0];
                let d = self.input_dim;
                let monos = cubic_monomials(d);
                let k = monos.len();
                let mut factors = Vec::with_capacity(3);
                for pos in 0..3 {
                    let mut index = Vec::with_capacity(n * k);
                    for i in 0..n {
                        index.extend(monos.iter().map(|m| i * d + m[pos]));
                    }
                    factors.push(tape.gather(x, index, &[n, k])?);
                }
                let ab = tape.mul(factors[0], factors[1])?;
                let abc = tape.mul(ab, factors[2])?;
                tape.matmul(abc, vars[0])
            }
            SliceFamily::Neural => {
                let (body, head) = self.net.as_ref().expect("neural family has a network");
                let hid = body.forward(tape, vars, x)?;
                head.forward(tape, vars, hid)
            }
        }
    }

    /// Projection values without recording gradients.
    pub fn project_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.attach(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.project(&mut tape, &vars, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// `(1/L) sum_l W_p(proj_l P, proj_l Q)` on the tape.
pub fn gswd_tape(
    tape: &mut Tape,
    df: &DefiningFunction,
    vars: &[Var],
    p_samples: Var,
    q_samples: Var,
    p: f64,
) -> Result<Var> {
    let pp = df.project(tape, vars, p_samples)?;
    let pq = df.project(tape, vars, q_samples)?;
    let per_slice = wasserstein_1d_columns(tape, pp, pq, p)?;
    tape.mean(per_slice, None)
}

/// Value of the sliced estimate between two sample matrices `[n, d]`.
pub fn gswd(p_samples: &Tensor, q_samples: &Tensor, df: &DefiningFunction, p: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = df.attach(&mut tape, false);
    let a = tape.constant(p_samples.clone());
    let b = tape.constant(q_samples.clone());
    let v = gswd_tape(&mut tape, df, &vars, a, b, p)?;
    Ok(tape.scalar_value(v))
}

/// Sliced Wasserstein distance with `slices` random unit directions.
pub fn swd(
    p_samples: &Tensor,
    q_samples: &Tensor,
    slices: usize,
    p: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let d = p_samples.shape().get(1).copied().unwrap_or(0);
    let df = DefiningFunction::sample_linear(d, slices, rng);
    gswd(p_samples, q_samples, &df, p)
}

/// Sum of sliced distances over all view pairs `i < j`.
fn pairwise_sum(
    tape: &mut Tape,
    df: &DefiningFunction,
    vars: &[Var],
    samples: &[Var],
    p: f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let v = gswd_tape(tape, df, vars, samples[i], samples[j], p)?;
            total = Some(match total {
                Some(t) => tape.add(t, v)?,
                None => v,
            });
        }
    }
    total.ok_or_else(|| Error::invalid("need at least two sample sets"))
}

/// One ascent step of the neural critic on `sum_{i<j} GSWD(S_i, S_j)` with
/// the samples held constant. Returns the estimate after the step.
pub fn critic_ascent_step_multi(
    samples: &[Tensor],
    df: &mut DefiningFunction,
    opt: &mut OptimizerState,
    p: f64,
) -> Result<f64> {
    if df.family != SliceFamily::Neural {
        return Err(Error::invalid(format!(
            "critic ascent needs the neural family, got {:?}",
            df.family
        )));
    }
    let mut tape = Tape::new();
    let vars = df.attach(&mut tape, true);
    let xs: Vec<Var> = samples.iter().map(|s| tape.constant(s.clone())).collect();
    let total = pairwise_sum(&mut tape, df, &vars, &xs, p)?;
    let neg = tape.neg(total);
    let grads = tape.backward(neg)?;
    df.params.accumulate_grads(&vars, &grads);
    opt.step(&mut df.params)?;
    if opt.lr != 0.0 {
        df.normalize_head();
    }

    let mut tape = Tape::new();
    let vars = df.attach(&mut tape, false);
    let xs: Vec<Var> = samples.iter().map(|s| tape.constant(s.clone())).collect();
    let total = pairwise_sum(&mut tape, df, &vars, &xs, p)?;
    Ok(tape.scalar_value(total))
}

/// One ascent step on `GSWD(P, Q)` with respect to the critic only.
pub fn critic_ascent_step(
    p_samples: &Tensor,
    q_samples: &Tensor,
    df: &mut DefiningFunction,
    opt: &mut OptimizerState,
    p: f64,
) -> Result<f64> {
    critic_ascent_step_multi(&[p_samples.clone(), q_samples.clone()], df, opt, p)
}
