//! Kantorovich dual estimate of `W_1` with a weight-clipped critic.

use rand::Rng;

use crate::autodiff::{OptimizerKind, OptimizerState, ParamStore, Tape, Tensor, Var};
use crate::encoders::Mlp;
use crate::error::{Error, Result};

pub const DEFAULT_CLIP: f64 = 0.01;

/// Scalar-output critic whose parameters are clipped to `[-clip, clip]`
/// after every update, bounding its Lipschitz constant.
#[derive(Clone, Debug, PartialEq)]
pub struct DualCritic {
    pub input_dim: usize,
    pub clip: f64,
    net: Mlp,
    pub params: ParamStore,
}

impl DualCritic {
    /// `hidden` may be empty, giving an affine critic.
    pub fn new(input_dim: usize, hidden: &[usize], clip: f64, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let net = Mlp::new(&mut params, "dual", &widths, false, rng);
        let mut c = DualCritic {
            input_dim,
            clip,
            net,
            params,
        };
        c.clip_weights();
        c
    }

    pub fn clip_weights(&mut self) {
        let c = self.clip.abs();
        for i in 0..self.params.len() {
            for v in self.params.get_mut(i).data_mut() {
                *v = v.clamp(-c, c);
            }
        }
    }

    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.attach(tape, trainable)
    }

    /// `mean f(P) - mean f(Q)` on the tape.
    pub fn gap_tape(&self, tape: &mut Tape, vars: &[Var], p: Var, q: Var) -> Result<Var> {
        for x in [p, q] {
            let s = tape.shape(x);
            if s.len() != 2 || s[1] != self.input_dim {
                return Err(Error::Shape {
                    op: "dual_wd",
                    lhs: s.to_vec(),
                    rhs: vec![self.input_dim],
                });
            }
        }
        let fp = self.net.forward(tape, vars, p)?;
        let fq = self.net.forward(tape, vars, q)?;
        let mp = tape.mean(fp, None)?;
        let mq = tape.mean(fq, None)?;
        tape.sub(mp, mq)
    }

    pub fn gap(&self, p: &Tensor, q: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.attach(&mut tape, false);
        let a = tape.constant(p.clone());
        let b = tape.constant(q.clone());
        let g = self.gap_tape(&mut tape, &vars, a, b)?;
        Ok(tape.scalar_value(g))
    }

    /// One clipped ascent step on the gap; returns the gap before the step.
    pub fn ascent_step(&mut self, p: &Tensor, q: &Tensor, opt: &mut OptimizerState) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.attach(&mut tape, true);
        let a = tape.constant(p.clone());
        let b = tape.constant(q.clone());
        let g = self.gap_tape(&mut tape, &vars, a, b)?;
        let before = tape.scalar_value(g);
        let neg = tape.neg(g);
        let grads = tape.backward(neg)?;
        self.params.accumulate_grads(&vars, &grads);
        opt.step(&mut self.params)?;
        self.clip_weights();
        Ok(before)
    }
}

/// Maximize the critic gap for `steps` SGD steps at rate `lr`, then return
/// the achieved gap.
pub fn dual_wd(
    p: &Tensor,
    q: &Tensor,
    critic: &mut DualCritic,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    let mut opt = OptimizerState::new(OptimizerKind::Sgd, lr, &critic.params);
    for _ in 0..steps {
        critic.ascent_step(p, q, &mut opt)?;
    }
    critic.gap(p, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_clip_gives_constant_critic() {
        let mut r = rng::stream(1, &[]);
        let mut c = DualCritic::new(2, &[8], 0.0, &mut r);
        let p = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let q = Tensor::new(vec![3, 2], vec![9.0; 6]).unwrap();
        assert_eq!(dual_wd(&p, &q, &mut c, 20, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn separated_diracs_approach_one() {
        let mut r = rng::stream(2, &[]);
        let mut c = DualCritic::new(1, &[], 1.0, &mut r);
        let p = Tensor::new(vec![4, 1], vec![0.0; 4]).unwrap();
        let q = Tensor::new(vec![4, 1], vec![1.0; 4]).unwrap();
        let mut last = f64::NEG_INFINITY;
        for _ in 0..40 {
            let g = dual_wd(&p, &q, &mut c, 1, 0.1).unwrap();
            assert!(g <= 1.0 + 1e-12);
            assert!(g >= last - 1e-12);
            last = g;
        }
        assert!((last - 1.0).abs() < 1e-9, "gap {last}");
    }
}
