use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Variances below this are raised to it.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Per-coordinate mean `[d]` and floored population variance `[d]`.
fn moments(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let mu = tape.mean(x, Some(0))?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean(sq, Some(0))?;
    let shifted = tape.add_scalar(var, -VARIANCE_FLOOR);
    let clipped = tape.relu(shifted);
    Ok((mu, tape.add_scalar(clipped, VARIANCE_FLOOR)))
}

/// `KL(N_P || N_Q)` between diagonal Gaussians moment-matched to the rows
/// of `p` and `q` (both `[n, d]`, `n > d`):
/// `sum_k 0.5 ln(vq/vp) + (vp + (mp - mq)^2) / (2 vq) - 0.5`.
pub fn gaussian_kl_tape(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let sp = tape.shape(p).to_vec();
    let sq = tape.shape(q).to_vec();
    if sp.len() != 2 || sq.len() != 2 || sp[1] != sq[1] {
        return Err(Error::Shape {
            op: "gaussian_kl",
            lhs: sp,
            rhs: sq,
        });
    }
    for n in [sp[0], sq[0]] {
        if n <= sp[1] {
            return Err(Error::invalid(format!(
                "gaussian_kl needs more samples than dimensions, got n={n}, d={}",
                sp[1]
            )));
        }
    }
    let (mp, vp) = moments(tape, p)?;
    let (mq, vq) = moments(tape, q)?;
    let lq = tape.log(vq)?;
    let lp = tape.log(vp)?;
    let log_ratio = tape.sub(lq, lp)?;
    let half_log = tape.scale(log_ratio, 0.5);
    let dm = tape.sub(mp, mq)?;
    let dm2 = tape.mul(dm, dm)?;
    let num = tape.add(vp, dm2)?;
    let two_vq = tape.scale(vq, 2.0);
    let frac = tape.div(num, two_vq)?;
    let terms = tape.add(half_log, frac)?;
    let terms = tape.add_scalar(terms, -0.5);
    tape.sum(terms, None)
}

pub fn gaussian_kl(p: &Tensor, q: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(p.clone());
    let b = tape.constant(q.clone());
    let v = gaussian_kl_tape(&mut tape, a, b)?;
    Ok(tape.scalar_value(v))
}
