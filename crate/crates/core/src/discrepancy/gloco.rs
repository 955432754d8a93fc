//! Metric configuration and the pairwise global-consistency loss.

use serde::{Deserialize, Serialize};

use super::dual::{dual_wd, DualCritic, DEFAULT_CLIP};
use super::kl::gaussian_kl_tape;
use super::slicing::{critic_ascent_step, gswd_tape, DefiningFunction, SliceFamily};
use crate::autodiff::{OptimizerKind, OptimizerState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "kl")]
    GaussianKl,
    #[serde(rename = "wd")]
    DualWd,
    #[serde(rename = "swd")]
    Swd,
    #[default]
    #[serde(rename = "gswd")]
    Gswd,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(MetricKind::GaussianKl),
            "wd" => Ok(MetricKind::DualWd),
            "swd" => Ok(MetricKind::Swd),
            "gswd" => Ok(MetricKind::Gswd),
            _ => Err(Error::Config(format!("unknown metric kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub p: f64,
    pub slices: usize,
    pub family: SliceFamily,
    pub critic_steps: usize,
    pub critic_lr: f64,
    pub clip: f64,
    pub critic_hidden: Vec<usize>,
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec {
            kind: MetricKind::Gswd,
            p: 1.0,
            slices: 64,
            family: SliceFamily::Neural,
            critic_steps: 5,
            critic_lr: 1e-3,
            clip: DEFAULT_CLIP,
            critic_hidden: vec![64],
        }
    }
}

impl MetricSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p != 1.0 && self.p != 2.0 {
            return Err(Error::Config(format!("p must be 1 or 2, got {}", self.p)));
        }
        if self.slices == 0 {
            return Err(Error::Config("slices must be at least 1".into()));
        }
        if !(self.critic_lr >= 0.0 && self.critic_lr.is_finite()) {
            return Err(Error::Config(format!(
                "critic_lr must be finite and nonnegative, got {}",
                self.critic_lr
            )));
        }
        Ok(())
    }

    /// Slice family actually used: SWD always slices linearly.
    pub fn effective_family(&self) -> SliceFamily {
        match self.kind {
            MetricKind::Swd => SliceFamily::Linear,
            _ => self.family,
        }
    }

    /// Fresh defining function for input dimension `d`, seeded by `seed`.
    pub fn defining_function(&self, d: usize, seed: u64) -> DefiningFunction {
        let mut r = rng::stream(seed, &[rng::tag::SLICES]);
        match self.effective_family() {
            SliceFamily::Linear => DefiningFunction::sample_linear(d, self.slices, &mut r),
            SliceFamily::OddPoly => DefiningFunction::sample_odd_poly(d, self.slices, &mut r),
            SliceFamily::Neural => {
                let mut r = rng::stream(seed, &[rng::tag::CRITIC_INIT]);
                DefiningFunction::neural(d, &self.critic_hidden, self.slices, &mut r)
            }
        }
    }

    pub fn dual_critic(&self, d: usize, seed: u64) -> DualCritic {
        let mut r = rng::stream(seed, &[rng::tag::CRITIC_INIT]);
        DualCritic::new(d, &self.critic_hidden, self.clip, &mut r)
    }
}

/// How one pair of embedding sets is compared on the tape. Critic
/// parameters enter as constants.
#[derive(Clone, Copy, Debug)]
pub enum Discrepancy<'a> {
    Sliced {
        df: &'a DefiningFunction,
        p: f64,
    },
    GaussianKl,
    /// One critic per pair `i < j`, in lexicographic pair order.
    Dual {
        critics: &'a [DualCritic],
    },
}

/// Pairs `(i, j)` with `i < j < m` in lexicographic order.
pub fn view_pairs(m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            out.push((i, j));
        }
    }
    out
}

/// `sum_{i<j} metric(H^i, H^j)`; also returns the per-pair terms.
pub fn gloco_loss(tape: &mut Tape, hs: &[Var], disc: Discrepancy<'_>) -> Result<(Var, Vec<Var>)> {
    if hs.len() < 2 {
        return Err(Error::invalid(format!(
            "global consistency needs at least two views, got {}",
            hs.len()
        )));
    }
    let shape = tape.shape(hs[0]).to_vec();
    for &h in &hs[1..] {
        if tape.shape(h) != shape.as_slice() {
            return Err(Error::Shape {
                op: "gloco_loss",
                lhs: shape,
                rhs: tape.shape(h).to_vec(),
            });
        }
    }
    let pairs = view_pairs(hs.len());
    let sliced_vars = match disc {
        Discrepancy::Sliced { df, .. } => df.attach(tape, false),
        _ => Vec::new(),
    };
    if let Discrepancy::Dual { critics } = disc {
        if critics.len() != pairs.len() {
            return Err(Error::invalid(format!(
                "dual metric needs {} critics, got {}",
                pairs.len(),
                critics.len()
            )));
        }
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let v = match disc {
            Discrepancy::Sliced { df, p } => gswd_tape(tape, df, &sliced_vars, hs[i], hs[j], p)?,
            Discrepancy::GaussianKl => gaussian_kl_tape(tape, hs[i], hs[j])?,
            Discrepancy::Dual { critics } => {
                let vars = critics[k].attach(tape, false);
                critics[k].gap_tape(tape, &vars, hs[i], hs[j])?
            }
        };
        terms.push(v);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok((total, terms))
}

/// Value of the configured metric between two sample matrices. Trainable
/// critics are initialized from `seed` and run for `critic_steps` ascent steps.
pub fn metric_value(
    p_samples: &Tensor,
    q_samples: &Tensor,
    spec: &MetricSpec,
    seed: u64,
) -> Result<f64> {
    spec.validate()?;
    if p_samples.rank() != 2
        || q_samples.rank() != 2
        || p_samples.shape()[1] != q_samples.shape()[1]
    {
        return Err(Error::Shape {
            op: "metric",
            lhs: p_samples.shape().to_vec(),
            rhs: q_samples.shape().to_vec(),
        });
    }
    let d = p_samples.shape()[1];
    match spec.kind {
        MetricKind::GaussianKl => super::kl::gaussian_kl(p_samples, q_samples),
        MetricKind::DualWd => {
            let mut critic = spec.dual_critic(d, seed);
            dual_wd(
                p_samples,
                q_samples,
                &mut critic,
                spec.critic_steps,
                spec.critic_lr,
            )
        }
        MetricKind::Swd | MetricKind::Gswd => {
            let mut df = spec.defining_function(d, seed);
            if df.family == SliceFamily::Neural {
                let mut opt = OptimizerState::new(OptimizerKind::Sgd, spec.critic_lr, &df.params);
                for _ in 0..spec.critic_steps {
                    critic_ascent_step(p_samples, q_samples, &mut df, &mut opt, spec.p)?;
                }
            }
            super::slicing::gswd(p_samples, q_samples, &df, spec.p)
        }
    }
}
