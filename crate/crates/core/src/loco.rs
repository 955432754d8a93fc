//! Cosine-temperature scores, InfoNCE-style contrastive losses, the
//! complementarity-aware loss over M views, and per-sample memory banks.

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::rng;

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `exp(cos(a, b) / tau)`.
pub fn score(a: &[f64], b: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "score",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (norm(a).max(NORM_EPS) * norm(b).max(NORM_EPS));
    Ok((cos / tau).exp())
}

/// `-ln(s_pos / (s_pos + sum s_neg))` from precomputed scores.
pub fn contrastive_from_scores(pos: f64, negs: &[f64]) -> Result<f64> {
    if negs.is_empty() {
        return Err(Error::invalid(
            "contrastive loss needs at least one negative",
        ));
    }
    let denom = pos + negs.iter().sum::<f64>();
    Ok(-(pos / denom).ln())
}

/// Row-wise cosine between `a` and `b` (both `[n, C]`, already unit) as `[n, 1]`.
fn row_dot(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.shape(a)[0];
    let prod = tape.mul(a, b)?;
    let s = tape.sum(prod, Some(1))?;
    tape.reshape(s, &[n, 1])
}

/// `[n, K]` cosines of each unit anchor row against its own `K` unit rows
/// in `negs: [n*K, C]`.
fn own_negative_dots(tape: &mut Tape, anchors: Var, negs: Var, k: usize) -> Result<Var> {
    let s = tape.shape(anchors).to_vec();
    let (n, c) = (s[0], s[1]);
    let ns = tape.shape(negs).to_vec();
    if ns != [n * k, c] {
        return Err(Error::Shape {
            op: "contrastive_negatives",
            lhs: ns,
            rhs: vec![n * k, c],
        });
    }
    let mut idx = Vec::with_capacity(n * k * c);
    for i in 0..n {
        for _ in 0..k {
            idx.extend(i * c..(i + 1) * c);
        }
    }
    let tiled = tape.gather(anchors, idx, &[n, k, c])?;
    let negs3 = tape.reshape(negs, &[n, k, c])?;
    let prod = tape.mul(tiled, negs3)?;
    tape.sum(prod, Some(2))
}

/// `[n, K]` cosines of every unit anchor row against the same `K` unit rows.
fn shared_dots(tape: &mut Tape, anchors: Var, negs: Var) -> Result<Var> {
    let nt = tape.transpose(negs)?;
    tape.matmul(anchors, nt)
}

/// `[n, K]` entries of the anchor-candidate cosine matrix selected by `table`
/// (row `i` lists `K` candidate rows).
fn table_dots(tape: &mut Tape, anchors: Var, candidates: Var, table: &[Vec<usize>]) -> Result<Var> {
    let n = tape.shape(anchors)[0];
    let s = tape.shape(candidates)[0];
    let k = table.first().map_or(0, Vec::len);
    let ct = tape.transpose(candidates)?;
    let sim = tape.matmul(anchors, ct)?;
    let mut idx = Vec::with_capacity(n * k);
    for (i, row) in table.iter().enumerate() {
        idx.extend(row.iter().map(|&j| i * s + j));
    }
    tape.gather(sim, idx, &[n, k])
}

/// Mean over rows of `-ln softmax([pos, negs] / tau)[0]`.
fn info_nce(tape: &mut Tape, pos: Var, negs: Var, tau: f64) -> Result<Var> {
    let n = tape.shape(pos)[0];
    let logits = tape.concat(&[pos, negs], 1)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let ce = tape.softmax_cross_entropy(logits, &vec![0; n])?;
    tape.mean(ce, None)
}

/// Contrastive loss of anchors `[n, C]` against positives `[n, C]` and
/// per-row negatives `[n*K, C]` (rows `i*K..(i+1)*K` belong to anchor `i`),
/// averaged over the batch. Inputs are normalized internally.
pub fn contrastive_loss(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    negatives: Var,
    k: usize,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    if k == 0 {
        return Err(Error::invalid(
            "contrastive loss needs at least one negative",
        ));
    }
    let a = tape.l2_normalize(anchors)?;
    let p = tape.l2_normalize(positives)?;
    let q = tape.l2_normalize(negatives)?;
    let pos = row_dot(tape, a, p)?;
    let neg = own_negative_dots(tape, a, q, k)?;
    info_nce(tape, pos, neg, tau)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSource {
    Minibatch,
    #[default]
    Bank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub negatives: NegativeSource,
    pub k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 0.5,
            tau: 0.07,
            negatives: NegativeSource::Bank,
            k: 256,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.alpha >= 0.0 && self.beta >= 0.0)
            || !(self.alpha.is_finite() && self.beta.is_finite())
        {
            return Err(Error::Config(format!(
                "alpha and beta must be finite and nonnegative, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("alpha and beta cannot both be zero".into()));
        }
        if self.negatives == NegativeSource::Bank && self.k == 0 {
            return Err(Error::Config("bank negatives need k >= 1".into()));
        }
        Ok(())
    }
}

/// Negatives for one batch.
#[derive(Clone, Debug)]
pub enum NegativeSet {
    /// Other samples of the same batch.
    Minibatch,
    /// `k` bank rows shared by the whole batch: `cf: [k, C1]` and, per
    /// view, `views[q]: [k, C1]`. None of them belongs to a batch sample.
    Bank {
        k: usize,
        cf: Tensor,
        views: Vec<Tensor>,
    },
}

/// Unweighted terms of the complementarity-aware loss; absent when the
/// matching weight is zero.
#[derive(Clone, Copy, Debug)]
pub struct LocoTerms {
    pub total: Var,
    pub cf_term: Option<Var>,
    pub cross_term: Option<Var>,
}

/// Complementarity-aware contrastive loss over `M` views.
///
/// Term one contrasts each `h_i^m` with `CF_i` against other samples' CFs.
/// Term two contrasts `h_i^m` with `h_i^t` (`t != m`) against other samples'
/// features from every view. Each InfoNCE term is averaged over the batch
/// and summed over views (and view pairs).
pub fn loco_loss(
    tape: &mut Tape,
    h: &[Var],
    cf: Var,
    cfg: &LossConfig,
    negs: &NegativeSet,
) -> Result<LocoTerms> {
    cfg.validate()?;
    let m = h.len();
    if m == 0 {
        return Err(Error::invalid("loco loss needs at least one view"));
    }
    if cfg.beta > 0.0 && m < 2 {
        return Err(Error::invalid("cross-view term needs at least two views"));
    }
    let cs = tape.shape(cf).to_vec();
    for &hv in h {
        if tape.shape(hv) != cs.as_slice() {
            return Err(Error::Shape {
                op: "loco_loss",
                lhs: cs,
                rhs: tape.shape(hv).to_vec(),
            });
        }
    }
    let n = cs[0];
    let hn: Vec<Var> = h
        .iter()
        .map(|&v| tape.l2_normalize(v))
        .collect::<Result<_>>()?;
    let cfn = tape.l2_normalize(cf)?;

    let bank = match negs {
        NegativeSet::Minibatch => {
            if n < 2 {
                return Err(Error::invalid(
                    "minibatch negatives need a batch of at least two",
                ));
            }
            None
        }
        NegativeSet::Bank { k, cf: bcf, views } => {
            if views.len() != m {
                return Err(Error::invalid(format!(
                    "bank negatives for {} views, batch has {m}",
                    views.len()
                )));
            }
            if bcf.shape()[0] != *k || views.iter().any(|v| v.shape()[0] != *k) {
                return Err(Error::invalid(format!(
                    "bank negatives must hold {k} rows per bank"
                )));
            }
            let bcf = tape.constant(bcf.clone());
            let bviews: Vec<Var> = views.iter().map(|t| tape.constant(t.clone())).collect();
            Some((*k, bcf, bviews))
        }
    };

    let others = |i: usize| (0..n).filter(move |&j| j != i);

    let cf_term = if cfg.alpha > 0.0 {
        let neg_cf = match &bank {
            None => {
                let table: Vec<Vec<usize>> = (0..n).map(|i| others(i).collect()).collect();
                hn.iter()
                    .map(|&a| table_dots(tape, a, cfn, &table))
                    .collect::<Result<Vec<_>>>()?
            }
            Some((_, bcf, _)) => hn
                .iter()
                .map(|&a| shared_dots(tape, a, *bcf))
                .collect::<Result<Vec<_>>>()?,
        };
        let mut acc: Option<Var> = None;
        for (mi, &a) in hn.iter().enumerate() {
            let pos = row_dot(tape, a, cfn)?;
            let l = info_nce(tape, pos, neg_cf[mi], cfg.tau)?;
            acc = Some(match acc {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        acc
    } else {
        None
    };

    let cross_term = if cfg.beta > 0.0 {
        let negs_per_view: Vec<Var> = match &bank {
            None => {
                let all = tape.concat(&hn, 0)?;
                let table: Vec<Vec<usize>> = (0..n)
                    .map(|i| {
                        (0..m)
                            .flat_map(|q| others(i).map(move |j| q * n + j))
                            .collect()
                    })
                    .collect();
                hn.iter()
                    .map(|&a| table_dots(tape, a, all, &table))
                    .collect::<Result<_>>()?
            }
            Some((_, _, bviews)) => {
                let all = tape.concat(bviews, 0)?;
                hn.iter()
                    .map(|&a| shared_dots(tape, a, all))
                    .collect::<Result<_>>()?
            }
        };
        let mut acc: Option<Var> = None;
        for mi in 0..m {
            for t in 0..m {
                if t == mi {
                    continue;
                }
                let pos = row_dot(tape, hn[mi], hn[t])?;
                let l = info_nce(tape, pos, negs_per_view[mi], cfg.tau)?;
                acc = Some(match acc {
                    Some(x) => tape.add(x, l)?,
                    None => l,
                });
            }
        }
        acc
    } else {
        None
    };

    let total = match (cf_term, cross_term) {
        (Some(a), Some(b)) => {
            let wa = tape.scale(a, cfg.alpha);
            let wb = tape.scale(b, cfg.beta);
            tape.add(wa, wb)?
        }
        (Some(a), None) => tape.scale(a, cfg.alpha),
        (None, Some(b)) => tape.scale(b, cfg.beta),
        (None, None) => unreachable!("validated weights"),
    };
    Ok(LocoTerms {
        total,
        cf_term,
        cross_term,
    })
}

/// Per-sample feature caches: one `[N, C1]` bank per view plus one for CFs.
/// Row `i` always belongs to sample id `i`; rows stay unit-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub views: Vec<Tensor>,
    pub cf: Tensor,
    pub momentum: f64,
}

fn normalize_row(row: &mut [f64]) {
    let s = norm(row).max(NORM_EPS);
    for v in row {
        *v /= s;
    }
}

fn random_unit_rows(n: usize, c: usize, r: &mut impl rand::Rng) -> Tensor {
    let mut data: Vec<f64> = (0..n * c).map(|_| StandardNormal.sample(r)).collect();
    if c > 0 {
        data.chunks_mut(c).for_each(normalize_row);
    }
    Tensor::new(vec![n, c], data).expect("shape")
}

/// `row <- normalize(eta * row + (1 - eta) * new)` for each listed id.
pub fn bank_update(bank: &mut Tensor, ids: &[usize], new: &Tensor, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!(
            "bank momentum must lie in [0, 1], got {eta}"
        )));
    }
    let (n, c) = (bank.shape()[0], bank.shape()[1]);
    if new.shape() != [ids.len(), c] {
        return Err(Error::Shape {
            op: "bank_update",
            lhs: vec![ids.len(), c],
            rhs: new.shape().to_vec(),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!(
            "bank id {bad} out of range for {n} rows"
        )));
    }
    let data = bank.data_mut();
    for (r, &id) in ids.iter().enumerate() {
        let row = &mut data[id * c..(id + 1) * c];
        for (v, x) in row.iter_mut().zip(new.row(r)) {
            *v = eta * *v + (1.0 - eta) * x;
        }
        normalize_row(row);
    }
    Ok(())
}

/// `k` distinct ids in `0..n` other than `exclude`, uniform, from `seed`.
pub fn bank_sample_negatives(n: usize, exclude: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k >= n {
        return Err(Error::invalid(format!(
            "cannot draw {k} negatives from {n} bank rows"
        )));
    }
    if exclude >= n {
        return Err(Error::invalid(format!(
            "excluded id {exclude} out of range for {n} rows"
        )));
    }
    let mut r = rng::stream(seed, &[]);
    Ok(index::sample(&mut r, n - 1, k)
        .into_iter()
        .map(|j| if j >= exclude { j + 1 } else { j })
        .collect())
}

/// `k` distinct ids in `0..n` avoiding every id in `exclude`, uniform, from `seed`.
pub fn bank_sample_negatives_excluding(
    n: usize,
    exclude: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut ex = exclude.to_vec();
    ex.sort_unstable();
    ex.dedup();
    if let Some(&bad) = ex.last().filter(|&&b| b >= n) {
        return Err(Error::invalid(format!(
            "excluded id {bad} out of range for {n} rows"
        )));
    }
    let free = n - ex.len();
    if k > free {
        return Err(Error::invalid(format!(
            "cannot draw {k} negatives from {free} bank rows outside the batch"
        )));
    }
    let mut r = rng::stream(seed, &[]);
    Ok(index::sample(&mut r, free, k)
        .into_iter()
        .map(|j| {
            // j-th id not in `ex`
            let mut id = j;
            for &e in &ex {
                if e <= id {
                    id += 1;
                } else {
                    break;
                }
            }
            id
        })
        .collect())
}

impl MemoryBank {
    pub fn new(views: usize, n: usize, c1: usize, momentum: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::tag::BANK_INIT]);
        let vs = (0..views)
            .map(|_| random_unit_rows(n, c1, &mut r))
            .collect();
        let cf = random_unit_rows(n, c1, &mut r);
        MemoryBank {
            views: vs,
            cf,
            momentum,
        }
    }

    pub fn len(&self) -> usize {
        self.cf.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.cf.shape()[1]
    }

    /// Fold post-step batch features into the banks.
    pub fn update(&mut self, ids: &[usize], h: &[Tensor], cf: &Tensor) -> Result<()> {
        if h.len() != self.views.len() {
            return Err(Error::invalid(format!(
                "{} view features for a bank with {} views",
                h.len(),
                self.views.len()
            )));
        }
        for (b, f) in self.views.iter_mut().zip(h) {
            bank_update(b, ids, f, self.momentum)?;
        }
        bank_update(&mut self.cf, ids, cf, self.momentum)
    }

    /// Draw `k` negatives outside the batch `ids` and collect the
    /// corresponding rows of every bank.
    pub fn negatives(&self, ids: &[usize], k: usize, seed: u64) -> Result<NegativeSet> {
        let c = self.dim();
        let chosen = bank_sample_negatives_excluding(self.len(), ids, k, seed)?;
        let take = |t: &Tensor| {
            let mut data = Vec::with_capacity(chosen.len() * c);
            for &j in &chosen {
                data.extend_from_slice(t.row(j));
            }
            Tensor::new(vec![chosen.len(), c], data).expect("shape")
        };
        Ok(NegativeSet::Bank {
            k,
            cf: take(&self.cf),
            views: self.views.iter().map(take).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        let e = score(&[1.0, 0.0], &[1.0, 0.0], 1.0).unwrap();
        assert!((e - std::f64::consts::E).abs() < 1e-9);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(), 1.0);
        let s = score(&[1.0, 0.0], &[-1.0, 0.0], 0.07).unwrap();
        assert!((s - (-1.0f64 / 0.07).exp()).abs() < 1e-15);
        assert!(score(&[0.0, 0.0], &[1.0, 0.0], 1.0).unwrap().is_finite());
        assert!(score(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn scores_two_one_one() {
        let l = contrastive_from_scores(2.0, &[1.0, 1.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!(contrastive_from_scores(1.0, &[]).is_err());
    }

    #[test]
    fn bank_update_examples() {
        let mut b = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let e2 = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        bank_update(&mut b, &[0], &e2, 0.5).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.data()[0] - h).abs() < 1e-9 && (b.data()[1] - h).abs() < 1e-9);
        bank_update(&mut b, &[0], &e2, 0.0).unwrap();
        assert!((b.data()[1] - 1.0).abs() < 1e-9);
        assert!(bank_update(&mut b, &[1], &e2, 0.5).is_err());
    }

    #[test]
    fn forced_negatives() {
        let mut ids = bank_sample_negatives(3, 0, 2, 7).unwrap();
        ids.sort();
        assert_eq!(ids, vec![1, 2]);
        assert!(bank_sample_negatives(3, 0, 3, 7).is_err());
        assert_eq!(
            bank_sample_negatives(50, 4, 10, 1).unwrap(),
            bank_sample_negatives(50, 4, 10, 1).unwrap()
        );
    }

    #[test]
    fn single_sample_bank_mode_is_m_ln3() {
        let mut tape = Tape::new();
        let u = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let h: Vec<Var> = (0..3).map(|_| tape.constant(u.clone())).collect();
        let cf = tape.constant(u.clone());
        let negs = NegativeSet::Bank {
            k: 2,
            cf: Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
            views: vec![Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(); 3],
        };
        let cfg = LossConfig {
            alpha: 1.0,
            beta: 0.0,
            k: 2,
            ..LossConfig::default()
        };
        let l = loco_loss(&mut tape, &h, cf, &cfg, &negs).unwrap();
        assert!((tape.scalar_value(l.total) - 3.0 * 3f64.ln()).abs() < 1e-9);
    }
}
