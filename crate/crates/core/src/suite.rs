//! Finite-difference checks of the training losses on tiny random instances:
//! the pairwise discrepancy, the complementarity-aware contrastive loss and
//! the combined objective with respect to every model parameter.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::discrepancy::{gloco_loss, DefiningFunction, Discrepancy};
use crate::error::Result;
use crate::gradcheck::{check, check_store, DEFAULT_STEP};
use crate::loco::{loco_loss, LossConfig, MemoryBank, NegativeSet, NegativeSource};
use crate::rng;
use crate::trainer::{total_loss, DatasetSpec, Objective, TrainConfig, TrainState};
use crate::views::{synth_generate, SynthSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
}

fn gaussian(n: usize, d: usize, r: &mut impl Rng) -> Tensor {
    let data = (0..n * d).map(|_| StandardNormal.sample(r)).collect();
    Tensor::new(vec![n, d], data).expect("shape")
}

fn unit_rows(n: usize, d: usize, r: &mut impl Rng) -> Tensor {
    let mut t = gaussian(n, d, r);
    for row in t.data_mut().chunks_mut(d) {
        let s = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn tiny_config(
    seed: u64,
    objective: Objective,
    negatives: NegativeSource,
    metric: crate::discrepancy::MetricKind,
) -> TrainConfig {
    TrainConfig {
        gamma: 0.7,
        slices: 4,
        metric,
        critic_hidden: vec![5],
        batch_size: 8,
        negatives: 3,
        negatives_source: negatives,
        seed,
        objective,
        dataset: DatasetSpec {
            n: 16,
            synth: SynthSpec {
                latent_dim: 3,
                view_dims: vec![4, 5, 3],
                seed,
                ..SynthSpec::default()
            },
            ..DatasetSpec::default()
        },
        c1: 4,
        c2: 3,
        h: 2,
        w: 2,
        extract_hidden: 12,
        map_hidden: 10,
        ..TrainConfig::default()
    }
}

/// Check `total_loss` against central differences for every encoder and
/// CF parameter of a freshly initialized tiny model.
pub fn objective_check(cfg: TrainConfig) -> Result<f64> {
    let data = synth_generate(&cfg.dataset.synth, cfg.dataset.n)?;
    let state = TrainState::for_dataset(cfg, &data)?;
    let ids: Vec<usize> = (0..state.config.batch_size).collect();
    let batch = data.batch(&ids)?;
    let negs = match &state.bank {
        Some(b) => Some(b.negatives(&ids, state.config.negatives, 11)?),
        None if state.config.uses_loco() => Some(NegativeSet::Minibatch),
        None => None,
    };

    let mut tape = Tape::new();
    let (parts, handles) = total_loss(&state, &mut tape, &batch, negs.as_ref())?;
    let grads = tape.backward(parts.total)?;
    let collect = |vars: &[Var]| -> Vec<Vec<f64>> {
        vars.iter()
            .map(|v| grads.get(*v).unwrap_or(&[]).to_vec())
            .collect()
    };
    let value = |s: &TrainState| -> Result<f64> {
        let mut t = Tape::new();
        let (p, _) = total_loss(s, &mut t, &batch, negs.as_ref())?;
        Ok(t.scalar_value(p.total))
    };

    let mut worst: f64 = 0.0;
    let omega = collect(&handles.enc.omega);
    worst = worst.max(check_store(
        &state.encoders.omega,
        &omega,
        DEFAULT_STEP,
        |s: &ParamStore| {
            let mut st = state.clone();
            st.encoders.omega = s.clone();
            value(&st)
        },
    )?);
    let theta = collect(&handles.enc.theta);
    worst = worst.max(check_store(
        &state.encoders.theta,
        &theta,
        DEFAULT_STEP,
        |s: &ParamStore| {
            let mut st = state.clone();
            st.encoders.theta = s.clone();
            value(&st)
        },
    )?);
    if !handles.cf.is_empty() {
        let cf = collect(&handles.cf);
        worst = worst.max(check_store(
            &state.cfnet.params,
            &cf,
            DEFAULT_STEP,
            |s: &ParamStore| {
                let mut st = state.clone();
                st.cfnet.params = s.clone();
                value(&st)
            },
        )?);
    }
    Ok(worst)
}

/// Run every check; each entry reports its worst relative error.
pub fn loss_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    use crate::discrepancy::MetricKind;
    let mut out = Vec::new();
    let mut push = |name: &str, e: f64| {
        out.push(SuiteEntry {
            name: name.to_string(),
            max_rel_err: e,
        })
    };
    let mut r = rng::stream(seed, &[]);
    let (n, c1, m) = (6, 3, 3);

    let hs: Vec<Tensor> = (0..m).map(|_| gaussian(n, c1, &mut r)).collect();
    let linear = DefiningFunction::sample_linear(c1, 5, &mut r);
    let odd = DefiningFunction::sample_odd_poly(c1, 5, &mut r);
    let neural = DefiningFunction::neural(c1, &[6], 5, &mut r);
    for (name, df, p) in [
        ("gloco/swd p=1 embeddings", &linear, 1.0),
        ("gloco/swd p=2 embeddings", &linear, 2.0),
        ("gloco/odd-poly embeddings", &odd, 1.0),
        ("gloco/neural embeddings", &neural, 1.0),
    ] {
        let rep = check(&hs, DEFAULT_STEP, |t, v| {
            Ok(gloco_loss(t, v, Discrepancy::Sliced { df, p })?.0)
        })?;
        push(name, rep.max_rel_err);
    }
    let kl_in: Vec<Tensor> = (0..m).map(|_| gaussian(8, c1, &mut r)).collect();
    push(
        "gloco/kl embeddings",
        check(&kl_in, DEFAULT_STEP, |t, v| {
            Ok(gloco_loss(t, v, Discrepancy::GaussianKl)?.0)
        })?
        .max_rel_err,
    );

    // critic parameters through the sliced distance
    let mut tape = Tape::new();
    let vars = neural.attach(&mut tape, true);
    let xs: Vec<Var> = hs.iter().map(|h| tape.constant(h.clone())).collect();
    let (total, _) = gloco_loss_with_vars(&mut tape, &neural, &vars, &xs)?;
    let grads = tape.backward(total)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| grads.get(*v).unwrap_or(&[]).to_vec())
        .collect();
    push(
        "gloco/neural critic parameters",
        check_store(&neural.params, &analytic, DEFAULT_STEP, |s| {
            let mut df = neural.clone();
            df.params = s.clone();
            let mut t = Tape::new();
            let v = df.attach(&mut t, false);
            let x: Vec<Var> = hs.iter().map(|h| t.constant(h.clone())).collect();
            let (tot, _) = gloco_loss_with_vars(&mut t, &df, &v, &x)?;
            Ok(t.scalar_value(tot))
        })?,
    );

    let cfg = LossConfig {
        alpha: 0.8,
        beta: 0.6,
        tau: 0.5,
        negatives: NegativeSource::Minibatch,
        k: 2,
    };
    let mut loco_in: Vec<Tensor> = (0..m).map(|_| unit_rows(n, c1, &mut r)).collect();
    loco_in.push(unit_rows(n, c1, &mut r));
    let rep = check(&loco_in, DEFAULT_STEP, |t, v| {
        Ok(loco_loss(t, &v[..m], v[m], &cfg, &NegativeSet::Minibatch)?.total)
    })?;
    push("loco/minibatch embeddings", rep.max_rel_err);

    let bank = MemoryBank::new(m, 20, c1, 0.5, seed);
    let ids: Vec<usize> = (0..n).collect();
    let negs = bank.negatives(&ids, 4, seed)?;
    let bank_cfg = LossConfig {
        negatives: NegativeSource::Bank,
        k: 4,
        ..cfg.clone()
    };
    let rep = check(&loco_in, DEFAULT_STEP, |t, v| {
        Ok(loco_loss(t, &v[..m], v[m], &bank_cfg, &negs)?.total)
    })?;
    push("loco/bank embeddings", rep.max_rel_err);

    push(
        "coco/minibatch parameters",
        objective_check(tiny_config(
            seed,
            Objective::Coco,
            NegativeSource::Minibatch,
            MetricKind::Gswd,
        ))?,
    );
    push(
        "coco/bank parameters",
        objective_check(tiny_config(
            seed,
            Objective::Coco,
            NegativeSource::Bank,
            MetricKind::Swd,
        ))?,
    );
    push(
        "coco/kl parameters",
        objective_check(tiny_config(
            seed,
            Objective::Coco,
            NegativeSource::Minibatch,
            MetricKind::GaussianKl,
        ))?,
    );
    Ok(out)
}

fn gloco_loss_with_vars(
    tape: &mut Tape,
    df: &DefiningFunction,
    vars: &[Var],
    hs: &[Var],
) -> Result<(Var, Vec<Var>)> {
    let mut terms = Vec::new();
    for (i, j) in crate::discrepancy::view_pairs(hs.len()) {
        terms.push(crate::discrepancy::gswd_tape(
            tape, df, vars, hs[i], hs[j], 1.0,
        )?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok((total, terms))
}
