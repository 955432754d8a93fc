//! Frozen-feature evaluation: softmax probes, macro-F1 and L1 retrieval.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{OptimizerKind, OptimizerState, ParamStore, Tape, Tensor};
use crate::encoders::{infer_features, EncoderStack, Mlp};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::views::MultiViewDataset;

const EXTRACT_CHUNK: usize = 256;

/// Concatenated `h^m` of every sample, in view order: `[N, M*C1]`.
pub fn extract_features(encoders: &EncoderStack, data: &MultiViewDataset) -> Result<Tensor> {
    let dims: Vec<usize> = data.specs().iter().map(|s| s.dim).collect();
    if dims != encoders.input_dims {
        return Err(Error::invalid(format!(
            "dataset view dims {dims:?} do not match encoder inputs {:?}",
            encoders.input_dims
        )));
    }
    let n = data.len();
    let c1 = encoders.dims.c1;
    let m = encoders.num_views();
    let width = m * c1;
    let mut out = Vec::with_capacity(n * width);
    let ids: Vec<usize> = (0..n).collect();
    for chunk in ids.chunks(EXTRACT_CHUNK) {
        let batch = data.batch(chunk)?;
        let (hs, _) = infer_features(encoders, None, &batch.views)?;
        for r in 0..chunk.len() {
            for h in &hs {
                out.extend_from_slice(h.row(r));
            }
        }
    }
    Tensor::new(vec![n, width], out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    #[default]
    Linear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Trailing epochs whose test scores are averaged.
    pub window: usize,
    pub hidden: usize,
    /// Z-score each feature with train-split statistics before fitting.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            kind: ProbeKind::Linear,
            epochs: 30,
            lr: 0.1,
            batch_size: 64,
            window: 10,
            hidden: 64,
            standardize: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub config: ProbeConfig,
}

/// Per-class F1 over `classes` labels and their mean over classes that occur
/// in `truth` or `pred`.
pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let mut per = vec![0.0; classes];
    let mut sum = 0.0;
    let mut seen = 0;
    for c in 0..classes {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom == 0 {
            continue;
        }
        per[c] = 2.0 * tp[c] as f64 / denom as f64;
        sum += per[c];
        seen += 1;
    }
    (if seen == 0 { 0.0 } else { sum / seen as f64 }, per)
}

/// Train a softmax probe on a seeded 80% split and score the other 20%,
/// averaging accuracy and macro-F1 over the last `window` epochs.
pub fn probe_train_eval(
    features: &Tensor,
    labels: &[u32],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::Shape {
            op: "probe",
            lhs: features.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if cfg.window == 0 || cfg.window > cfg.epochs {
        return Err(Error::Config(format!(
            "window {} must lie in 1..={}",
            cfg.window, cfg.epochs
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("probe batch_size must be positive".into()));
    }
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let distinct = {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(Error::invalid("probe needs at least two classes"));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[tag::PROBE]));
    let n_train = (n * 4) / 5;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "{n} samples are too few for an 80/20 split"
        )));
    }
    let (train_ids, test_ids) = order.split_at(n_train);

    let mut store = ParamStore::new();
    let mut init = rng::stream(cfg.seed, &[tag::PROBE, tag::INIT]);
    let widths = match cfg.kind {
        ProbeKind::Linear => vec![d, classes],
        ProbeKind::Mlp => vec![d, cfg.hidden, classes],
    };
    let net = Mlp::new(&mut store, "probe", &widths, false, &mut init);
    let mut opt = OptimizerState::new(OptimizerKind::Sgd, cfg.lr, &store);

    let (shift, scale) = if cfg.standardize {
        standardizer(features, train_ids)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let rows = |ids: &[usize]| {
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend(
                features
                    .row(i)
                    .iter()
                    .zip(&shift)
                    .zip(&scale)
                    .map(|((x, m), s)| (x - m) / s),
            );
        }
        Tensor::new(vec![ids.len(), d], data).expect("shape")
    };
    let x_test = rows(test_ids);
    let y_test: Vec<usize> = test_ids.iter().map(|&i| labels[i] as usize).collect();

    let mut acc_hist = Vec::new();
    let mut f1_hist = Vec::new();
    let mut per_hist: Vec<Vec<f64>> = Vec::new();
    let mut shuffle = rng::stream(cfg.seed, &[tag::PROBE, tag::SHUFFLE]);
    let mut train_order = train_ids.to_vec();
    for _ in 0..cfg.epochs {
        train_order.shuffle(&mut shuffle);
        for chunk in train_order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = store.attach(&mut tape, true);
            let x = tape.constant(rows(chunk));
            let logits = net.forward(&mut tape, &vars, x)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i] as usize).collect();
            let ce = tape.softmax_cross_entropy(logits, &targets)?;
            let loss = tape.mean(ce, None)?;
            let grads = tape.backward(loss)?;
            store.accumulate_grads(&vars, &grads);
            opt.step(&mut store)?;
        }
        let mut tape = Tape::new();
        let vars = store.attach(&mut tape, false);
        let x = tape.constant(x_test.clone());
        let logits = net.forward(&mut tape, &vars, x)?;
        let lv = tape.data(logits);
        let pred: Vec<usize> = lv
            .chunks(classes)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |b, (c, &v)| if v > b.1 { (c, v) } else { b },
                    )
                    .0
            })
            .collect();
        let correct = pred.iter().zip(&y_test).filter(|(p, t)| p == t).count();
        acc_hist.push(correct as f64 / y_test.len() as f64);
        let (mf1, per) = macro_f1(&pred, &y_test, classes);
        f1_hist.push(mf1);
        per_hist.push(per);
    }
    let w = cfg.window;
    let tail = |v: &[f64]| v[v.len() - w..].iter().sum::<f64>() / w as f64;
    let per_class_f1 = (0..classes)
        .map(|c| {
            per_hist[per_hist.len() - w..]
                .iter()
                .map(|p| p[c])
                .sum::<f64>()
                / w as f64
        })
        .collect();
    Ok(ProbeReport {
        accuracy: tail(&acc_hist),
        macro_f1: tail(&f1_hist),
        per_class_f1,
        config: cfg.clone(),
    })
}

/// Per-column mean and standard deviation over `ids`; constant columns get scale 1.
fn standardizer(features: &Tensor, ids: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = features.shape()[1];
    let n = ids.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in ids {
        mean.iter_mut()
            .zip(features.row(i))
            .for_each(|(m, x)| *m += x / n);
    }
    let mut var = vec![0.0; d];
    for &i in ids {
        var.iter_mut()
            .zip(features.row(i))
            .zip(&mean)
            .for_each(|((v, x), m)| *v += (x - m).powi(2) / n);
    }
    let scale = var
        .into_iter()
        .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, scale)
}

/// The `k` nearest neighbours of each query under L1 distance, excluding
/// the query itself; ties go to the smaller id.
pub fn knn_retrieve(features: &Tensor, queries: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if features.rank() != 2 {
        return Err(Error::invalid("knn needs an [N, D] feature matrix"));
    }
    let n = features.shape()[0];
    if k >= n {
        return Err(Error::invalid(format!("k = {k} must be below N = {n}")));
    }
    queries
        .iter()
        .map(|&q| {
            if q >= n {
                return Err(Error::invalid(format!("query id {q} out of range")));
            }
            let fq = features.row(q);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != q)
                .map(|j| {
                    (
                        features
                            .row(j)
                            .iter()
                            .zip(fq)
                            .map(|(a, b)| (a - b).abs())
                            .sum(),
                        j,
                    )
                })
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            Ok(cand.into_iter().take(k).map(|(_, j)| j).collect())
        })
        .collect()
}
