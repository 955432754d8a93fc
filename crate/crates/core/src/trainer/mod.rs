//! Alternating critic ascent and encoder descent over minibatches, with
//! memory-bank upkeep, metrics logging and checkpoints.

mod checkpoint;
mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use checkpoint::{
    checkpoint_load, checkpoint_save, decode_checkpoint, decode_raw, encode_checkpoint, CKPT_MAGIC,
    CKPT_VERSION,
};
pub use config::{DataSource, DatasetSpec, Objective, TrainConfig};

use crate::autodiff::{OptimizerKind, OptimizerState, Tape, Var};
use crate::discrepancy::{
    critic_ascent_step_multi, gloco_loss, view_pairs, DefiningFunction, Discrepancy, DualCritic,
    MetricKind, SliceFamily,
};
use crate::encoders::{
    encode_batch, fuse_complementarity_factor, infer_features, CfNet, EncoderStack,
};
use crate::error::{Error, Result};
use crate::loco::{loco_loss, MemoryBank, NegativeSet};
use crate::rng::{self, tag};
use crate::views::{BatchSampler, MultiViewBatch, MultiViewDataset};

pub const METRICS_HEADER: &str =
    "epoch,step,loss_total,loss_loco,loss_gloco,gswd_mean_pairwise,critic_value";

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub step: u64,
    pub loss_total: f64,
    pub loss_loco: f64,
    pub loss_gloco: f64,
    pub gswd_mean_pairwise: f64,
    pub critic_value: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            self.epoch,
            self.step,
            self.loss_total,
            self.loss_loco,
            self.loss_gloco,
            self.gswd_mean_pairwise,
            self.critic_value
        )
    }
}

/// Everything a run mutates. Counters: `epoch` epochs are complete and
/// `step` batches of the current epoch are done; `global_step` counts all.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub encoders: EncoderStack,
    pub cfnet: CfNet,
    /// Persistent neural slicer (gswd/swd with the neural family).
    pub critic: Option<DefiningFunction>,
    /// One clipped critic per view pair (dual-wd).
    pub dual: Vec<DualCritic>,
    pub bank: Option<MemoryBank>,
    pub opt_omega: OptimizerState,
    pub opt_theta: OptimizerState,
    pub opt_cf: OptimizerState,
    pub opt_critic: Option<OptimizerState>,
    pub opt_dual: Vec<OptimizerState>,
    pub epoch: u64,
    pub step: u64,
    pub global_step: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig, input_dims: &[usize], samples: usize) -> Result<Self> {
        config.validate()?;
        let m = input_dims.len();
        if m < 2 && (config.objective != Objective::Loco || config.beta > 0.0) {
            return Err(Error::Config(format!(
                "{m} view(s) is too few for this objective"
            )));
        }
        let dims = config.encoder_dims();
        let mut r = rng::stream(config.seed, &[tag::INIT]);
        let encoders = EncoderStack::new(dims.clone(), input_dims, &mut r);
        let cfnet = CfNet::new(dims, m, &mut r);
        let spec = config.metric_spec();
        let critic = match (config.metric, spec.effective_family()) {
            (MetricKind::Swd | MetricKind::Gswd, SliceFamily::Neural) => {
                Some(spec.defining_function(config.c1, config.seed))
            }
            _ => None,
        };
        let dual: Vec<DualCritic> = if config.metric == MetricKind::DualWd {
            (0..view_pairs(m).len())
                .map(|k| spec.dual_critic(config.c1, rng::derive_seed(config.seed, &[k as u64])))
                .collect()
        } else {
            Vec::new()
        };
        let bank = if config.uses_bank() {
            if config.negatives + config.batch_size > samples {
                return Err(Error::Config(format!(
                    "{} bank negatives outside a batch of {} need at least that many samples, have {samples}",
                    config.negatives, config.batch_size
                )));
            }
            Some(MemoryBank::new(
                m,
                samples,
                config.c1,
                config.bank_momentum,
                config.seed,
            ))
        } else {
            None
        };
        let kind = config.optimizer;
        let opt_omega = OptimizerState::new(kind, config.lr_omega, &encoders.omega);
        let opt_theta = OptimizerState::new(kind, config.lr_theta, &encoders.theta);
        let opt_cf = OptimizerState::new(kind, config.lr_theta, &cfnet.params);
        let opt_critic = critic
            .as_ref()
            .map(|c| OptimizerState::new(kind, config.lr_critic, &c.params));
        let opt_dual = dual
            .iter()
            .map(|c| OptimizerState::new(OptimizerKind::Sgd, config.lr_critic, &c.params))
            .collect();
        Ok(TrainState {
            config,
            encoders,
            cfnet,
            critic,
            dual,
            bank,
            opt_omega,
            opt_theta,
            opt_cf,
            opt_critic,
            opt_dual,
            epoch: 0,
            step: 0,
            global_step: 0,
        })
    }

    pub fn for_dataset(config: TrainConfig, ds: &MultiViewDataset) -> Result<Self> {
        let dims: Vec<usize> = ds.specs().iter().map(|s| s.dim).collect();
        TrainState::new(config, &dims, ds.len())
    }

    /// Fingerprint of the encoder and CF parameters.
    pub fn encoder_fingerprint(&self) -> u64 {
        self.encoders.omega.fingerprint()
            ^ self.encoders.theta.fingerprint().rotate_left(21)
            ^ self.cfnet.params.fingerprint().rotate_left(42)
    }

    /// Fingerprint of every critic parameter.
    pub fn critic_fingerprint(&self) -> u64 {
        let mut f = self.critic.as_ref().map_or(0, |c| c.params.fingerprint());
        for (k, d) in self.dual.iter().enumerate() {
            f ^= d.params.fingerprint().rotate_left(k as u32 + 1);
        }
        f
    }

    fn slice_function(&self) -> Option<DefiningFunction> {
        match self.config.metric {
            MetricKind::Swd | MetricKind::Gswd if self.critic.is_none() => {
                Some(self.config.metric_spec().defining_function(
                    self.config.c1,
                    rng::derive_seed(self.config.seed, &[self.global_step]),
                ))
            }
            _ => None,
        }
    }
}

/// Loss values of one graph evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub loco: Option<Var>,
    pub gloco: Var,
    pub pairwise_mean: f64,
}

/// Build `L_LoCo + gamma * L_GloCo` (or the objective's subset) for one
/// batch on `tape`. Encoders and the CF network are attached trainable.
pub fn total_loss(
    state: &TrainState,
    tape: &mut Tape,
    batch: &MultiViewBatch,
    negs: Option<&NegativeSet>,
) -> Result<(LossParts, TapeHandles)> {
    let cfg = &state.config;
    let enc_vars = state.encoders.attach(tape, true);
    let xs: Vec<Var> = batch
        .views
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let mut pack = encode_batch(&state.encoders, tape, &enc_vars, &xs)?;
    let mut cf_vars = Vec::new();
    let loco = if cfg.uses_loco() {
        cf_vars = state.cfnet.attach(tape, true);
        let cf = fuse_complementarity_factor(&state.cfnet, tape, &cf_vars, &mut pack)?;
        let negs = negs.ok_or_else(|| Error::invalid("loco objective needs a negative set"))?;
        Some(loco_loss(tape, &pack.h, cf, &cfg.loss_config(), negs)?.total)
    } else {
        None
    };
    let sliced = state.slice_function();
    let disc = match cfg.metric {
        MetricKind::GaussianKl => Discrepancy::GaussianKl,
        MetricKind::DualWd => Discrepancy::Dual {
            critics: &state.dual,
        },
        MetricKind::Swd | MetricKind::Gswd => Discrepancy::Sliced {
            df: state
                .critic
                .as_ref()
                .or(sliced.as_ref())
                .expect("slice function"),
            p: cfg.p,
        },
    };
    let (gloco, terms) = gloco_loss(tape, &pack.h, disc)?;
    let pairwise_mean = tape.scalar_value(gloco) / terms.len() as f64;
    let total = match (cfg.objective, loco) {
        (Objective::Coco, Some(l)) => {
            let g = tape.scale(gloco, cfg.gamma);
            tape.add(l, g)?
        }
        (Objective::Loco, Some(l)) => l,
        _ => tape.scale(gloco, cfg.gamma),
    };
    Ok((
        LossParts {
            total,
            loco,
            gloco,
            pairwise_mean,
        },
        TapeHandles {
            enc: enc_vars,
            cf: cf_vars,
        },
    ))
}

/// Parameter handles of one encoder-phase graph.
#[derive(Clone, Debug)]
pub struct TapeHandles {
    pub enc: crate::encoders::EncoderVars,
    pub cf: Vec<Var>,
}

/// Phase one: `critic_steps` ascent steps on the discrepancy with the
/// encoders frozen. Returns the last estimate (mean over pairs), if any.
pub fn critic_phase(state: &mut TrainState, batch: &MultiViewBatch) -> Result<Option<f64>> {
    let s = state.config.critic_steps;
    if s == 0 || (state.critic.is_none() && state.dual.is_empty()) {
        return Ok(None);
    }
    let (hs, _) = infer_features(&state.encoders, None, &batch.views)?;
    let pairs = view_pairs(hs.len());
    let p = state.config.p;
    let mut last = None;
    if let (Some(df), Some(opt)) = (state.critic.as_mut(), state.opt_critic.as_mut()) {
        for _ in 0..s {
            last = Some(critic_ascent_step_multi(&hs, df, opt, p)? / pairs.len() as f64);
        }
    }
    if !state.dual.is_empty() {
        let mut sum = 0.0;
        for (k, &(i, j)) in pairs.iter().enumerate() {
            for _ in 0..s {
                state.dual[k].ascent_step(&hs[i], &hs[j], &mut state.opt_dual[k])?;
            }
            sum += state.dual[k].gap(&hs[i], &hs[j])?;
        }
        last = Some(sum / pairs.len() as f64);
    }
    Ok(last)
}

/// Phase two: one descent step of the encoders (and CF network) on the
/// total loss with every critic frozen.
pub fn encoder_phase(
    state: &mut TrainState,
    batch: &MultiViewBatch,
) -> Result<(f64, f64, f64, f64)> {
    let negs = if state.config.uses_loco() {
        Some(match &state.bank {
            Some(bank) => bank.negatives(
                &batch.ids,
                state.config.negatives,
                rng::derive_seed(state.config.seed, &[tag::NEGATIVES, state.global_step]),
            )?,
            None => NegativeSet::Minibatch,
        })
    } else {
        None
    };
    let mut tape = Tape::new();
    let (parts, handles) = total_loss(state, &mut tape, batch, negs.as_ref())?;
    let total = tape.scalar_value(parts.total);
    if !total.is_finite() {
        let at = tape.first_non_finite().unwrap_or_else(|| "loss".into());
        return Err(Error::NonFinite(format!(
            "step {}: first non-finite tensor is {at}",
            state.global_step + 1
        )));
    }
    let loco = parts.loco.map_or(0.0, |v| tape.scalar_value(v));
    let gloco = tape.scalar_value(parts.gloco);
    let grads = tape.backward(parts.total)?;
    state
        .encoders
        .omega
        .accumulate_grads(&handles.enc.omega, &grads);
    state
        .encoders
        .theta
        .accumulate_grads(&handles.enc.theta, &grads);
    state.opt_omega.step(&mut state.encoders.omega)?;
    state.opt_theta.step(&mut state.encoders.theta)?;
    if !handles.cf.is_empty() {
        state.cfnet.params.accumulate_grads(&handles.cf, &grads);
        state.opt_cf.step(&mut state.cfnet.params)?;
    }
    Ok((total, loco, gloco, parts.pairwise_mean))
}

/// One full step of the alternating procedure on `batch`.
pub fn train_step(state: &mut TrainState, batch: &MultiViewBatch) -> Result<MetricsRow> {
    let critic_value = critic_phase(state, batch)?;
    let (total, loco, gloco, pairwise) = encoder_phase(state, batch)?;
    if let Some(bank) = state.bank.as_mut() {
        let (hs, cf) = infer_features(&state.encoders, Some(&state.cfnet), &batch.views)?;
        bank.update(&batch.ids, &hs, &cf.expect("cf requested"))?;
    }
    state.global_step += 1;
    Ok(MetricsRow {
        epoch: state.epoch + 1,
        step: state.global_step,
        loss_total: total,
        loss_loco: loco,
        loss_gloco: gloco,
        gswd_mean_pairwise: pairwise,
        critic_value: critic_value.unwrap_or(pairwise),
    })
}

/// Drives a [`TrainState`] over a dataset in the seeded batch order.
pub struct Trainer<'a> {
    pub state: TrainState,
    pub data: &'a MultiViewDataset,
    sampler: BatchSampler,
    order: Option<(u64, Vec<Vec<usize>>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(state: TrainState, data: &'a MultiViewDataset) -> Result<Self> {
        let dims: Vec<usize> = data.specs().iter().map(|s| s.dim).collect();
        if dims != state.encoders.input_dims {
            return Err(Error::invalid(format!(
                "dataset view dims {dims:?} do not match encoder inputs {:?}",
                state.encoders.input_dims
            )));
        }
        if let Some(b) = &state.bank {
            if b.len() != data.len() {
                return Err(Error::invalid(format!(
                    "bank has {} rows, dataset {} samples",
                    b.len(),
                    data.len()
                )));
            }
        }
        let sampler = BatchSampler::new(
            data.len(),
            state.config.batch_size,
            rng::derive_seed(state.config.seed, &[tag::SHUFFLE]),
        )?;
        Ok(Trainer {
            state,
            data,
            sampler,
            order: None,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }

    /// Run the next batch; returns the metrics row and whether it closed an epoch.
    pub fn step(&mut self) -> Result<(MetricsRow, bool)> {
        let e = self.state.epoch;
        if self.order.as_ref().map(|(oe, _)| *oe) != Some(e) {
            self.order = Some((e, self.sampler.epoch(e)));
        }
        let ids = self.order.as_ref().expect("set above").1[self.state.step as usize].clone();
        let batch = self.data.batch(&ids)?;
        let row = train_step(&mut self.state, &batch)?;
        self.state.step += 1;
        let done = self.state.step as usize == self.sampler.batches_per_epoch();
        if done {
            self.state.epoch += 1;
            self.state.step = 0;
        }
        Ok((row, done))
    }
}

/// Output of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Train for the configured epochs, writing `metrics.csv` and
/// `epoch_<e>.ckpt` (`e = 0` is the initialization) into `out`.
pub fn train(config: TrainConfig, out: &Path) -> Result<TrainOutcome> {
    let data = config.dataset.load()?;
    let state = TrainState::for_dataset(config, &data)?;
    train_from(state, &data, out)
}

/// Continue `state` until its configured epoch budget is reached.
pub fn train_from(state: TrainState, data: &MultiViewDataset, out: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join("metrics.csv");
    let fresh = state.global_step == 0;
    let mut file = if fresh {
        let mut f = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
        f
    } else {
        fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?
    };
    let mut checkpoints = Vec::new();
    if fresh {
        let p = out.join("epoch_0.ckpt");
        checkpoint_save(&state, &p)?;
        checkpoints.push(p);
    }
    let epochs = state.config.epochs;
    let mut trainer = Trainer::new(state, data)?;
    let mut rows = Vec::new();
    while trainer.state.epoch < epochs {
        let (row, done) = trainer.step()?;
        writeln!(file, "{}", row.csv()).map_err(|e| Error::io(&metrics_path, e))?;
        rows.push(row);
        if done {
            let p = out.join(format!("epoch_{}.ckpt", trainer.state.epoch));
            checkpoint_save(&trainer.state, &p)?;
            checkpoints.push(p);
        }
    }
    file.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(TrainOutcome {
        state: trainer.state,
        rows,
        checkpoints,
    })
}
