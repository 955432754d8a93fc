use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerKind;
use crate::discrepancy::{MetricKind, MetricSpec, SliceFamily, DEFAULT_CLIP};
use crate::encoders::EncoderDims;
use crate::error::{Error, Result};
use crate::loco::{LossConfig, NegativeSource};
use crate::views::{load_cifar_binary, split_views, synth_generate, MultiViewDataset, SynthSpec};

/// Which loss terms drive the encoders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// `L_LoCo + gamma * L_GloCo`
    #[default]
    Coco,
    /// `L_LoCo` alone; the discrepancy is only logged.
    Loco,
    /// `gamma * L_GloCo` alone.
    Gloco,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synth,
    Mvds,
    Cifar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// File for `mvds` and `cifar` sources.
    pub path: Option<PathBuf>,
    /// Sample count for `synth`; for `cifar`, keep only the first `n` images (0 keeps all).
    pub n: usize,
    pub synth: SynthSpec,
    /// Scale L and ab views to O(1) for `cifar`.
    pub normalize: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DataSource::Synth,
            path: None,
            n: 1000,
            synth: SynthSpec::default(),
            normalize: true,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<MultiViewDataset> {
        let path = || {
            self.path.clone().ok_or_else(|| {
                Error::Config(format!("dataset source {:?} needs a path", self.source))
            })
        };
        match self.source {
            DataSource::Synth => synth_generate(&self.synth, self.n),
            DataSource::Mvds => MultiViewDataset::load_mvds(&path()?),
            DataSource::Cifar => {
                let mut images = load_cifar_binary(&path()?)?;
                if self.n > 0 && self.n < images.count {
                    images.count = self.n;
                    images
                        .data
                        .truncate(self.n * images.pixels() * images.channels);
                    if let Some(l) = images.labels.as_mut() {
                        l.truncate(self.n);
                    }
                }
                split_views(&images, self.normalize)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub p: f64,
    pub slices: usize,
    pub metric: MetricKind,
    pub family: SliceFamily,
    pub critic_steps: usize,
    pub critic_hidden: Vec<usize>,
    pub clip: f64,
    pub batch_size: usize,
    pub lr_omega: f64,
    pub lr_theta: f64,
    pub lr_critic: f64,
    pub optimizer: OptimizerKind,
    pub epochs: u64,
    /// Negatives per sample in bank mode.
    pub negatives: usize,
    pub negatives_source: NegativeSource,
    pub bank_momentum: f64,
    pub seed: u64,
    pub objective: Objective,
    pub dataset: DatasetSpec,
    pub c1: usize,
    pub c2: usize,
    pub h: usize,
    pub w: usize,
    pub extract_hidden: usize,
    pub map_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 0.5,
            gamma: 1e-4,
            tau: 0.07,
            p: 1.0,
            slices: 64,
            metric: MetricKind::Gswd,
            family: SliceFamily::Neural,
            critic_steps: 5,
            critic_hidden: vec![64],
            clip: DEFAULT_CLIP,
            batch_size: 128,
            lr_omega: 0.03,
            lr_theta: 0.03,
            lr_critic: 1e-3,
            optimizer: OptimizerKind::Sgd,
            epochs: 20,
            negatives: 256,
            negatives_source: NegativeSource::Bank,
            bank_momentum: 0.5,
            seed: 0,
            objective: Objective::Coco,
            dataset: DatasetSpec::default(),
            c1: 64,
            c2: 32,
            h: 4,
            w: 4,
            extract_hidden: 128,
            map_hidden: 128,
        }
    }
}

impl TrainConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn uses_loco(&self) -> bool {
        self.objective != Objective::Gloco
    }

    pub fn uses_bank(&self) -> bool {
        self.uses_loco() && self.negatives_source == NegativeSource::Bank
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            c1: self.c1,
            c2: self.c2,
            h: self.h,
            w: self.w,
            extract_hidden: self.extract_hidden,
            map_hidden: self.map_hidden,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            negatives: self.negatives_source,
            k: self.negatives,
        }
    }

    pub fn metric_spec(&self) -> MetricSpec {
        MetricSpec {
            kind: self.metric,
            p: self.p,
            slices: self.slices,
            family: self.family,
            critic_steps: self.critic_steps,
            critic_lr: self.lr_critic,
            clip: self.clip,
            critic_hidden: self.critic_hidden.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr_omega", self.lr_omega)?;
        positive("lr_theta", self.lr_theta)?;
        positive("lr_critic", self.lr_critic)?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be nonnegative, got {}",
                self.gamma
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return Err(Error::Config(format!(
                "bank_momentum must lie in [0, 1], got {}",
                self.bank_momentum
            )));
        }
        if [
            self.c1,
            self.c2,
            self.h,
            self.w,
            self.extract_hidden,
            self.map_hidden,
        ]
        .contains(&0)
        {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.uses_loco() {
            self.loss_config().validate()?;
        }
        self.metric_spec().validate()
    }
}
