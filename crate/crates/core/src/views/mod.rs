//! Multi-view datasets: synthetic latent-factor data, CIFAR-10 ingestion
//! with the RGB / L / ab split, MVDS files and seeded minibatching.

pub mod color;
pub mod dataset;
pub mod images;
pub mod synth;

pub use color::rgb_to_lab;
pub use dataset::{
    minibatches, BatchSampler, MultiViewBatch, MultiViewDataset, ViewKind, ViewSpec,
};
pub use images::{load_cifar_binary, parse_cifar_binary, split_views, ImageBatch};
pub use synth::{synth_generate, SynthSpec, ViewMap};
