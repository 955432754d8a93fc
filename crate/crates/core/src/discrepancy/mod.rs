pub mod dual;
pub mod gloco;
pub mod kl;
pub mod ot;
pub mod slicing;

pub use dual::{dual_wd, DualCritic, DEFAULT_CLIP};
pub use gloco::{gloco_loss, metric_value, view_pairs, Discrepancy, MetricKind, MetricSpec};
pub use kl::{gaussian_kl, gaussian_kl_tape, VARIANCE_FLOOR};
pub use ot::{
    argsort, ot_oracle_exact, wasserstein_1d, wasserstein_1d_columns, wasserstein_1d_pow,
    wasserstein_1d_pow_columns, CouplingProblem, OtSolution, ORACLE_MAX_N,
};
pub use slicing::{
    critic_ascent_step, critic_ascent_step_multi, cubic_monomials, gswd, gswd_tape, swd,
    DefiningFunction, SliceFamily,
};
