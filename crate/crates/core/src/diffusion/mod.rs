//! Training-free score-based diffusion sampling.

pub mod data;
pub mod flow;
pub mod schedule;
pub mod score;

pub use data::{BoxPrior, DatasetMeta, LabeledSet, PriorDataset};
pub use flow::{
    generate_labels, reverse_ode_solve, sample_marginal_one, sample_marginal_y, AtomScaling,
};
pub use schedule::{DiffusionSchedule, ScheduleCoeffs};
pub use score::{
    mc_score, mc_weights, prune_atoms, FnScore, LikelihoodWeighting, MixtureScore, ScoreField,
    PRUNE_LOG_GAP,
};
