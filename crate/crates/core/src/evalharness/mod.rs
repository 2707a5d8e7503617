//! Rollouts of trained surrogates and the metrics used to score them.

mod metrics;
mod output;
mod rollout;

pub use metrics::{
    enstrophy_graph, enstrophy_l2, global_moments, hann, nrmse, nrmse_batched, profile_l2, profile_moments, shell_of,
    vorticity_fd, EnstrophyGraph, ProfileMoments, Window, SKEW_SIGMA_MIN,
};
pub use output::{write_metrics_csv, write_pgm_slice, write_series_csv, MetricRow};
pub use rollout::{RolloutStrategy, Surrogate};
