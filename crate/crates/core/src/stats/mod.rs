//! Feature moments, the layer-wise discrepancy, and covariance-estimation error analysis.

mod covariance;
mod moments;

pub use covariance::{
    cholesky_psd, entry_variance, sample_covariance, theorem1_closed_form, theorem1_monte_carlo, CovEstimate,
    MonteCarloReport, PSD_TOL,
};
pub use moments::{
    batch_disc, batch_stats, batch_stats_on_tape, disc, disc_on_tape, precompute_source_bank, stack_rows, BatchFeatures,
    LayerGaussianStats, SourceStatsBank,
};
