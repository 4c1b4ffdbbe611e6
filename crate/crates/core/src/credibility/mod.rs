//! Platform credibility: how closely a fusion-test trajectory reproduces a
//! real-world one.
//!
//! Pipeline: extract per-vehicle (x, y, speed, accel) channels from both
//! logs, align them jointly with DTW, reduce both warped matrices onto the
//! first principal component of a shared basis, then compare the two
//! component series with PCC, RMSE, TIC, cross fuzzy entropy and the cosine
//! similarity of their power spectra.

pub mod assess;
pub mod dtw;
pub mod metrics;
pub mod pca;

use thiserror::Error;

pub use assess::{
    assess, assess_matrices, extract_series, perturb_log, recommend_mix, render_table, CredibilityConfig,
    CredibilityReport, Mix, MixRecommendation, SeriesMatrix, Verdict,
};
pub use dtw::{dtw_align, dtw_align_rows, warp, DtwResult};
pub use metrics::{cross_fuzzy_en, cs_psd, pcc, rmse, standardize, tic};
pub use pca::{pca_reduce, Pca};

#[derive(Debug, Error, PartialEq)]
pub enum CredibilityError {
    #[error("empty series")]
    Empty,
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("series too short: need {need}, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("zero variance; correlation undefined")]
    ZeroVariance,
    #[error("zero power spectrum; similarity undefined")]
    ZeroSpectrum,
    #[error("matrix has zero variance in every column")]
    Degenerate,
    #[error("rows have different widths")]
    Ragged,
    #[error("cannot keep {k} components of {columns} columns")]
    BadComponentCount { k: usize, columns: usize },
    #[error("invalid metric parameter")]
    BadParameter,
    #[error("logs come from different scenarios ({0} vs {1})")]
    ScenarioMismatch(String, String),
    #[error("no vehicle is present throughout both logs")]
    NoCommonVehicles,
}
