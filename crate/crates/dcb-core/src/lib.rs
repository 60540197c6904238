//! Dynamic covariate balancing for treatment histories in panel data.
//!
//! Estimates mean potential outcomes `mu(d_{1:T})` and treatment-history
//! contrasts under sequential ignorability by combining recursive penalized
//! outcome projections with per-period minimum-norm balancing weights, plus
//! chi-squared-calibrated confidence intervals, reference estimators
//! (stabilized IPW, AIPW, naive Lasso, sequential estimation), and a Monte
//! Carlo harness for the simulation designs.

pub mod error;
pub mod exec;
pub mod panel;
pub mod stats;

pub mod lasso;
pub mod logistic;
pub mod path;

pub mod balance;
pub mod qp;

pub mod competitors;
pub mod estimator;
pub mod sim;

pub use error::{DcbError, Result};
pub use panel::{
    build_history, load_panel, match_mask, ColumnSchema, HistoryMatrix, HistoryOpts,
    PanelDataset, TreatmentHistory,
};
