//! Surrogate modeling of 1-D linear wave propagation with a compact
//! convolutional recurrent autoencoder, trained under a loss that separates
//! dissipation (amplitude) from dispersion (phase) error.
//!
//! The crate provides:
//! - exact advection datasets over a family of wave speeds ([`pde`]),
//! - the MSE decomposition and composite loss with exact gradients
//!   ([`decomp`]),
//! - a small tape-based reverse-mode autodiff engine ([`autodiff`]),
//! - the autoencoder + attention seq2seq propagator ([`model`]),
//! - training with AdamW, cosine warm restarts, early stopping and a
//!   successive-halving weight sweep ([`train`]),
//! - long-horizon rollout evaluation with a phase-lag diagnostic ([`eval`]).

pub mod autodiff;
pub mod decomp;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod pde;
pub mod train;

pub use autodiff::{Parameter, Tape, Tensor, Var};
pub use decomp::{
    composite_loss, decompose, decompose_batched, decompose_gradient, signal_stats,
    ErrorDecomposition, LossWeights, SignalStats,
};
pub use error::{Error, Result};
pub use eval::{
    compare_models, evaluate_rollout, phase_lag, pointwise_error, ComparisonTable, Forecaster,
    RolloutReport,
};
pub use model::{load_model, save_model, AbcranModel, ArchConfig};
pub use pde::{
    exact_solution, generate_dataset, make_parameter_grid, read_dataset, write_dataset, GridSpec,
    InitialProfile, ParameterGrid, WaveDataset,
};
pub use train::{
    add_noise, adamw_step, cosine_warm_restart_lr, denoising_decoder_loss, fit, propagator_loss,
    sweep_alpha_beta, AdamWState, LossMode, SweepOutcome, TrainConfig, TrainReport,
};
