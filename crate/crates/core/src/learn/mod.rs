//! Supervised group-structured dictionary learning with non-negative
//! coefficients.

pub mod atom;
pub mod init;
pub mod train;

pub use atom::{
    leading_singular_pair, optimal_sign, thresholded, update_atom_alternating,
    update_atom_simultaneous, AtomUpdateResult, ResidualWorkspace, Sign,
};
pub use init::{random_sample_init, svd_init, InitMethod, InitOutput};
pub use train::{
    check_invariants, coefficient_stage, objective, train, train_from, train_minibatch, train_with_hook,
    EpochHook, StageKind, StageRecord, TrainConfig, TrainOutput, TrainReport, UpdateMode,
};
