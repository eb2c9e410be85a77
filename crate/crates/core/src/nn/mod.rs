//! The fixed layer kit the alignment model is assembled from: dense matrices,
//! Linear/BatchNorm/ReLU/Dropout with exact backward passes, the two losses,
//! Adam, the plateau schedule and a finite-difference gradient checker.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod matrix;
pub mod optim;

pub use layers::{
    affine, affine_backward, batch_norm, batch_norm_backward, batch_norm_forward, dropout,
    ff_block, ff_block_backward, ff_block_forward, relu, relu_backward, AffineParams, BatchNormState, BlockGrads,
    FFBlockCache, FFBlockParams, Mode,
};
pub use loss::{mean_squared_error, softmax_cross_entropy};
pub use matrix::{Matrix, Real};
pub use optim::{plateau_lr, Adam, AdamConfig, ParamSlot, PlateauScheduler};
