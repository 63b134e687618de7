//! Image restoration with an unrolled Chambolle-Pock network.
//!
//! Each network layer is one primal-dual iteration for
//! `1/2 |A x - z|^2 + |L x|_1` with its own learnable step sizes and analysis
//! operator `L`. Gradients are computed analytically layer by layer.
//!
//! Module map:
//! - [`linops`]: circulant blur operators and their FFT resolvents
//! - [`prox`]: l1 proximity operators and their derivatives
//! - [`cpsolver`]: the classical Chambolle-Pock solver
//! - [`pdnet`]: network parameters and forward pass
//! - [`backprop`]: analytic backward pass
//! - [`gradcheck`]: finite-difference verification of the backward pass
//! - [`trainer`]: mini-batch ADAM / SGD training
//! - [`imaging`]: degradation, patches, sliding-window restoration, PSNR
//! - [`io`]: checkpoints, patch sets and config files

pub mod backprop;
pub mod cpsolver;
mod error;
pub mod gradcheck;
pub mod imaging;
pub mod io;
pub mod linops;
pub mod pdnet;
pub mod prox;
pub mod trainer;

pub use error::{Error, Result};

pub use backprop::{layer_backward, loss_and_grad, network_backward, Adjoint, LayerGrads, ParamGrads};
pub use cpsolver::{cp_iterate, cp_solve, objective, CpProblem, CpSettings, CpSolution, CpState};
pub use gradcheck::{run_trials, CaseConfig, GradCheckReport, GradCheckSettings, ParamKind};
pub use imaging::{psnr, restore, Blur, DegradationSpec, ImageTensor, PatchPairSet, Stitching};
pub use linops::{CirculantOp, Resolvent};
pub use pdnet::{
    build_feature_operator, layer_forward, network_forward, FeatureBlock, FeatureDesign, LayerCache, LayerParams,
    NetworkParams, Position,
};
pub use prox::{dprox_dsigma, prox_l1, prox_l1_conjugate, subgrad_r, ProxFamily};
pub use trainer::{train, train_from, TrainConfig, TrainOutcome, TrainReport, TrainState};
