//! Rate-based BCPNN: hypercolumn-structured layers trained with a local
//! Hebbian/Bayesian rule, batched two-phase training (unsupervised hidden
//! layer, then a supervised read-out), structural plasticity over the
//! input→hidden connectivity, an in-process data-parallel batch reducer,
//! and software-emulated reduced-precision arithmetic.

pub mod cli;
pub mod data;
pub mod kernels;
pub mod mat;
pub mod model;
pub mod plasticity;
pub mod precision;
pub mod trainer;

pub use data::{load_idx, make_synthetic_clusters, DataError, Dataset, Encoding};
pub use kernels::{mac_count, reset_mac_count, KernelError, Moments, EPS_TRACE};
pub use mat::Mat;
pub use model::{
    AnyNetwork, HypercolumnGeometry, LayerPairState, ModelError, Network, NetworkBuilder,
    TrainConfig,
};
pub use plasticity::{ConnectivityMask, PlasticityError};
pub use precision::{ArithMode, EmArith, F32Arith, F64Arith, FloatFormat, ScalarArith};
pub use trainer::{
    estimate_cost, evaluate, fit_hidden, fit_hidden_with, fit_output, fit_output_with,
    predict_batch, EpochStats, TrainReport, TrainerError, WorkerPool,
};
