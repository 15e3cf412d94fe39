//! Feed-forward regressors from normalized ΔRSS to (x, y).

mod gemm;
pub mod io;
pub mod model;
pub mod train;

pub use io::{load_weights, save_weights};
pub use model::{
    build_model, mae_loss, param_count, param_count_of, Architecture, LayerDef, LayerKind,
    ModelSpec, ModelWeights, TrainHistory,
};
pub use train::{sample_mae, samples, train, train_samples, Sample, TrainConfig};
