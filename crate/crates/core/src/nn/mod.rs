//! A from-scratch 3D residual convolutional denoiser with analytic
//! gradients, Adam training and tiled inference.

pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod infer;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv3d_backward, conv3d_forward, ConvShape};
pub use infer::{denoise_tensor, denoise_volume, TileConfig};
pub use loss::l1_loss_masked;
pub use model::{build_model, conv_weight_count, DenoiserModel, Network};
pub use tensor::{Scalar, Tensor5};
pub use train::{train, write_history_csv, EpochRecord, TrainConfig, TrainOutcome};

use crate::error::Result;
use crate::volume::Volume4D;

/// A 4D volume as a one-item batch: volumes become channels.
pub fn tensor_from_volume<T: Scalar>(vol: &Volume4D) -> Tensor5<T> {
    let [nx, ny, nz, nv] = vol.dims();
    Tensor5::from_vec([1, nv, nz, ny, nx], vol.data().iter().map(|&v| T::of(v)).collect())
        .expect("volume layout matches tensor layout")
}

/// Inverse of [`tensor_from_volume`] for a one-item batch.
pub fn volume_from_tensor<T: Scalar>(t: &Tensor5<T>) -> Result<Volume4D> {
    let [n, c, nz, ny, nx] = t.shape();
    if n != 1 {
        return Err(crate::Error::Shape(format!("expected batch of 1, got {n}")));
    }
    Volume4D::new([nx, ny, nz, c], t.data().iter().map(|v| v.f64()).collect())
}
