//! File formats: NIfTI-1 images, FSL gradient tables, and the model container.

pub mod gradients;
pub mod model;
pub mod nifti;

pub use gradients::{format_gradients, parse_gradients, read_gradients, read_gradients_scaled, write_gradients};
pub use nifti::{encode_nifti, parse_nifti, read_nifti, write_nifti, NiftiDtype};
pub use model::{MODEL_VERSION, decode_model, decode_model_into, encode_model, load_model, load_model_into, save_model};
