//! Dense linear algebra and seeded sampling primitives.

pub mod counter;
mod eigen;
mod mat;
mod rng;
mod sample;

pub use counter::OpCounts;
pub use eigen::{symmetric_eigen, symmetric_spectral_norm, top_singular, topr_svd_left};
pub use mat::{col_norms, matmul, row_norms, topk_indices, Mat};
pub use rng::RngState;
pub use sample::{gaussian_fill, sample_multinomial, uniform_index, validate_probabilities};
