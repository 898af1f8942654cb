//! Minimal 64-bit neural-network toolkit with hand-written backward passes.

pub mod adam;
pub mod attention;
pub mod gradcheck;
pub mod layer_norm;
pub mod linear;
pub mod loss;
pub mod lstm;
pub mod param;
pub mod positional;
pub mod tensor;

pub use adam::Adam;
pub use attention::{scaled_dot_product_attention, MhaCache, MultiHeadAttention};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, LayerProbe, Objective};
pub use layer_norm::{layer_norm, LayerNorm, LAYER_NORM_EPS};
pub use linear::{linear, Linear};
pub use loss::{argmax, cross_entropy_sum, masked_cross_entropy, masked_cross_entropy_with_grad};
pub use lstm::Lstm;
pub use param::{GradStore, ParamId, ParamStore, Parameter};
pub use positional::positional_encoding;
pub use tensor::Tensor;
