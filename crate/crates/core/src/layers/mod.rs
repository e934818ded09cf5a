//! The five primitive layers the series networks are built from.

pub mod add;
pub mod batch_norm;
pub mod conv;
pub mod head;
pub mod relu;

pub use add::{add_backward, add_forward};
pub use batch_norm::{BnCache, BnParams};
pub use conv::{ConvParams, ConvSpec};
pub use head::{HeadCache, HeadParams};
pub use relu::{relu_backward, relu_forward};
