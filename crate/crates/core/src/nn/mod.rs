pub mod conv;
pub mod tape;
pub mod tensor;

pub use conv::ConvShape;
pub use tape::{LayerGrad, Layers, NodeId, Tape};
pub use tensor::Tensor;
