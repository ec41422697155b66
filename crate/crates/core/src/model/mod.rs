//! Two-modality transformer with per-layer prompt tokens.

mod checkpoint;
mod config;
mod forward;
mod mask;
mod weights;

pub use checkpoint::{from_tensor_file, load_checkpoint, save_checkpoint, to_tensor_file};
pub use config::{EncoderConfig, Modality, ModelConfig};
pub use forward::{
    argmax, transformer_block, Binding, BoundBlock, BoundEncoder, BoundHead, BoundJoint, BoundModel, EncoderOutput,
    JointOutput, SampleFeatures,
};
pub use mask::{mask_indices, mask_tokens, MaskSpec};
pub use weights::{BlockWeights, EncoderWeights, HeadWeights, JointWeights, ModelBundle, PromptSet};
