//! Linear layers with a fused projected backward, LoRA adaptors and small
//! MLPs for desk-scale training.

mod checkpoint;
mod linear;
mod lora;
mod tiny;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, model_entries, restore_model, save_checkpoint,
    CHECKPOINT_HEADER,
};
pub use linear::{LinearLayer, Side};
pub use lora::{LoRALayer, LoraGrads};
pub use tiny::{Layer, LossHead, Targets, TinyModel};
