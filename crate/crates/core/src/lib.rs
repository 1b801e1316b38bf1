//! Core numerics and data handling for the DINO-MX style self-supervised
//! training engine: tensors and file formats, a tiny ViT with reverse-mode
//! gradients and attention capture, multi-crop augmentation, DINO/iBOT
//! losses, LoRA and layer freezing, embedding evaluation, and attention-map
//! analysis.

pub mod attention;
pub mod augment;
pub mod eval;
pub mod graph;
pub mod head;
pub mod image;
pub mod loss;
pub mod manifest;
pub mod netpbm;
pub mod peft;
pub mod rng;
pub mod tensor;
pub mod vit;
