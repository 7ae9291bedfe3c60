use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("patch exceeds image: patch {patch_h}x{patch_w}, image {image_h}x{image_w}")]
    PatchExceedsImage {
        patch_h: usize,
        patch_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("degenerate stride: overlap {overlap} >= patch {patch}")]
    DegenerateStride { overlap: usize, patch: usize },
    #[error("rect {rect:?} out of bounds for {h}x{w} frame")]
    OutOfBounds {
        rect: (usize, usize, usize, usize),
        h: usize,
        w: usize,
    },
    #[error("zero-sized frame")]
    ZeroFrame,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tap frame under-resolved: stage {stage} tap is {h}x{w}")]
    TapUnderResolved { stage: usize, h: usize, w: usize },
    #[error("incomplete patch cover: {0}")]
    IncompletePatchCover(String),
    #[error("invalid class index {index} (num classes {classes})")]
    InvalidClass { index: usize, classes: usize },
    #[error("non-finite logits")]
    NonFinite,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-binary mask value {0}")]
    NonBinary(u8),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("mode {mode} is not supported by a model trained to {phase}")]
    ModeMismatch {
        mode: &'static str,
        phase: &'static str,
    },
    #[error("canvas {canvas} smaller than patch {patch}")]
    CanvasTooSmall { canvas: usize, patch: usize },
}
