//! Fixed token layout shared by the generators, the model and checkpoints.

pub const VOCAB_SIZE: usize = 64;

pub const PLUS: usize = 10;
pub const PAD: usize = 11;
pub const ANSWER_SLOT: usize = 12;
pub const Q_SHAPEOF: usize = 13;
pub const Q_MAJORITY: usize = 14;

pub const NUM_COLORS: usize = 8;
pub const NUM_SHAPES: usize = 8;

/// Width of one synthetic patch feature: one-hot color followed by one-hot shape.
pub const PATCH_DIM: usize = NUM_COLORS + NUM_SHAPES;
/// Patches per image.
pub const PATCHES: usize = 16;

pub fn digit(d: usize) -> usize {
    debug_assert!(d < 10);
    d
}

pub fn color(c: usize) -> usize {
    debug_assert!(c < NUM_COLORS);
    15 + c
}

pub fn shape(s: usize) -> usize {
    debug_assert!(s < NUM_SHAPES);
    23 + s
}
