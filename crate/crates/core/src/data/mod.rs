//! Synthetic bimodal tasks, datasets and padded batches.

mod batch;
mod dataset;
pub mod synth;
pub mod vocab;

pub use batch::{Batch, Modality, SequenceInput, Slot};
pub use dataset::{make_dataset, BatchSampler, Dataset, TaskSizes};
pub use synth::{
    gen_cross_modal_example, gen_image_only_example, gen_text_only_example, generate, SyntheticExample, Task,
};
