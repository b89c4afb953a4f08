//! Generators for the three synthetic subtasks.
//!
//! Each example is a pure function of `(task, seed)`: the same seed always reproduces the
//! same patch attributes, noise and token ids.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{self, NUM_COLORS, NUM_SHAPES, PATCHES, PATCH_DIM};
use crate::error::{Error, Result};

/// Bumped whenever a generator's output for a given seed changes.
pub const GENERATOR_VERSION: u32 = 1;

pub const NOISE_STD: f64 = 0.05;
const MAX_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CrossModal,
    TextOnly,
    ImageOnly,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::CrossModal, Task::TextOnly, Task::ImageOnly];

    pub fn name(self) -> &'static str {
        match self {
            Task::CrossModal => "cross_modal",
            Task::TextOnly => "text_only",
            Task::ImageOnly => "image_only",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Task::CrossModal => 0,
            Task::TextOnly => 1,
            Task::ImageOnly => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticExample {
    pub task: Task,
    pub seed: u64,
    /// `(color, shape)` per patch.
    pub patch_attrs: Vec<(usize, usize)>,
    /// Row-major `patches × PATCH_DIM`.
    pub patch_features: Vec<f64>,
    pub text_ids: Vec<usize>,
    /// Index into the concatenated `[image | text]` sequence.
    pub answer_position: usize,
    pub answer_id: usize,
}

impl SyntheticExample {
    pub fn image_len(&self) -> usize {
        self.patch_attrs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.patch_attrs.len() + self.text_ids.len()
    }
}

pub fn generate(task: Task, seed: u64) -> Result<SyntheticExample> {
    match task {
        Task::CrossModal => gen_cross_modal_example(seed),
        Task::TextOnly => Ok(gen_text_only_example(seed)),
        Task::ImageOnly => Ok(gen_image_only_example(seed)),
    }
}

fn patch_features(attrs: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut out = Vec::with_capacity(attrs.len() * PATCH_DIM);
    for &(c, s) in attrs {
        for j in 0..PATCH_DIM {
            let hot = j == c || j == NUM_COLORS + s;
            out.push(f64::from(u8::from(hot)) + noise.sample(rng));
        }
    }
    out
}

/// Image of 16 patches; the question names a color held by exactly one patch and the answer
/// is that patch's shape.
pub fn gen_cross_modal_example(seed: u64) -> Result<SyntheticExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_TRIES {
        let attrs: Vec<(usize, usize)> =
            (0..PATCHES).map(|_| (rng.random_range(0..NUM_COLORS), rng.random_range(0..NUM_SHAPES))).collect();
        let mut counts = [0usize; NUM_COLORS];
        attrs.iter().for_each(|(c, _)| counts[*c] += 1);
        let unique: Vec<usize> = (0..NUM_COLORS).filter(|c| counts[*c] == 1).collect();
        let Some(&queried) = unique.choose(&mut rng) else { continue };
        let target_shape = attrs.iter().find(|(c, _)| *c == queried).map(|(_, s)| *s).expect("unique color present");
        let features = patch_features(&attrs, &mut rng);
        return Ok(SyntheticExample {
            task: Task::CrossModal,
            seed,
            patch_attrs: attrs,
            patch_features: features,
            text_ids: vec![vocab::Q_SHAPEOF, vocab::color(queried), vocab::ANSWER_SLOT],
            answer_position: PATCHES + 2,
            answer_id: vocab::shape(target_shape),
        });
    }
    Err(Error::invalid(format!("cross-modal generator found no uniquely colored patch for seed {seed}")))
}

/// `a b + ?` with answer `(a + b) mod 10`; no image.
pub fn gen_text_only_example(seed: u64) -> SyntheticExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng.random_range(0..10);
    let b = rng.random_range(0..10);
    SyntheticExample {
        task: Task::TextOnly,
        seed,
        patch_attrs: Vec::new(),
        patch_features: Vec::new(),
        text_ids: vec![vocab::digit(a), vocab::digit(b), vocab::PLUS, vocab::ANSWER_SLOT],
        answer_position: 3,
        answer_id: vocab::digit((a + b) % 10),
    }
}

/// Majority color of 16 patches; a dominant color covers 6 to 9 patches, the rest are drawn
/// from the other colors. Ties resolve to the lower color id.
pub fn gen_image_only_example(seed: u64) -> SyntheticExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dominant = rng.random_range(0..NUM_COLORS);
    let count = rng.random_range(6..=9);
    let mut colors: Vec<usize> = vec![dominant; count];
    while colors.len() < PATCHES {
        let c = rng.random_range(0..NUM_COLORS - 1);
        colors.push(if c >= dominant { c + 1 } else { c });
    }
    colors.shuffle(&mut rng);
    let attrs: Vec<(usize, usize)> = colors.into_iter().map(|c| (c, rng.random_range(0..NUM_SHAPES))).collect();
    let features = patch_features(&attrs, &mut rng);
    let label = majority_color(&attrs);
    SyntheticExample {
        task: Task::ImageOnly,
        seed,
        patch_attrs: attrs,
        patch_features: features,
        text_ids: vec![vocab::Q_MAJORITY, vocab::ANSWER_SLOT],
        answer_position: PATCHES + 1,
        answer_id: vocab::color(label),
    }
}

pub(crate) fn majority_color(attrs: &[(usize, usize)]) -> usize {
    let mut counts = [0usize; NUM_COLORS];
    attrs.iter().for_each(|(c, _)| counts[*c] += 1);
    // max_by_key keeps the last maximum, so scan in reverse to prefer the lower id.
    (0..NUM_COLORS).rev().max_by_key(|c| counts[*c]).expect("non-empty")
}
