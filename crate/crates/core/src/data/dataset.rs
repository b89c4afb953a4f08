use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::synth::{generate, SyntheticExample, Task, GENERATOR_VERSION};
use crate::error::{Error, Result};

/// Example counts per task, ordered (cross-modal, text-only, image-only).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSizes(pub [usize; 3]);

impl TaskSizes {
    /// The default 40/30/30 mix for `total` examples.
    pub fn default_mix(total: usize) -> Self {
        let cross = total * 4 / 10;
        let text = total * 3 / 10;
        TaskSizes([cross, text, total - cross - text])
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn get(&self, task: Task) -> usize {
        self.0[task.index()]
    }
}

impl std::str::FromStr for TaskSizes {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected three comma-separated sizes, got `{s}`"));
        }
        let mut out = [0; 3];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = p.parse().map_err(|_| format!("`{p}` is not a non-negative integer"))?;
        }
        Ok(TaskSizes(out))
    }
}

impl std::fmt::Display for TaskSizes {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub examples: Vec<SyntheticExample>,
}

/// Generates `sizes` examples per task and interleaves them in a seeded shuffled order.
pub fn make_dataset(sizes: TaskSizes, seed: u64) -> Result<Dataset> {
    if sizes.total() == 0 {
        return Err(Error::invalid("dataset with zero examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::with_capacity(sizes.total());
    for task in Task::ALL {
        for _ in 0..sizes.get(task) {
            plan.push((task, rng.random::<u64>()));
        }
    }
    plan.shuffle(&mut rng);
    let examples = plan.into_iter().map(|(task, s)| generate(task, s)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { examples })
}

#[derive(Serialize, Deserialize)]
struct Record {
    version: u32,
    task: Task,
    seed: u64,
    patch_attrs: Vec<(usize, usize)>,
    text_ids: Vec<usize>,
    answer_position: usize,
    answer: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn task_counts(&self) -> [usize; 3] {
        let mut out = [0; 3];
        self.examples.iter().for_each(|e| out[e.task.index()] += 1);
        out
    }

    /// Consecutive batches in dataset order (the last one may be short).
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let bs = batch_size.max(1);
        self.examples.chunks(bs).map(|chunk| Batch::from_examples(&chunk.iter().collect::<Vec<_>>()))
    }

    /// One record per line. Patch features are not stored: they are regenerated from the
    /// seed on load.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.examples {
            let rec = Record {
                version: GENERATOR_VERSION,
                task: e.task,
                seed: e.seed,
                patch_attrs: e.patch_attrs.clone(),
                text_ids: e.text_ids.clone(),
                answer_position: e.answer_position,
                answer: e.answer_id,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut examples = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |detail: String| Error::Format { what: "dataset record", detail: format!("line {}: {detail}", lineno + 1) };
            let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if rec.version != GENERATOR_VERSION {
                return Err(bad(format!("generator version {} (expected {GENERATOR_VERSION})", rec.version)));
            }
            let ex = generate(rec.task, rec.seed)?;
            if ex.patch_attrs != rec.patch_attrs
                || ex.text_ids != rec.text_ids
                || ex.answer_id != rec.answer
                || ex.answer_position != rec.answer_position
            {
                return Err(bad("record does not match its regenerated example".into()));
            }
            examples.push(ex);
        }
        Ok(Dataset { examples })
    }
}

/// Endless seeded stream of training batches; each epoch is a fresh shuffle.
pub struct BatchSampler<'a> {
    data: &'a Dataset,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if data.is_empty() || batch_size == 0 {
            return Err(Error::invalid("batch sampler needs a non-empty dataset and batch size"));
        }
        let mut s = BatchSampler {
            data,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..data.len()).collect(),
            cursor: 0,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let mut picked = Vec::with_capacity(self.batch_size);
        while picked.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(&self.data.examples[self.order[self.cursor]]);
            self.cursor += 1;
        }
        Batch::from_examples(&picked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_are_exact() {
        let ds = make_dataset(TaskSizes([40, 30, 30]), 3).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.task_counts(), [40, 30, 30]);
        assert_eq!(TaskSizes::default_mix(10_000), TaskSizes([4000, 3000, 3000]));
        assert!(make_dataset(TaskSizes([0, 0, 0]), 0).is_err());
    }

    #[test]
    fn tasks_are_interleaved_deterministically() {
        let a = make_dataset(TaskSizes([20, 20, 20]), 11).unwrap();
        let b = make_dataset(TaskSizes([20, 20, 20]), 11).unwrap();
        assert_eq!(a.examples, b.examples);
        let first: Vec<Task> = a.examples.iter().take(20).map(|e| e.task).collect();
        assert!(first.iter().any(|t| *t != first[0]));
    }

    #[test]
    fn jsonl_roundtrip_regenerates_features() {
        let ds = make_dataset(TaskSizes([5, 5, 5]), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.write_jsonl(&path).unwrap();
        let back = Dataset::read_jsonl(&path).unwrap();
        assert_eq!(back.examples, ds.examples);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"task\""));
    }

    #[test]
    fn tampered_record_is_rejected() {
        let ds = make_dataset(TaskSizes([0, 1, 0]), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let ans = ds.examples[0].answer_id;
        let tampered = text.replace(&format!("\"answer\":{ans}"), &format!("\"answer\":{}", (ans + 1) % 10));
        std::fs::write(&path, tampered).unwrap();
        assert!(Dataset::read_jsonl(&path).is_err());
    }

    #[test]
    fn sampler_cycles_epochs() {
        let ds = make_dataset(TaskSizes([3, 2, 2]), 5).unwrap();
        let mut s = BatchSampler::new(&ds, 4, 0).unwrap();
        for _ in 0..5 {
            let b = s.next_batch().unwrap();
            assert_eq!(b.size, 4);
        }
    }
}
