use crate::autodiff::{Float, Tape};
use crate::data::{Batch, Dataset, Task};
use crate::error::{Error, Result};
use crate::moe::RoutingTrace;
use crate::nn::{ForwardOptions, Model};

/// Correct and total counts per task, indexed by [`Task::index`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalReport {
    pub correct: [usize; 3],
    pub count: [usize; 3],
}

impl EvalReport {
    pub fn accuracy(&self, task: Task) -> Option<f64> {
        let i = task.index();
        (self.count[i] > 0).then(|| self.correct[i] as f64 / self.count[i] as f64)
    }

    /// Fraction of all examples answered correctly.
    pub fn overall(&self) -> f64 {
        let n: usize = self.count.iter().sum();
        if n == 0 {
            0.0
        } else {
            self.correct.iter().sum::<usize>() as f64 / n as f64
        }
    }

    pub fn total(&self) -> usize {
        self.count.iter().sum()
    }

    /// Counts the answers of `batch` against `predicted` (one id per answer position).
    pub fn tally(&mut self, batch: &Batch, predicted: &[usize]) -> Result<()> {
        if predicted.len() != batch.answers.len() {
            return Err(Error::shape("tally", format!("{} predictions for {} answers", predicted.len(), batch.answers.len())));
        }
        for (&(pos, id), &p) in batch.answers.iter().zip(predicted) {
            let task = batch.tasks[pos / batch.seq_len].ok_or_else(|| Error::invalid("answer without a task"))?;
            self.count[task.index()] += 1;
            if p == id {
                self.correct[task.index()] += 1;
            }
        }
        Ok(())
    }

    /// `cross_modal=..,text_only=..,image_only=..,overall=..` with absent tasks omitted.
    pub fn summary(&self) -> String {
        let mut parts: Vec<String> = Task::ALL
            .iter()
            .filter_map(|t| self.accuracy(*t).map(|a| format!("{}={a:.4}", t.name())))
            .collect();
        parts.push(format!("overall={:.4}", self.overall()));
        parts.join(" ")
    }
}

fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and accumulated routing statistics over `data`.
pub fn evaluate_with<T: Float>(
    model: &Model<T>,
    data: &Dataset,
    batch_size: usize,
    opts: ForwardOptions,
) -> Result<(EvalReport, RoutingTrace)> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation on an empty dataset"));
    }
    let opts = ForwardOptions { skip_aux: true, ..opts };
    let mut report = EvalReport::default();
    let mut trace = RoutingTrace::default();
    for batch in data.batches(batch_size) {
        let batch = batch?;
        let mut tape = Tape::new();
        let out = model.forward_with(&mut tape, &batch, opts)?;
        let logits = tape.value(out.logits);
        let predicted: Vec<usize> = batch.answers.iter().map(|(p, _)| argmax(logits.row(*p))).collect();
        report.tally(&batch, &predicted)?;
        trace.merge(&out.trace)?;
    }
    Ok((report, trace))
}

pub fn evaluate<T: Float>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    Ok(evaluate_with(model, data, batch_size, ForwardOptions::default())?.0)
}
