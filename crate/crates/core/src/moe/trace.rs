//! Per-layer, per-modality expert activation statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::layout::ExpertGroup;
use crate::data::Modality;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "layer,modality,expert_id,expert_group,activation_fraction,mean_gate_prob";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModalityTrace {
    /// Experts this modality's tokens could select.
    pub pool: Vec<usize>,
    pub top_k: usize,
    /// Activation count per global expert index.
    pub counts: Vec<u64>,
    /// Sum over tokens of the post-selection gate weight per global expert.
    pub gate_sums: Vec<f64>,
    pub tokens: u64,
}

impl ModalityTrace {
    pub fn new(num_experts: usize, pool: Vec<usize>, top_k: usize) -> Self {
        ModalityTrace { pool, top_k, counts: vec![0; num_experts], gate_sums: vec![0.0; num_experts], tokens: 0 }
    }

    pub fn record(&mut self, experts: &[usize], weights: &[f64]) {
        self.tokens += 1;
        for (&e, &w) in experts.iter().zip(weights) {
            self.counts[e] += 1;
            self.gate_sums[e] += w;
        }
    }

    pub fn activation_fraction(&self, expert: usize) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.counts[expert] as f64 / self.tokens as f64
        }
    }

    pub fn mean_gate(&self, expert: usize) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.gate_sums[expert] / self.tokens as f64
        }
    }

    /// Shannon entropy (nats) of the activation distribution over the pool.
    pub fn utilization_entropy(&self) -> f64 {
        let total: u64 = self.pool.iter().map(|&e| self.counts[e]).sum();
        if total == 0 {
            return 0.0;
        }
        self.pool
            .iter()
            .map(|&e| self.counts[e] as f64 / total as f64)
            .filter(|p| *p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub groups: Vec<ExpertGroup>,
    /// Indexed by [`Modality::index`].
    pub modalities: [ModalityTrace; 2],
}

impl LayerTrace {
    pub fn get(&self, m: Modality) -> &ModalityTrace {
        &self.modalities[m.index()]
    }

    pub fn merge(&mut self, other: &LayerTrace) -> Result<()> {
        if self.groups != other.groups {
            return Err(Error::invalid("merging traces of different expert layouts"));
        }
        for (a, b) in self.modalities.iter_mut().zip(&other.modalities) {
            if a.tokens == 0 && a.pool.is_empty() {
                *a = b.clone();
                continue;
            }
            if b.tokens == 0 && b.pool.is_empty() {
                continue;
            }
            if a.pool != b.pool || a.top_k != b.top_k {
                return Err(Error::invalid("merging traces with different pools"));
            }
            a.tokens += b.tokens;
            a.counts.iter_mut().zip(&b.counts).for_each(|(x, y)| *x += y);
            a.gate_sums.iter_mut().zip(&b.gate_sums).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    /// Fraction of this layer's activations (both modalities) that land on shared experts.
    pub fn shared_share(&self) -> f64 {
        let mut shared = 0u64;
        let mut total = 0u64;
        for m in &self.modalities {
            for (e, c) in m.counts.iter().enumerate() {
                total += c;
                if self.groups[e] == ExpertGroup::Shared {
                    shared += c;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            shared as f64 / total as f64
        }
    }
}

/// Activation statistics keyed by block index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingTrace {
    pub layers: BTreeMap<usize, LayerTrace>,
}

/// One exported CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub layer: usize,
    pub modality: Modality,
    pub expert_id: usize,
    pub group: ExpertGroup,
    pub activation_fraction: f64,
    pub mean_gate_prob: f64,
}

impl RoutingTrace {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn add_layer(&mut self, layer: usize, trace: LayerTrace) -> Result<()> {
        match self.layers.get_mut(&layer) {
            Some(existing) => existing.merge(&trace),
            None => {
                self.layers.insert(layer, trace);
                Ok(())
            }
        }
    }

    /// Commutative merge of traces from separate evaluations.
    pub fn merge(&mut self, other: &RoutingTrace) -> Result<()> {
        for (layer, t) in &other.layers {
            self.add_layer(*layer, t.clone())?;
        }
        Ok(())
    }

    /// One row per (layer, modality, pool expert); modalities that saw no tokens are omitted.
    pub fn rows(&self) -> Vec<TraceRow> {
        let mut out = Vec::new();
        for (&layer, lt) in &self.layers {
            for m in Modality::ALL {
                let mt = lt.get(m);
                if mt.tokens == 0 {
                    continue;
                }
                for &e in &mt.pool {
                    out.push(TraceRow {
                        layer,
                        modality: m,
                        expert_id: e,
                        group: lt.groups[e],
                        activation_fraction: mt.activation_fraction(e),
                        mean_gate_prob: mt.mean_gate(e),
                    });
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in self.rows() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.layer,
                r.modality.name(),
                r.expert_id,
                r.group.label(),
                r.activation_fraction,
                r.mean_gate_prob
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    let bad = |detail: String| Error::Format { what: "trace csv", detail };
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(bad("missing or wrong header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("row {} has {} fields", i + 1, f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {}: `{s}` is not a number", i + 1)));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("row {}: `{s}` is not an index", i + 1)));
        rows.push(TraceRow {
            layer: int(f[0])?,
            modality: match f[1] {
                "image" => Modality::Image,
                "text" => Modality::Text,
                other => return Err(bad(format!("row {}: unknown modality `{other}`", i + 1))),
            },
            expert_id: int(f[2])?,
            group: ExpertGroup::from_label(f[3]).ok_or_else(|| bad(format!("row {}: unknown group `{}`", i + 1, f[3])))?,
            activation_fraction: num(f[4])?,
            mean_gate_prob: num(f[5])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer() -> LayerTrace {
        let groups = vec![ExpertGroup::Text, ExpertGroup::Image, ExpertGroup::Shared, ExpertGroup::Shared];
        let mut text = ModalityTrace::new(4, vec![0, 2, 3], 2);
        text.record(&[0, 2], &[0.6, 0.4]);
        text.record(&[3, 0], &[0.7, 0.3]);
        let image = ModalityTrace::new(4, vec![1, 2, 3], 2);
        LayerTrace { groups, modalities: [image, text] }
    }

    #[test]
    fn csv_roundtrip_and_conservation() {
        let mut t = RoutingTrace::default();
        t.add_layer(1, layer()).unwrap();
        let rows = parse_trace_csv(&t.to_csv()).unwrap();
        assert_eq!(rows, t.rows());
        assert_eq!(rows.len(), 3);
        let s: f64 = rows.iter().map(|r| r.activation_fraction).sum();
        assert_eq!(s, 2.0);
        assert_eq!(rows[0].activation_fraction, 1.0);
        assert!((rows[0].mean_gate_prob - 0.45).abs() < 1e-15);
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = RoutingTrace::default();
        a.add_layer(1, layer()).unwrap();
        let mut b = a.clone();
        b.merge(&a).unwrap();
        let lt = &b.layers[&1];
        assert_eq!(lt.get(Modality::Text).tokens, 4);
        assert_eq!(lt.get(Modality::Text).counts, vec![4, 0, 2, 2]);
        assert_eq!(lt.shared_share(), 0.5);
    }
}
