use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};

/// Selected experts of one token and their normalized gate weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision<T> {
    /// Global expert indices in selection order (highest logit first).
    pub experts: Vec<usize>,
    pub weights: Vec<T>,
}

/// Indices of the `k` largest entries, highest first; equal values keep the lower index first.
pub fn topk_indices<T: Float>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // Stable sort on descending value keeps ascending index order among ties.
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite logits"));
    idx.truncate(k);
    idx
}

/// Softmax over the selected logits only.
pub fn softmax_selected<T: Float>(row: &[T], selected: &[usize]) -> Vec<T> {
    let max = selected.iter().map(|&i| row[i]).fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = selected.iter().map(|&i| (row[i] - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Gate of a single token: logits `x · W_g` over the router pool, top-`k` selection, then
/// softmax over the selected logits. `pool[j]` is the global expert scored by column `j`.
pub fn gate_topk<T: Float>(x: &[T], router: &Tensor<T>, pool: &[usize], k: usize) -> Result<GateDecision<T>> {
    let (d, p) = router.dims2()?;
    if x.len() != d || pool.len() != p {
        return Err(Error::shape("gate_topk", format!("x of {} · W {d}x{p} over pool of {}", x.len(), pool.len())));
    }
    if k == 0 || k > p {
        return Err(Error::invalid(format!("top-k of {k} from a pool of {p}")));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "gate_topk input".into() });
    }
    let w = router.data();
    let logits: Vec<T> = (0..p).map(|j| (0..d).map(|i| x[i] * w[i * p + j]).sum()).collect();
    Ok(decide(&logits, pool, k))
}

/// Gate decision from precomputed pool logits.
pub fn decide<T: Float>(logits: &[T], pool: &[usize], k: usize) -> GateDecision<T> {
    let sel = topk_indices(logits, k);
    let weights = softmax_selected(logits, &sel);
    GateDecision { experts: sel.iter().map(|&j| pool[j]).collect(), weights }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row_router(logits: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![1, logits.len()], logits).unwrap()
    }

    #[test]
    fn symmetric_tie_picks_lowest() {
        let g = gate_topk(&[1.0], &row_router(&[1.0, 1.0, 1.0]), &[0, 1, 2], 2).unwrap();
        assert_eq!(g.experts, vec![0, 1]);
        assert_eq!(g.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn renormalizes_selected_logits() {
        let g = gate_topk(&[1.0], &row_router(&[2.0, 1.0, 0.0, -1.0]), &[0, 1, 2, 3], 2).unwrap();
        assert_eq!(g.experts, vec![0, 1]);
        let (e2, e1) = (2f64.exp(), 1f64.exp());
        assert!((g.weights[0] - e2 / (e2 + e1)).abs() < 1e-15);
        assert!((g.weights[1] - e1 / (e2 + e1)).abs() < 1e-15);
        assert!((g.weights[0] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn single_expert_weight_is_one() {
        let g = gate_topk(&[1.0], &row_router(&[0.3, 1.7]), &[0, 1], 1).unwrap();
        assert_eq!(g.experts, vec![1]);
        assert_eq!(g.weights, vec![1.0]);
    }

    #[test]
    fn pool_maps_to_global_ids() {
        let g = gate_topk(&[1.0], &row_router(&[0.1, 0.9, 0.5]), &[1, 2, 3], 2).unwrap();
        assert_eq!(g.experts, vec![2, 3]);
    }

    #[test]
    fn bad_k_is_rejected() {
        let r = row_router(&[0.1, 0.2]);
        assert!(gate_topk(&[1.0], &r, &[0, 1], 0).is_err());
        assert!(gate_topk(&[1.0], &r, &[0, 1], 3).is_err());
        assert!(gate_topk(&[f64::NAN], &r, &[0, 1], 1).is_err());
    }

    proptest! {
        #[test]
        fn weights_normalized_and_shift_invariant(
            logits in prop::collection::vec(-5.0f64..5.0, 2..9),
            k_frac in 0.0f64..1.0,
            shift in -50.0f64..50.0,
        ) {
            let p = logits.len();
            let k = 1 + ((p - 1) as f64 * k_frac) as usize;
            let pool: Vec<usize> = (0..p).collect();
            let g = decide(&logits, &pool, k);
            let sum: f64 = g.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(g.weights.iter().all(|w| *w > 0.0));
            let mut uniq = g.experts.clone();
            uniq.sort();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), k);

            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let h = decide(&shifted, &pool, k);
            prop_assert_eq!(&h.experts, &g.experts);
            for (a, b) in h.weights.iter().zip(&g.weights) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
