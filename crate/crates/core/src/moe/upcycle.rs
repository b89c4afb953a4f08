//! Turning a dense checkpoint into a sparse one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Float, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::nn::{expert_prefix, ffn_names, router_name, ModelConfig, MoeConfig, Model, Placement, INIT_STD};

fn block_of_ffn(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("blocks.")?;
    let (b, tail) = rest.split_once('.')?;
    tail.starts_with("ffn.").then(|| b.parse().ok()).flatten()
}

fn small_normal<T: Float>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<T> {
    let dist = Normal::new(0.0, INIT_STD).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect()).expect("sized")
}

/// Replaces the FFN of every block selected by `placement` with `moe.experts` bitwise copies of
/// it and adds routers drawn from N(0, 0.02²) with `seed`. Every other tensor is copied as is.
pub fn upcycle_from_dense<T: Float>(dense: &Model<T>, moe: &MoeConfig, placement: Placement, seed: u64) -> Result<Model<T>> {
    if dense.config().moe.is_some() {
        return Err(Error::invalid("upcycling source must be a dense model"));
    }
    let mut cfg = dense.config().clone();
    cfg.placement = placement;
    cfg.moe = Some(moe.clone());
    cfg.validate()?;
    let params = upcycle_params(dense.params(), &cfg, seed)?;
    Model::from_params(cfg, params)
}

/// Parameter-level upcycling of dense tensors `src` into the layout of the sparse `target`.
pub fn upcycle_params<T: Float>(src: &ParamStore<T>, target: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    let moe = target.moe.as_ref().ok_or_else(|| Error::invalid("upcycling target has no MoE config"))?;
    let plan = moe.plan()?;
    let blocks = target.moe_blocks();
    for &b in &blocks {
        for n in ffn_names(&format!("blocks.{b}.ffn")) {
            src.id(&n)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamStore::new();
    for (_, name, t) in src.iter() {
        match block_of_ffn(name) {
            Some(b) if blocks.contains(&b) => {
                if !name.ends_with("ffn.fc1.w") {
                    continue;
                }
                let source = ffn_names(&format!("blocks.{b}.ffn"));
                for e in 0..plan.num_experts() {
                    for (dst, from) in ffn_names(&expert_prefix(b, e)).into_iter().zip(&source) {
                        out.insert(dst, src.get(from).expect("checked above").clone())?;
                    }
                }
                for r in &plan.routers {
                    out.insert(router_name(b, r.kind.name()), small_normal(&mut rng, vec![target.d, r.pool.len()]))?;
                }
            }
            _ => {
                out.insert(name, t.clone())?;
            }
        }
    }
    Ok(out)
}

/// Widens the dense FFN of each listed block from `h` to `factor·h` hidden units without
/// changing the function: new first-layer columns are drawn from N(0, 0.02²), new
/// second-layer rows are zero.
pub fn widen_dense_ffn<T: Float>(dense: &Model<T>, blocks: &[usize], factor: usize, seed: u64) -> Result<Model<T>> {
    if dense.config().moe.is_some() {
        return Err(Error::invalid("only dense models can be widened"));
    }
    if factor == 0 {
        return Err(Error::invalid("widening factor must be positive"));
    }
    let mut cfg = dense.config().clone();
    for &b in blocks {
        if b >= cfg.n_layers {
            return Err(Error::invalid(format!("block {b} of {}", cfg.n_layers)));
        }
        cfg.ffn_hidden[b] *= factor;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamStore::new();
    let d = cfg.d;
    for (_, name, t) in dense.params().iter() {
        let widened = match block_of_ffn(name) {
            Some(b) if blocks.contains(&b) => {
                let h = dense.config().ffn_hidden[b];
                let extra = (factor - 1) * h;
                if name.ends_with("fc1.w") {
                    let fresh = small_normal::<T>(&mut rng, vec![d, extra]);
                    let mut data = Vec::with_capacity(d * h * factor);
                    for r in 0..d {
                        data.extend_from_slice(t.row(r));
                        data.extend_from_slice(&fresh.data()[r * extra..(r + 1) * extra]);
                    }
                    Tensor::new(vec![d, h * factor], data)?
                } else if name.ends_with("fc1.b") {
                    let mut data = t.data().to_vec();
                    data.resize(h * factor, T::zero());
                    Tensor::new(vec![h * factor], data)?
                } else if name.ends_with("fc2.w") {
                    let mut data = t.data().to_vec();
                    data.resize(h * factor * d, T::zero());
                    Tensor::new(vec![h * factor, d], data)?
                } else {
                    t.clone()
                }
            }
            _ => t.clone(),
        };
        out.insert(name, widened)?;
    }
    Model::from_params(cfg, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::data::{gen_cross_modal_example, gen_image_only_example, gen_text_only_example, Batch};
    use crate::moe::{AuxScale, Balance, MoeVariant};

    fn dense() -> Model<f64> {
        let mut c = ModelConfig::dense(16, 4, 2, 11);
        c.max_seq_len = 24;
        Model::new(c).unwrap()
    }

    fn batch() -> Batch {
        let a = gen_cross_modal_example(8).unwrap();
        let b = gen_text_only_example(9);
        let c = gen_image_only_example(10);
        Batch::from_examples(&[&a, &b, &c]).unwrap()
    }

    fn logits(m: &Model<f64>, b: &Batch) -> Vec<f64> {
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, b).unwrap();
        tape.value(out.logits).data().to_vec()
    }

    fn moe(variant: MoeVariant, experts: usize, top_k: usize) -> MoeConfig {
        MoeConfig { variant, experts, balance: Balance::Balanced, top_k, aux_scale: AuxScale::PerPool }
    }

    #[test]
    fn experts_are_bitwise_copies() {
        let d = dense();
        let m = upcycle_from_dense(&d, &moe(MoeVariant::Moiie, 4, 2), Placement::Interleaved, 1).unwrap();
        for b in [1, 3] {
            let src = ffn_names(&format!("blocks.{b}.ffn"));
            for e in 0..4 {
                for (dst, s) in ffn_names(&expert_prefix(b, e)).iter().zip(&src) {
                    assert_eq!(m.params().get(dst).unwrap().to_le_bytes(), d.params().get(s).unwrap().to_le_bytes());
                }
            }
        }
        assert!(m.params().contains("blocks.0.ffn.fc1.w"));
        assert!(!m.params().contains("blocks.1.ffn.fc1.w"));
    }

    #[test]
    fn upcycled_logits_match_dense() {
        let d = dense();
        let b = batch();
        let base = logits(&d, &b);
        for placement in [Placement::Interleaved, Placement::Full] {
            for cfg in [moe(MoeVariant::Moiie, 4, 2), moe(MoeVariant::Vanilla, 4, 3), moe(MoeVariant::Modality, 4, 1)] {
                let m = upcycle_from_dense(&d, &cfg, placement, 5).unwrap();
                for (x, y) in logits(&m, &b).iter().zip(&base) {
                    assert!((x - y).abs() <= 1e-12, "{:?} {placement}: {x} vs {y}", cfg.variant);
                }
            }
        }
    }

    #[test]
    fn parameter_count_formula() {
        let d = dense();
        let ffn: usize = ffn_names("blocks.1.ffn").iter().map(|n| d.params().get(n).unwrap().len()).sum();
        for (experts, balance) in [(4, Balance::Balanced), (8, Balance::Balanced)] {
            let l = experts / 4;
            let cfg = MoeConfig { balance, ..moe(MoeVariant::Moiie, experts, 2) };
            let m = upcycle_from_dense(&d, &cfg, Placement::Interleaved, 0).unwrap();
            let router = 2 * 16 * 3 * l;
            assert_eq!(m.num_params(), d.num_params() + 2 * ((4 * l - 1) * ffn + router));
        }
    }

    #[test]
    fn missing_ffn_is_an_error() {
        let d = dense();
        let mut stripped = ParamStore::new();
        for (_, n, t) in d.params().iter() {
            if n != "blocks.3.ffn.fc2.w" {
                stripped.insert(n, t.clone()).unwrap();
            }
        }
        let cfg = moe(MoeVariant::Moiie, 4, 2);
        let mut target = d.config().clone();
        target.placement = Placement::Interleaved;
        target.moe = Some(cfg.clone());
        match upcycle_params(&stripped, &target, 0) {
            Err(Error::MissingParam(name)) => assert_eq!(name, "blocks.3.ffn.fc2.w"),
            other => panic!("{other:?}"),
        }
        let sparse = upcycle_from_dense(&d, &cfg, Placement::Interleaved, 0).unwrap();
        assert!(upcycle_from_dense(&sparse, &cfg, Placement::Interleaved, 0).is_err());
    }

    #[test]
    fn widening_preserves_function() {
        let d = dense();
        let b = batch();
        let w = widen_dense_ffn(&d, &[1, 3], 2, 7).unwrap();
        assert_eq!(w.config().ffn_hidden, vec![64, 128, 64, 128]);
        for (x, y) in logits(&w, &b).iter().zip(&logits(&d, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}
