use crate::autodiff::{Float, Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::ForwardOutput;

/// Loss values of one step. `aux` is before weighting by `alpha`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub lm: f64,
    pub aux: f64,
    pub total: f64,
    pub layer_aux: Vec<(usize, f64)>,
    pub lr_backbone: f64,
    pub lr_connector: f64,
}

/// `lm + alpha·aux`, with `lm` the cross-entropy at answer positions and `aux` the mean
/// load-balancing loss over MoE blocks (zero for dense models).
pub fn total_loss<T: Float>(tape: &mut Tape<T>, out: &ForwardOutput, batch: &Batch, alpha: f64) -> Result<(Var, LossReport)> {
    if !(alpha >= 0.0) {
        return Err(Error::config("alpha", format!("must be >= 0, got {alpha}")));
    }
    let (targets, mask) = batch.loss_targets();
    let lm = tape.cross_entropy(out.logits, &targets, &mask)?;
    let mut report = LossReport { lm: tape.value(lm).item().as_f64(), ..LossReport::default() };
    report.layer_aux = out.layer_aux.iter().map(|(b, v)| (*b, tape.value(*v).item().as_f64())).collect();
    let total = match out.aux {
        Some(aux) if alpha > 0.0 => {
            report.aux = tape.value(aux).item().as_f64();
            let weighted = tape.scale(aux, T::of(alpha))?;
            tape.add(lm, weighted)?
        }
        Some(aux) => {
            report.aux = tape.value(aux).item().as_f64();
            lm
        }
        None => lm,
    };
    report.total = tape.value(total).item().as_f64();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_cross_modal_example, gen_text_only_example};
    use crate::nn::{Model, ModelConfig, MoeConfig, Placement};

    fn setup(placement: Placement) -> (Model<f64>, Batch) {
        let moe = (placement != Placement::Dense).then(MoeConfig::default);
        let mut c = ModelConfig::new(16, 2, 2, placement, moe, 1);
        c.max_seq_len = 24;
        let a = gen_cross_modal_example(1).unwrap();
        let b = gen_text_only_example(2);
        (Model::new(c).unwrap(), Batch::from_examples(&[&a, &b]).unwrap())
    }

    #[test]
    fn composition_identity() {
        let (m, b) = setup(Placement::Interleaved);
        for alpha in [0.0, 0.001, 0.5] {
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, &b).unwrap();
            let (_, r) = total_loss(&mut tape, &out, &b, alpha).unwrap();
            assert!(r.aux > 0.0);
            assert!((r.total - (r.lm + alpha * r.aux)).abs() < 1e-9);
            if alpha == 0.0 {
                assert_eq!(r.total, r.lm);
            }
        }
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &b).unwrap();
        assert!(total_loss(&mut tape, &out, &b, -1.0).is_err());
    }

    #[test]
    fn dense_has_no_aux() {
        let (m, b) = setup(Placement::Dense);
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &b).unwrap();
        let (_, r) = total_loss(&mut tape, &out, &b, 0.001).unwrap();
        assert_eq!(r.aux, 0.0);
        assert_eq!(r.total, r.lm);
    }
}
