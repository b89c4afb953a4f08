use crate::autodiff::{Float, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Linear warmup over `ceil(warmup_ratio·total)` steps, then cosine decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup_ratio: f64, base: f64) -> Result<f64> {
    if step > total {
        return Err(Error::invalid(format!("step {step} is past the schedule end {total}")));
    }
    if total == 0 {
        return Ok(0.0);
    }
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, t: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every trainable parameter from its stored gradient with the rate `lr(id)`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: impl Fn(ParamId) -> f64) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().filter(|id| store.is_trainable(*id)).collect();
        for &id in &ids {
            let t = store.tensor(id);
            match t.grad() {
                Some(g) if g.iter().all(|v| v.is_finite()) => {}
                Some(_) => return Err(Error::NonFinite { op: format!("gradient of `{}`", store.name(id)) }),
                None => return Err(Error::invalid(format!("no gradient for `{}`", store.name(id)))),
            }
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let eps = T::of(self.eps);
        for id in ids {
            let rate = T::of(lr(id));
            let decay = T::of(lr(id) * self.weight_decay);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let tensor = store.tensor_mut(id);
            let g = tensor.grad().expect("checked").to_vec();
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *p = *p - decay * *p - rate * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn schedule_anchors() {
        let (total, base) = (1000, 2.0);
        let warm = 30;
        assert_eq!(lr_at(0, total, 0.03, base).unwrap(), 0.0);
        assert_eq!(lr_at(warm, total, 0.03, base).unwrap(), base);
        assert!(lr_at(total, total, 0.03, base).unwrap().abs() < 1e-12);
        let mid = warm + (total - warm) / 2;
        assert!((lr_at(mid, total, 0.03, base).unwrap() - base * 0.5).abs() < 1e-12);
        assert!((lr_at(15, total, 0.03, base).unwrap() - 1.0).abs() < 1e-12);
        assert!(lr_at(total + 1, total, 0.03, base).is_err());
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::from_f64(vec![3], &[1.0, 1.0, 1.0]).unwrap()).unwrap();
        s.tensor_mut(id).set_grad(vec![0.3, -4.0, 0.0]).unwrap();
        let mut opt = AdamW::new(&s);
        opt.step(&mut s, |_| 0.01).unwrap();
        let w = s.tensor(id).data();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] - 1.01).abs() < 1e-9);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn frozen_untouched_and_nan_named() {
        let mut s = ParamStore::<f64>::new();
        let a = s.insert("a", Tensor::from_f64(vec![1], &[1.0]).unwrap()).unwrap();
        let b = s.insert("b", Tensor::from_f64(vec![1], &[1.0]).unwrap()).unwrap();
        s.set_trainable(a, false);
        s.tensor_mut(a).set_grad(vec![5.0]).unwrap();
        s.tensor_mut(b).set_grad(vec![f64::NAN]).unwrap();
        let mut opt = AdamW::new(&s);
        match opt.step(&mut s, |_| 0.1) {
            Err(Error::NonFinite { op }) => assert!(op.contains("`b`")),
            other => panic!("{other:?}"),
        }
        s.tensor_mut(b).set_grad(vec![1.0]).unwrap();
        opt.step(&mut s, |_| 0.1).unwrap();
        assert_eq!(s.tensor(a).data(), &[1.0]);
    }
}
