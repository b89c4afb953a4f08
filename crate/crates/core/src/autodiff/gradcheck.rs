//! Central finite-difference verification of taped gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Relative step: `h = STEP * max(1, |θ|)`.
pub const STEP: f64 = 1e-5;
/// Denominator floor for the relative error so exactly-zero gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-5;
const MAX_RESAMPLES: usize = 10;

/// Output of one evaluation of a model fragment: the scalar loss and a signature of every
/// discrete routing choice made along the way (empty for fragments without routing).
pub struct FragmentEval {
    pub loss: Var,
    pub selection: Vec<usize>,
}

impl From<Var> for FragmentEval {
    fn from(loss: Var) -> Self {
        FragmentEval { loss, selection: Vec::new() }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub probes: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, store: &ParamStore<f64>) -> Result<(f64, Vec<usize>)>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<FragmentEval>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    Ok((tape.value(out.loss).item(), out.selection))
}

/// Compares taped gradients of `f` against central differences on `probes` parameter
/// entries of the trainable parameters in `store`.
///
/// A probe whose ±h perturbation changes the routing selection is re-drawn; a parameter
/// that keeps flipping the selection after 10 re-draws is reported as an error.
pub fn grad_check<F>(f: F, store: &ParamStore<f64>, probes: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<FragmentEval>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();

    let mut tape = Tape::new();
    let base = f(&mut tape, &work)?;
    tape.backward_into(base.loss, &mut work)?;
    let analytic: Vec<Vec<f64>> = work.ids().map(|id| work.tensor(id).grad().unwrap_or(&[]).to_vec()).collect();

    let mut candidates: Vec<ParamId> = work.ids().filter(|id| work.is_trainable(*id) && !work.tensor(*id).is_empty()).collect();
    if candidates.is_empty() {
        return Err(Error::invalid("grad_check with no trainable parameters"));
    }
    candidates.shuffle(&mut rng);

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, probes: 0 };
    for p in 0..probes {
        let id = candidates[p % candidates.len()];
        let len = work.tensor(id).len();
        let mut attempt = 0;
        loop {
            let entry = rng.random_range(0..len);
            let theta = work.tensor(id).data()[entry];
            let h = STEP * theta.abs().max(1.0);
            work.tensor_mut(id).data_mut()[entry] = theta + h;
            let (plus, sel_plus) = eval(&f, &work)?;
            work.tensor_mut(id).data_mut()[entry] = theta - h;
            let (minus, sel_minus) = eval(&f, &work)?;
            work.tensor_mut(id).data_mut()[entry] = theta;

            if sel_plus != base.selection || sel_minus != base.selection {
                attempt += 1;
                if attempt >= MAX_RESAMPLES {
                    return Err(Error::UnstableSelection { param: work.name(id).to_string() });
                }
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic[id.0][entry], numeric);
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((work.name(id).to_string(), entry));
                }
            }
            report.probes += 1;
            break;
        }
    }
    Ok(report)
}
