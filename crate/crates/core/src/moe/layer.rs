//! Token routing, dispatch/combine and the load-balancing loss.
//!
//! A MoE block runs in three steps: [`route`] picks experts and gate weights per token,
//! [`dispatch_combine`] evaluates each expert on the rows sent to it and sums the
//! gate-weighted outputs back in place, and [`load_balance_aux`] scores the routing.
//! The three MoE variants differ only in the [`RoutingPlan`] they route with.

use serde::{Deserialize, Serialize};

use super::gate::{topk_indices, GateDecision};
use super::layout::{ExpertGroup, RoutingPlan};
use super::trace::{LayerTrace, ModalityTrace};
use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::data::Modality;
use crate::error::{Error, Result};

/// Pool-size factor of the auxiliary loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AuxScale {
    /// Size of each router's own candidate pool.
    #[default]
    PerPool,
    /// Total number of experts in the block.
    Total,
}

impl AuxScale {
    pub fn name(self) -> &'static str {
        match self {
            AuxScale::PerPool => "pool",
            AuxScale::Total => "total",
        }
    }
}

impl std::str::FromStr for AuxScale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pool" => Ok(AuxScale::PerPool),
            "total" => Ok(AuxScale::Total),
            _ => Err(format!("expected `pool` or `total`, got `{s}`")),
        }
    }
}

/// Routing of the tokens served by one router.
#[derive(Clone, Debug)]
pub struct RouterRecord {
    pub router: usize,
    /// Rows of the block input handled by this router.
    pub rows: Vec<usize>,
    /// Whether each row counts toward statistics (false for padding).
    pub include: Vec<bool>,
    /// Global experts the router could choose from.
    pub candidates: Vec<usize>,
    pub k: usize,
    /// Selected global experts, `rows.len() × k`, highest logit first.
    pub selected: Vec<usize>,
    /// Gate weights, `rows.len() × k`.
    pub gates: Var,
}

impl RouterRecord {
    pub fn decisions<T: Float>(&self, tape: &Tape<T>) -> Vec<GateDecision<T>> {
        let g = tape.value(self.gates).data();
        (0..self.rows.len())
            .map(|t| GateDecision {
                experts: self.selected[t * self.k..(t + 1) * self.k].to_vec(),
                weights: g[t * self.k..(t + 1) * self.k].to_vec(),
            })
            .collect()
    }

    /// Discrete selection signature, used to detect routing flips.
    pub fn signature(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.iter().copied().chain(self.selected.iter().copied())
    }
}

struct Assignment {
    router: usize,
    rows: Vec<usize>,
    /// Local router columns the selection may use.
    columns: Vec<usize>,
    k: usize,
}

fn assignments(
    plan: &RoutingPlan,
    tags: &[Modality],
    force: Option<ExpertGroup>,
) -> Result<Vec<Assignment>> {
    let mut by_router: Vec<Assignment> = plan
        .routers
        .iter()
        .enumerate()
        .map(|(r, spec)| Assignment { router: r, rows: Vec::new(), columns: (0..spec.pool.len()).collect(), k: plan.top_k })
        .collect();
    match force {
        None => {
            for (row, &m) in tags.iter().enumerate() {
                by_router[plan.router_for(m)].rows.push(row);
            }
        }
        Some(group) => {
            let members = plan.group_members(group);
            if members.is_empty() {
                return Err(Error::invalid(format!(
                    "expert group {} is empty in the {} variant",
                    group.label(),
                    plan.variant.name()
                )));
            }
            let covers = |r: usize| members.iter().all(|e| plan.routers[r].pool.contains(e));
            for (row, &m) in tags.iter().enumerate() {
                let own = plan.router_for(m);
                let r = if covers(own) {
                    own
                } else {
                    (0..plan.routers.len())
                        .find(|&r| covers(r))
                        .ok_or_else(|| Error::invalid(format!("no router scores every expert of group {}", group.label())))?
                };
                by_router[r].rows.push(row);
            }
            let k = plan.top_k.min(members.len());
            for a in &mut by_router {
                let pool = &plan.routers[a.router].pool;
                a.columns = (0..pool.len()).filter(|j| members.contains(&pool[*j])).collect();
                a.k = k;
            }
        }
    }
    Ok(by_router.into_iter().filter(|a| !a.rows.is_empty()).collect())
}

/// Routes every row of `h` (`N×d`) through the router serving its modality.
///
/// `router_weights[r]` is the `d × |pool_r|` weight of `plan.routers[r]`. With `force`, every
/// token is restricted to the experts of one group (top-k capped at the group size), scored by
/// its own router when that router covers the group and by the covering router otherwise.
pub fn route<T: Float>(
    tape: &mut Tape<T>,
    h: Var,
    router_weights: &[Var],
    plan: &RoutingPlan,
    tags: &[Modality],
    include: &[bool],
    force: Option<ExpertGroup>,
) -> Result<Vec<RouterRecord>> {
    let (n, _) = tape.value(h).dims2()?;
    if tags.len() != n || include.len() != n {
        return Err(Error::shape("route", format!("{n} rows with {} tags and {} flags", tags.len(), include.len())));
    }
    if router_weights.len() != plan.routers.len() {
        return Err(Error::shape("route", format!("{} router weights for {} routers", router_weights.len(), plan.routers.len())));
    }
    let mut records = Vec::new();
    for a in assignments(plan, tags, force)? {
        let pool = &plan.routers[a.router].pool;
        let x = tape.gather_rows(h, &a.rows)?;
        let logits = tape.matmul(x, router_weights[a.router])?;
        let width = pool.len();
        let lv = tape.value(logits).data();
        let mut local = Vec::with_capacity(a.rows.len() * a.k);
        let mut cand = Vec::with_capacity(a.columns.len());
        for t in 0..a.rows.len() {
            let row = &lv[t * width..(t + 1) * width];
            cand.clear();
            cand.extend(a.columns.iter().map(|&c| row[c]));
            local.extend(topk_indices(&cand, a.k).into_iter().map(|j| a.columns[j]));
        }
        let picked = tape.gather_cols(logits, &local, a.k)?;
        let gates = tape.softmax(picked, 1)?;
        records.push(RouterRecord {
            router: a.router,
            include: a.rows.iter().map(|&r| include[r]).collect(),
            candidates: a.columns.iter().map(|&c| pool[c]).collect(),
            k: a.k,
            selected: local.iter().map(|&c| pool[c]).collect(),
            rows: a.rows,
            gates,
        });
    }
    Ok(records)
}

/// Sends each routed row to its selected experts and sums the gate-weighted outputs.
///
/// `expert(tape, e, x)` evaluates expert `e` on the rows `x` (`n_e × d`) and must return
/// `n_e × d`.
pub fn dispatch_combine<T, F>(
    tape: &mut Tape<T>,
    h: Var,
    records: &[RouterRecord],
    num_experts: usize,
    mut expert: F,
) -> Result<Var>
where
    T: Float,
    F: FnMut(&mut Tape<T>, usize, Var) -> Result<Var>,
{
    let (n, d) = tape.value(h).dims2()?;
    let mut parts = Vec::new();
    for rec in records {
        let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); num_experts];
        let mut slots_of: Vec<Vec<usize>> = vec![Vec::new(); num_experts];
        for (flat, &e) in rec.selected.iter().enumerate() {
            if e >= num_experts {
                return Err(Error::shape("dispatch_combine", format!("expert {e} of {num_experts}")));
            }
            rows_of[e].push(rec.rows[flat / rec.k]);
            slots_of[e].push(flat);
        }
        for e in 0..num_experts {
            if rows_of[e].is_empty() {
                continue;
            }
            let x = tape.gather_rows(h, &rows_of[e])?;
            let y = expert(tape, e, x)?;
            let g = tape.gather_elems(rec.gates, &slots_of[e])?;
            let y = tape.mul_rows(y, g)?;
            parts.push((y, std::mem::take(&mut rows_of[e])));
        }
    }
    if parts.is_empty() {
        return tape.constant(Tensor::zeros(vec![n, d]));
    }
    tape.scatter_add_rows(&parts, n, d)
}

/// Activation statistics of one block's routing.
pub fn layer_trace<T: Float>(tape: &Tape<T>, plan: &RoutingPlan, tags: &[Modality], records: &[RouterRecord]) -> LayerTrace {
    let ne = plan.num_experts();
    let mut mods = [ModalityTrace::new(ne, Vec::new(), 0), ModalityTrace::new(ne, Vec::new(), 0)];
    for rec in records {
        let g = tape.value(rec.gates).data();
        let mut weights = vec![0.0; rec.k];
        for (t, &row) in rec.rows.iter().enumerate() {
            if !rec.include[t] {
                continue;
            }
            let mt = &mut mods[tags[row].index()];
            if mt.pool.is_empty() {
                mt.pool = rec.candidates.clone();
                mt.top_k = rec.k;
            }
            weights.iter_mut().zip(&g[t * rec.k..(t + 1) * rec.k]).for_each(|(w, v)| *w = v.as_f64());
            mt.record(&rec.selected[t * rec.k..(t + 1) * rec.k], &weights);
        }
    }
    LayerTrace { groups: plan.groups.clone(), modalities: mods }
}

/// Load-balancing loss of one block: for each router,
/// `|P| · Σ_i mean_x[G_i(x)] · mean_x[1_i(x)]` over its non-padding tokens, averaged over
/// the routers that saw at least one token. Gradients reach the gate weights only.
pub fn load_balance_aux<T: Float>(
    tape: &mut Tape<T>,
    records: &[RouterRecord],
    num_experts: usize,
    scale: AuxScale,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for rec in records {
        let n = rec.include.iter().filter(|i| **i).count();
        if n == 0 {
            log::debug!("router {} routed no tokens; excluded from the aux loss", rec.router);
            continue;
        }
        let mut counts = vec![0usize; num_experts];
        for (flat, &e) in rec.selected.iter().enumerate() {
            if rec.include[flat / rec.k] {
                counts[e] += 1;
            }
        }
        let pool = match scale {
            AuxScale::PerPool => rec.candidates.len(),
            AuxScale::Total => num_experts,
        } as f64;
        let nf = n as f64;
        let coef: Vec<T> = rec
            .selected
            .iter()
            .enumerate()
            .map(|(flat, &e)| {
                if rec.include[flat / rec.k] {
                    T::of(pool * (counts[e] as f64 / nf) / nf)
                } else {
                    T::zero()
                }
            })
            .collect();
        let c = tape.constant(Tensor::new(vec![rec.rows.len(), rec.k], coef)?)?;
        let weighted = tape.mul(rec.gates, c)?;
        terms.push(tape.sum(weighted)?);
    }
    let Some((&first, rest)) = terms.split_first() else { return Ok(None) };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    let count = terms.len();
    Ok(Some(if count == 1 { acc } else { tape.scale(acc, T::of(1.0 / count as f64))? }))
}

/// Direct evaluation of the load-balancing loss from gate decisions over a pool of
/// `pool_size` experts.
pub fn load_balance_value(decisions: &[GateDecision<f64>], num_experts: usize, pool_size: usize) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::invalid("load-balance loss over zero tokens"));
    }
    let n = decisions.len() as f64;
    let mut mean_gate = vec![0.0; num_experts];
    let mut mean_active = vec![0.0; num_experts];
    for d in decisions {
        for (&e, &w) in d.experts.iter().zip(&d.weights) {
            mean_gate[e] += w / n;
            mean_active[e] += 1.0 / n;
        }
    }
    Ok(pool_size as f64 * mean_gate.iter().zip(&mean_active).map(|(g, a)| g * a).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::layout::{build_expert_layout, Balance};

    #[test]
    fn injected_gate_fixture() {
        // d = 1; E^T_0: x -> 2x, E^I_0 unused, E^S_0: x -> 3x, E^S_1: x -> 5x.
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_f64(vec![1, 1], &[1.0]).unwrap()).unwrap();
        let gates = tape.constant(Tensor::from_f64(vec![1, 2], &[0.5, 0.5]).unwrap()).unwrap();
        let rec = RouterRecord {
            router: 0,
            rows: vec![0],
            include: vec![true],
            candidates: vec![0, 2, 3],
            k: 2,
            selected: vec![0, 2],
            gates,
        };
        let factors = [2.0, 0.0, 3.0, 5.0];
        let out = dispatch_combine(&mut tape, h, &[rec], 4, |tape, e, x| tape.scale(x, factors[e])).unwrap();
        assert_eq!(tape.value(out).data(), &[2.5]);
    }

    fn uniform_decisions(k: usize, n_tokens: usize) -> Vec<GateDecision<f64>> {
        // Rotating pairs cover every expert equally with equal weights.
        (0..n_tokens)
            .map(|t| GateDecision { experts: (0..k).map(|j| (t * k + j) % 4).collect(), weights: vec![1.0 / k as f64; k] })
            .collect()
    }

    #[test]
    fn aux_anchor_values() {
        let uniform = load_balance_value(&uniform_decisions(2, 8), 4, 4).unwrap();
        assert!((uniform - 2.0).abs() < 1e-12);
        let collapsed: Vec<_> =
            (0..8).map(|_| GateDecision { experts: vec![0, 1], weights: vec![0.5, 0.5] }).collect();
        assert!((load_balance_value(&collapsed, 4, 4).unwrap() - 4.0).abs() < 1e-12);
        let all: Vec<_> =
            (0..5).map(|_| GateDecision { experts: vec![0, 1, 2, 3], weights: vec![0.1, 0.2, 0.3, 0.4] }).collect();
        assert!((load_balance_value(&all, 4, 4).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn taped_aux_matches_direct_evaluation() {
        let layout = build_expert_layout(4, Balance::Balanced, 2).unwrap();
        let plan = RoutingPlan::moiie(&layout);
        let mut tape = Tape::<f64>::new();
        let n = 12;
        let hv: Vec<f64> = (0..n * 3).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let h = tape.constant(Tensor::new(vec![n, 3], hv).unwrap()).unwrap();
        let wt = tape.constant(Tensor::from_f64(vec![3, 3], &[0.3, -0.2, 0.5, 0.1, 0.4, -0.3, -0.6, 0.2, 0.1]).unwrap()).unwrap();
        let wi = tape.constant(Tensor::from_f64(vec![3, 3], &[-0.1, 0.2, 0.3, 0.5, -0.4, 0.2, 0.3, 0.3, -0.2]).unwrap()).unwrap();
        let tags: Vec<Modality> = (0..n).map(|i| if i < 5 { Modality::Image } else { Modality::Text }).collect();
        let mut include = vec![true; n];
        include[n - 1] = false;
        let recs = route(&mut tape, h, &[wt, wi], &plan, &tags, &include, None).unwrap();
        let aux = load_balance_aux(&mut tape, &recs, 4, AuxScale::PerPool).unwrap().unwrap();
        let mut direct = 0.0;
        for rec in &recs {
            let ds: Vec<_> = rec
                .decisions(&tape)
                .into_iter()
                .zip(&rec.include)
                .filter(|(_, inc)| **inc)
                .map(|(d, _)| d)
                .collect();
            direct += load_balance_value(&ds, 4, rec.candidates.len()).unwrap();
        }
        direct /= recs.len() as f64;
        assert!((tape.value(aux).item() - direct).abs() < 1e-12);
    }

    #[test]
    fn forced_group_caps_k() {
        let layout = build_expert_layout(4, Balance::Balanced, 2).unwrap();
        let plan = RoutingPlan::moiie(&layout);
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_f64(vec![2, 1], &[0.5, -1.0]).unwrap()).unwrap();
        let wt = tape.constant(Tensor::from_f64(vec![1, 3], &[0.1, 0.2, 0.3]).unwrap()).unwrap();
        let wi = tape.constant(Tensor::from_f64(vec![1, 3], &[0.3, 0.2, 0.1]).unwrap()).unwrap();
        let tags = [Modality::Image, Modality::Text];
        let recs = route(&mut tape, h, &[wt, wi], &plan, &tags, &[true, true], Some(ExpertGroup::Text)).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].k, 1);
        assert_eq!(recs[0].selected, vec![0, 0]);
        assert_eq!(tape.value(recs[0].gates).data(), &[1.0, 1.0]);

        let modality = RoutingPlan::modality(4, 2).unwrap();
        assert!(route(&mut tape, h, &[wt, wi], &modality, &tags, &[true, true], Some(ExpertGroup::Shared)).is_err());
    }
}
