//! The bimodal transformer: patch embedder + connector, token embeddings, pre-norm blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::autodiff::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{Batch, Modality, SequenceInput, Slot};
use crate::error::{Error, Result};
use crate::moe::{
    dispatch_combine, layer_trace, load_balance_aux, ExpertGroup, RouterRecord, RoutingPlan, RoutingTrace,
};

pub const NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Handles of one two-layer FFN: `fc2(GeLU(fc1(x)))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub enum BlockFfn {
    Dense(FfnParams),
    Moe { experts: Vec<FfnParams>, routers: Vec<ParamId> },
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub ffn: BlockFfn,
}

#[derive(Clone, Debug)]
struct Handles {
    patch: (ParamId, ParamId),
    connector: FfnParams,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    final_norm: ParamId,
    head: ParamId,
}

pub fn ffn_names(prefix: &str) -> [String; 4] {
    [format!("{prefix}.fc1.w"), format!("{prefix}.fc1.b"), format!("{prefix}.fc2.w"), format!("{prefix}.fc2.b")]
}

pub fn block_prefix(block: usize) -> String {
    format!("blocks.{block}")
}

pub fn expert_prefix(block: usize, expert: usize) -> String {
    format!("blocks.{block}.moe.experts.{expert}")
}

pub fn router_name(block: usize, kind: &str) -> String {
    format!("blocks.{block}.moe.router.{kind}")
}

/// Parameter group used for learning rates and freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    PatchEmbedder,
    Connector,
    Backbone,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("patch_embed.") {
        ParamGroup::PatchEmbedder
    } else if name.starts_with("connector.") {
        ParamGroup::Connector
    } else {
        ParamGroup::Backbone
    }
}

/// Whether `name` belongs to a MoE layer (experts or routers).
pub fn is_moe_param(name: &str) -> bool {
    name.contains(".moe.")
}

/// Concatenated image-then-text embeddings of one sequence.
#[derive(Clone, Debug)]
pub struct ModalitySequence {
    pub embeddings: Var,
    pub tags: Vec<Modality>,
    pub m: usize,
    pub n: usize,
}

/// Result of a forward pass over a batch.
#[derive(Debug)]
pub struct ForwardOutput {
    /// `positions × vocab`.
    pub logits: Var,
    pub trace: RoutingTrace,
    /// Mean load-balancing loss over MoE blocks; `None` for dense models or forced routing.
    pub aux: Option<Var>,
    pub layer_aux: Vec<(usize, Var)>,
    pub routing: Vec<(usize, Vec<RouterRecord>)>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Route every token to the experts of one group only.
    pub force_group: Option<ExpertGroup>,
    /// Skip the load-balancing loss.
    pub skip_aux: bool,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    plan: Option<RoutingPlan>,
    handles: Handles,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Float>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape, data).expect("sized")
    }
}

fn fill<T: Float>(shape: Vec<usize>, v: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![T::of(v); n]).expect("sized")
}

fn insert_ffn<T: Float>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    d_out: usize,
    std1: f64,
    std2: f64,
) -> Result<()> {
    let [w1, b1, w2, b2] = ffn_names(prefix);
    store.insert(w1, init.normal(vec![d_in, hidden], std1))?;
    store.insert(b1, fill(vec![hidden], 0.0))?;
    store.insert(w2, init.normal(vec![hidden, d_out], std2))?;
    store.insert(b2, fill(vec![d_out], 0.0))?;
    Ok(())
}

fn expect_shape<T: Float>(store: &ParamStore<T>, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store.id(name)?;
    if store.tensor(id).shape() != shape {
        return Err(Error::shape(
            "model parameters",
            format!("`{name}` has shape {:?}, expected {shape:?}", store.tensor(id).shape()),
        ));
    }
    Ok(id)
}

fn resolve_ffn<T: Float>(store: &ParamStore<T>, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<FfnParams> {
    let [w1, b1, w2, b2] = ffn_names(prefix);
    Ok(FfnParams {
        w1: expect_shape(store, &w1, &[d_in, hidden])?,
        b1: expect_shape(store, &b1, &[hidden])?,
        w2: expect_shape(store, &w2, &[hidden, d_out])?,
        b2: expect_shape(store, &b2, &[d_out])?,
    })
}

/// `fc2(GeLU(fc1(x)))` on the rows of `x`.
pub fn ffn_forward<T: Float>(tape: &mut Tape<T>, vars: &[Var], p: &FfnParams, x: Var) -> Result<Var> {
    let h = tape.matmul(x, vars[p.w1.0])?;
    let h = tape.add_bias(h, vars[p.b1.0])?;
    let h = tape.gelu(h)?;
    let y = tape.matmul(h, vars[p.w2.0])?;
    tape.add_bias(y, vars[p.b2.0])
}

/// Pre-norm causal self-attention with residual: `x + Wo·Attn(norm(x))`.
pub fn attention_block_forward<T: Float>(
    tape: &mut Tape<T>,
    vars: &[Var],
    p: &BlockParams,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let h = tape.rms_norm(x, vars[p.attn_norm.0], T::of(NORM_EPS))?;
    let q = tape.matmul(h, vars[p.wq.0])?;
    let k = tape.matmul(h, vars[p.wk.0])?;
    let v = tape.matmul(h, vars[p.wv.0])?;
    let a = tape.causal_attention(q, k, v, batch, seq, heads)?;
    let o = tape.matmul(a, vars[p.wo.0])?;
    tape.add(x, o)
}

impl<T: Float> Model<T> {
    /// Fresh randomly initialized model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let mut s = ParamStore::new();
        let pd = config.patch_dim;
        s.insert("patch_embed.w", init.normal(vec![pd, d], 1.0 / (pd as f64).sqrt()))?;
        s.insert("patch_embed.b", fill(vec![d], 0.0))?;
        // Fan-in scale for the connector and attention projections.
        let conn_std = 1.0 / (d as f64).sqrt();
        insert_ffn(&mut s, &mut init, "connector", d, d, d, conn_std, conn_std)?;
        s.insert("tok_embed", init.normal(vec![config.vocab_size, d], INIT_STD))?;
        s.insert("pos_embed", init.normal(vec![config.max_seq_len, d], INIT_STD))?;
        let plan = config.moe.as_ref().map(|m| m.plan()).transpose()?;
        for b in 0..config.n_layers {
            let pre = block_prefix(b);
            s.insert(format!("{pre}.attn_norm.g"), fill(vec![d], 1.0))?;
            for w in ["wq", "wk", "wv", "wo"] {
                s.insert(format!("{pre}.attn.{w}"), init.normal(vec![d, d], conn_std))?;
            }
            s.insert(format!("{pre}.ffn_norm.g"), fill(vec![d], 1.0))?;
            let hidden = config.ffn_hidden[b];
            match (&plan, config.is_moe_block(b)) {
                (Some(plan), true) => {
                    for e in 0..plan.num_experts() {
                        insert_ffn(&mut s, &mut init, &expert_prefix(b, e), d, hidden, d, INIT_STD, INIT_STD)?;
                    }
                    for r in &plan.routers {
                        s.insert(router_name(b, r.kind.name()), init.normal(vec![d, r.pool.len()], INIT_STD))?;
                    }
                }
                _ => insert_ffn(&mut s, &mut init, &format!("{pre}.ffn"), d, hidden, d, INIT_STD, INIT_STD)?,
            }
        }
        s.insert("final_norm.g", fill(vec![d], 1.0))?;
        s.insert("lm_head.w", init.normal(vec![d, config.vocab_size], INIT_STD))?;
        Self::from_params(config, s)
    }

    /// Assembles a model from named parameters, checking every expected name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let plan = config.moe.as_ref().map(|m| m.plan()).transpose()?;
        let s = &params;
        let patch = (expect_shape(s, "patch_embed.w", &[config.patch_dim, d])?, expect_shape(s, "patch_embed.b", &[d])?);
        let connector = resolve_ffn(s, "connector", d, d, d)?;
        let tok = expect_shape(s, "tok_embed", &[config.vocab_size, d])?;
        let pos = expect_shape(s, "pos_embed", &[config.max_seq_len, d])?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for b in 0..config.n_layers {
            let pre = block_prefix(b);
            let hidden = config.ffn_hidden[b];
            let ffn = match (&plan, config.is_moe_block(b)) {
                (Some(plan), true) => BlockFfn::Moe {
                    experts: (0..plan.num_experts())
                        .map(|e| resolve_ffn(s, &expert_prefix(b, e), d, hidden, d))
                        .collect::<Result<_>>()?,
                    routers: plan
                        .routers
                        .iter()
                        .map(|r| expect_shape(s, &router_name(b, r.kind.name()), &[d, r.pool.len()]))
                        .collect::<Result<_>>()?,
                },
                _ => BlockFfn::Dense(resolve_ffn(s, &format!("{pre}.ffn"), d, hidden, d)?),
            };
            blocks.push(BlockParams {
                attn_norm: expect_shape(s, &format!("{pre}.attn_norm.g"), &[d])?,
                wq: expect_shape(s, &format!("{pre}.attn.wq"), &[d, d])?,
                wk: expect_shape(s, &format!("{pre}.attn.wk"), &[d, d])?,
                wv: expect_shape(s, &format!("{pre}.attn.wv"), &[d, d])?,
                wo: expect_shape(s, &format!("{pre}.attn.wo"), &[d, d])?,
                ffn_norm: expect_shape(s, &format!("{pre}.ffn_norm.g"), &[d])?,
                ffn,
            });
        }
        let final_norm = expect_shape(s, "final_norm.g", &[d])?;
        let head = expect_shape(s, "lm_head.w", &[d, config.vocab_size])?;
        let handles = Handles { patch, connector, tok, pos, blocks, final_norm, head };
        let expected = Self::expected_param_count(&config, plan.as_ref());
        if params.len() != expected {
            return Err(Error::Format {
                what: "model parameters",
                detail: format!("{} tensors for a model that uses {expected}", params.len()),
            });
        }
        Ok(Model { config, params, plan, handles })
    }

    fn expected_param_count(config: &ModelConfig, plan: Option<&RoutingPlan>) -> usize {
        let per_block = 6;
        let ffn_tensors: usize = (0..config.n_layers)
            .map(|b| match plan {
                Some(p) if config.is_moe_block(b) => 4 * p.num_experts() + p.routers.len(),
                _ => 4,
            })
            .sum();
        2 + 4 + 2 + config.n_layers * per_block + ffn_tensors + 2
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn plan(&self) -> Option<&RoutingPlan> {
        self.plan.as_ref()
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.handles.blocks
    }

    pub fn connector(&self) -> FfnParams {
        self.handles.connector
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Parameters touched by one token: everything outside MoE layers plus `top_k` experts
    /// and the routers of each MoE block (one router per token).
    pub fn activated_params(&self) -> usize {
        let mut n = self.params.numel_where(|name| !is_moe_param(name));
        for bp in &self.handles.blocks {
            if let BlockFfn::Moe { experts, routers } = &bp.ffn {
                let k = self.plan.as_ref().map_or(0, |p| p.top_k);
                let e = &experts[0];
                let per_expert: usize = [e.w1, e.b1, e.w2, e.b2].iter().map(|id| self.params.tensor(*id).len()).sum();
                n += k * per_expert + self.params.tensor(routers[0]).len();
            }
        }
        n
    }

    /// Converts every parameter to another float type.
    pub fn cast<U: Float>(&self) -> Model<U> {
        let mut s = ParamStore::new();
        for (id, name, t) in self.params.iter() {
            let nid = s.insert(name, t.cast::<U>()).expect("unique names");
            s.set_trainable(nid, self.params.is_trainable(id));
        }
        Model::from_params(self.config.clone(), s).expect("same layout")
    }

    /// Embeds every position of `batch` into `positions × d` rows, image rows through the patch
    /// embedder and connector, text rows through the token table, plus positional embeddings.
    pub fn embed_batch(&self, tape: &mut Tape<T>, vars: &[Var], batch: &Batch) -> Result<Var> {
        let h = &self.handles;
        if batch.seq_len > self.config.max_seq_len {
            return Err(Error::shape(
                "embed",
                format!("sequence length {} exceeds the model maximum {}", batch.seq_len, self.config.max_seq_len),
            ));
        }
        let mut text_ids = Vec::new();
        let mut order = Vec::with_capacity(batch.positions());
        let m = batch.patch_features.len() / self.config.patch_dim;
        if batch.patch_features.len() % self.config.patch_dim != 0 {
            return Err(Error::shape("embed", format!("patch features are not {} wide", self.config.patch_dim)));
        }
        for slot in &batch.slots {
            match *slot {
                Slot::Image(r) => order.push(r),
                Slot::Text(id) => {
                    if id >= self.config.vocab_size {
                        return Err(Error::invalid(format!("text id {id} outside vocabulary of {}", self.config.vocab_size)));
                    }
                    order.push(m + text_ids.len());
                    text_ids.push(id);
                }
            }
        }
        let mut parts = Vec::with_capacity(2);
        if m > 0 {
            let feats: Vec<T> = batch.patch_features.iter().map(|v| T::of(*v)).collect();
            let f = tape.constant(Tensor::new(vec![m, self.config.patch_dim], feats)?)?;
            let e = tape.matmul(f, vars[h.patch.0 .0])?;
            let e = tape.add_bias(e, vars[h.patch.1 .0])?;
            parts.push(ffn_forward(tape, vars, &h.connector, e)?);
        }
        if !text_ids.is_empty() {
            parts.push(tape.embedding(vars[h.tok.0], &text_ids)?);
        }
        let tokens = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let x = tape.gather_rows(tokens, &order)?;
        let pos_ids: Vec<usize> = (0..batch.positions()).map(|p| p % batch.seq_len).collect();
        let pos = tape.gather_rows(vars[h.pos.0], &pos_ids)?;
        tape.add(x, pos)
    }

    /// Embeds a single sequence of `m` patches (row-major `m × patch_dim`) followed by `n` text ids.
    pub fn embed_multimodal(&self, tape: &mut Tape<T>, patch_features: &[f64], text_ids: &[usize]) -> Result<ModalitySequence> {
        let batch = Batch::from_sequences(&[SequenceInput { patch_features, text_ids, answer: None, task: None }])?;
        let vars = tape.params(&self.params)?;
        let embeddings = self.embed_batch(tape, &vars, &batch)?;
        let m = batch.image_rows();
        Ok(ModalitySequence { embeddings, tags: batch.tags, m, n: text_ids.len() })
    }

    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch) -> Result<ForwardOutput> {
        self.forward_with(tape, batch, ForwardOptions::default())
    }

    pub fn forward_with(&self, tape: &mut Tape<T>, batch: &Batch, opts: ForwardOptions) -> Result<ForwardOutput> {
        let vars = tape.params(&self.params)?;
        self.forward_vars(tape, &vars, batch, opts)
    }

    /// Forward pass with parameter handles already recorded on `tape`.
    pub fn forward_vars(&self, tape: &mut Tape<T>, vars: &[Var], batch: &Batch, opts: ForwardOptions) -> Result<ForwardOutput> {
        let mut x = self.embed_batch(tape, vars, batch)?;
        let include: Vec<bool> = batch.pad.iter().map(|p| !p).collect();
        let mut trace = RoutingTrace::default();
        let mut layer_aux = Vec::new();
        let mut routing = Vec::new();
        for (b, bp) in self.handles.blocks.iter().enumerate() {
            x = attention_block_forward(tape, vars, bp, x, batch.size, batch.seq_len, self.config.n_heads)?;
            let h = tape.rms_norm(x, vars[bp.ffn_norm.0], T::of(NORM_EPS))?;
            let y = match &bp.ffn {
                BlockFfn::Dense(p) => ffn_forward(tape, vars, p, h)?,
                BlockFfn::Moe { experts, routers } => {
                    let plan = self.plan.as_ref().expect("MoE block implies a plan");
                    let rvars: Vec<Var> = routers.iter().map(|id| vars[id.0]).collect();
                    let records = crate::moe::route(tape, h, &rvars, plan, &batch.tags, &include, opts.force_group)?;
                    let y = dispatch_combine(tape, h, &records, experts.len(), |tape, e, xe| {
                        ffn_forward(tape, vars, &experts[e], xe)
                    })?;
                    trace.add_layer(b, layer_trace(tape, plan, &batch.tags, &records))?;
                    if opts.force_group.is_none() && !opts.skip_aux {
                        let scale = self.config.moe.as_ref().map(|m| m.aux_scale).unwrap_or_default();
                        if let Some(a) = load_balance_aux(tape, &records, experts.len(), scale)? {
                            layer_aux.push((b, a));
                        }
                    }
                    routing.push((b, records));
                    y
                }
            };
            x = tape.add(x, y)?;
        }
        let x = tape.rms_norm(x, vars[self.handles.final_norm.0], T::of(NORM_EPS))?;
        let logits = tape.matmul(x, vars[self.handles.head.0])?;
        let aux = match layer_aux.len() {
            0 => None,
            n => {
                let mut acc = layer_aux[0].1;
                for &(_, a) in &layer_aux[1..] {
                    acc = tape.add(acc, a)?;
                }
                Some(if n == 1 { acc } else { tape.scale(acc, T::of(1.0 / n as f64))? })
            }
        };
        Ok(ForwardOutput { logits, trace, aux, layer_aux, routing })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_cross_modal_example, gen_image_only_example, gen_text_only_example};
    use crate::nn::config::{MoeConfig, Placement};

    fn small(placement: Placement) -> ModelConfig {
        let moe = (placement != Placement::Dense).then(MoeConfig::default);
        let mut c = ModelConfig::new(16, 4, 2, placement, moe, 3);
        c.max_seq_len = 32;
        c
    }

    fn mixed_batch() -> Batch {
        let a = gen_cross_modal_example(1).unwrap();
        let b = gen_text_only_example(2);
        let c = gen_image_only_example(3);
        Batch::from_examples(&[&a, &b, &c]).unwrap()
    }

    #[test]
    fn embed_concatenates_image_first() {
        let model = Model::<f64>::new(small(Placement::Dense)).unwrap();
        let mut tape = Tape::new();
        let feats = vec![0.1; 16 * 16];
        let ids: Vec<usize> = (0..12).collect();
        let seq = model.embed_multimodal(&mut tape, &feats, &ids).unwrap();
        assert_eq!(tape.shape(seq.embeddings), &[28, 16]);
        assert!(seq.tags[..16].iter().all(|t| *t == Modality::Image));
        assert!(seq.tags[16..].iter().all(|t| *t == Modality::Text));
        let only = model.embed_multimodal(&mut tape, &feats, &[]).unwrap();
        assert_eq!((only.m, only.n), (16, 0));
        assert!(model.embed_multimodal(&mut tape, &[], &[]).is_err());
        assert!(model.embed_multimodal(&mut tape, &[], &[64]).is_err());
    }

    #[test]
    fn ffn_fixture() {
        let mut s = ParamStore::<f64>::new();
        let p = FfnParams {
            w1: s.insert("w1", Tensor::from_f64(vec![1, 1], &[1.0]).unwrap()).unwrap(),
            b1: s.insert("b1", Tensor::from_f64(vec![1], &[0.0]).unwrap()).unwrap(),
            w2: s.insert("w2", Tensor::from_f64(vec![1, 1], &[2.0]).unwrap()).unwrap(),
            b2: s.insert("b2", Tensor::from_f64(vec![1], &[0.0]).unwrap()).unwrap(),
        };
        let mut tape = Tape::new();
        let vars = tape.params(&s).unwrap();
        let x = tape.constant(Tensor::from_f64(vec![1, 1], &[1.0]).unwrap()).unwrap();
        let y = ffn_forward(&mut tape, &vars, &p, x).unwrap();
        let gelu1 = 0.5 * (1.0 + libm::erf(std::f64::consts::FRAC_1_SQRT_2));
        assert!((tape.value(y).item() - 2.0 * gelu1).abs() < 1e-15);

        for id in [p.w1, p.b1, p.w2, p.b2] {
            s.tensor_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let vars = tape.params(&s).unwrap();
        let x = tape.constant(Tensor::from_f64(vec![1, 1], &[3.7]).unwrap()).unwrap();
        let y = ffn_forward(&mut tape, &vars, &p, x).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn causal_logits() {
        let model = Model::<f64>::new(small(Placement::Interleaved)).unwrap();
        let a = gen_cross_modal_example(5).unwrap();
        let mut b = a.clone();
        let run = |e: &crate::data::SyntheticExample| {
            let batch = Batch::from_examples(&[e]).unwrap();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch).unwrap();
            tape.value(out.logits).data().to_vec()
        };
        b.text_ids[2] = 40;
        let (la, lb) = (run(&a), run(&b));
        let v = model.config().vocab_size;
        // Text index 2 is sequence position 18; positions up to 17 must be untouched.
        assert_eq!(la[..18 * v], lb[..18 * v]);
        assert_ne!(la[18 * v..], lb[18 * v..]);
    }

    #[test]
    fn attention_singleton_and_residual_identity() {
        let mut model = Model::<f64>::new(small(Placement::Dense)).unwrap();
        let bp = model.blocks()[0].clone();
        let mut tape = Tape::new();
        let vars = tape.params(model.params()).unwrap();
        let x = tape.constant(Tensor::from_f64(vec![1, 16], &(0..16).map(|i| i as f64 * 0.1 - 0.7).collect::<Vec<_>>()).unwrap()).unwrap();
        let out = attention_block_forward(&mut tape, &vars, &bp, x, 1, 1, 2).unwrap();
        // Single position: attention output is the value projection of the normed token.
        let h = tape.rms_norm(x, vars[bp.attn_norm.0], NORM_EPS).unwrap();
        let v = tape.matmul(h, vars[bp.wv.0]).unwrap();
        let o = tape.matmul(v, vars[bp.wo.0]).unwrap();
        let expect = tape.add(x, o).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(expect).data()) {
            assert!((a - b).abs() < 1e-14);
        }

        model.params_mut().tensor_mut(bp.wo).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let vars = tape.params(model.params()).unwrap();
        let xv: Vec<f64> = (0..48).map(|i| (i as f64).sin()).collect();
        let x = tape.constant(Tensor::new(vec![3, 16], xv.clone()).unwrap()).unwrap();
        let out = attention_block_forward(&mut tape, &vars, &bp, x, 1, 3, 2).unwrap();
        assert_eq!(tape.value(out).data(), &xv[..]);
    }

    #[test]
    fn placement_counts_and_dense_trace() {
        let mixed = mixed_batch();
        for (placement, expect) in [(Placement::Dense, 0), (Placement::Interleaved, 2), (Placement::Full, 4)] {
            let model = Model::<f64>::new(small(placement)).unwrap();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &mixed).unwrap();
            assert_eq!(out.trace.layers.len(), expect);
            assert_eq!(out.routing.len(), expect);
            assert_eq!(out.aux.is_some(), expect > 0);
            assert_eq!(tape.shape(out.logits), &[mixed.positions(), 64]);
        }
    }

    #[test]
    fn pad_excluded_from_trace() {
        let model = Model::<f64>::new(small(Placement::Interleaved)).unwrap();
        let batch = mixed_batch();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch).unwrap();
        let lt = &out.trace.layers[&1];
        let text_tokens = batch.tags.iter().zip(&batch.pad).filter(|(t, p)| **t == Modality::Text && !**p).count();
        assert_eq!(lt.get(Modality::Text).tokens as usize, text_tokens);
        assert_eq!(lt.get(Modality::Text).counts.iter().sum::<u64>() as usize, 2 * text_tokens);
    }

    #[test]
    fn deterministic_forward() {
        let batch = mixed_batch();
        let run = || {
            let model = Model::<f64>::new(small(Placement::Interleaved)).unwrap();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch).unwrap();
            tape.value(out.logits).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn from_params_rejects_missing_and_extra() {
        let model = Model::<f64>::new(small(Placement::Dense)).unwrap();
        let cfg = model.config().clone();
        let mut extra = model.params().clone();
        extra.insert("stray", Tensor::zeros(vec![1])).unwrap();
        assert!(Model::from_params(cfg.clone(), extra).is_err());
        let moe_cfg = small(Placement::Interleaved);
        assert!(matches!(Model::from_params(moe_cfg, model.into_params()), Err(Error::MissingParam(_))));
    }
}
