use std::fmt;
use std::str::FromStr;

use crate::data::vocab::{PATCH_DIM, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::moe::{build_expert_layout, AuxScale, Balance, MoeVariant, RoutingPlan};

/// Which blocks carry a MoE layer instead of a dense FFN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Placement {
    Dense,
    /// Odd 0-based block indices.
    Interleaved,
    Full,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::Dense => "dense",
            Placement::Interleaved => "interleaved",
            Placement::Full => "full",
        }
    }

    pub fn moe_blocks(self, n_layers: usize) -> Vec<usize> {
        match self {
            Placement::Dense => Vec::new(),
            Placement::Interleaved => (1..n_layers).step_by(2).collect(),
            Placement::Full => (0..n_layers).collect(),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(Placement::Dense),
            "interleaved" => Ok(Placement::Interleaved),
            "full" => Ok(Placement::Full),
            _ => Err(format!("unknown placement `{s}` (dense, interleaved, full)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeConfig {
    pub variant: MoeVariant,
    pub experts: usize,
    pub balance: Balance,
    pub top_k: usize,
    pub aux_scale: AuxScale,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig { variant: MoeVariant::Moiie, experts: 4, balance: Balance::Balanced, top_k: 2, aux_scale: AuxScale::PerPool }
    }
}

impl MoeConfig {
    pub fn plan(&self) -> Result<RoutingPlan> {
        match self.variant {
            MoeVariant::Moiie => Ok(RoutingPlan::moiie(&build_expert_layout(self.experts, self.balance, self.top_k)?)),
            MoeVariant::Vanilla => RoutingPlan::vanilla(self.experts, self.top_k),
            MoeVariant::Modality => RoutingPlan::modality(self.experts, self.top_k),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub patch_dim: usize,
    /// FFN hidden width per block; every expert of a MoE block uses its block's width.
    pub ffn_hidden: Vec<usize>,
    pub placement: Placement,
    pub moe: Option<MoeConfig>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(64, 4, 4, Placement::Interleaved, Some(MoeConfig::default()), 0)
    }
}

impl ModelConfig {
    pub fn new(d: usize, n_layers: usize, n_heads: usize, placement: Placement, moe: Option<MoeConfig>, seed: u64) -> Self {
        ModelConfig {
            d,
            n_layers,
            n_heads,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 64,
            patch_dim: PATCH_DIM,
            ffn_hidden: vec![4 * d; n_layers],
            placement,
            moe,
            seed,
        }
    }

    pub fn dense(d: usize, n_layers: usize, n_heads: usize, seed: u64) -> Self {
        Self::new(d, n_layers, n_heads, Placement::Dense, None, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::config(key, reason));
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad("n_heads", format!("hidden size {} is not divisible by {} heads", self.d, self.n_heads));
        }
        if self.n_layers == 0 {
            return bad("n_layers", "need at least one block".into());
        }
        if self.vocab_size < VOCAB_SIZE {
            return bad("vocab_size", format!("must be at least {VOCAB_SIZE}"));
        }
        if self.patch_dim == 0 || self.max_seq_len == 0 {
            return bad("patch_dim", "patch width and sequence length must be positive".into());
        }
        if self.ffn_hidden.len() != self.n_layers || self.ffn_hidden.contains(&0) {
            return bad("ffn_hidden", format!("need {} positive widths", self.n_layers));
        }
        match (&self.placement, &self.moe) {
            (Placement::Dense, Some(_)) => return bad("placement", "dense placement with a MoE config".into()),
            (Placement::Interleaved | Placement::Full, None) => {
                return bad("variant", format!("{} placement needs a MoE variant", self.placement))
            }
            (_, Some(m)) => {
                m.plan().map_err(|e| Error::config("experts", e.to_string()))?;
            }
            _ => {}
        }
        if self.moe_blocks().is_empty() && self.moe.is_some() {
            return bad("placement", "no block is eligible for a MoE layer".into());
        }
        Ok(())
    }

    pub fn moe_blocks(&self) -> Vec<usize> {
        self.placement.moe_blocks(self.n_layers)
    }

    pub fn is_moe_block(&self, block: usize) -> bool {
        self.moe.is_some() && self.moe_blocks().contains(&block)
    }

    pub fn variant_name(&self) -> &'static str {
        self.moe.as_ref().map_or("dense", |m| m.variant.name())
    }

    /// Dense model with the same skeleton.
    pub fn dense_base(&self) -> Self {
        ModelConfig { placement: Placement::Dense, moe: None, ..self.clone() }
    }

    /// Reads model keys from `kv`, leaving other keys in place.
    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let base = ModelConfig::default();
        let d = kv.take_or("d", base.d)?;
        let n_layers = kv.take_or("n_layers", base.n_layers)?;
        let n_heads = kv.take_or("n_heads", base.n_heads)?;
        let variant: String = kv.take_or("variant", "moiie".to_string())?;
        let moe_defaults = MoeConfig::default();
        let experts = kv.take_or("experts", moe_defaults.experts)?;
        let balance = kv.take_or("balance", moe_defaults.balance)?;
        let top_k = kv.take_or("top_k", moe_defaults.top_k)?;
        let aux_scale = kv.take_or("aux_pool", moe_defaults.aux_scale)?;
        let moe = if variant == "dense" {
            None
        } else {
            let variant = variant.parse::<MoeVariant>().map_err(|e| Error::config("variant", e))?;
            Some(MoeConfig { variant, experts, balance, top_k, aux_scale })
        };
        let default_placement = if moe.is_some() { Placement::Interleaved } else { Placement::Dense };
        let placement = kv.take_or("placement", default_placement)?;
        let mut cfg = ModelConfig::new(d, n_layers, n_heads, placement, moe, 0);
        cfg.vocab_size = kv.take_or("vocab_size", cfg.vocab_size)?;
        cfg.max_seq_len = kv.take_or("max_seq_len", cfg.max_seq_len)?;
        cfg.patch_dim = kv.take_or("patch_dim", cfg.patch_dim)?;
        if let Some(widths) = kv.take::<String>("ffn_hidden")? {
            cfg.ffn_hidden = widths
                .split(',')
                .map(|w| w.trim().parse::<usize>().map_err(|e| Error::config("ffn_hidden", e.to_string())))
                .collect::<Result<_>>()?;
        }
        cfg.seed = kv.take_or("seed", 0u64)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("d", self.d.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("patch_dim", self.patch_dim.to_string()),
            ("ffn_hidden", self.ffn_hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")),
            ("placement", self.placement.to_string()),
            ("variant", self.variant_name().to_string()),
        ];
        if let Some(m) = &self.moe {
            v.push(("experts", m.experts.to_string()));
            v.push(("balance", m.balance.to_string()));
            v.push(("top_k", m.top_k.to_string()));
            v.push(("aux_pool", m.aux_scale.name().to_string()));
        }
        v.push(("seed", self.seed.to_string()));
        v
    }
}
