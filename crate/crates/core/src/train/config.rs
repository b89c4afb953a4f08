use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::DType;
use crate::data::TaskSizes;
use crate::error::{Error, Result};
use crate::kv::{render, KvMap};
use crate::nn::{ModelConfig, ParamGroup};

/// Everything a two-stage run needs. `model` describes the stage-2 (possibly sparse) model;
/// stage 1 always trains its dense base.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub model: ModelConfig,
    pub dtype: DType,
    pub batch_size: usize,
    pub data_seed: u64,
    pub train_sizes: TaskSizes,
    pub eval_sizes: TaskSizes,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    /// Groups trained in stage 1; only the connector is allowed.
    pub stage1_trainable: Vec<ParamGroup>,
    pub total_steps: usize,
    /// Backbone and connector learning rate in stage 2.
    pub lr: f64,
    /// Patch-embedder learning rate as a fraction of `lr`.
    pub patch_lr_ratio: f64,
    pub alpha: f64,
    pub warmup_ratio: f64,
    pub trace_every: usize,
    /// Evaluate every this many stage-2 steps (0: only at the end).
    pub eval_every: usize,
    /// Dense baseline: widen the FFN at would-be MoE blocks to `top_k` times its width so the
    /// activated parameter count matches the sparse variants.
    pub dense_match: bool,
    /// Placement and top-k the dense baseline matches when `dense_match` is set.
    pub match_placement: crate::nn::Placement,
    pub match_top_k: usize,
    /// Dense full-parameter SFT, then upcycling with only MoE parameters trainable.
    pub three_stage: bool,
    pub sft_steps: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            model: ModelConfig::default(),
            dtype: DType::F32,
            batch_size: 32,
            data_seed: 0,
            train_sizes: TaskSizes([4000, 3000, 3000]),
            eval_sizes: TaskSizes([800, 600, 600]),
            stage1_steps: 300,
            stage1_lr: 1e-3,
            stage1_trainable: vec![ParamGroup::Connector],
            total_steps: 2000,
            lr: 2e-3,
            patch_lr_ratio: 0.1,
            alpha: 0.001,
            warmup_ratio: 0.03,
            trace_every: 50,
            eval_every: 0,
            dense_match: true,
            match_placement: crate::nn::Placement::Interleaved,
            match_top_k: 2,
            three_stage: false,
            sft_steps: 1000,
        }
    }
}

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::PatchEmbedder => "patch_embedder",
        ParamGroup::Connector => "connector",
        ParamGroup::Backbone => "backbone",
    }
}

fn parse_group(s: &str) -> Result<ParamGroup> {
    match s.trim() {
        "patch_embedder" => Ok(ParamGroup::PatchEmbedder),
        "connector" => Ok(ParamGroup::Connector),
        "backbone" => Ok(ParamGroup::Backbone),
        other => Err(Error::config("stage1_trainable", format!("unknown parameter group `{other}`"))),
    }
}

impl TrainingConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let cfg = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = TrainingConfig::default();
        let model = ModelConfig::from_kv(kv)?;
        let data_seed = kv.take_or("data_seed", model.seed)?;
        let stage1_trainable = match kv.take::<String>("stage1_trainable")? {
            None => d.stage1_trainable.clone(),
            Some(list) => list.split(',').map(parse_group).collect::<Result<_>>()?,
        };
        let cfg = TrainingConfig {
            dtype: kv.take_or("dtype", d.dtype)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            data_seed,
            train_sizes: kv.take_or("train_sizes", d.train_sizes)?,
            eval_sizes: kv.take_or("eval_sizes", d.eval_sizes)?,
            stage1_steps: kv.take_or("stage1_steps", d.stage1_steps)?,
            stage1_lr: kv.take_or("stage1_lr", d.stage1_lr)?,
            stage1_trainable,
            total_steps: kv.take_or("total_steps", d.total_steps)?,
            lr: kv.take_or("lr", d.lr)?,
            patch_lr_ratio: kv.take_or("patch_lr_ratio", d.patch_lr_ratio)?,
            alpha: kv.take_or("alpha", d.alpha)?,
            warmup_ratio: kv.take_or("warmup_ratio", d.warmup_ratio)?,
            trace_every: kv.take_or("trace_every", d.trace_every)?,
            eval_every: kv.take_or("eval_every", d.eval_every)?,
            dense_match: kv.take_or("dense_match", d.dense_match)?,
            match_placement: kv.take_or("match_placement", d.match_placement)?,
            match_top_k: kv.take_or("match_top_k", d.match_top_k)?,
            three_stage: kv.take_or("three_stage", d.three_stage)?,
            sft_steps: kv.take_or("sft_steps", d.sft_steps)?,
            model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |key: &str, reason: &str| Err(Error::config(key, reason));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be a finite value >= 0");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio", "must lie in [0, 1)");
        }
        for (key, v) in [("lr", self.lr), ("stage1_lr", self.stage1_lr), ("patch_lr_ratio", self.patch_lr_ratio)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, "must be a finite value >= 0");
            }
        }
        if self.stage1_trainable.iter().any(|g| *g != ParamGroup::Connector) {
            return bad("stage1_trainable", "only the connector may be trained in stage 1");
        }
        if self.train_sizes.total() == 0 {
            return bad("train_sizes", "training set is empty");
        }
        if self.eval_sizes.total() == 0 {
            return bad("eval_sizes", "evaluation set is empty");
        }
        if self.three_stage && self.model.moe.is_none() {
            return bad("three_stage", "needs a MoE variant");
        }
        if self.match_top_k == 0 {
            return bad("match_top_k", "must be positive");
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = self.model.to_pairs();
        v.extend([
            ("dtype", self.dtype.name().to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("train_sizes", self.train_sizes.to_string()),
            ("eval_sizes", self.eval_sizes.to_string()),
            ("stage1_steps", self.stage1_steps.to_string()),
            ("stage1_lr", self.stage1_lr.to_string()),
            (
                "stage1_trainable",
                self.stage1_trainable.iter().map(|g| group_name(*g)).collect::<Vec<_>>().join(","),
            ),
            ("total_steps", self.total_steps.to_string()),
            ("lr", self.lr.to_string()),
            ("patch_lr_ratio", self.patch_lr_ratio.to_string()),
            ("alpha", self.alpha.to_string()),
            ("warmup_ratio", self.warmup_ratio.to_string()),
            ("trace_every", self.trace_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("dense_match", self.dense_match.to_string()),
            ("match_placement", self.match_placement.to_string()),
            ("match_top_k", self.match_top_k.to_string()),
            ("three_stage", self.three_stage.to_string()),
            ("sft_steps", self.sft_steps.to_string()),
        ]);
        v
    }

    pub fn render(&self) -> String {
        render(&self.to_pairs())
    }

    /// First 12 hex digits of the SHA-256 of the rendered configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Run directory name: configuration hash plus seed.
    pub fn run_name(&self) -> String {
        format!("{}-s{}", self.hash(), self.model.seed)
    }

    /// Sets the stage-2 variant from a name (`dense`, `vanilla`, `modality`, `moiie`).
    pub fn set_variant(&mut self, name: &str) -> Result<()> {
        if name == "dense" {
            if let Some(m) = &self.model.moe {
                self.match_top_k = m.top_k;
                self.match_placement = self.model.placement;
            }
            self.model.moe = None;
            self.model.placement = crate::nn::Placement::Dense;
        } else {
            let variant = name.parse().map_err(|e: String| Error::config("variant", e))?;
            let mut moe = self.model.moe.clone().unwrap_or_default();
            moe.variant = variant;
            self.model.moe = Some(moe);
            if self.model.placement == crate::nn::Placement::Dense {
                self.model.placement = self.match_placement;
            }
        }
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_roundtrip() {
        let c = TrainingConfig::parse("").unwrap();
        assert_eq!(c.alpha, 0.001);
        assert_eq!(c.warmup_ratio, 0.03);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.total_steps, 2000);
        assert_eq!(c.stage1_lr, 1e-3);
        let back = TrainingConfig::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn errors_name_the_key() {
        let key_of = |text: &str| match TrainingConfig::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(key_of("bogus=1"), "bogus");
        assert_eq!(key_of("alpha=-0.5"), "alpha");
        assert_eq!(key_of("warmup_ratio=1.0"), "warmup_ratio");
        assert_eq!(key_of("stage1_trainable=connector,backbone"), "stage1_trainable");
        assert_eq!(key_of("n_heads=3"), "n_heads");
    }

    #[test]
    fn variant_switch() {
        let mut c = TrainingConfig::default();
        c.set_variant("dense").unwrap();
        assert!(c.model.moe.is_none());
        c.set_variant("modality").unwrap();
        assert_eq!(c.model.placement, crate::nn::Placement::Interleaved);
        assert!(c.set_variant("bogus").is_err());
    }
}
