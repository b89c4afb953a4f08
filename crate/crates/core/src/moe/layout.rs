//! Expert allocation and the candidate pools each router may choose from.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};

/// Which family an expert belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExpertGroup {
    /// Intra-modality, text only (`T`).
    Text,
    /// Intra-modality, image only (`I`).
    Image,
    /// Inter-modality, reachable from both (`S`).
    Shared,
}

impl ExpertGroup {
    pub fn label(self) -> &'static str {
        match self {
            ExpertGroup::Text => "T",
            ExpertGroup::Image => "I",
            ExpertGroup::Shared => "S",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "T" | "t" | "text" => Some(ExpertGroup::Text),
            "I" | "i" | "image" => Some(ExpertGroup::Image),
            "S" | "s" | "shared" => Some(ExpertGroup::Shared),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Balance {
    Balanced,
    Unbalanced { vision: usize, language: usize, shared: usize },
}

impl fmt::Display for Balance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Balance::Balanced => write!(f, "balanced"),
            Balance::Unbalanced { vision, language, shared } => write!(f, "unbalanced:{vision},{language},{shared}"),
        }
    }
}

impl FromStr for Balance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "balanced" {
            return Ok(Balance::Balanced);
        }
        let counts = s
            .strip_prefix("unbalanced:")
            .ok_or_else(|| format!("expected `balanced` or `unbalanced:v,l,s`, got `{s}`"))?;
        let v: Vec<usize> = counts
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad count `{p}`")))
            .collect::<Result<_, _>>()?;
        match v.as_slice() {
            [vision, language, shared] => Ok(Balance::Unbalanced { vision: *vision, language: *language, shared: *shared }),
            _ => Err(format!("expected three counts in `{s}`")),
        }
    }
}

/// MoIIE allocation: global indices are laid out `[E^T | E^I | E^S]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertLayout {
    pub text: Range<usize>,
    pub image: Range<usize>,
    pub shared: Range<usize>,
    pub top_k: usize,
    pub balance: Balance,
}

impl ExpertLayout {
    /// `(|E^T|, |E^I|, |E^S|)`.
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.text.len(), self.image.len(), self.shared.len())
    }

    pub fn total(&self) -> usize {
        self.shared.end
    }

    /// Per-modality intra-expert count `L` (the text count when unbalanced).
    pub fn per_modality(&self) -> usize {
        self.text.len()
    }

    pub fn group_of(&self, expert: usize) -> ExpertGroup {
        if self.text.contains(&expert) {
            ExpertGroup::Text
        } else if self.image.contains(&expert) {
            ExpertGroup::Image
        } else {
            ExpertGroup::Shared
        }
    }

    /// Candidate pool of the router for `modality`: its intra group followed by the shared group.
    pub fn pool(&self, modality: Modality) -> Vec<usize> {
        let intra = match modality {
            Modality::Text => self.text.clone(),
            Modality::Image => self.image.clone(),
        };
        intra.chain(self.shared.clone()).collect()
    }
}

/// Validates an allocation of `total` experts.
pub fn build_expert_layout(total: usize, balance: Balance, top_k: usize) -> Result<ExpertLayout> {
    let (t, i, s) = match balance {
        Balance::Balanced => {
            if total == 0 || total % 4 != 0 {
                return Err(Error::invalid(format!("balanced layout needs a positive multiple of 4 experts, got {total}")));
            }
            let l = total / 4;
            (l, l, 2 * l)
        }
        Balance::Unbalanced { vision, language, shared } => {
            if vision + language + shared != total {
                return Err(Error::invalid(format!(
                    "unbalanced counts {vision}+{language}+{shared} do not sum to {total}"
                )));
            }
            (language, vision, shared)
        }
    };
    let min_pool = (t + s).min(i + s);
    if top_k == 0 || top_k > min_pool {
        return Err(Error::invalid(format!("top_k {top_k} must be in 1..={min_pool}")));
    }
    Ok(ExpertLayout { text: 0..t, image: t..t + i, shared: t + i..t + i + s, top_k, balance })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MoeVariant {
    /// One router over every expert for all tokens.
    Vanilla,
    /// Disjoint text and image halves, no shared experts.
    Modality,
    /// Intra-modality groups plus a shared group.
    Moiie,
}

impl MoeVariant {
    pub fn name(self) -> &'static str {
        match self {
            MoeVariant::Vanilla => "vanilla",
            MoeVariant::Modality => "modality",
            MoeVariant::Moiie => "moiie",
        }
    }
}

impl FromStr for MoeVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(MoeVariant::Vanilla),
            "modality" => Ok(MoeVariant::Modality),
            "moiie" => Ok(MoeVariant::Moiie),
            _ => Err(format!("unknown MoE variant `{s}` (vanilla, modality, moiie)")),
        }
    }
}

/// Which tokens a router serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RouterKind {
    Text,
    Image,
    All,
}

impl RouterKind {
    pub fn name(self) -> &'static str {
        match self {
            RouterKind::Text => "text",
            RouterKind::Image => "image",
            RouterKind::All => "all",
        }
    }

    pub fn serves(self, m: Modality) -> bool {
        matches!((self, m), (RouterKind::All, _) | (RouterKind::Text, Modality::Text) | (RouterKind::Image, Modality::Image))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterSpec {
    pub kind: RouterKind,
    /// Global expert indices; column `j` of the router weight scores `pool[j]`.
    pub pool: Vec<usize>,
}

/// Everything a MoE block needs to route: expert groups, routers and their pools.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingPlan {
    pub variant: MoeVariant,
    pub groups: Vec<ExpertGroup>,
    pub routers: Vec<RouterSpec>,
    pub top_k: usize,
}

impl RoutingPlan {
    pub fn moiie(layout: &ExpertLayout) -> Self {
        RoutingPlan {
            variant: MoeVariant::Moiie,
            groups: (0..layout.total()).map(|e| layout.group_of(e)).collect(),
            routers: vec![
                RouterSpec { kind: RouterKind::Text, pool: layout.pool(Modality::Text) },
                RouterSpec { kind: RouterKind::Image, pool: layout.pool(Modality::Image) },
            ],
            top_k: layout.top_k,
        }
    }

    pub fn vanilla(total: usize, top_k: usize) -> Result<Self> {
        if total == 0 || top_k == 0 || top_k > total {
            return Err(Error::invalid(format!("vanilla MoE with {total} experts cannot select top {top_k}")));
        }
        Ok(RoutingPlan {
            variant: MoeVariant::Vanilla,
            groups: vec![ExpertGroup::Shared; total],
            routers: vec![RouterSpec { kind: RouterKind::All, pool: (0..total).collect() }],
            top_k,
        })
    }

    /// Splits `total` experts into a text half and an image half.
    pub fn modality(total: usize, top_k: usize) -> Result<Self> {
        if total == 0 || total % 2 != 0 {
            return Err(Error::invalid(format!("modality MoE needs an even expert count, got {total}")));
        }
        let half = total / 2;
        if top_k == 0 || top_k > half {
            return Err(Error::invalid(format!("top_k {top_k} exceeds modality pool of {half}")));
        }
        let mut groups = vec![ExpertGroup::Text; half];
        groups.extend(vec![ExpertGroup::Image; half]);
        Ok(RoutingPlan {
            variant: MoeVariant::Modality,
            groups,
            routers: vec![
                RouterSpec { kind: RouterKind::Text, pool: (0..half).collect() },
                RouterSpec { kind: RouterKind::Image, pool: (half..total).collect() },
            ],
            top_k,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.groups.len()
    }

    pub fn group_members(&self, group: ExpertGroup) -> Vec<usize> {
        (0..self.groups.len()).filter(|e| self.groups[*e] == group).collect()
    }

    /// Index of the router serving tokens of modality `m`.
    pub fn router_for(&self, m: Modality) -> usize {
        self.routers.iter().position(|r| r.kind.serves(m)).expect("every plan serves both modalities")
    }
}
