//! Named parameter collection with freeze groups.
//!
//! Every tensor belongs to exactly one group; the training stages toggle
//! which groups the optimizer may touch. Iteration order is the BTreeMap name
//! order everywhere, which keeps init, gradient accumulation and checkpoint
//! layout deterministic.

use std::collections::BTreeMap;

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("unknown parameter {0}")]
    Unknown(String),
    #[error("parameter name {0} does not match any group pattern")]
    Unclassifiable(String),
    #[error("duplicate parameter {0}")]
    Duplicate(String),
}

/// The seven disjoint groups the freeze schedule operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    /// Patch embedding, encoder layers (incl. their norms) and connector.
    Vision,
    /// Decoder attention + FFN experts routed to visual tokens.
    VisualExperts,
    /// Decoder attention projections routed to text tokens.
    TextAttn,
    /// Decoder FFN experts routed to text tokens.
    TextFfn,
    /// Token embedding table.
    Embeddings,
    /// Output head.
    LmHead,
    /// Decoder layer norms and the final norm (shared across modalities).
    Norms,
}

pub const ALL_GROUPS: [ParamGroup; 7] = [
    ParamGroup::Vision,
    ParamGroup::VisualExperts,
    ParamGroup::TextAttn,
    ParamGroup::TextFfn,
    ParamGroup::Embeddings,
    ParamGroup::LmHead,
    ParamGroup::Norms,
];

impl ParamGroup {
    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::Vision => "vision",
            ParamGroup::VisualExperts => "visual_experts",
            ParamGroup::TextAttn => "text_attn",
            ParamGroup::TextFfn => "text_ffn",
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::LmHead => "lm_head",
            ParamGroup::Norms => "norms",
        }
    }

    fn index(&self) -> usize {
        ALL_GROUPS.iter().position(|g| g == self).unwrap()
    }
}

/// Derives the group from the canonical parameter name. The checkpoint
/// manifest stores names only, so this must stay total over them.
pub fn classify(name: &str) -> Result<ParamGroup, ParamError> {
    if name.starts_with("enc.") {
        return Ok(ParamGroup::Vision);
    }
    if name == "dec.embed" {
        return Ok(ParamGroup::Embeddings);
    }
    if name == "dec.head" {
        return Ok(ParamGroup::LmHead);
    }
    if name == "dec.final_norm" {
        return Ok(ParamGroup::Norms);
    }
    if let Some(rest) = name.strip_prefix("dec.l") {
        if let Some(dot) = rest.find('.') {
            let tail = &rest[dot + 1..];
            if tail.starts_with("norm_") {
                return Ok(ParamGroup::Norms);
            }
            if tail.starts_with("attn.visual.") || tail.starts_with("ffn.visual.") {
                return Ok(ParamGroup::VisualExperts);
            }
            if tail.starts_with("attn.linguistic.") {
                return Ok(ParamGroup::TextAttn);
            }
            if tail.starts_with("ffn.linguistic.") {
                return Ok(ParamGroup::TextFfn);
            }
        }
    }
    Err(ParamError::Unclassifiable(name.to_string()))
}

#[derive(Debug, Clone)]
struct Entry {
    tensor: Tensor,
    group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
    trainable: [bool; 7],
}

impl ParameterStore {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            trainable: [true; 7],
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), ParamError> {
        let group = classify(name)?;
        if self.entries.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.entries.insert(name.to_string(), Entry { tensor, group });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ParamError> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<(), ParamError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        entry.tensor = tensor;
        Ok(())
    }

    pub fn group_of(&self, name: &str) -> Result<ParamGroup, ParamError> {
        self.entries
            .get(name)
            .map(|e| e.group)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Name-ordered iteration; the only iteration order used anywhere.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), &e.tensor))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_trainable_groups(&mut self, groups: &[ParamGroup]) {
        self.trainable = [false; 7];
        for g in groups {
            self.trainable[g.index()] = true;
        }
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        ALL_GROUPS
            .iter()
            .copied()
            .filter(|g| self.trainable[g.index()])
            .collect()
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool, ParamError> {
        Ok(self.trainable[self.group_of(name)?.index()])
    }

    /// Total scalar count, optionally restricted to names with a prefix.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn param_count_matching(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, e)| e.tensor.numel())
            .sum()
    }

    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        self.entries
            .values()
            .filter(|e| e.group == group)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Bitwise fingerprint of a group, for freeze-contract checks.
    pub fn group_bits(&self, group: ParamGroup) -> Vec<u64> {
        let mut out = Vec::new();
        for e in self.entries.values() {
            if e.group == group {
                out.extend(e.tensor.data().iter().map(|v| v.to_bits()));
            }
        }
        out
    }
}
