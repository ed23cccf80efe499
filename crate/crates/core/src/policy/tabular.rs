use std::collections::HashMap;

use crate::mdp::TokenId;

/// Context → parameter slot map for tabular policies, keyed by the full
/// state token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularIndex {
    contexts: Vec<Vec<TokenId>>,
    slots: HashMap<Vec<TokenId>, usize>,
    default_logits: Vec<f64>,
}

impl TabularIndex {
    pub fn new(contexts: Vec<Vec<TokenId>>, default_logits: Vec<f64>) -> Self {
        let mut unique = Vec::with_capacity(contexts.len());
        let mut slots = HashMap::with_capacity(contexts.len());
        for c in contexts {
            if !slots.contains_key(&c) {
                slots.insert(c.clone(), unique.len());
                unique.push(c);
            }
        }
        Self {
            contexts: unique,
            slots,
            default_logits,
        }
    }

    pub fn slot(&self, tokens: &[TokenId]) -> Option<usize> {
        self.slots.get(tokens).copied()
    }

    pub fn contexts(&self) -> &[Vec<TokenId>] {
        &self.contexts
    }

    pub fn default_logits(&self) -> &[f64] {
        &self.default_logits
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}
