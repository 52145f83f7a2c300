//! Per-head scale/shift hooks on residual-stream contributions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hook {
    pub scale: f64,
    /// Added after scaling; empty means zero.
    #[serde(default)]
    pub shift: Vec<f64>,
}

impl Hook {
    pub fn scale(s: f64) -> Hook {
        Hook { scale: s, shift: Vec::new() }
    }

    pub fn shift(v: Vec<f64>) -> Hook {
        Hook { scale: 1.0, shift: v }
    }

    /// `x ← scale·x + shift`.
    pub fn apply(&self, x: &mut [f64]) {
        for v in x.iter_mut() {
            *v *= self.scale;
        }
        for (v, s) in x.iter_mut().zip(&self.shift) {
            *v += s;
        }
    }
}

/// Absent entries mean scale 1, shift 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookSet {
    pub entries: BTreeMap<(usize, usize), Hook>,
}

impl HookSet {
    pub fn new() -> HookSet {
        HookSet::default()
    }

    pub fn insert(&mut self, layer: usize, head: usize, hook: Hook) {
        self.entries.insert((layer, head), hook);
    }

    pub fn with(mut self, layer: usize, head: usize, hook: Hook) -> HookSet {
        self.insert(layer, head, hook);
        self
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&Hook> {
        self.entries.get(&(layer, head))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks coordinates and shift lengths against the model shape.
    pub fn validate(&self, layers: usize, heads: usize, d: usize) -> Result<()> {
        for (&(l, m), h) in &self.entries {
            if l >= layers || m >= heads {
                return Err(Error::InvalidHead { layer: l, head: m });
            }
            if !h.shift.is_empty() && h.shift.len() != d {
                return Err(Error::Dimension(format!(
                    "shift for ({l}, {m}) has length {} but d = {d}",
                    h.shift.len()
                )));
            }
            if !h.scale.is_finite() || h.shift.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("hook ({l}, {m})")));
            }
        }
        Ok(())
    }
}
