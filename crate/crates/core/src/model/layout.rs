//! Named channel groups of the residual stream.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token-type channels, in order inside the `type` group.
pub const TOKEN_TYPES: &[&str] =
    &["bos", "fact", "cell", "bbox", "step_marker", "word", "ans_start", "ctx_answer", "answer"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Group {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    pub fn is_scratch(&self) -> bool {
        self.name.starts_with("s_")
    }
}

/// Disjoint index ranges inside `[0, d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub groups: Vec<Group>,
}

impl ChannelLayout {
    /// Layout for an `n`×`n` grid with up to `steps` reasoning steps.
    pub fn standard(n: usize, steps: usize) -> ChannelLayout {
        let spec: Vec<(&str, usize)> = vec![
            ("bias", 1),
            ("type", TOKEN_TYPES.len()),
            ("obj", 6),
            ("cat", 3),
            ("color", 4),
            ("size", 3),
            ("orient", 4),
            ("row", n),
            ("col", n),
            ("dir", 4),
            ("count", 1),
            ("yesno", 2),
            ("food", 6),
            ("step", steps),
            ("intent", 17),
            ("q_obj", 6),
            ("q_obj2", 6),
            ("q_color", 4),
            ("q_color2", 4),
            ("q_row", n),
            ("q_col", n),
            ("q_size", 3),
            ("q_dir", 4),
            ("q_count", 1),
            ("q_step", steps),
            ("s_conf", 1),
            ("s_absent", 1),
            ("s_row_a", n),
            ("s_col_a", n),
            ("s_row_b", n),
            ("s_col_b", n),
            ("s_orient", 4),
            ("s_color", 4),
            ("s_size", 3),
            ("s_food", 6),
            ("s_ext_color", 4),
            ("s_ext_size", 3),
            ("s_frac", 4),
            ("s_cells", 1),
            ("s_rel_dir", 4),
            ("s_rel_orient", 4),
            ("s_rel_count", 1),
            ("s_rel_size", 3),
            ("s_rel_present", 1),
            ("s_yesno", 2),
            ("o_loc", n * n),
            ("o_dir", 4),
            ("o_orient", 4),
            ("o_color", 4),
            ("o_size", 3),
            ("o_count", n * n + 1),
            ("o_yesno", 2),
            ("o_truefalse", 2),
            ("o_food", 6),
            ("o_eoa", 1),
        ];
        let mut start = 0;
        let groups = spec
            .into_iter()
            .map(|(name, len)| {
                let g = Group { name: name.to_string(), start, len };
                start += len;
                g
            })
            .collect();
        ChannelLayout { groups }
    }

    pub fn get(&self, name: &str) -> Result<&Group> {
        self.groups.iter().find(|g| g.name == name).ok_or_else(|| Error::UnknownGroup(name.into()))
    }

    /// Start index of a group; panics on unknown names (internal use only).
    pub fn at(&self, name: &str) -> usize {
        self.get(name).map(|g| g.start).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn type_channel(&self, ty: &str) -> Result<usize> {
        let i = TOKEN_TYPES
            .iter()
            .position(|t| *t == ty)
            .ok_or_else(|| Error::UnknownGroup(format!("type:{ty}")))?;
        Ok(self.at("type") + i)
    }

    /// Total channels used.
    pub fn used(&self) -> usize {
        self.groups.iter().map(|g| g.start + g.len).max().unwrap_or(0)
    }

    /// Checks disjointness and that every group fits in `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        let mut spans: Vec<Range<usize>> = self.groups.iter().map(|g| g.range()).collect();
        spans.sort_by_key(|r| r.start);
        for w in spans.windows(2) {
            if w[0].end > w[1].start {
                return Err(Error::Config(format!("channel groups overlap at {}", w[1].start)));
            }
        }
        if self.used() > d {
            return Err(Error::Config(format!("layout needs {} channels but d = {d}", self.used())));
        }
        let mut names: Vec<&str> = self.groups.iter().map(|g| g.name.as_str()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate channel group name".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_layout_fits_default_width() {
        let l = ChannelLayout::standard(4, 6);
        l.validate(256).unwrap();
        assert!(l.used() <= 256);
        assert!(l.validate(128).is_err());
    }
}
