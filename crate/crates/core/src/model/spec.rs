//! Planted-head specifications and the default registry.

use serde::{Deserialize, Serialize};

use crate::function::FunctionLabel;
use crate::vocab::Intent;

/// A key token type admitted by a head, optionally enabled only when a query
/// channel group is active (e.g. location markers only for kind lookups).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyType {
    pub token_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<String>,
    /// Logit weight of the type match, in units of the head gain.
    #[serde(default = "unit")]
    pub weight: f64,
}

fn unit() -> f64 {
    1.0
}

impl KeyType {
    pub fn plain(t: &str) -> KeyType {
        KeyType { token_type: t.into(), gate: None, weight: 1.0 }
    }

    pub fn gated(t: &str, gate: &str) -> KeyType {
        KeyType { token_type: t.into(), gate: Some(gate.into()), weight: 1.0 }
    }

    pub fn weighted(self, weight: f64) -> KeyType {
        KeyType { weight, ..self }
    }
}

/// Routing rule for one hand-constructed head.
///
/// `query_selector[i]` on the query token is matched against `key_selector[i]`
/// on candidate keys with weight `match_weights[i]`; `copy_source[i]` is copied
/// into `copy_dest[i]` (identity for equal widths, summed for a width-1 dest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedHeadSpec {
    pub layer: usize,
    pub head: usize,
    pub name: String,
    pub intents: Vec<Intent>,
    pub query_selector: Vec<String>,
    pub key_selector: Vec<String>,
    pub match_weights: Vec<f64>,
    /// Extra match weight for keys sharing the queried kind's category.
    #[serde(default)]
    pub category_weight: f64,
    pub key_types: Vec<KeyType>,
    pub copy_source: Vec<String>,
    pub copy_dest: Vec<String>,
    /// When set, the query token attends to itself if no key matches and
    /// writes its answer-start indicator into this group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absent_dest: Option<String>,
    pub gain: f64,
    pub function_tag: FunctionLabel,
}

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

/// Attention gain for planted heads; with unit match weights the logit margin
/// is `0.5 * gain / sqrt(d_h)`.
pub const DEFAULT_GAIN: f64 = 256.0;

/// Type weight of box tokens for the object-lookup spatial heads.
pub const BBOX_WEIGHT: f64 = 1.5;

/// The default ten-head registry: eight heads in layer 0, two in layer 1.
pub fn default_registry() -> Vec<PlantedHeadSpec> {
    use FunctionLabel::*;
    use Intent::*;
    let g = DEFAULT_GAIN;
    vec![
        PlantedHeadSpec {
            layer: 0,
            head: 0,
            name: "low_level".into(),
            intents: vec![ColorAt, SizeAt],
            query_selector: s(&["q_row", "q_col"]),
            key_selector: s(&["row", "col"]),
            match_weights: vec![1.0, 1.0],
            category_weight: 0.0,
            key_types: vec![KeyType::plain("cell")],
            copy_source: s(&["color", "size"]),
            copy_dest: s(&["s_color", "s_size"]),
            absent_dest: None,
            gain: g,
            function_tag: LowLevelVisual,
        },
        PlantedHeadSpec {
            layer: 0,
            head: 1,
            name: "high_level".into(),
            intents: vec![Exists, OrientNamed, RelDirKind],
            query_selector: s(&["q_obj"]),
            key_selector: s(&["obj"]),
            match_weights: vec![1.0],
            category_weight: 0.0,
            key_types: vec![KeyType::plain("cell"), KeyType::plain("bbox")],
            copy_source: s(&["obj"]),
            copy_dest: s(&["s_conf"]),
            absent_dest: Some("s_absent".into()),
            gain: g,
            function_tag: HighLevelVisual,
        },
        PlantedHeadSpec {
            layer: 0,
            head: 2,
            name: "spatial_a".into(),
            intents: vec![LocateKind, LocateColor, RelDirKind, RelDirColor],
            query_selector: s(&["q_obj", "q_color"]),
            key_selector: s(&["obj", "color"]),
            match_weights: vec![3.5, 2.0],
            category_weight: 0.0,
            key_types: vec![KeyType::plain("cell"), KeyType::gated("bbox", "q_obj").weighted(BBOX_WEIGHT)],
            copy_source: s(&["row", "col"]),
            copy_dest: s(&["s_row_a", "s_col_a"]),
            absent_dest: None,
            gain: 2.0 * g,
            function_tag: SpatialPerception,
        },
        PlantedHeadSpec {
            layer: 0,
            head: 3,
            name: "spatial_a2".into(),
            intents: vec![RelDirKind, RelDirColor],
            query_selector: s(&["q_obj2", "q_color2"]),
            key_selector: s(&["obj", "color"]),
            match_weights: vec![3.5, 2.0],
            category_weight: 0.0,
            key_types: vec![KeyType::plain("cell"), KeyType::gated("bbox", "q_obj2").weighted(BBOX_WEIGHT)],
            copy_source: s(&["row", "col"]),
            copy_dest: s(&["s_row_b", "s_col_b"]),
            absent_dest: None,
            gain: 2.0 * g,
            function_tag: SpatialPerception,
        },
        PlantedHeadSpec {
            layer: 0,
            head: 4,
            name: "spatial_b".into(),
            intents: vec![OrientNamed, OrientAt],
            query_selector: s(&["q_row", "q_col"]),
            key_selector: s(&["row", "col"]),
            match_weights: vec![1.0, 1.0],
            category_weight: 0.0,
            key_types: vec![KeyType::plain("cell")],
            copy_source: s(&["orient"]),
            copy_dest: s(&["s_orient"]),
            absent_dest: None,
            gain: 8.0 * g,
            function_tag: SpatialPerception,
        },
        PlantedHeadSpec {
            layer: 0,
            head: 5,
            name: "recall".into(),
            intents: vec![Recall],
            query_selector: s(&["q_obj"]),
            key_selector: s(&["obj"]),
            match_weights: vec![1.0],
            category_weight: 0.0,
            key_types: vec![KeyType::plain("fact")],
            copy_source: s(&["food"]),
            copy_dest: s(&["s_food"]),
            absent_dest: None,
            gain: g,
            function_tag: KnowledgeRecall,
        },
        PlantedHeadSpec {
            layer: 0,
            head: 6,
            name: "extraction".into(),
            intents: vec![Extract],
            query_selector: s(&["q_step"]),
            key_selector: s(&["step"]),
            match_weights: vec![1.0],
            category_weight: 0.0,
            key_types: vec![KeyType::plain("ctx_answer")],
            copy_source: s(&["color", "size"]),
            copy_dest: s(&["s_ext_color", "s_ext_size"]),
            absent_dest: None,
            gain: g,
            function_tag: InfoExtraction,
        },
        PlantedHeadSpec {
            layer: 0,
            head: 7,
            name: "math".into(),
            intents: vec![Count],
            query_selector: vec![],
            key_selector: vec![],
            match_weights: vec![],
            category_weight: 0.0,
            key_types: vec![KeyType::plain("cell")],
            copy_source: s(&["color", "bias"]),
            copy_dest: s(&["s_frac", "s_cells"]),
            absent_dest: None,
            gain: g,
            function_tag: MathReasoning,
        },
        PlantedHeadSpec {
            layer: 1,
            head: 0,
            name: "relational".into(),
            intents: vec![RelFacing, RelMatch, RelCount, RelSize],
            query_selector: s(&["q_step"]),
            key_selector: s(&["step"]),
            match_weights: vec![1.0],
            category_weight: 0.0,
            key_types: vec![KeyType::plain("ctx_answer")],
            copy_source: s(&["dir", "orient", "count", "size", "bias"]),
            copy_dest: s(&["s_rel_dir", "s_rel_orient", "s_rel_count", "s_rel_size", "s_rel_present"]),
            absent_dest: None,
            gain: g,
            function_tag: RelationalReasoning,
        },
        PlantedHeadSpec {
            layer: 1,
            head: 1,
            name: "decision".into(),
            intents: vec![Decide],
            query_selector: s(&["q_step"]),
            key_selector: s(&["step"]),
            match_weights: vec![1.0],
            category_weight: 0.0,
            key_types: vec![KeyType::plain("ctx_answer")],
            copy_source: s(&["yesno"]),
            copy_dest: s(&["s_yesno"]),
            absent_dest: None,
            gain: g,
            function_tag: DecisionMaking,
        },
    ]
}
