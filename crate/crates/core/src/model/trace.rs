use serde::{Deserialize, Serialize};

/// Summary of a sigmoid gate over the valid query rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl GateStats {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Option<Self> {
        let (mut sum, mut n, mut min, mut max) = (0.0, 0usize, f64::INFINITY, f64::NEG_INFINITY);
        for row in rows {
            for &v in row {
                sum += v;
                n += 1;
                min = min.min(v);
                max = max.max(v);
            }
        }
        (n > 0).then(|| GateStats { mean: sum / n as f64, min, max })
    }

    pub fn strictly_inside_unit_interval(&self) -> bool {
        self.min > 0.0 && self.max < 1.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeTrace {
    pub text_gate: Option<GateStats>,
    pub image_gate: Option<GateStats>,
    /// Head-averaged attention of valid text rows over image slots.
    pub text_to_image: Vec<Vec<f64>>,
    /// Head-averaged attention of valid image rows over text tokens.
    pub image_to_text: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelevanceTrace {
    pub s_cos: Vec<f64>,
    pub s_lrn: Vec<f64>,
    pub s: Vec<f64>,
    pub w: Vec<f64>,
    /// Attention of valid text rows over OCR slots, empty when OCR was skipped.
    pub ocr_text: Vec<Vec<f64>>,
    pub ocr_image: Vec<Vec<f64>>,
}

/// Intermediate values of one sample's forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardTrace {
    pub id: String,
    pub label: u8,
    pub prediction: u8,
    pub logits: Vec<f64>,
    pub image_mask: Vec<u8>,
    pub pre_bridge: Option<BridgeTrace>,
    pub post_bridge: Option<BridgeTrace>,
    pub relevance: Option<RelevanceTrace>,
    pub text_pooled: Vec<f64>,
    pub image_pooled: Vec<f64>,
    pub fused: Option<Vec<f64>>,
    pub joint: Vec<f64>,
}

impl ForwardTrace {
    pub fn gates(&self) -> impl Iterator<Item = &GateStats> {
        [&self.pre_bridge, &self.post_bridge]
            .into_iter()
            .flatten()
            .flat_map(|b| [&b.text_gate, &b.image_gate])
            .flatten()
    }
}
