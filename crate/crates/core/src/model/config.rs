use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::MAX_IMAGES;
use crate::error::{Error, Result};
use crate::numerics::ScanMode;

/// Stage switches. A stage that is off is an identity map and owns no parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub dsbm: bool,
    pub pre_bridge: bool,
    pub seq_block: bool,
    pub post_bridge: bool,
    pub pe: bool,
    pub ocr: bool,
    pub rgf: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { dsbm: true, pre_bridge: true, seq_block: true, post_bridge: true, pe: true, ocr: true, rgf: true }
    }
}

impl Toggles {
    pub fn all_off() -> Self {
        Self { dsbm: false, pre_bridge: false, seq_block: false, post_bridge: false, pe: false, ocr: false, rgf: false }
    }

    pub fn pre_active(&self) -> bool {
        self.dsbm && self.pre_bridge
    }

    pub fn seq_active(&self) -> bool {
        self.dsbm && self.seq_block
    }

    pub fn post_active(&self) -> bool {
        self.dsbm && self.post_bridge
    }

    /// OCR alignment only feeds relevance fusion, so it is live only when both are on.
    pub fn ocr_active(&self) -> bool {
        self.ocr && self.rgf
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_max: usize,
    pub heads: usize,
    pub d_state: usize,
    pub conv_k: usize,
    /// Weight of the cosine term in the relevance score.
    pub alpha: f64,
    pub fuse_hidden: usize,
    pub rating_vocab: usize,
    pub class_weights: [f64; 2],
    pub toggles: Toggles,
    pub seed: u64,
    pub ln_eps: f64,
    /// 0 runs the step-by-step scan; otherwise the chunked scan with this chunk length.
    pub scan_chunk: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n_max: MAX_IMAGES,
            heads: 4,
            d_state: 16,
            conv_k: 4,
            alpha: 0.3,
            fuse_hidden: 64,
            rating_vocab: 6,
            class_weights: [1.0, 1.0],
            toggles: Toggles::default(),
            seed: 0,
            ln_eps: 1e-5,
            scan_chunk: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self { d: 8, heads: 2, d_state: 4, fuse_hidden: 12, ..Self::default() }
    }

    pub fn rating_dim(&self) -> usize {
        (self.d / 4).max(4)
    }

    pub fn scan_mode(&self) -> ScanMode {
        match self.scan_chunk {
            0 => ScanMode::Sequential,
            n => ScanMode::Chunked(n),
        }
    }

    /// Width of the fuse MLP input: pooled text, pooled images, optional fused vector, rating embedding.
    pub fn fuse_input_dim(&self) -> usize {
        let fused = if self.toggles.rgf { self.d } else { 0 };
        2 * self.d + fused + self.rating_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.n_max == 0 {
            return bad("n_max must be positive".into());
        }
        if self.d_state == 0 || self.conv_k == 0 || self.fuse_hidden == 0 {
            return bad("d_state, conv_k and fuse_hidden must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha={} outside [0, 1]", self.alpha));
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return bad(format!("class weights must be positive, got {:?}", self.class_weights));
        }
        if self.rating_vocab <= crate::data::MAX_RATING as usize {
            return bad(format!("rating_vocab={} cannot index ratings 0..=5", self.rating_vocab));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn ablate(&self, ablation: Ablation) -> ModelConfig {
        let mut cfg = self.clone();
        let t = &mut cfg.toggles;
        match ablation {
            Ablation::Dsbm => {
                t.dsbm = false;
                t.pre_bridge = false;
                t.seq_block = false;
                t.post_bridge = false;
            }
            Ablation::Pe => t.pe = false,
            Ablation::Ocr => t.ocr = false,
            Ablation::Rgf => t.rgf = false,
            Ablation::DsbmPre => t.pre_bridge = false,
            Ablation::DsbmSequence => t.seq_block = false,
            Ablation::DsbmPost => t.post_bridge = false,
        }
        cfg
    }
}

/// Inverse class frequency scaled so the sample-weighted mean weight is 1.
pub fn balanced_class_weights(labels: impl IntoIterator<Item = u8>) -> [f64; 2] {
    let mut counts = [0usize; 2];
    for l in labels {
        counts[usize::from(l.min(1))] += 1;
    }
    let n = (counts[0] + counts[1]) as f64;
    if counts.contains(&0) {
        return [1.0, 1.0];
    }
    [n / (2.0 * counts[0] as f64), n / (2.0 * counts[1] as f64)]
}

/// One removed component, as in the "w/o X" ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Dsbm,
    Pe,
    Ocr,
    Rgf,
    DsbmPre,
    DsbmSequence,
    DsbmPost,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Dsbm,
        Ablation::Pe,
        Ablation::Ocr,
        Ablation::Rgf,
        Ablation::DsbmPre,
        Ablation::DsbmSequence,
        Ablation::DsbmPost,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Ablation::Dsbm => "dsbm",
            Ablation::Pe => "pe",
            Ablation::Ocr => "ocr",
            Ablation::Rgf => "rgf",
            Ablation::DsbmPre => "dsbm_pre",
            Ablation::DsbmSequence => "dsbm_sequence",
            Ablation::DsbmPost => "dsbm_post",
        }
    }

    /// Row label, e.g. `w/o DSBM_pre`.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Dsbm => "w/o DSBM",
            Ablation::Pe => "w/o PE",
            Ablation::Ocr => "w/o OCR",
            Ablation::Rgf => "w/o RGF",
            Ablation::DsbmPre => "w/o DSBM_pre",
            Ablation::DsbmSequence => "w/o DSBM_sequence",
            Ablation::DsbmPost => "w/o DSBM_post",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

/// Config with the named component removed.
pub fn ablation_variant(cfg: &ModelConfig, name: &str) -> Result<ModelConfig> {
    Ok(cfg.ablate(name.parse()?))
}
