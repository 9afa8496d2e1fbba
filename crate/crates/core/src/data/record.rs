use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Maximum number of images per sample.
pub const MAX_IMAGES: usize = 4;

/// Highest star rating; 0 means "no rating".
pub const MAX_RATING: u8 = 5;

/// Pre-encoded features for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    /// `[L, d]` token embeddings.
    pub text: Tensor,
    /// `[n, d]` per-image CLS features.
    pub images: Tensor,
    /// `[n, d]` per-image OCR CLS features; zero rows where no text was found.
    pub ocr: Tensor,
    pub ocr_present: Vec<bool>,
    pub rating: u8,
    pub label: u8,
}

impl EmbeddingRecord {
    pub fn dim(&self) -> usize {
        self.text.cols()
    }

    pub fn text_len(&self) -> usize {
        self.text.rows()
    }

    pub fn image_count(&self) -> usize {
        self.images.rows()
    }

    pub fn validate(&self, n_max: usize) -> Result<()> {
        let d = self.dim();
        let fail = |msg: String| Err(Error::Data(format!("record `{}`: {msg}", self.id)));
        if self.text.shape().len() != 2 || self.text_len() == 0 || d == 0 {
            return fail(format!("text must be a non-empty matrix, got {:?}", self.text.shape()));
        }
        let n = self.image_count();
        if n == 0 || n > n_max {
            return fail(format!("image count {n} outside 1..={n_max}"));
        }
        if self.images.cols() != d || self.ocr.cols() != d {
            return fail(format!(
                "embedding widths disagree: text {d}, images {}, ocr {}",
                self.images.cols(),
                self.ocr.cols()
            ));
        }
        if self.ocr.rows() != n || self.ocr_present.len() != n {
            return fail(format!(
                "{n} images but {} ocr rows and {} ocr flags",
                self.ocr.rows(),
                self.ocr_present.len()
            ));
        }
        if self.label > 1 {
            return fail(format!("label {} not in {{0, 1}}", self.label));
        }
        if self.rating > MAX_RATING {
            return fail(format!("rating {} above {MAX_RATING}", self.rating));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub tag: SplitTag,
    pub seed: u64,
    pub records: Vec<EmbeddingRecord>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.label == 1).count() as f64 / self.records.len() as f64
    }

    pub fn find(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}
