use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::record::EmbeddingRecord;

/// Zero-padded stack of records with validity masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, L_max, d]`
    pub text: Tensor,
    /// `[B][L_max]`
    pub text_mask: Vec<Arc<[bool]>>,
    /// `[B, N, d]`
    pub images: Tensor,
    /// `[B][N]`, `[1]^n ++ [0]^(N-n)` per row
    pub image_mask: Vec<Arc<[bool]>>,
    /// `[B, N, d]`
    pub ocr: Tensor,
    /// `[B][N]`
    pub ocr_mask: Vec<Arc<[bool]>>,
    pub rating: Vec<u8>,
    pub label: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.text.shape()[2]
    }

    pub fn max_text_len(&self) -> usize {
        self.text.shape()[1]
    }

    pub fn slots(&self) -> usize {
        self.images.shape()[1]
    }
}

/// Pads `records` to a common text length and to `n_max` image slots.
pub fn make_batch(records: &[EmbeddingRecord], n_max: usize) -> Result<Batch> {
    let first = records.first().ok_or_else(|| Error::Data("cannot batch zero records".into()))?;
    let d = first.dim();
    for r in records {
        r.validate(n_max)?;
        if r.dim() != d {
            return Err(Error::dim("make_batch", format!("record `{}` has d={}, batch has d={d}", r.id, r.dim())));
        }
    }
    let b = records.len();
    let l_max = records.iter().map(|r| r.text_len()).max().unwrap_or(1);

    let mut text = Tensor::zeros(&[b, l_max, d]);
    let mut images = Tensor::zeros(&[b, n_max, d]);
    let mut ocr = Tensor::zeros(&[b, n_max, d]);
    let mut text_mask = Vec::with_capacity(b);
    let mut image_mask = Vec::with_capacity(b);
    let mut ocr_mask = Vec::with_capacity(b);

    for (i, r) in records.iter().enumerate() {
        let (l, n) = (r.text_len(), r.image_count());
        text.data_mut()[i * l_max * d..(i * l_max + l) * d].copy_from_slice(r.text.data());
        images.data_mut()[i * n_max * d..(i * n_max + n) * d].copy_from_slice(r.images.data());
        ocr.data_mut()[i * n_max * d..(i * n_max + n) * d].copy_from_slice(r.ocr.data());
        text_mask.push((0..l_max).map(|t| t < l).collect());
        image_mask.push((0..n_max).map(|k| k < n).collect());
        ocr_mask.push((0..n_max).map(|k| k < n && r.ocr_present[k]).collect());
    }

    Ok(Batch {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        text,
        text_mask,
        images,
        image_mask,
        ocr,
        ocr_mask,
        rating: records.iter().map(|r| r.rating).collect(),
        label: records.iter().map(|r| r.label).collect(),
    })
}
