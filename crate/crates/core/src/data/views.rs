//! Evaluation-time input views. Both return new records and leave the input untouched.

use crate::numerics::{Rng, Tensor};

use super::record::EmbeddingRecord;

/// Keeps the first `k` text tokens.
pub fn truncate_view(record: &EmbeddingRecord, k: usize) -> EmbeddingRecord {
    let keep = record.text_len().min(k.max(1));
    let d = record.dim();
    let text = Tensor::new(vec![keep, d], record.text.data()[..keep * d].to_vec()).expect("prefix of a valid matrix");
    EmbeddingRecord { text, ..record.clone() }
}

/// Applies one seeded permutation jointly to images, OCR rows and OCR flags.
pub fn shuffle_images_view(record: &EmbeddingRecord, seed: u64) -> EmbeddingRecord {
    let n = record.image_count();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    permute_images(record, &order)
}

/// Slot `i` of the result holds image `order[i]` of the input.
pub fn permute_images(record: &EmbeddingRecord, order: &[usize]) -> EmbeddingRecord {
    let pick = |t: &Tensor| {
        let rows: Vec<&[f64]> = order.iter().map(|&i| t.row(i)).collect();
        Tensor::from_rows(&rows).expect("rows share a width")
    };
    EmbeddingRecord {
        images: pick(&record.images),
        ocr: pick(&record.ocr),
        ocr_present: order.iter().map(|&i| record.ocr_present[i]).collect(),
        ..record.clone()
    }
}
