//! Embedding records, the synthetic generator, batching and evaluation views.

pub mod batch;
pub mod io;
pub mod record;
pub mod synth;
pub mod views;

pub use batch::{make_batch, Batch};
pub use io::{parse_records, read_records, records_to_string, write_records, RecordFile, RecordHeader};
pub use record::{DatasetSplit, EmbeddingRecord, SplitTag, MAX_IMAGES, MAX_RATING};
pub use synth::{contrast_label, generate_synthetic_dataset, random_record, random_record_sized, split_sizes, SynthConfig};
pub use views::{permute_images, shuffle_images_view, truncate_view};
