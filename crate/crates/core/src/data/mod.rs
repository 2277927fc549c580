//! Sequence records, file formats, synthetic tasks and metrics.

mod delimited;
mod manifest;
mod metrics;
mod record;
mod synth;
mod uea;

pub use delimited::{dense_record, parse_csv_sequences, parse_sequence_file, write_csv_sequences, LABELS_FILE, STATICS_FILE};
pub use manifest::{DatasetManifest, Split};
pub use metrics::{accuracy, auc_score, confusion};
pub use record::SequenceRecord;
pub use synth::{gen_synth_task, key_count_record, SynthKind, SynthOptions};
pub use uea::{parse_uea_str, parse_uea_ts, write_uea_ts, UeaDataset};
