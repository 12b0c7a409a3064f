//! Dataset ingestion, synthetic shift families and test-set construction.

mod split;
mod synth;
mod tu;

pub use split::{anomaly_split, mix_test_set, train_test_split, TRAIN_FRACTION};
pub use synth::{synth_dataset, Family, Motif, SynthSpec};
pub use tu::{parse_tu_dataset, write_tu_dataset};
