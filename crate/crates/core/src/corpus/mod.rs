//! Record schema, normalization, the EMR1 container, and dataset partitioning.

mod emr1;
mod fewshot;
mod normalize;
mod schema;
mod split;

pub use emr1::{
    read_records, write_records, CorpusManifest, CorpusReader, CorpusWriter, DatasetEntry, RecordEntry, FORMAT_VERSION,
    MAGIC,
};
pub use fewshot::few_shot_select;
pub use normalize::{minmax_denormalize, minmax_normalize, normalize_iq, MinMax, NormMode};
pub use schema::{AttrValue, Attribute, IqRecord, SegmentationType, OPTIONAL_ATTRIBUTES};
pub use split::{partition, RecordMeta, SplitSpec};
