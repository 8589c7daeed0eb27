//! Corpus ingest: instances, the tab-separated corpus format, vocabularies,
//! pre-trained vectors, position buckets and a synthetic generator.

mod corpus;
mod instance;
mod position;
pub mod synthetic;
mod vectors;
mod vocab;

pub use corpus::{parse_corpus, read_corpus, serialize_corpus, write_corpus};
pub use instance::{check_tree, AuxEntity, Instance, Span, DOC_ROOT_DEPREL, DOC_ROOT_FORM};
pub use position::{binary_position, clipped_position, position_rows, POSITION_CLIP, POSITION_ROWS};
pub use synthetic::{generate_synthetic, SyntheticConfig, TriggerPlacement, NEGATIVE_LABEL};
pub use vectors::{load_pretrained, load_pretrained_file, Coverage, MISSING_INIT};
pub use vocab::{EntityRole, LabelSet, TagVocab, Vocab, PAD, UNK};
