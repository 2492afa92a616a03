//! On-disk formats, the toy vocabulary, seeded model generation and
//! report helpers.

mod container;
mod export;
mod generate;
mod vocab;

pub use container::{
    read_bundle, read_container, write_bundle, write_container, Fnv1a, Manifest, NamedTensor, TensorEntry, TensorFile,
    FORMAT_VERSION, MAGIC,
};
pub use export::{export_tensors, frozen_tensors, jacobian_from_tensors, jacobian_tensors, svd_tensors};
pub use generate::{corpus_examples, make_tiny_model, InitMode, CORPUS};
pub use vocab::{ToyVocab, BOS};
