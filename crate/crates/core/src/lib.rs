//! A transformer decoder whose forward pass can be replayed, at any fixed
//! input, as an exactly equivalent linear map of the input embeddings.
//!
//! The crate is generic over the storage scalar (`f32` or `f64`); the
//! aliases at the bottom of this file fix it to `f32`, the default used by
//! the command-line tool and the on-disk format.
//!
//! ```
//! use detjac::{detached_jacobian, embed, make_tiny_model, reconstruct, InitMode, ModelConfig, Target, TokenSequence};
//!
//! let bundle = make_tiny_model(0, &ModelConfig::tiny(32, 2), InitMode::Random).unwrap();
//! let x = embed(&bundle, &TokenSequence::new(vec![0, 4, 9]).unwrap()).unwrap();
//! let j = detached_jacobian(&bundle, &x, Target::Output).unwrap();
//! assert!(reconstruct(&j, &bundle, &x).unwrap().rel_error < 1e-5);
//! ```

pub mod decode;
pub mod error;
pub mod frozen;
pub mod io;
pub mod jacobian;
pub mod linalg;
pub mod model;
pub mod scalar;
pub mod spectra;
pub mod steering;

pub use error::{Error, Result};
pub use frozen::{capture_frozen, frozen_forward, frozen_forward_to, Anchor, FrozenLayer, FrozenState};
pub use io::{make_tiny_model, InitMode, ToyVocab};
pub use jacobian::{
    compose_transforms, cumulative_transform, detached_jacobian, layer_detached_jacobian, numeric_jacobian_fd,
    per_layer_transform, reconstruct, relative_error, Jacobian, JacobianKind, LayerTransform, Reconstruction,
    TransformScope,
};
pub use linalg::Matrix;
pub use model::{
    embed, forward, forward_to, generate_greedy, greedy_next_token, Activation, EmbeddingSequence, LayerWeights,
    ModelBundle, ModelConfig, OutputEmbedding, Point, Target, TokenSequence,
};
pub use scalar::Scalar;
pub use spectra::{spectrum_profile, stable_rank, svd, svd_full, Svd, SvdSummary};
pub use steering::{build_steering, generate_steered, SteeringSpec};

pub type Bundle = ModelBundle<f32>;
pub type Bundle64 = ModelBundle<f64>;
pub type Embeddings = EmbeddingSequence<f32>;
pub type DetachedJacobian = Jacobian<f32>;
pub type Frozen = FrozenState<f32>;
pub type Steering = SteeringSpec<f32>;
