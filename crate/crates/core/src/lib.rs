//! Counterfactual self-training (CST) for classification from logged bandit
//! feedback.
//!
//! The crate is `no_std` + `alloc`. Everything here is pure computation over
//! an explicit [`Prng`]: a small dense network engine ([`nn`], [`loss`],
//! [`optim`]), data generators ([`synth`]), supervised-to-bandit conversion
//! ([`ingest`]), the warm-start backbones ([`backbone`]), the self-training
//! loop with its adversarial consistency regularizer ([`cst`]) and
//! counterfactual evaluation ([`eval`]). File formats, the CLI and the
//! experiment harness live in the `cst-harness` crate.
//!
//! Every model consumes the joint input `[x, onehot(a)]` and outputs a
//! softmax distribution over the `m` outcome classes.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backbone;
pub mod cst;
pub mod data;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod loss;
pub mod matrix;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use nn::{DropoutPlacement, ForwardTrace, Gradients, MlpModel, Mode, ModelConfig};
pub use rng::Prng;
