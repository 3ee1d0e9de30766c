//! RNA dot-plot images and same-family classification.
//!
//! The crate turns RNA sequences into base-pair probability matrices, renders
//! those as grayscale dot-plots, stitches two dot-plots into one composite
//! image, builds family-disjoint datasets of such composites, and trains a
//! small convolutional network to tell same-family pairs from
//! different-family pairs.
//!
//! | module | contents |
//! |---|---|
//! | [`seqio`] | FASTA / Stockholm parsing into validated sequences |
//! | [`bppm`] | inside/outside pair probabilities and an enumeration oracle |
//! | [`imaging`] | dot-plots, bilinear resize, pair composition, PGM I/O |
//! | [`dataset`] | filtering, splits, pair enumeration and sampling, materialization |
//! | [`nn`] | tensors, layers, momentum SGD, checkpoints, gradient checks |
//! | [`pipeline`] | batch sampling, training loop, evaluation metrics |

pub mod bppm;
pub mod dataset;
pub mod imaging;
pub mod nn;
pub mod pipeline;
pub mod seqio;
