//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! the output value and a [`Function`] describing how to map the output
//! gradient back onto its inputs. Inputs always precede outputs on the tape,
//! so walking the node list backwards is a reverse topological order and
//! each node is visited exactly once.

mod attention;
mod conv;
mod elementwise;
mod matmul;
mod norm;
mod shape;
mod tape;

pub use attention::{relative_position_index, AttentionWeights};
pub use elementwise::Activation;
pub use shape::{pixel_shuffle_indices, pixel_unshuffle_indices};
pub use tape::{Function, Tape, Var};
