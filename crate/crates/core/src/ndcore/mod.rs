//! Dense arrays, the kernels the attention variants are built from, FLOP
//! counters and a small reverse-mode tape.

pub mod array;
pub mod attention;
pub mod backend;
pub mod flops;
pub mod ops;
pub mod tape;

pub use array::{NdArray, Real};
pub use attention::{attend, attend_with_rope, attend_views, AttentionInput, HeadsView};
pub use backend::{Backend, Eager};
pub use flops::{instrument_flops, Category, FlopCount};
pub use tape::{finite_diff, Tape, Var};
