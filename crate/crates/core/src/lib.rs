//! Compressed convolutional attention (CCA, CCGQA) with MHA, GQA and MLA
//! baselines, streaming decode, a closed-form cost model and the small
//! dense-array engine they run on.
//!
//! ```
//! use latent_attn_core::{decode, AttnSpec, NdArray, WeightSet};
//!
//! let spec = AttnSpec::cca(16, 2, 2);
//! let w = WeightSet::init(&spec, 0).unwrap();
//! let x = NdArray::<f64>::zeros(&[3, 1, 16]);
//! let (y, state) = decode::prefill(&x, &w).unwrap();
//! assert_eq!(y.shape(), &[3, 1, 16]);
//! assert_eq!(state.position(), 3);
//! ```

pub mod baselines;
pub mod cca;
pub mod costmodel;
pub mod decode;
pub mod error;
pub mod ndcore;
pub mod rope;
pub mod spec;
pub mod weights;

pub use cca::CcaWeights;
pub use costmodel::{CostReport, HardwareSpec};
pub use decode::{CacheReport, DecodeState};
pub use error::{Error, Result};
pub use ndcore::{Backend, Eager, FlopCount, NdArray, Real, Tape, Var};
pub use rope::RopeParams;
pub use spec::{AttnSpec, CcaParams, GqaParams, MhaParams, MlaMode, MlaParams, Variant};
pub use weights::{WeightKind, WeightSet};
