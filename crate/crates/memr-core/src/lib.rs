//! Multi-encoder multi-resolution joint CTC/attention sequence recognizer.
//!
//! Two parallel encoders read the same feature sequence at different
//! temporal resolutions; each has its own CTC head, and a hierarchical
//! attention decoder fuses their hidden vectors. Training minimizes a
//! λ-weighted combination of the averaged per-encoder CTC loss and the
//! teacher-forced attention loss; decoding is label-synchronous beam search
//! over the same weighted objective with optional shallow LM fusion.

pub mod error;
pub mod tensor;
pub mod tape;
pub mod vocab;
pub mod params;
pub mod lstm;
pub mod encoders;
pub mod ctc;
pub mod attention;

pub use attention::{AttentionParams, DecoderInput, DecoderState, FusionParams};
pub use ctc::{CtcOutcome, CtcScore, PrefixScoreState};
pub use error::{CheckpointError, Error, Result};
pub use encoders::{EncoderOutputs, StreamMode};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{finite_diff_check, Tape, TensorRef};
pub use tensor::{log_sum_exp, lse2, Tensor};
pub use vocab::{LabelSeq, Letter, Vocabulary, BLANK};
