//! Clone-aware language modeling for Java source code.
//!
//! The crate covers the whole pipeline: lexing Java into normalized token
//! streams, building clone-marked train/validation/test corpora, learning
//! byte-pair encodings, training compact GRU and transformer language
//! models from scratch, decoding (top-k ranking and nucleus sampling), and
//! the evaluation metrics used to judge them.

pub mod bpe;
pub mod corpus;
pub mod decoder;
pub mod eval;
pub mod lexer;
pub mod model;
pub mod par;
pub mod vocab;
pub mod workflow;

pub use bpe::{BpeError, MergeTable};
pub use corpus::{ClonePair, CloneReference, CorpusError, CorpusSplit};
pub use decoder::{Completion, GenerationConfig, PredictionRanking, Strategy, Termination};
pub use eval::{EvalError, EvalReport, RougeScore};
pub use lexer::{LexError, Token, TokenKind, TokenStream};
pub use model::{Family, LanguageModel, LmError, ModelConfig, ModelParameters, Precision, TrainingConfig, TrainingLog};
pub use vocab::Vocabulary;
