//! Dynamic thinking-token selection for KV-cache compression in a toy
//! reasoning model.
//!
//! A synthetic key-value retrieval task produces "think" traces whose
//! answer depends on a handful of tokens; a small transformer (random,
//! scripted or hand-planted) decodes them; attention from the answer is
//! turned into per-token importance labels; an MLP learns to predict those
//! labels from hidden states; and a dual-window KV cache evicts the tokens
//! the predictor deems unimportant. A cost model accounts for the compute
//! and memory saved.

pub mod cachemgr;
pub mod costmodel;
pub mod dynts_policy;
pub mod error;
pub mod importance;
pub mod numkernel;
pub mod predictor;
pub mod synthdata;
pub mod toymodel;

pub use error::{Error, Result};
