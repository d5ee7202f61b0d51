//! Byte-level neural machine translation with local byte fusion.
//!
//! Sentences are modelled as UTF-8 byte sequences. On top of a transformer
//! encoder-decoder the encoder can aggregate local byte information either
//! with n-gram convolutions ([`fusion::ncf_fuse`]) or with word-span
//! block-masked self-attention ([`fusion::batch_block_mask`]).

pub mod bytes_tok;
pub mod config;
pub mod data;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod tensor;
pub mod train;
