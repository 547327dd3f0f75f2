//! Local black-box prediction service: a served classifier answers labels
//! and scores over HTTP while its parameters stay hidden.

mod client;
mod server;
mod wire;

pub use client::{resolve_addr, OracleClient, DEFAULT_ORACLE_ADDR, ORACLE_ADDR_ENV};
pub use server::{serve, OracleServer, ServerStats};
pub use wire::{decode_pixels, encode_pixels, quantize_wire, PredictRequest, PredictResponse, Prediction};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("oracle startup: {msg}")]
    Startup { msg: String },
    #[error("oracle transport: {msg}")]
    Transport { msg: String },
    #[error("oracle protocol: {msg}")]
    Protocol { msg: String },
    #[error("oracle config: {msg}")]
    Config { msg: String },
}
