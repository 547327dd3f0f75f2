//! foolforge: a desk-scale workbench for universal targeted fooling images.
//!
//! The crate is organised around a small deterministic autodiff engine
//! ([`tensor`]), a zoo of lightweight CNN victims ([`victims`]), six fooling
//! image generators ([`fooling`]), a conditional fooling-transfer network
//! ([`ftn`]), transfer evaluation ([`eval`]), a black-box inference oracle
//! ([`oracle`]) and a command line front end ([`cli`]).
//!
//! Every public entry point is exercised by a runnable example under
//! `examples/`; start with `examples/full_pipeline.rs` for the end-to-end
//! story.

pub mod cli;
pub mod eval;
pub mod fooling;
pub mod ftn;
pub mod oracle;
pub mod tensor;
pub mod victims;
