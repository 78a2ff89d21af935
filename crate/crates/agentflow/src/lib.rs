//! Runtime for agentflow workflows: parsing, interpretation, model and tool
//! execution, durable runs, verification wiring, CLI and HTTP service.

pub mod parse;
pub mod backend;
pub mod clock;
pub mod emit;
pub mod events;
pub mod executor;
pub mod input;
pub mod interpreter;
pub mod loader;
pub mod store;
pub mod tools;
pub mod validate;
pub mod harness;
pub mod trace_view;
pub mod cli;
pub mod service;
