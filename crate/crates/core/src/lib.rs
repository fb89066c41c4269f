//! Knowledge-graph guided case selection, retrieval, and agent tooling for
//! domain-specific code generation.

pub mod agent;
pub mod case;
pub mod cluster;
pub mod codegen;
pub mod config;
pub mod embed;
pub mod eval;
pub mod experiment;
pub mod http;
pub mod index;
pub mod kg;
pub mod llm;
pub mod pool;
pub mod protocol;
pub mod render;
pub mod retrieval;
pub mod runner;
pub mod selection;
pub mod store;
pub mod synthetic;
pub mod usage;
