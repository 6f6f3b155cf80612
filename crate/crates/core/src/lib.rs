//! Workflow model, expressions, graph analysis and static validation.
#![no_std]

extern crate alloc;

pub mod expr;
pub mod graph;
pub mod ident;
pub mod policy;
pub mod record;
pub mod signature;
pub mod slices;
pub mod template;
pub mod validate;
pub mod value;
pub mod workflow;
