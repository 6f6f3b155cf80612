//! Local workflow engine: scheduler, executors, artifact storage, on-disk state and CLI.

pub mod batch;
pub mod cli;
pub mod clock;
pub mod executor;
pub mod scheduler;
pub mod spec_io;
pub mod state;
pub mod storage;
