pub mod agent;
pub mod cli;
pub mod clock;
pub mod digest;
pub mod lifecycle;
pub mod orchestrator;
pub mod pipeline;
pub mod protocol;
pub mod registry;
pub mod workflow;
