//! Agent kernel: identity, perception, cognition and execution-layer
//! enforcement between a system agent and sandboxed app agents.

pub mod approval;
pub mod audit;
pub mod cognition;
pub mod exec;
pub mod firewall;
pub mod judge;
pub mod platform;
pub mod registry;
pub mod session;
pub mod kernel;
