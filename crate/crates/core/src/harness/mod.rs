//! Scenario specs, run logs, the AUT protocol, the risk field and the
//! tick loop that ties every subsystem together.

pub mod aut;
pub mod risk;
pub mod runlog;
pub mod scenario;
pub mod session;
