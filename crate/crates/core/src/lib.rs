pub mod atomics;
pub mod explore;
pub mod harness;
pub mod locks;
pub mod metrics;
pub mod sim;
pub mod trace;
