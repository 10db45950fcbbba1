pub mod metrics;
pub mod protocol;
pub mod verify;
