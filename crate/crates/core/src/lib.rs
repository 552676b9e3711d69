pub mod assimilate;
pub mod dynamics;
pub mod experiment;
pub mod histogram;
pub mod metrics;
pub mod parallel;
pub mod qpsolve;
pub mod transport;
pub mod verify;
