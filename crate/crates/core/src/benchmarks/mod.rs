//! Built-in benchmark problems.

pub mod gp;
pub mod quadrotor;
pub mod toy2d;
