//! Quadrotor racing simulation with an iterative learning model predictive controller.

pub mod arclen;
pub mod baseline;
pub mod config;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod kdtree;
pub mod lmpc;
pub mod qp;
pub mod safeset;
pub mod sim;
pub mod track;
