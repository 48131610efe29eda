//! Scene-aware impedance selection for a dual-arm humanoid: a mock vision
//! front end describes the scene, the description is embedded and matched
//! against a scenario database, and the selected gains pass through safety
//! guards before an onboard impedance controller executes them.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x >= lo)` on purpose: NaN must fail

pub mod comms;
pub mod config;
pub mod data;
pub mod embedding;
pub mod impedance;
pub mod kinematics;
pub mod perception;
pub mod retrieval;
pub mod safety;
pub mod scenario_db;
pub mod sim;
