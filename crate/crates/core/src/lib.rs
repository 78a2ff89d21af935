//! Workflow model, templates, conditions, step ids, graph projection and
//! verification for agentflow. No IO; see the `agentflow` crate for the
//! runtime.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod bibtex;
pub mod condition;
pub mod contract;
pub mod graph;
pub mod metrics;
pub mod predicate;
pub mod report;
pub mod step_id;
pub mod template;
pub mod trace;
pub mod value;
pub mod verify;
pub mod workflow;
