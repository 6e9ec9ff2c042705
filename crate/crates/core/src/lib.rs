//! Core of a fog-computing heart-disease diagnosis pipeline.
//!
//! Everything here is `no_std` + `alloc`: dataset handling, the MLP and its
//! bagged ensemble, the wire protocol, the broker's arbitration policy,
//! worker-side job handling, QoS metrics, and a deterministic discrete-event
//! simulation of a gateway/broker/worker/cloud deployment. IO, networking
//! and the CLI live in the `healthfog` crate.

#![no_std]

extern crate alloc;

pub mod broker;
pub mod config;
pub mod ensemble;
pub mod heartdata;
pub mod metrics;
pub mod neuralnet;
pub mod protocol;
pub mod sim;
pub mod sweep;
pub mod worker;
