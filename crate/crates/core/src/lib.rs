//! Desk-scale simulator for cellular/radar spectrum coexistence.
//!
//! The crate reproduces a near-real-time RAN control loop that protects a
//! pulsed incumbent radar sharing spectrum with a cellular uplink:
//!
//! * [`signals`] synthesizes radar pulse trains, a PRB-shaped cellular stand-in
//!   and AWGN, and mixes them at a calibrated radar-to-interference SINR.
//! * [`spectro`] turns I/Q into STFT spectrograms.
//! * [`ranlink`] abstracts the uplink at PRB granularity and emits KPM records.
//! * [`detect`] is the KPM-window radar detector (a small MLP trained here).
//! * [`localize`] finds radar boxes on spectrograms and scores them.
//! * [`control`] holds the Mode 1 / Mode 2 state machine, PRB blanking policy,
//!   the BLER-driven AIMD MCS controller and the latency ledger.
//! * [`harness`] wires everything into datasets, evaluation and closed-loop
//!   scenario runs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod detect;
pub mod error;
pub mod harness;
pub mod localize;
pub mod ranlink;
pub mod signals;
pub mod spectro;

mod keyvalue;

pub use error::{Error, Result};
