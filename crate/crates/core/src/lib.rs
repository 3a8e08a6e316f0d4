//! Traffic analysis of TLS-encrypted teleoperated robot channels.
//!
//! The crate is organised as a pipeline:
//!
//! * [`emulator`] synthesises controller/robot TLS sessions over a modelled link,
//! * [`trace`] and [`pcap`] hold the canonical packet representation and its I/O,
//! * [`features`] turns flows into the 16-column per-packet feature matrix,
//! * [`dataset`] cleans, splits, scales and weights matrices,
//! * [`nn`] is the single-hidden-layer classifier,
//! * [`workflow`] rebuilds warehouse workflows from classified movements,
//! * [`defense`] holds the padding countermeasures,
//! * [`experiment`] ties everything into reproducible sweeps.

pub mod dataset;
pub mod defense;
pub mod emulator;
pub mod experiment;
pub mod features;
pub mod nn;
pub mod pcap;
pub mod seed;
pub mod trace;
pub mod workflow;

pub use emulator::{LinkParams, MovementClass, MovementProgram, TlsChannelModel};
pub use features::FeatureMatrix;
pub use trace::{Direction, FlowTrace, PacketRecord, TcpFlags};
