//! Core of a desk-scale pilot-based workload management system.
//!
//! Users submit multi-section jobs to a portal. The portal provisions pilot
//! jobs ("glideins") onto grid sites, matches waiting sections to the slots
//! those pilots advertise, and collects results, logs and output archives.
//! Everything in this crate is deterministic and free of IO so it can run
//! without `std`; network servers, subprocess execution and the CLI live in
//! the `caf` crate.
//!
//! Module map:
//!
//! - [`model`]: jobs, sections, pilots, slot ads and their state machines.
//! - [`matchlang`]: the requirements expression language.
//! - [`portal`]: submission, negotiation, glidekeeper policy, results,
//!   kill, output delivery and accounting.
//! - [`fabric`]: discrete-event simulation of DIRECT and BROKERED sites.
//! - [`archive`], [`manifest`], [`cache`], [`namespace`]: software and output
//!   movement.
//! - [`monitoring`]: the heartbeat collector.
//! - [`auth`]: user tokens, delegated grid proxies and the identity map.

#![no_std]

extern crate alloc;

pub mod archive;
pub mod artifact;
pub mod auth;
pub mod cache;
pub mod fabric;
pub mod manifest;
pub mod matchlang;
pub mod model;
pub mod monitoring;
pub mod namespace;
pub mod portal;
pub mod rng;
pub mod time;
pub mod trace;

pub use artifact::ArtifactId;
pub use time::SimTime;
