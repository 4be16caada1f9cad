//! Runtime side of the workload management system: the portal HTTP API,
//! the artifact origin and caching proxies, the mounted on-demand
//! namespace, LOCAL subprocess execution, gzip output transport and the
//! `caf` command-line client. Policy and formats live in `caf_core`.

pub mod api;
pub mod cli;
pub mod client;
pub mod exec;
pub mod http;
pub mod namespace;
pub mod proxy;
pub mod scenario;
pub mod sink;

pub use caf_core;
