//! Session service for the rehearsal simulator: HTTP API, on-disk session
//! store, provider client and configuration.

pub mod api;
pub mod config;
pub mod http_provider;
pub mod store;
