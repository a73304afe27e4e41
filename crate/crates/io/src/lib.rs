//! External surface of the scanner: wire protocol, pub/sub server,
//! configuration and file formats.

pub mod config;
pub mod files;
pub mod server;
pub mod wire;

pub use config::AppConfig;
pub use server::{publish_run, Delivery, PubSubServer, RunSummary, ServerConfig, Subscriber, SubscriberPolicy};
pub use wire::{decode, encode, StreamDecoder, WireError, WireMessage};
