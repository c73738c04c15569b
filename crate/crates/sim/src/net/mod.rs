//! Network interfaces: telemetry publish stream, aggregator, WebSocket
//! gateway, registry endpoint and command stream.

pub mod aggregate;
pub mod control;
pub mod gateway;
pub mod publish;
pub mod registry_http;

pub use aggregate::{Aggregator, AggregatorConfig, Collector};
pub use control::{CommandClient, CommandServer, Handler};
pub use gateway::Gateway;
pub use publish::{Publisher, Subscription};
pub use registry_http::{RegistryServer, RegistrySource};
