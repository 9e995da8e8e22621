//! Deterministic Kademlia DHT simulator with an active Sybil attack and
//! the publication and retrieval defenses against it.

pub mod attack;
pub mod detect;
pub mod error;
pub mod experiments;
pub mod ident;
pub mod lookup;
pub mod node;
pub mod publish;
pub mod simnet;

pub use error::{AttackError, ConfigError, DetectError, ExperimentError, IdentError};
pub use ident::{cpl, forge_id, xor_distance, Cpl, Distance, NodeId};
pub use simnet::{build_network, Network, NetworkConfig, NodeIdx};
