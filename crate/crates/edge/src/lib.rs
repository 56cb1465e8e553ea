//! Edge/end deployment: model bundles, the frame protocol, the training
//! service and the inference client.

pub mod bundle;
pub mod edge;
pub mod end;
pub mod transport;
pub mod wire;

pub use bundle::{deserialize, serialize_full, serialize_light, Bundle, BundleError, BundleMeta, BundleModel};
pub use edge::{serve_connection, EdgeServer, EdgeService};
pub use end::{EndClient, EndError, EndSession, Prediction};
pub use transport::{channel_pair, ChannelTransport, Transport};
pub use wire::{Frame, WireError, WireMessage};
