//! Computing with ICMP echo checksums.
//!
//! Echo Request datagrams are crafted so that the Internet-checksum work a
//! remote device does anyway (folding 16-bit one's-complement words, then
//! replying or silently dropping) evaluates something useful: Hopfield
//! local fields on devices that do not validate checksums, and Conway's
//! Life transition predicates on devices that do.

pub mod devicepool;
pub mod harness;
pub mod hopfield;
pub mod icmp;
pub mod life;
pub mod ocarith;
pub mod par;
pub mod responder;
pub mod transport;

pub use icmp::{CodecError, EchoKind, EchoMessage};
pub use ocarith::{oc_sum, OcWord};
pub use responder::{handle_datagram, ResponderBehavior};
pub use transport::{DeviceAddress, EchoTransport, LatencyModel, NetworkConfig, SimNetwork};
