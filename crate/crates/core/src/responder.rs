//! Remote echo responder.

use serde::{Deserialize, Serialize};

use crate::icmp::{validate_bytes, EchoKind, EchoMessage};

/// Whether a device checks the request checksum before replying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponderBehavior {
    Validating,
    NonValidating,
}

impl ResponderBehavior {
    pub fn as_str(self) -> &'static str {
        match self {
            ResponderBehavior::Validating => "validating",
            ResponderBehavior::NonValidating => "non-validating",
        }
    }
}

impl std::str::FromStr for ResponderBehavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "validating" | "v" => Ok(ResponderBehavior::Validating),
            "non-validating" | "nonvalidating" | "nv" => Ok(ResponderBehavior::NonValidating),
            other => Err(format!("unknown responder behavior `{other}`")),
        }
    }
}

/// Handles one incoming datagram. Every failure is a silent drop.
///
/// Echo replies are never answered, and undecodable datagrams are dropped by
/// both behaviors.
pub fn handle_datagram(bytes: &[u8], behavior: ResponderBehavior) -> Option<Vec<u8>> {
    let request = EchoMessage::decode(bytes).ok()?;
    if request.kind != EchoKind::Request {
        return None;
    }
    if behavior == ResponderBehavior::Validating && !validate_bytes(bytes) {
        return None;
    }
    request.make_reply().ok().map(|r| r.encode())
}
