//! ICMP Echo Request / Echo Reply codec.
//!
//! Wire layout, all words big-endian:
//!
//! ```text
//! [type | code][checksum][identifier][sequence][data word]...
//! ```
//!
//! The stored checksum is the complement of the fold taken with the checksum
//! field set to `+0`, so a receiver folding every word of an intact message
//! gets `-0`.

use thiserror::Error;

use crate::ocarith::{oc_sum, oc_sum_be_bytes, OcWord};

/// Header length in bytes: type/code, checksum, identifier, sequence.
pub const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EchoKind {
    Reply = 0,
    Request = 8,
}

impl EchoKind {
    pub const fn type_byte(self) -> u8 {
        self as u8
    }

    pub fn from_type_byte(b: u8) -> Option<EchoKind> {
        match b {
            0 => Some(EchoKind::Reply),
            8 => Some(EchoKind::Request),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("message of {0} bytes is shorter than the 8-byte echo header")]
    MessageTooShort(usize),
    #[error("message length {0} is not a whole number of 16-bit words")]
    OddLength(usize),
    #[error("unsupported ICMP type {msg_type} code {code}")]
    UnsupportedType { msg_type: u8, code: u8 },
    #[error("expected an echo request")]
    NotARequest,
}

/// A decoded echo message. The code byte is always zero for echo types and
/// is not stored.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EchoMessage {
    pub kind: EchoKind,
    pub checksum: OcWord,
    pub identifier: OcWord,
    pub sequence: OcWord,
    pub data: Vec<OcWord>,
}

impl EchoMessage {
    /// A request with the given fields and a `+0` checksum field.
    pub fn request(identifier: OcWord, sequence: OcWord, data: Vec<OcWord>) -> Self {
        EchoMessage {
            kind: EchoKind::Request,
            checksum: OcWord::PLUS_ZERO,
            identifier,
            sequence,
            data,
        }
    }

    /// First word: `type * 256 + code`.
    pub fn w1(&self) -> OcWord {
        OcWord((self.kind.type_byte() as u16) << 8)
    }

    /// Total word count, header included.
    pub fn word_count(&self) -> usize {
        4 + self.data.len()
    }

    /// All words in wire order.
    pub fn words(&self) -> impl Iterator<Item = OcWord> + '_ {
        [self.w1(), self.checksum, self.identifier, self.sequence]
            .into_iter()
            .chain(self.data.iter().copied())
    }

    pub fn encoded_len(&self) -> usize {
        2 * self.word_count()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.kind.type_byte());
        out.push(0);
        for w in self.words().skip(1) {
            out.extend_from_slice(&w.bits().to_be_bytes());
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<EchoMessage, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::MessageTooShort(bytes.len()));
        }
        if !bytes.len().is_multiple_of(2) {
            return Err(CodecError::OddLength(bytes.len()));
        }
        let (msg_type, code) = (bytes[0], bytes[1]);
        let kind = match EchoKind::from_type_byte(msg_type) {
            Some(kind) if code == 0 => kind,
            _ => return Err(CodecError::UnsupportedType { msg_type, code }),
        };
        let word = |i: usize| OcWord(u16::from_be_bytes([bytes[2 * i], bytes[2 * i + 1]]));
        Ok(EchoMessage {
            kind,
            checksum: word(1),
            identifier: word(2),
            sequence: word(3),
            data: (4..bytes.len() / 2).map(word).collect(),
        })
    }

    /// Complement of the fold over every word with the checksum field
    /// taken as `+0`.
    pub fn compute_checksum(&self) -> OcWord {
        let fold = oc_sum(
            [self.w1(), self.identifier, self.sequence]
                .into_iter()
                .chain(self.data.iter().copied()),
        );
        fold.oc_negate()
    }

    /// Fold over all words including the stored checksum.
    pub fn fold(&self) -> OcWord {
        oc_sum(self.words())
    }

    /// True iff the full fold equals `-0`.
    pub fn validate(&self) -> bool {
        self.fold() == OcWord::MINUS_ZERO
    }

    /// Stores [`compute_checksum`](Self::compute_checksum) in the checksum field.
    pub fn seal(mut self) -> Self {
        self.checksum = self.compute_checksum();
        self
    }

    /// Echo reply to this request: type becomes 0 and the checksum is
    /// recomputed; identifier, sequence and data are copied unchanged.
    pub fn make_reply(&self) -> Result<EchoMessage, CodecError> {
        if self.kind != EchoKind::Request {
            return Err(CodecError::NotARequest);
        }
        let reply = EchoMessage {
            kind: EchoKind::Reply,
            checksum: OcWord::PLUS_ZERO,
            identifier: self.identifier,
            sequence: self.sequence,
            data: self.data.clone(),
        };
        Ok(reply.seal())
    }

    /// True when `other` carries the same identifier, sequence and data.
    pub fn same_payload(&self, other: &EchoMessage) -> bool {
        self.identifier == other.identifier
            && self.sequence == other.sequence
            && self.data == other.data
    }
}

/// Checksum validation straight from wire bytes, without decoding.
pub fn validate_bytes(bytes: &[u8]) -> bool {
    bytes.len().is_multiple_of(2) && oc_sum_be_bytes(bytes) == OcWord::MINUS_ZERO
}
