//! Message payloads exchanged between agents and the server. Envelopes carry
//! the serialized JSON bytes; the envelope kind selects the deserializer.

use serde::{Deserialize, Serialize};

use crate::map::{KeyFrame, KfId, MapPoint, MpId};
use crate::netsim::{Envelope, PayloadKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfMessage {
    pub keyframe: KeyFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpMessage {
    pub point: MapPoint,
}

/// Server acknowledgment; entities stay in the sender's outbox until acked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AckMessage {
    pub keyframes: Vec<KfId>,
    pub points: Vec<MpId>,
}

/// Server-to-agent neighborhood: fixed reference entities already expressed
/// in the receiving agent's local frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodMessage {
    pub keyframes: Vec<KeyFrame>,
    pub points: Vec<MapPoint>,
}

/// Wraps a payload into an Envelope with its serialized size.
pub fn envelope<T: Serialize>(
    payload: &T,
    kind: PayloadKind,
    sequence: u64,
    sender: u32,
    send_time: f64,
) -> Envelope {
    Envelope {
        sequence,
        sender,
        send_time,
        kind,
        payload: serde_json::to_vec(payload).expect("wire payloads serialize"),
    }
}

/// Serialized size in bytes of a payload, for budget accounting before send.
pub fn payload_size<T: Serialize>(payload: &T) -> usize {
    serde_json::to_vec(payload).expect("wire payloads serialize").len()
}

pub fn decode<T: for<'de> Deserialize<'de>>(envelope: &Envelope) -> Option<T> {
    serde_json::from_slice(&envelope.payload).ok()
}
