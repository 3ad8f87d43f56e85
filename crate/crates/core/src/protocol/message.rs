//! Bit-exact wire messages.
//!
//! Frames are a 4-byte big-endian payload length followed by a UTF-8 JSON
//! object holding exactly the fields of the protocol table row for that
//! message, keys in table order: `mode`, `checksum`, `nIter`, `client id`,
//! `token`, `response`, `shape`, `raw_data`, `weights`, `reason`, `label`.
//! Binary payloads are standard base64 without line breaks.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::tensor::{checksum, Tensor, TensorChecksum};

/// Default cap on frame payload size.
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
    #[error("missing required field {0:?}")]
    MissingField(&'static str),
    #[error("unexpected field {0:?}")]
    ExtraField(String),
    #[error("field {0:?} has the wrong type or value")]
    BadField(&'static str),
    #[error("frame of {got} bytes exceeds the {max}-byte cap")]
    FrameTooLarge { got: usize, max: usize },
    #[error("payload integrity failure: checksum {expected} != {got}")]
    Integrity { expected: String, got: String },
    #[error("label not permitted in this training mode")]
    LabelForbidden,
    #[error("peer identity unknown or unauthenticated")]
    IdentityUnknown,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Mode string of a tensor transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorMode {
    Training,
    Validation,
}

impl TensorMode {
    fn as_str(self) -> &'static str {
        match self {
            TensorMode::Training => "training",
            TensorMode::Validation => "validation",
        }
    }
}

/// Every protocol primitive, request and response families both.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    TrainingRequest {
        checksum: String,
        n_iter: u64,
        client_id: String,
    },
    /// response "allowed" with a session token.
    TrainingAllowed { token: String },
    /// response "denied" (busy, or nothing useful to say).
    TrainingDenied,
    /// response "refresh" naming the last-trained client and its locator.
    RefreshRequired { client: String, address: String },
    TensorTransmission {
        mode: TensorMode,
        checksum: String,
        shape: Vec<usize>,
        raw_data: Vec<u8>,
        label: Option<Vec<u8>>,
    },
    /// response "success"/"failure" for a tensor transmission.
    TensorAck { ok: bool },
    WeightUpload {
        checksum: String,
        weights: Vec<u8>,
        client_id: String,
    },
    WeightRequest { client_id: String },
    /// Encrypted weight file answering a weight request.
    WeightPayload { weights: Vec<u8> },
    /// response "denied" with a reason (weight request refused).
    WeightDenied { reason: String },
    Snapshot {
        checksum: String,
        client_id: String,
    },
    /// response "successful"/"failed" for weight upload and snapshot.
    SyncResult { ok: bool },
}

impl Message {
    /// Discriminator used in logs: the `mode` field when present, otherwise
    /// `response:<value>` or `weights payload`.
    pub fn log_kind(&self) -> String {
        match self {
            Message::TrainingRequest { .. } => "training request".into(),
            Message::TrainingAllowed { .. } => "response:allowed".into(),
            Message::TrainingDenied => "response:denied".into(),
            Message::RefreshRequired { .. } => "response:refresh".into(),
            Message::TensorTransmission { mode, .. } => mode.as_str().into(),
            Message::TensorAck { ok } => {
                format!("response:{}", if *ok { "success" } else { "failure" })
            }
            Message::WeightUpload { .. } => "weight upload".into(),
            Message::WeightRequest { .. } => "weight request".into(),
            Message::WeightPayload { .. } => "weights payload".into(),
            Message::WeightDenied { .. } => "response:denied".into(),
            Message::Snapshot { .. } => "snapshot".into(),
            Message::SyncResult { ok } => {
                format!("response:{}", if *ok { "successful" } else { "failed" })
            }
        }
    }

    /// True for messages that structurally carry a label field.
    pub fn carries_label(&self) -> bool {
        matches!(
            self,
            Message::TensorTransmission { label: Some(_), .. }
        )
    }

    /// Canonical JSON payload (no framing).
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut obj = Map::new();
        let put = |obj: &mut Map<String, Value>, k: &str, v: Value| {
            obj.insert(k.to_string(), v);
        };
        match self {
            Message::TrainingRequest {
                checksum,
                n_iter,
                client_id,
            } => {
                put(&mut obj, "mode", Value::from("training request"));
                put(&mut obj, "checksum", Value::from(checksum.as_str()));
                put(&mut obj, "nIter", Value::from(*n_iter));
                put(&mut obj, "client id", Value::from(client_id.as_str()));
            }
            Message::TrainingAllowed { token } => {
                put(&mut obj, "response", Value::from("allowed"));
                put(&mut obj, "token", Value::from(token.as_str()));
            }
            Message::TrainingDenied => {
                put(&mut obj, "response", Value::from("denied"));
            }
            Message::RefreshRequired { client, address } => {
                put(&mut obj, "response", Value::from("refresh"));
                put(
                    &mut obj,
                    "client id",
                    Value::Array(vec![
                        Value::from(client.as_str()),
                        Value::from(address.as_str()),
                    ]),
                );
            }
            Message::TensorTransmission {
                mode,
                checksum,
                shape,
                raw_data,
                label,
            } => {
                put(&mut obj, "mode", Value::from(mode.as_str()));
                put(&mut obj, "checksum", Value::from(checksum.as_str()));
                put(
                    &mut obj,
                    "shape",
                    Value::Array(shape.iter().map(|&d| Value::from(d as u64)).collect()),
                );
                put(&mut obj, "raw_data", Value::from(BASE64.encode(raw_data)));
                if let Some(l) = label {
                    put(&mut obj, "label", Value::from(BASE64.encode(l)));
                }
            }
            Message::TensorAck { ok } => {
                put(
                    &mut obj,
                    "response",
                    Value::from(if *ok { "success" } else { "failure" }),
                );
            }
            Message::WeightUpload {
                checksum,
                weights,
                client_id,
            } => {
                put(&mut obj, "mode", Value::from("weight upload"));
                put(&mut obj, "checksum", Value::from(checksum.as_str()));
                put(&mut obj, "weights", Value::from(BASE64.encode(weights)));
                put(&mut obj, "client id", Value::from(client_id.as_str()));
            }
            Message::WeightRequest { client_id } => {
                put(&mut obj, "mode", Value::from("weight request"));
                put(&mut obj, "client id", Value::from(client_id.as_str()));
            }
            Message::WeightPayload { weights } => {
                put(&mut obj, "weights", Value::from(BASE64.encode(weights)));
            }
            Message::WeightDenied { reason } => {
                put(&mut obj, "response", Value::from("denied"));
                put(&mut obj, "reason", Value::from(reason.as_str()));
            }
            Message::Snapshot {
                checksum,
                client_id,
            } => {
                put(&mut obj, "mode", Value::from("snapshot"));
                put(&mut obj, "checksum", Value::from(checksum.as_str()));
                put(&mut obj, "client id", Value::from(client_id.as_str()));
            }
            Message::SyncResult { ok } => {
                put(
                    &mut obj,
                    "response",
                    Value::from(if *ok { "successful" } else { "failed" }),
                );
            }
        }
        serde_json::to_vec(&Value::Object(obj)).expect("message serialization cannot fail")
    }

    /// Length-prefixed frame.
    pub fn to_frame(&self) -> Vec<u8> {
        let payload = self.to_json_bytes();
        let mut frame = Vec::with_capacity(4 + payload.len());
        frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        frame.extend_from_slice(&payload);
        frame
    }
}

fn is_hex_checksum(s: &str) -> bool {
    TensorChecksum::from_hex(s).is_some()
}

struct Fields<'a> {
    map: &'a Map<String, Value>,
}

impl<'a> Fields<'a> {
    fn str_field(&self, name: &'static str) -> Result<&'a str, ProtocolError> {
        self.map
            .get(name)
            .ok_or(ProtocolError::MissingField(name))?
            .as_str()
            .ok_or(ProtocolError::BadField(name))
    }

    fn u64_field(&self, name: &'static str) -> Result<u64, ProtocolError> {
        self.map
            .get(name)
            .ok_or(ProtocolError::MissingField(name))?
            .as_u64()
            .ok_or(ProtocolError::BadField(name))
    }

    fn checksum_field(&self, name: &'static str) -> Result<String, ProtocolError> {
        let s = self.str_field(name)?;
        if !is_hex_checksum(s) {
            return Err(ProtocolError::BadField(name));
        }
        Ok(s.to_string())
    }

    fn base64_field(&self, name: &'static str) -> Result<Vec<u8>, ProtocolError> {
        let s = self.str_field(name)?;
        BASE64.decode(s).map_err(|_| ProtocolError::BadField(name))
    }

    fn expect_exactly(&self, allowed: &[&str]) -> Result<(), ProtocolError> {
        for key in self.map.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(ProtocolError::ExtraField(key.clone()));
            }
        }
        Ok(())
    }
}

/// Decodes a JSON payload (no framing). Never panics on arbitrary input.
pub fn decode_json(payload: &[u8]) -> Result<Message, ProtocolError> {
    let value: Value = serde_json::from_slice(payload)
        .map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let map = value
        .as_object()
        .ok_or_else(|| ProtocolError::Malformed("payload is not a JSON object".into()))?;
    let f = Fields { map };

    if let Some(mode) = map.get("mode") {
        let mode = mode.as_str().ok_or(ProtocolError::BadField("mode"))?;
        return match mode {
            "training request" => {
                f.expect_exactly(&["mode", "checksum", "nIter", "client id"])?;
                Ok(Message::TrainingRequest {
                    checksum: f.checksum_field("checksum")?,
                    n_iter: f.u64_field("nIter")?,
                    client_id: f.str_field("client id")?.to_string(),
                })
            }
            "training" | "validation" => {
                f.expect_exactly(&["mode", "checksum", "shape", "raw_data", "label"])?;
                let shape_val = map
                    .get("shape")
                    .ok_or(ProtocolError::MissingField("shape"))?
                    .as_array()
                    .ok_or(ProtocolError::BadField("shape"))?;
                let mut shape = Vec::with_capacity(shape_val.len());
                for v in shape_val {
                    let d = v.as_u64().ok_or(ProtocolError::BadField("shape"))?;
                    if d == 0 || d > u32::MAX as u64 {
                        return Err(ProtocolError::BadField("shape"));
                    }
                    shape.push(d as usize);
                }
                let label = if map.contains_key("label") {
                    Some(f.base64_field("label")?)
                } else {
                    None
                };
                Ok(Message::TensorTransmission {
                    mode: if mode == "training" {
                        TensorMode::Training
                    } else {
                        TensorMode::Validation
                    },
                    checksum: f.checksum_field("checksum")?,
                    shape,
                    raw_data: f.base64_field("raw_data")?,
                    label,
                })
            }
            "weight upload" => {
                f.expect_exactly(&["mode", "checksum", "weights", "client id"])?;
                Ok(Message::WeightUpload {
                    checksum: f.checksum_field("checksum")?,
                    weights: f.base64_field("weights")?,
                    client_id: f.str_field("client id")?.to_string(),
                })
            }
            "weight request" => {
                f.expect_exactly(&["mode", "client id"])?;
                Ok(Message::WeightRequest {
                    client_id: f.str_field("client id")?.to_string(),
                })
            }
            "snapshot" => {
                f.expect_exactly(&["mode", "checksum", "client id"])?;
                Ok(Message::Snapshot {
                    checksum: f.checksum_field("checksum")?,
                    client_id: f.str_field("client id")?.to_string(),
                })
            }
            other => Err(ProtocolError::UnknownMode(other.to_string())),
        };
    }

    if let Some(response) = map.get("response") {
        let response = response
            .as_str()
            .ok_or(ProtocolError::BadField("response"))?;
        return match response {
            "allowed" => {
                f.expect_exactly(&["response", "token"])?;
                Ok(Message::TrainingAllowed {
                    token: f.str_field("token")?.to_string(),
                })
            }
            "denied" => {
                if map.contains_key("reason") {
                    f.expect_exactly(&["response", "reason"])?;
                    Ok(Message::WeightDenied {
                        reason: f.str_field("reason")?.to_string(),
                    })
                } else {
                    f.expect_exactly(&["response"])?;
                    Ok(Message::TrainingDenied)
                }
            }
            "refresh" => {
                f.expect_exactly(&["response", "client id"])?;
                let arr = map
                    .get("client id")
                    .ok_or(ProtocolError::MissingField("client id"))?
                    .as_array()
                    .ok_or(ProtocolError::BadField("client id"))?;
                if arr.len() != 2 {
                    return Err(ProtocolError::BadField("client id"));
                }
                let client = arr[0].as_str().ok_or(ProtocolError::BadField("client id"))?;
                let address = arr[1].as_str().ok_or(ProtocolError::BadField("client id"))?;
                Ok(Message::RefreshRequired {
                    client: client.to_string(),
                    address: address.to_string(),
                })
            }
            "success" | "failure" => {
                f.expect_exactly(&["response"])?;
                Ok(Message::TensorAck {
                    ok: response == "success",
                })
            }
            "successful" | "failed" => {
                f.expect_exactly(&["response"])?;
                Ok(Message::SyncResult {
                    ok: response == "successful",
                })
            }
            other => Err(ProtocolError::UnknownMode(other.to_string())),
        };
    }

    if map.contains_key("weights") {
        f.expect_exactly(&["weights"])?;
        return Ok(Message::WeightPayload {
            weights: f.base64_field("weights")?,
        });
    }

    Err(ProtocolError::Malformed(
        "no mode, response, or weights discriminator".into(),
    ))
}

/// Decodes a complete frame (length prefix included).
pub fn decode_frame(frame: &[u8], max_len: usize) -> Result<Message, ProtocolError> {
    if frame.len() < 4 {
        return Err(ProtocolError::Malformed("frame shorter than prefix".into()));
    }
    let declared = u32::from_be_bytes(frame[0..4].try_into().unwrap()) as usize;
    if declared > max_len {
        return Err(ProtocolError::FrameTooLarge {
            got: declared,
            max: max_len,
        });
    }
    if frame.len() != 4 + declared {
        return Err(ProtocolError::Malformed(format!(
            "declared {declared} payload bytes, frame carries {}",
            frame.len() - 4
        )));
    }
    decode_json(&frame[4..])
}

/// Reads one length-prefixed frame from a stream. `Ok(None)` on clean EOF at
/// a frame boundary.
pub fn read_frame<R: std::io::Read + ?Sized>(
    reader: &mut R,
    max_len: usize,
) -> Result<Option<Vec<u8>>, ProtocolError> {
    let mut prefix = [0u8; 4];
    match reader.read_exact(&mut prefix) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > max_len {
        return Err(ProtocolError::FrameTooLarge { got: len, max: max_len });
    }
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload)?;
    let mut frame = prefix.to_vec();
    frame.extend_from_slice(&payload);
    Ok(Some(frame))
}

/// Whether a label argument is structurally permitted by the training mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelPolicy {
    Allowed,
    Forbidden,
}

/// Builds a tensor transmission: canonical bytes as `raw_data`, their digest
/// as `checksum`, the shape mirrored into the envelope. Under
/// [`LabelPolicy::Forbidden`] (the wraparound mode) a label argument is a
/// hard error.
pub fn tensor_message(
    policy: LabelPolicy,
    tensor: &Tensor,
    label: Option<&Tensor>,
    mode: TensorMode,
) -> Result<Message, ProtocolError> {
    if policy == LabelPolicy::Forbidden && label.is_some() {
        return Err(ProtocolError::LabelForbidden);
    }
    let raw = tensor.to_bytes();
    Ok(Message::TensorTransmission {
        mode,
        checksum: checksum(&raw).to_hex(),
        shape: tensor.shape().to_vec(),
        raw_data: raw,
        label: label.map(|l| l.to_bytes()),
    })
}

/// Verifies the checksum and the shape cross-check, then reconstructs the
/// tensor (and label, if present). Integrity failures are connection-fatal
/// for the caller.
pub fn extract_tensor(msg: &Message) -> Result<(Tensor, Option<Tensor>), ProtocolError> {
    let (checksum_hex, shape, raw_data, label) = match msg {
        Message::TensorTransmission {
            checksum,
            shape,
            raw_data,
            label,
            ..
        } => (checksum, shape, raw_data, label),
        _ => return Err(ProtocolError::Malformed("not a tensor transmission".into())),
    };
    let got = checksum(raw_data).to_hex();
    if &got != checksum_hex {
        return Err(ProtocolError::Integrity {
            expected: checksum_hex.clone(),
            got,
        });
    }
    let tensor = Tensor::from_bytes(raw_data)
        .map_err(|e| ProtocolError::Malformed(format!("bad tensor payload: {e}")))?;
    if tensor.shape() != shape.as_slice() {
        return Err(ProtocolError::BadField("shape"));
    }
    let label = match label {
        Some(bytes) => Some(
            Tensor::from_bytes(bytes)
                .map_err(|e| ProtocolError::Malformed(format!("bad label payload: {e}")))?,
        ),
        None => None,
    };
    Ok((tensor, label))
}
