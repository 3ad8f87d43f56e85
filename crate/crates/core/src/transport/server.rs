//! Centralized weight server: stores encrypted weight blobs (or cumulative
//! delta blobs) uploaded by registered clients and serves them back.

use crate::protocol::session::{ClientRegistry, REASON_NEVER_TRAINED};
use crate::protocol::Message;
use crate::transport::{pack_blobs, NodeError};

pub struct WeightServerNode {
    id: String,
    registry: ClientRegistry,
    /// In delta mode every upload is retained in order and served as a
    /// length-prefixed container; otherwise only the latest blob is kept.
    delta_mode: bool,
    uploads: Vec<(String, String, Vec<u8>)>,
}

impl WeightServerNode {
    pub fn new(id: impl Into<String>, registry: ClientRegistry, delta_mode: bool) -> Self {
        WeightServerNode {
            id: id.into(),
            registry,
            delta_mode,
            uploads: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn upload_count(&self) -> usize {
        self.uploads.len()
    }

    pub fn handle_frame(&mut self, from: &str, msg: Message) -> Result<Message, NodeError> {
        match msg {
            Message::WeightUpload {
                checksum,
                weights,
                client_id,
            } => {
                if client_id != from || self.registry.lookup(&client_id).is_none() {
                    return Ok(Message::SyncResult { ok: false });
                }
                if !self.delta_mode {
                    self.uploads.clear();
                }
                self.uploads.push((client_id, checksum, weights));
                Ok(Message::SyncResult { ok: true })
            }
            Message::WeightRequest { client_id } => {
                if client_id != from || self.registry.lookup(&client_id).is_none() {
                    return Ok(Message::WeightDenied {
                        reason: "client not registered".to_string(),
                    });
                }
                if self.uploads.is_empty() {
                    return Ok(Message::WeightDenied {
                        reason: REASON_NEVER_TRAINED.to_string(),
                    });
                }
                let weights = if self.delta_mode {
                    let blobs: Vec<Vec<u8>> =
                        self.uploads.iter().map(|(_, _, b)| b.clone()).collect();
                    pack_blobs(&blobs)
                } else {
                    self.uploads.last().unwrap().2.clone()
                };
                Ok(Message::WeightPayload { weights })
            }
            other => Err(NodeError::UnexpectedMessage {
                from: from.into(),
                kind: other.log_kind(),
            }),
        }
    }
}
