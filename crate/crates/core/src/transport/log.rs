//! Append-only record of every delivered frame: the evidence source for
//! label-privacy assertions and byte accounting.

use std::time::Duration;

use crate::protocol::Message;

#[derive(Debug, Clone)]
pub struct LogEntry {
    pub seq: u64,
    pub timestamp: Duration,
    pub sender: String,
    pub receiver: String,
    /// Discriminator string (`mode` field, `response:<value>`, or
    /// `malformed` for frames that failed to decode).
    pub kind: String,
    /// Full frame size on the wire, length prefix included.
    pub byte_size: usize,
    /// Decoded message, when the frame decoded.
    pub message: Option<Message>,
}

#[derive(Debug, Clone, Default)]
pub struct MessageLog {
    entries: Vec<LogEntry>,
}

impl MessageLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        timestamp: Duration,
        sender: &str,
        receiver: &str,
        byte_size: usize,
        message: Option<Message>,
    ) {
        let kind = message
            .as_ref()
            .map(|m| m.log_kind())
            .unwrap_or_else(|| "malformed".to_string());
        self.entries.push(LogEntry {
            seq: self.entries.len() as u64,
            timestamp,
            sender: sender.to_string(),
            receiver: receiver.to_string(),
            kind,
            byte_size,
            message,
        });
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.byte_size as u64).sum()
    }

    pub fn bytes_sent_by(&self, sender: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.sender == sender)
            .map(|e| e.byte_size as u64)
            .sum()
    }

    pub fn bytes_received_by(&self, receiver: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.receiver == receiver)
            .map(|e| e.byte_size as u64)
            .sum()
    }

    /// Entries addressed to `receiver`.
    pub fn to_node<'a>(&'a self, receiver: &'a str) -> impl Iterator<Item = &'a LogEntry> {
        self.entries.iter().filter(move |e| e.receiver == receiver)
    }

    /// Whether any message bound for `receiver` structurally carries a label
    /// field.
    pub fn any_label_bound_for(&self, receiver: &str) -> bool {
        self.to_node(receiver).any(|e| {
            e.message
                .as_ref()
                .map(|m| m.carries_label())
                .unwrap_or(false)
        })
    }

    /// CSV export: sender, receiver, mode, bytes, timestamp (milliseconds).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sender,receiver,mode,bytes,timestamp_ms\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.sender,
                e.receiver,
                e.kind,
                e.byte_size,
                e.timestamp.as_millis()
            ));
        }
        out
    }

    /// Byte-level equality of two logs (the determinism contract).
    pub fn identical_to(&self, other: &MessageLog) -> bool {
        self.to_csv() == other.to_csv()
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.message == b.message)
    }
}
