//! Bob-side protocol session state: training-request gating, token
//! lifecycle, and the weight-sync primitives (upload / request / snapshot).

use std::collections::BTreeMap;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::protocol::message::{Message, ProtocolError};
use crate::protocol::token::{TokenState, TOKEN_TTL};
use crate::tensor::TensorChecksum;

/// Default idle window after which an in-flight session is revoked.
pub const IDLE_TIMEOUT: Duration = Duration::from_secs(30);

pub const REASON_NOT_CENTRALIZED: &str = "Bob was not started in centralized mode";
pub const REASON_NEVER_TRAINED: &str = "Bob never trained with an alice";
pub const REASON_ALICE_NEVER_TRAINED: &str = "This Alice never trained with bob";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreMode {
    Centralized,
    PeerToPeer,
}

#[derive(Debug, Clone)]
pub struct ClientRecord {
    pub secret: String,
    pub address: String,
}

/// Static authentication registry: client id -> shared secret + locator.
#[derive(Debug, Clone, Default)]
pub struct ClientRegistry {
    clients: BTreeMap<String, ClientRecord>,
}

impl ClientRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        client_id: impl Into<String>,
        secret: impl Into<String>,
        address: impl Into<String>,
    ) {
        self.clients.insert(
            client_id.into(),
            ClientRecord {
                secret: secret.into(),
                address: address.into(),
            },
        );
    }

    pub fn lookup(&self, client_id: &str) -> Option<&ClientRecord> {
        self.clients.get(client_id)
    }

    pub fn authenticate(&self, client_id: &str, secret: &str) -> bool {
        self.lookup(client_id).is_some_and(|r| r.secret == secret)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.clients.keys().map(|s| s.as_str())
    }
}

#[derive(Debug, Clone)]
enum Phase {
    Idle,
    TokenIssued {
        client: String,
        token: TokenState,
        n_iter: u64,
    },
    Training {
        client: String,
        n_iter: u64,
        completed: u64,
        last_activity: Duration,
    },
}

/// What a revoked in-flight session leaves behind; the owner rolls back any
/// staged training state for this client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevokedSession {
    pub client: String,
    pub was_training: bool,
}

#[derive(Debug)]
pub struct SessionState {
    registry: ClientRegistry,
    expected_checksum: TensorChecksum,
    last_trained: Option<String>,
    phase: Phase,
    mode: StoreMode,
    /// Latest encrypted upload (plaintext checksum hex, encrypted blob).
    latest_blob: Option<(String, Vec<u8>)>,
    rng: ChaCha12Rng,
    token_ttl: Duration,
    idle_timeout: Duration,
}

impl SessionState {
    pub fn new(
        registry: ClientRegistry,
        expected_checksum: TensorChecksum,
        mode: StoreMode,
        rng_seed: u64,
    ) -> Self {
        SessionState {
            registry,
            expected_checksum,
            last_trained: None,
            phase: Phase::Idle,
            mode,
            latest_blob: None,
            rng: ChaCha12Rng::seed_from_u64(rng_seed),
            token_ttl: TOKEN_TTL,
            idle_timeout: IDLE_TIMEOUT,
        }
    }

    pub fn registry(&self) -> &ClientRegistry {
        &self.registry
    }

    pub fn expected_checksum(&self) -> TensorChecksum {
        self.expected_checksum
    }

    pub fn last_trained(&self) -> Option<&str> {
        self.last_trained.as_deref()
    }

    pub fn store_mode(&self) -> StoreMode {
        self.mode
    }

    pub fn idle_timeout(&self) -> Duration {
        self.idle_timeout
    }

    pub fn set_idle_timeout(&mut self, d: Duration) {
        self.idle_timeout = d;
    }

    /// Client currently holding an active training session.
    pub fn current_trainer(&self) -> Option<&str> {
        match &self.phase {
            Phase::Training { client, .. } => Some(client),
            _ => None,
        }
    }

    pub fn is_idle(&self) -> bool {
        matches!(self.phase, Phase::Idle)
    }

    /// Expires stale tokens and idle sessions. Returns the revoked session,
    /// if any, so the owner can roll back staged state.
    pub fn tick(&mut self, now: Duration) -> Option<RevokedSession> {
        match &self.phase {
            Phase::TokenIssued { client, token, .. } if token.is_expired(now) => {
                let revoked = RevokedSession {
                    client: client.clone(),
                    was_training: false,
                };
                self.phase = Phase::Idle;
                Some(revoked)
            }
            Phase::Training {
                client,
                last_activity,
                ..
            } if now.saturating_sub(*last_activity) >= self.idle_timeout => {
                let revoked = RevokedSession {
                    client: client.clone(),
                    was_training: true,
                };
                self.phase = Phase::Idle;
                Some(revoked)
            }
            _ => None,
        }
    }

    /// Drops any in-flight session (peer disconnect). Returns the client
    /// whose staged state must be rolled back.
    pub fn abort_session(&mut self, client: &str) -> Option<RevokedSession> {
        let matches_client = match &self.phase {
            Phase::TokenIssued { client: c, .. } | Phase::Training { client: c, .. } => c == client,
            Phase::Idle => false,
        };
        if matches_client {
            let was_training = matches!(self.phase, Phase::Training { .. });
            self.phase = Phase::Idle;
            Some(RevokedSession {
                client: client.to_string(),
                was_training,
            })
        } else {
            None
        }
    }

    /// Gate of the whole protocol. Unknown identities are a disconnect; a
    /// busy server denies; a stale checksum redirects to the last-trained
    /// client; otherwise a fresh single-use token is issued.
    pub fn handle_training_request(
        &mut self,
        client_id: &str,
        checksum_hex: &str,
        n_iter: u64,
        now: Duration,
    ) -> Result<Message, ProtocolError> {
        if self.registry.lookup(client_id).is_none() {
            return Err(ProtocolError::IdentityUnknown);
        }
        self.tick(now);
        if !matches!(self.phase, Phase::Idle) {
            return Ok(Message::TrainingDenied);
        }
        if checksum_hex != self.expected_checksum.to_hex() {
            return Ok(match &self.last_trained {
                Some(last) => {
                    let address = self
                        .registry
                        .lookup(last)
                        .map(|r| r.address.clone())
                        .unwrap_or_default();
                    Message::RefreshRequired {
                        client: last.clone(),
                        address,
                    }
                }
                // Nobody holds newer weights than the boot state; nothing to
                // refresh from.
                None => Message::TrainingDenied,
            });
        }
        let token = TokenState::issue(&mut self.rng, now, self.token_ttl);
        let value = token.value().to_string();
        self.phase = Phase::TokenIssued {
            client: client_id.to_string(),
            token,
            n_iter,
        };
        Ok(Message::TrainingAllowed { token: value })
    }

    /// Accepts a token exactly once within its window; on acceptance the
    /// session moves to the training phase.
    pub fn validate_token(&mut self, value: &str, now: Duration) -> bool {
        if let Phase::TokenIssued {
            client,
            token,
            n_iter,
        } = &mut self.phase
        {
            if token.validate(value, now) {
                self.phase = Phase::Training {
                    client: client.clone(),
                    n_iter: *n_iter,
                    completed: 0,
                    last_activity: now,
                };
                return true;
            }
            if token.is_expired(now) {
                self.phase = Phase::Idle;
            }
        }
        false
    }

    /// Token value currently issued (the owner forwards it to the client in
    /// the allowed response, then uses it to start the session when the
    /// first tensor frame arrives).
    pub fn issued_token_value(&self) -> Option<&str> {
        match &self.phase {
            Phase::TokenIssued { token, .. } => Some(token.value()),
            _ => None,
        }
    }

    /// Client holding the currently issued (unconsumed) token.
    pub fn issued_to(&self) -> Option<&str> {
        match &self.phase {
            Phase::TokenIssued { client, .. } => Some(client),
            _ => None,
        }
    }

    /// Instant at which the current phase times out on its own.
    pub fn next_deadline(&self) -> Option<Duration> {
        match &self.phase {
            Phase::Idle => None,
            Phase::TokenIssued { token, .. } => Some(token.expiry()),
            Phase::Training { last_activity, .. } => Some(*last_activity + self.idle_timeout),
        }
    }

    /// Records activity on the active session and bumps the completed step
    /// count by `steps`.
    pub fn record_steps(&mut self, steps: u64, now: Duration) {
        if let Phase::Training {
            completed,
            last_activity,
            ..
        } = &mut self.phase
        {
            *completed += steps;
            *last_activity = now;
        }
    }

    /// Steps remaining in the active session.
    pub fn remaining_steps(&self) -> Option<u64> {
        match &self.phase {
            Phase::Training {
                n_iter, completed, ..
            } => Some(n_iter.saturating_sub(*completed)),
            _ => None,
        }
    }

    fn may_sync(&self, client_id: &str) -> bool {
        self.current_trainer() == Some(client_id)
            || (matches!(self.phase, Phase::Idle) && self.last_trained.as_deref() == Some(client_id))
    }

    /// Peer-to-peer session commit: registers the client's weight checksum
    /// and marks the client last-trained. Only the current or last trainer
    /// may snapshot.
    pub fn handle_snapshot(&mut self, client_id: &str, checksum_hex: &str) -> Message {
        match TensorChecksum::from_hex(checksum_hex) {
            Some(c) if self.may_sync(client_id) => {
                self.expected_checksum = c;
                self.last_trained = Some(client_id.to_string());
                self.phase = Phase::Idle;
                Message::SyncResult { ok: true }
            }
            _ => Message::SyncResult { ok: false },
        }
    }

    /// Centralized session commit: snapshot semantics plus storage of the
    /// encrypted weight file.
    pub fn handle_weight_upload(
        &mut self,
        client_id: &str,
        checksum_hex: &str,
        blob: Vec<u8>,
    ) -> Message {
        if self.mode != StoreMode::Centralized {
            return Message::SyncResult { ok: false };
        }
        match TensorChecksum::from_hex(checksum_hex) {
            Some(c) if self.may_sync(client_id) => {
                self.expected_checksum = c;
                self.last_trained = Some(client_id.to_string());
                self.phase = Phase::Idle;
                self.latest_blob = Some((checksum_hex.to_string(), blob));
                Message::SyncResult { ok: true }
            }
            _ => Message::SyncResult { ok: false },
        }
    }

    /// Serves the latest stored encrypted weight file.
    pub fn handle_weight_request(&self, client_id: &str) -> Result<Message, ProtocolError> {
        if self.registry.lookup(client_id).is_none() {
            return Err(ProtocolError::IdentityUnknown);
        }
        if self.mode != StoreMode::Centralized {
            return Ok(Message::WeightDenied {
                reason: REASON_NOT_CENTRALIZED.to_string(),
            });
        }
        match &self.latest_blob {
            Some((_, blob)) => Ok(Message::WeightPayload {
                weights: blob.clone(),
            }),
            None => Ok(Message::WeightDenied {
                reason: REASON_NEVER_TRAINED.to_string(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::checksum;

    fn registry() -> ClientRegistry {
        let mut r = ClientRegistry::new();
        r.register("alice1", "s1", "sim://alice1");
        r.register("alice2", "s2", "sim://alice2");
        r
    }

    fn state(mode: StoreMode) -> SessionState {
        SessionState::new(registry(), checksum(b"boot weights"), mode, 42)
    }

    fn sec(s: u64) -> Duration {
        Duration::from_secs(s)
    }

    #[test]
    fn matching_checksum_idle_bob_allows_with_token() {
        let mut s = state(StoreMode::PeerToPeer);
        let c = s.expected_checksum().to_hex();
        let reply = s.handle_training_request("alice1", &c, 5, sec(0)).unwrap();
        match reply {
            Message::TrainingAllowed { token } => assert_eq!(token.len(), 32),
            other => panic!("expected allowed, got {other:?}"),
        }
    }

    #[test]
    fn unknown_identity_disconnects() {
        let mut s = state(StoreMode::PeerToPeer);
        let c = s.expected_checksum().to_hex();
        assert!(matches!(
            s.handle_training_request("mallory", &c, 1, sec(0)),
            Err(ProtocolError::IdentityUnknown)
        ));
    }

    #[test]
    fn stale_checksum_yields_refresh_naming_last_trained() {
        let mut s = state(StoreMode::PeerToPeer);
        let good = s.expected_checksum().to_hex();
        let reply = s.handle_training_request("alice1", &good, 1, sec(0)).unwrap();
        let token = match reply {
            Message::TrainingAllowed { token } => token,
            other => panic!("{other:?}"),
        };
        assert!(s.validate_token(&token, sec(1)));
        let new_checksum = checksum(b"after training").to_hex();
        assert!(matches!(
            s.handle_snapshot("alice1", &new_checksum),
            Message::SyncResult { ok: true }
        ));

        let reply = s.handle_training_request("alice2", &good, 1, sec(2)).unwrap();
        match reply {
            Message::RefreshRequired { client, address } => {
                assert_eq!(client, "alice1");
                assert_eq!(address, "sim://alice1");
            }
            other => panic!("expected refresh, got {other:?}"),
        }
    }

    #[test]
    fn second_request_while_token_outstanding_is_denied() {
        let mut s = state(StoreMode::PeerToPeer);
        let c = s.expected_checksum().to_hex();
        s.handle_training_request("alice1", &c, 1, sec(0)).unwrap();
        assert!(matches!(
            s.handle_training_request("alice2", &c, 1, sec(5)).unwrap(),
            Message::TrainingDenied
        ));
    }

    #[test]
    fn expired_token_frees_the_slot() {
        let mut s = state(StoreMode::PeerToPeer);
        let c = s.expected_checksum().to_hex();
        s.handle_training_request("alice1", &c, 1, sec(0)).unwrap();
        // 20 s later the token is dead; a new request succeeds.
        assert!(matches!(
            s.handle_training_request("alice2", &c, 1, sec(20)).unwrap(),
            Message::TrainingAllowed { .. }
        ));
    }

    #[test]
    fn token_accepts_once_within_window() {
        let mut s = state(StoreMode::PeerToPeer);
        let c = s.expected_checksum().to_hex();
        let token = match s.handle_training_request("alice1", &c, 1, sec(0)).unwrap() {
            Message::TrainingAllowed { token } => token,
            other => panic!("{other:?}"),
        };
        assert!(!s.validate_token("bogus", Duration::from_millis(100)));
        assert!(s.validate_token(&token, Duration::from_millis(19_900)));
        assert_eq!(s.current_trainer(), Some("alice1"));
        assert!(!s.validate_token(&token, Duration::from_millis(19_950)));
    }

    #[test]
    fn token_rejected_at_expiry_boundary() {
        let mut s = state(StoreMode::PeerToPeer);
        let c = s.expected_checksum().to_hex();
        let token = match s.handle_training_request("alice1", &c, 1, sec(0)).unwrap() {
            Message::TrainingAllowed { token } => token,
            other => panic!("{other:?}"),
        };
        assert!(!s.validate_token(&token, sec(20)));
        assert!(s.is_idle());
    }

    #[test]
    fn idle_training_session_is_revoked() {
        let mut s = state(StoreMode::PeerToPeer);
        let c = s.expected_checksum().to_hex();
        let token = match s.handle_training_request("alice1", &c, 3, sec(0)).unwrap() {
            Message::TrainingAllowed { token } => token,
            other => panic!("{other:?}"),
        };
        assert!(s.validate_token(&token, sec(1)));
        s.record_steps(1, sec(2));
        let revoked = s.tick(sec(2) + IDLE_TIMEOUT).unwrap();
        assert_eq!(
            revoked,
            RevokedSession {
                client: "alice1".into(),
                was_training: true
            }
        );
        assert!(s.is_idle());
    }

    #[test]
    fn upload_auth_requires_current_or_last_trainer() {
        let mut s = state(StoreMode::Centralized);
        let c = s.expected_checksum().to_hex();
        // alice2 never trained: upload fails.
        assert!(matches!(
            s.handle_weight_upload("alice2", &c, vec![1, 2, 3]),
            Message::SyncResult { ok: false }
        ));
        // run a session as alice1, commit by upload.
        let token = match s.handle_training_request("alice1", &c, 1, sec(0)).unwrap() {
            Message::TrainingAllowed { token } => token,
            other => panic!("{other:?}"),
        };
        assert!(s.validate_token(&token, sec(1)));
        let newsum = checksum(b"new").to_hex();
        assert!(matches!(
            s.handle_weight_upload("alice1", &newsum, vec![9, 9]),
            Message::SyncResult { ok: true }
        ));
        assert_eq!(s.last_trained(), Some("alice1"));
        // the blob round-trips for the next client.
        match s.handle_weight_request("alice2").unwrap() {
            Message::WeightPayload { weights } => assert_eq!(weights, vec![9, 9]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weight_request_denials_carry_reasons() {
        let s = state(StoreMode::PeerToPeer);
        match s.handle_weight_request("alice1").unwrap() {
            Message::WeightDenied { reason } => assert_eq!(reason, REASON_NOT_CENTRALIZED),
            other => panic!("{other:?}"),
        }
        let s = state(StoreMode::Centralized);
        match s.handle_weight_request("alice1").unwrap() {
            Message::WeightDenied { reason } => assert_eq!(reason, REASON_NEVER_TRAINED),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            s.handle_weight_request("mallory"),
            Err(ProtocolError::IdentityUnknown)
        ));
    }
}
