//! Session tokens: 16 random bytes as hex, valid for a bounded window from
//! issuance on the issuer's clock, consumed on first use.

use std::time::Duration;

use rand::RngCore;
use rand_chacha::ChaCha12Rng;

/// Window within which an issued token must be used.
pub const TOKEN_TTL: Duration = Duration::from_secs(20);

#[derive(Debug, Clone)]
pub struct TokenState {
    value: String,
    issued_at: Duration,
    ttl: Duration,
    consumed: bool,
}

pub fn generate_token_value(rng: &mut ChaCha12Rng) -> String {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    hex::encode(bytes)
}

impl TokenState {
    pub fn issue(rng: &mut ChaCha12Rng, now: Duration, ttl: Duration) -> TokenState {
        TokenState {
            value: generate_token_value(rng),
            issued_at: now,
            ttl,
            consumed: false,
        }
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    pub fn is_expired(&self, now: Duration) -> bool {
        now.saturating_sub(self.issued_at) >= self.ttl
    }

    /// Instant at which the token dies.
    pub fn expiry(&self) -> Duration {
        self.issued_at + self.ttl
    }

    /// Accepts exactly once, strictly inside the ttl window, on a matching
    /// value. Consumes the token on the accepting call.
    pub fn validate(&mut self, value: &str, now: Duration) -> bool {
        if self.consumed || self.is_expired(now) || self.value != value {
            return false;
        }
        self.consumed = true;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fresh(now: Duration) -> TokenState {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        TokenState::issue(&mut rng, now, TOKEN_TTL)
    }

    #[test]
    fn accepts_just_inside_window() {
        let t0 = Duration::from_secs(100);
        let mut tok = fresh(t0);
        let v = tok.value().to_string();
        assert!(tok.validate(&v, t0 + Duration::from_millis(19_900)));
    }

    #[test]
    fn rejects_at_and_past_the_boundary() {
        let t0 = Duration::from_secs(100);
        let mut tok = fresh(t0);
        let v = tok.value().to_string();
        assert!(!tok.validate(&v, t0 + Duration::from_secs(20)));
        let mut tok2 = fresh(t0);
        let v2 = tok2.value().to_string();
        assert!(!tok2.validate(&v2, t0 + Duration::from_millis(20_100)));
    }

    #[test]
    fn second_use_is_rejected() {
        let t0 = Duration::ZERO;
        let mut tok = fresh(t0);
        let v = tok.value().to_string();
        assert!(tok.validate(&v, Duration::from_secs(1)));
        assert!(!tok.validate(&v, Duration::from_secs(2)));
    }

    #[test]
    fn wrong_value_is_rejected_without_consuming() {
        let t0 = Duration::ZERO;
        let mut tok = fresh(t0);
        let v = tok.value().to_string();
        assert!(!tok.validate("not-the-token", Duration::from_secs(1)));
        assert!(tok.validate(&v, Duration::from_secs(2)));
    }

    #[test]
    fn token_values_are_32_hex_chars() {
        let tok = fresh(Duration::ZERO);
        assert_eq!(tok.value().len(), 32);
        assert!(tok.value().bytes().all(|b| b.is_ascii_hexdigit()));
    }
}
