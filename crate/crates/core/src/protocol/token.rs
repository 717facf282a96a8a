//! Single-use run credentials.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::digest::Digest;

/// Opaque 128-bit bearer token, hex encoded.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub String);

impl Token {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("authentication failed: {0}")]
    AuthFailed(String),
    #[error("token is bound to run {bound}, not {presented}")]
    IdentityMismatch { bound: String, presented: String },
}

struct Grant {
    run_id: String,
    expires_at: Timestamp,
}

/// Issues tokens bound to exactly one run and verifies them by equality.
/// A token is consumed by its first successful verification.
pub struct TokenIssuer {
    rng: Mutex<ChaCha20Rng>,
    grants: Mutex<HashMap<String, Grant>>,
}

impl TokenIssuer {
    /// With a secret the token stream is reproducible for that secret;
    /// without one it is seeded from the OS.
    pub fn new(secret: Option<&str>) -> Self {
        let rng = match secret {
            Some(s) => ChaCha20Rng::from_seed(*Digest::of(s.as_bytes()).as_bytes()),
            None => ChaCha20Rng::from_entropy(),
        };
        TokenIssuer { rng: Mutex::new(rng), grants: Mutex::new(HashMap::new()) }
    }

    /// Reads `POSY_SHARED_SECRET`.
    pub fn from_env() -> Self {
        Self::new(std::env::var("POSY_SHARED_SECRET").ok().filter(|s| !s.is_empty()).as_deref())
    }

    pub fn issue(&self, run_id: &str, expires_at: Timestamp) -> Token {
        let mut bytes = [0u8; 16];
        self.rng.lock().unwrap().fill_bytes(&mut bytes);
        let token = hex::encode(bytes);
        self.grants.lock().unwrap().insert(token.clone(), Grant { run_id: run_id.to_string(), expires_at });
        Token(token)
    }

    /// Verifies and consumes `token` for `run_id`. A token presented for
    /// the wrong run is not consumed.
    pub fn verify(&self, token: &str, run_id: &str, now: Timestamp) -> Result<(), AuthError> {
        let mut grants = self.grants.lock().unwrap();
        let Some(grant) = grants.get(token) else {
            return Err(AuthError::AuthFailed("unknown or already used token".into()));
        };
        if now >= grant.expires_at {
            grants.remove(token);
            return Err(AuthError::AuthFailed("token expired".into()));
        }
        if grant.run_id != run_id {
            return Err(AuthError::IdentityMismatch { bound: grant.run_id.clone(), presented: run_id.to_string() });
        }
        grants.remove(token);
        Ok(())
    }

    pub fn revoke_run(&self, run_id: &str) {
        self.grants.lock().unwrap().retain(|_, g| g.run_id != run_id);
    }

    /// Number of issued tokens not yet consumed, expired or revoked.
    pub fn outstanding(&self) -> usize {
        self.grants.lock().unwrap().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_use() {
        let iss = TokenIssuer::new(Some("s"));
        let t = iss.issue("a", Timestamp(100));
        assert_eq!(t.0.len(), 32);
        iss.verify(t.as_str(), "a", Timestamp(1)).unwrap();
        assert!(matches!(iss.verify(t.as_str(), "a", Timestamp(1)), Err(AuthError::AuthFailed(_))));
    }

    #[test]
    fn cross_run_pairings() {
        let iss = TokenIssuer::new(None);
        let runs = ["a", "b", "c"];
        for (i, issued_for) in runs.iter().enumerate() {
            for (j, presented) in runs.iter().enumerate() {
                let t = iss.issue(issued_for, Timestamp(100));
                let r = iss.verify(t.as_str(), presented, Timestamp(0));
                if i == j {
                    assert!(r.is_ok());
                } else {
                    assert!(matches!(r, Err(AuthError::IdentityMismatch { .. })));
                }
            }
        }
    }

    #[test]
    fn expiry() {
        let iss = TokenIssuer::new(None);
        let t = iss.issue("a", Timestamp(10));
        assert!(matches!(iss.verify(t.as_str(), "a", Timestamp(10)), Err(AuthError::AuthFailed(_))));
    }

    #[test]
    fn seeded_stream_is_reproducible() {
        let a = TokenIssuer::new(Some("k"));
        let b = TokenIssuer::new(Some("k"));
        assert_eq!(a.issue("r", Timestamp(1)), b.issue("r", Timestamp(1)));
    }
}
