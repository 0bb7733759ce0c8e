//! Dynamic mounting: token-gated, password-keyed sessions over hidden
//! volumes with auto-unmount deadlines.
//!
//! Requests carry a MAC-signed bearer token. Token verification strictly
//! precedes name derivation, so an invalid token yields the same observable
//! outcome whether or not the password matches any volume. A mounted
//! session exposes an opaque handle; once its deadline passes a tick, the
//! handle goes stale and the volume disappears from the mounted listing.
//! Mount cycles never reopen the pool or re-run the FDE unlock.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, Mac};
use sha2::Sha256;

use crate::error::{Error, Result};
use crate::store::{GygesStore, VolumeHandle};

type HmacSha256 = Hmac<Sha256>;

const MAC_LEN: usize = 32;

/// Verified token contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenClaims {
    pub app_id: String,
    pub expiry_unix: u64,
}

/// HMAC bearer token issuer/verifier.
///
/// Wire format: `base64url(app_id ∥ expiry_unix_u64_le ∥ mac)` with
/// `mac = HMAC-SHA256(secret, app_id ∥ expiry_unix_u64_le)`.
pub struct TokenScheme {
    secret: Vec<u8>,
}

impl TokenScheme {
    pub fn new(secret: &[u8]) -> Self {
        Self {
            secret: secret.to_vec(),
        }
    }

    /// Issue a token valid for `ttl` from `now_unix`.
    pub fn issue(&self, app_id: &str, ttl: Duration, now_unix: u64) -> String {
        let expiry = now_unix + ttl.as_secs();
        let mut payload = app_id.as_bytes().to_vec();
        payload.extend_from_slice(&expiry.to_le_bytes());
        let mut mac = HmacSha256::new_from_slice(&self.secret).expect("any key length works");
        mac.update(&payload);
        payload.extend_from_slice(&mac.finalize().into_bytes());
        URL_SAFE_NO_PAD.encode(payload)
    }

    /// Verify a token at `now_unix`: MAC must match and expiry must be in
    /// the future.
    pub fn verify(&self, token: &str, now_unix: u64) -> Result<TokenClaims> {
        let raw = URL_SAFE_NO_PAD
            .decode(token)
            .map_err(|_| Error::InvalidToken)?;
        if raw.len() < 8 + MAC_LEN {
            return Err(Error::InvalidToken);
        }
        let (signed, tag) = raw.split_at(raw.len() - MAC_LEN);
        let mut mac = HmacSha256::new_from_slice(&self.secret).expect("any key length works");
        mac.update(signed);
        mac.verify_slice(tag).map_err(|_| Error::InvalidToken)?;
        let (app_bytes, expiry_bytes) = signed.split_at(signed.len() - 8);
        let expiry_unix = u64::from_le_bytes(expiry_bytes.try_into().unwrap());
        if expiry_unix <= now_unix {
            return Err(Error::InvalidToken);
        }
        let app_id = String::from_utf8(app_bytes.to_vec()).map_err(|_| Error::InvalidToken)?;
        Ok(TokenClaims {
            app_id,
            expiry_unix,
        })
    }
}

/// Opaque mounted-session identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SessionHandle(u64);

impl SessionHandle {
    /// Raw id for wire/scripting surfaces.
    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn from_raw(id: u64) -> Self {
        Self(id)
    }
}

#[derive(Debug)]
struct Session {
    name: String,
    deadline: Duration,
    volume: VolumeHandle,
}

#[derive(Debug, Default)]
struct Inner {
    sessions: HashMap<u64, Session>,
    by_name: HashMap<String, u64>,
    next_id: u64,
}

/// Mount state machine over hidden volumes.
///
/// Time is explicit: monotonic `now` instants drive deadlines, wall-clock
/// `now_unix` drives token expiry. Safe for concurrent use; the tick driver
/// may run on a separate thread from requesters.
pub struct MountRegistry {
    scheme: TokenScheme,
    inner: Mutex<Inner>,
}

impl MountRegistry {
    pub fn new(secret: &[u8]) -> Self {
        Self {
            scheme: TokenScheme::new(secret),
            inner: Mutex::new(Inner::default()),
        }
    }

    pub fn token_scheme(&self) -> &TokenScheme {
        &self.scheme
    }

    /// Mount the hidden volume reachable by `password`.
    ///
    /// The token is checked before any password processing; a rejected
    /// request reveals nothing about whether the volume exists. On success
    /// the session deadline is `now + timeout`.
    pub fn mount_hidden(
        &self,
        store: &GygesStore,
        password: &[u8],
        token: &str,
        timeout: Duration,
        now: Duration,
        now_unix: u64,
    ) -> Result<SessionHandle> {
        self.scheme.verify(token, now_unix)?;
        let volume = store.hidden_handle(password)?;
        let mut inner = self.inner.lock().unwrap();
        if inner.by_name.contains_key(volume.name()) {
            return Err(Error::AlreadyMounted);
        }
        let id = inner.next_id;
        inner.next_id += 1;
        let name = volume.name().to_string();
        inner.sessions.insert(
            id,
            Session {
                name: name.clone(),
                deadline: now + timeout,
                volume,
            },
        );
        inner.by_name.insert(name, id);
        Ok(SessionHandle(id))
    }

    /// Explicit unmount; the handle goes stale immediately.
    pub fn unmount(&self, handle: SessionHandle) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let session = inner.sessions.remove(&handle.0).ok_or(Error::StaleHandle)?;
        inner.by_name.remove(&session.name);
        Ok(())
    }

    /// Expire every session whose deadline is at or before `now`; returns
    /// the names unmounted by this tick.
    pub fn tick(&self, now: Duration) -> Vec<String> {
        let mut inner = self.inner.lock().unwrap();
        let expired: Vec<u64> = inner
            .sessions
            .iter()
            .filter(|(_, s)| s.deadline <= now)
            .map(|(id, _)| *id)
            .collect();
        let mut names = Vec::with_capacity(expired.len());
        for id in expired {
            if let Some(s) = inner.sessions.remove(&id) {
                inner.by_name.remove(&s.name);
                names.push(s.name);
            }
        }
        names
    }

    /// Names of currently mounted volumes (what "examining the mounted
    /// devices" would reveal).
    pub fn mounted_names(&self) -> Vec<String> {
        let inner = self.inner.lock().unwrap();
        let mut names: Vec<String> = inner.by_name.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn is_mounted(&self, name: &str) -> bool {
        self.inner.lock().unwrap().by_name.contains_key(name)
    }

    fn volume_of(&self, handle: SessionHandle) -> Result<VolumeHandle> {
        let inner = self.inner.lock().unwrap();
        inner
            .sessions
            .get(&handle.0)
            .map(|s| s.volume.clone())
            .ok_or(Error::StaleHandle)
    }

    /// Read through a mounted session.
    pub fn read(
        &self,
        store: &GygesStore,
        handle: SessionHandle,
        offset: u64,
        out: &mut [u8],
    ) -> Result<()> {
        let volume = self.volume_of(handle)?;
        store.read(&volume, offset, out)
    }

    /// Write through a mounted session.
    pub fn write(
        &self,
        store: &mut GygesStore,
        handle: SessionHandle,
        offset: u64,
        data: &[u8],
    ) -> Result<usize> {
        let volume = self.volume_of(handle)?;
        store.write(&volume, offset, data)
    }
}
