//! Two authentication domains bridged by an identity map.
//!
//! Desktop to portal: [`UserToken`], a Kerberos-like ticket MACed under the
//! realm key. Portal to grid: [`GridProxy`], an X.509-proxy-like delegation
//! chain. Both are HMAC-SHA-256 stand-ins that keep the trust topology
//! (issuance, expiry, delegation depth, chain linkage) without a real PKI.
//!
//! Proxy links are signed with the issuer's key. A link's own key is
//! derived from its issuer's key and the link body, so a verifier holding
//! only the trust anchors can walk the chain from the root down.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as B64;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::time::SimTime;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("token expired")]
    TokenExpired,
    #[error("bad signature")]
    BadSignature,
    #[error("malformed credential: {0}")]
    Malformed(&'static str),
    #[error("ttl must be positive")]
    InvalidTtl,
    #[error("proxy expired")]
    ProxyExpired,
    #[error("delegation depth exceeded")]
    DepthExceeded,
    #[error("broken proxy chain")]
    BrokenChain,
    #[error("principal {0} has no grid identity")]
    UnmappedPrincipal(String),
    #[error("grid subject {0} is mapped from more than one principal")]
    NonInjectiveMap(String),
}

/// 32-byte secret shared by the portal and the realm's ticket issuer.
#[derive(Clone, PartialEq, Eq)]
pub struct RealmKey(pub [u8; 32]);

impl core::fmt::Debug for RealmKey {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("RealmKey(..)")
    }
}

impl RealmKey {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, AuthError> {
        let key: [u8; 32] = bytes.try_into().map_err(|_| AuthError::Malformed("realm key must be 32 bytes"))?;
        Ok(RealmKey(key))
    }
}

fn mac(key: &[u8], domain: &[u8], body: &[u8]) -> [u8; 32] {
    let mut m = HmacSha256::new_from_slice(key).expect("hmac takes any key length");
    m.update(domain);
    m.update(body);
    m.finalize().into_bytes().into()
}

fn mac_ok(key: &[u8], domain: &[u8], body: &[u8], tag: &[u8]) -> bool {
    let mut m = HmacSha256::new_from_slice(key).expect("hmac takes any key length");
    m.update(domain);
    m.update(body);
    m.verify_slice(tag).is_ok()
}

const TOKEN_DOMAIN: &[u8] = b"caf-user-token\0";
const LINK_MAC_DOMAIN: &[u8] = b"caf-proxy-mac\0";
const LINK_KEY_DOMAIN: &[u8] = b"caf-proxy-key\0";

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AuthError> {
        if self.0.len() < n {
            return Err(AuthError::Malformed("truncated"));
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Ok(h)
    }

    fn u16(&mut self) -> Result<u16, AuthError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, AuthError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, AuthError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, AuthError> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        core::str::from_utf8(bytes)
            .map(String::from)
            .map_err(|_| AuthError::Malformed("not UTF-8"))
    }

    fn mac(&mut self) -> Result<[u8; 32], AuthError> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    fn finish(self) -> Result<(), AuthError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(AuthError::Malformed("trailing bytes"))
        }
    }
}

/// A user ticket: `principal | issued_at | expires_at | mac`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserToken {
    pub principal: String,
    pub issued_at: SimTime,
    pub expires_at: SimTime,
    pub mac: [u8; 32],
}

impl UserToken {
    fn body(principal: &str, issued_at: SimTime, expires_at: SimTime) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + principal.len() + 16);
        put_str(&mut out, principal);
        out.extend_from_slice(&issued_at.as_millis().to_le_bytes());
        out.extend_from_slice(&expires_at.as_millis().to_le_bytes());
        out
    }

    /// Fixed-order binary form; [`UserToken::encode`] base64s this.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Self::body(&self.principal, self.issued_at, self.expires_at);
        out.extend_from_slice(&self.mac);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AuthError> {
        let mut r = Reader(bytes);
        let principal = r.str()?;
        let issued_at = SimTime(r.u64()?);
        let expires_at = SimTime(r.u64()?);
        let mac = r.mac()?;
        r.finish()?;
        Ok(UserToken { principal, issued_at, expires_at, mac })
    }

    pub fn encode(&self) -> String {
        B64.encode(self.to_bytes())
    }

    pub fn decode(text: &str) -> Result<Self, AuthError> {
        let bytes = B64
            .decode(text.trim())
            .map_err(|_| AuthError::Malformed("token is not base64"))?;
        Self::from_bytes(&bytes)
    }
}

/// Principals look like `name@REALM`.
pub fn valid_principal(p: &str) -> bool {
    matches!(p.split_once('@'), Some((name, realm)) if !name.is_empty() && !realm.is_empty() && !realm.contains('@'))
}

pub fn issue_token(
    principal: &str,
    issued_at: SimTime,
    ttl_ms: u64,
    key: &RealmKey,
) -> Result<UserToken, AuthError> {
    if ttl_ms == 0 {
        return Err(AuthError::InvalidTtl);
    }
    if !valid_principal(principal) || principal.len() > u16::MAX as usize {
        return Err(AuthError::Malformed("principal must be name@REALM"));
    }
    let expires_at = issued_at.plus_millis(ttl_ms);
    let body = UserToken::body(principal, issued_at, expires_at);
    Ok(UserToken {
        principal: principal.into(),
        issued_at,
        expires_at,
        mac: mac(&key.0, TOKEN_DOMAIN, &body),
    })
}

/// The principal, if the MAC verifies and `now < expires_at`.
pub fn verify_token(token: &UserToken, now: SimTime, key: &RealmKey) -> Result<String, AuthError> {
    let body = UserToken::body(&token.principal, token.issued_at, token.expires_at);
    if !mac_ok(&key.0, TOKEN_DOMAIN, &body, &token.mac) {
        return Err(AuthError::BadSignature);
    }
    if token.expires_at <= token.issued_at {
        return Err(AuthError::Malformed("expiry precedes issue"));
    }
    if now >= token.expires_at {
        return Err(AuthError::TokenExpired);
    }
    Ok(token.principal.clone())
}

/// Decode then verify a base64 token.
pub fn verify_encoded_token(text: &str, now: SimTime, key: &RealmKey) -> Result<String, AuthError> {
    verify_token(&UserToken::decode(text)?, now, key)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProxyLink {
    pub subject: String,
    pub issuer: String,
    pub not_after: SimTime,
    /// How many further delegations this link may sign.
    pub depth_allowed: u32,
    pub mac: [u8; 32],
}

impl ProxyLink {
    fn body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_str(&mut out, &self.subject);
        put_str(&mut out, &self.issuer);
        out.extend_from_slice(&self.not_after.as_millis().to_le_bytes());
        out.extend_from_slice(&self.depth_allowed.to_le_bytes());
        out
    }

    fn signed(subject: String, issuer: String, not_after: SimTime, depth_allowed: u32, issuer_key: &[u8]) -> (Self, [u8; 32]) {
        let mut link = ProxyLink { subject, issuer, not_after, depth_allowed, mac: [0; 32] };
        let body = link.body();
        link.mac = mac(issuer_key, LINK_MAC_DOMAIN, &body);
        let key = mac(issuer_key, LINK_KEY_DOMAIN, &body);
        (link, key)
    }
}

/// A delegated credential: the public chain (leaf first) plus the leaf's
/// signing key, which never leaves its holder.
#[derive(Clone, PartialEq, Eq)]
pub struct GridProxy {
    pub chain: Vec<ProxyLink>,
    leaf_key: [u8; 32],
}

impl core::fmt::Debug for GridProxy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("GridProxy").field("chain", &self.chain).finish_non_exhaustive()
    }
}

impl GridProxy {
    pub fn leaf(&self) -> &ProxyLink {
        &self.chain[0]
    }

    pub fn root(&self) -> &ProxyLink {
        self.chain.last().expect("chains are never empty")
    }

    pub fn not_after(&self) -> SimTime {
        self.leaf().not_after
    }

    /// Serialized chain: `count u16`, then per link `subject`, `issuer`
    /// (u16-length-prefixed UTF-8), `not_after u64`, `depth u32`, `mac[32]`.
    pub fn chain_bytes(&self) -> Vec<u8> {
        encode_chain(&self.chain)
    }
}

pub fn encode_chain(chain: &[ProxyLink]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(chain.len() as u16).to_le_bytes());
    for l in chain {
        out.extend_from_slice(&l.body());
        out.extend_from_slice(&l.mac);
    }
    out
}

pub fn decode_chain(bytes: &[u8]) -> Result<Vec<ProxyLink>, AuthError> {
    let mut r = Reader(bytes);
    let n = r.u16()?;
    let mut chain = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let subject = r.str()?;
        let issuer = r.str()?;
        let not_after = SimTime(r.u64()?);
        let depth_allowed = r.u32()?;
        let mac = r.mac()?;
        chain.push(ProxyLink { subject, issuer, not_after, depth_allowed, mac });
    }
    r.finish()?;
    Ok(chain)
}

/// The grid's trust anchor: issues end-entity credentials.
#[derive(Clone)]
pub struct CertificateAuthority {
    pub name: String,
    key: [u8; 32],
}

impl CertificateAuthority {
    pub fn new(name: impl Into<String>, key: [u8; 32]) -> Self {
        CertificateAuthority { name: name.into(), key }
    }

    pub fn anchors(&self) -> TrustAnchors {
        let mut t = TrustAnchors::default();
        t.add(self);
        t
    }

    /// End-entity credential for `subject`, valid until `not_after`, able
    /// to sign `depth` further delegations.
    pub fn issue(&self, subject: &str, not_after: SimTime, depth: u32) -> GridProxy {
        let (link, leaf_key) =
            ProxyLink::signed(subject.into(), self.name.clone(), not_after, depth, &self.key);
        GridProxy { chain: alloc::vec![link], leaf_key }
    }
}

#[derive(Clone, Default)]
pub struct TrustAnchors {
    keys: BTreeMap<String, [u8; 32]>,
}

impl TrustAnchors {
    pub fn add(&mut self, ca: &CertificateAuthority) {
        self.keys.insert(ca.name.clone(), ca.key);
    }
}

/// Delegate a child proxy. The child expires no later than its parent and
/// may sign one fewer delegation.
pub fn delegate_proxy(parent: &GridProxy, now: SimTime, ttl_ms: u64) -> Result<GridProxy, AuthError> {
    if ttl_ms == 0 {
        return Err(AuthError::InvalidTtl);
    }
    let p = parent.leaf();
    if now >= p.not_after {
        return Err(AuthError::ProxyExpired);
    }
    if p.depth_allowed == 0 {
        return Err(AuthError::DepthExceeded);
    }
    let not_after = p.not_after.min(now.plus_millis(ttl_ms));
    let subject = alloc::format!("{}/CN=proxy", p.subject);
    let (link, leaf_key) =
        ProxyLink::signed(subject, p.subject.clone(), not_after, p.depth_allowed - 1, &parent.leaf_key);
    let mut chain = Vec::with_capacity(parent.chain.len() + 1);
    chain.push(link);
    chain.extend(parent.chain.iter().cloned());
    Ok(GridProxy { chain, leaf_key })
}

/// Verify a chain (leaf first) at `now`; returns the end-entity subject the
/// chain speaks for.
pub fn verify_proxy(chain: &[ProxyLink], now: SimTime, anchors: &TrustAnchors) -> Result<String, AuthError> {
    let root = chain.last().ok_or(AuthError::BrokenChain)?;
    for pair in chain.windows(2) {
        let (child, parent) = (&pair[0], &pair[1]);
        if child.issuer != parent.subject {
            return Err(AuthError::BrokenChain);
        }
    }
    let mut key = *anchors.keys.get(&root.issuer).ok_or(AuthError::BrokenChain)?;
    for link in chain.iter().rev() {
        let body = link.body();
        if !mac_ok(&key, LINK_MAC_DOMAIN, &body, &link.mac) {
            return Err(AuthError::BadSignature);
        }
        key = mac(&key, LINK_KEY_DOMAIN, &body);
    }
    for pair in chain.windows(2) {
        let (child, parent) = (&pair[0], &pair[1]);
        if parent.depth_allowed == 0 || child.depth_allowed != parent.depth_allowed - 1 {
            return Err(AuthError::DepthExceeded);
        }
        if child.not_after > parent.not_after {
            return Err(AuthError::BrokenChain);
        }
    }
    if chain.iter().any(|l| now >= l.not_after) {
        return Err(AuthError::ProxyExpired);
    }
    Ok(root.subject.clone())
}

/// Principal → grid subject. Injective by construction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct IdentityMap {
    entries: BTreeMap<String, String>,
}

impl IdentityMap {
    pub fn from_pairs<I, P, S>(pairs: I) -> Result<Self, AuthError>
    where
        I: IntoIterator<Item = (P, S)>,
        P: Into<String>,
        S: Into<String>,
    {
        let mut entries = BTreeMap::new();
        let mut subjects = alloc::collections::BTreeSet::new();
        for (p, s) in pairs {
            let s: String = s.into();
            if !subjects.insert(s.clone()) {
                return Err(AuthError::NonInjectiveMap(s));
            }
            entries.insert(p.into(), s);
        }
        Ok(IdentityMap { entries })
    }

    pub fn map_identity(&self, principal: &str) -> Result<&str, AuthError> {
        self.entries
            .get(principal)
            .map(String::as_str)
            .ok_or_else(|| AuthError::UnmappedPrincipal(principal.into()))
    }

    pub fn principals(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(p, s)| (p.as_str(), s.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<'de> Deserialize<'de> for IdentityMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = BTreeMap::<String, String>::deserialize(d)?;
        IdentityMap::from_pairs(raw).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEY: RealmKey = RealmKey([7; 32]);

    fn ca() -> CertificateAuthority {
        CertificateAuthority::new("/DC=org/DC=cdf/CN=CDF CA", [9; 32])
    }

    #[test]
    fn token_roundtrip_and_expiry() {
        let t0 = SimTime::from_secs(1000);
        let tok = issue_token("alice@CDF", t0, 3_600_000, &KEY).unwrap();
        assert_eq!(verify_token(&tok, t0.plus_secs(10), &KEY).unwrap(), "alice@CDF");
        assert_eq!(verify_token(&tok, tok.expires_at, &KEY), Err(AuthError::TokenExpired));
        let mut bad = tok.clone();
        bad.mac[5] ^= 1;
        assert_eq!(verify_token(&bad, t0, &KEY), Err(AuthError::BadSignature));
        assert_eq!(issue_token("alice@CDF", t0, 0, &KEY), Err(AuthError::InvalidTtl));
        assert!(issue_token("alice", t0, 1, &KEY).is_err());
    }

    #[test]
    fn token_encoding_roundtrips() {
        let tok = issue_token("bob@CDF", SimTime(5), 100, &KEY).unwrap();
        let text = tok.encode();
        assert_eq!(UserToken::decode(&text).unwrap(), tok);
        assert_eq!(verify_encoded_token(&text, SimTime(6), &KEY).unwrap(), "bob@CDF");
        assert!(UserToken::decode("not base64!").is_err());
    }

    #[test]
    fn wrong_realm_key_fails() {
        let tok = issue_token("bob@CDF", SimTime(5), 100, &KEY).unwrap();
        assert_eq!(verify_token(&tok, SimTime(6), &RealmKey([8; 32])), Err(AuthError::BadSignature));
    }

    #[test]
    fn delegation_depth() {
        let root = ca().issue("/DC=org/DC=cdf/CN=alice", SimTime::from_secs(10_000), 2);
        let now = SimTime::from_secs(1);
        let a = delegate_proxy(&root, now, 3_600_000).unwrap();
        let b = delegate_proxy(&a, now, 3_600_000).unwrap();
        assert_eq!(verify_proxy(&b.chain, now, &ca().anchors()).unwrap(), "/DC=org/DC=cdf/CN=alice");
        assert_eq!(delegate_proxy(&b, now, 1000).unwrap_err(), AuthError::DepthExceeded);
    }

    #[test]
    fn child_expires_with_parent() {
        let root = ca().issue("/CN=a", SimTime::from_secs(100), 1);
        let child = delegate_proxy(&root, SimTime::from_secs(50), 1_000_000).unwrap();
        assert_eq!(child.not_after(), SimTime::from_secs(100));
        let anchors = ca().anchors();
        assert!(verify_proxy(&child.chain, SimTime::from_secs(99), &anchors).is_ok());
        assert_eq!(verify_proxy(&child.chain, SimTime::from_secs(100), &anchors), Err(AuthError::ProxyExpired));
    }

    #[test]
    fn reordered_chain_is_broken() {
        let root = ca().issue("/CN=a", SimTime::from_secs(100), 3);
        let a = delegate_proxy(&root, SimTime(0), 50_000).unwrap();
        let b = delegate_proxy(&a, SimTime(0), 40_000).unwrap();
        let mut chain = b.chain.clone();
        chain.swap(0, 1);
        assert_eq!(verify_proxy(&chain, SimTime(1), &ca().anchors()), Err(AuthError::BrokenChain));
        assert_eq!(verify_proxy(&[], SimTime(1), &ca().anchors()), Err(AuthError::BrokenChain));
    }

    #[test]
    fn unknown_anchor_is_broken() {
        let root = ca().issue("/CN=a", SimTime::from_secs(100), 0);
        let other = CertificateAuthority::new("/CN=Other", [1; 32]);
        assert_eq!(verify_proxy(&root.chain, SimTime(0), &other.anchors()), Err(AuthError::BrokenChain));
    }

    #[test]
    fn forged_link_fails_signature() {
        // A holder cannot mint a sibling link without the issuer key.
        let root = ca().issue("/CN=a", SimTime::from_secs(100), 1);
        let mut child = delegate_proxy(&root, SimTime(0), 10_000).unwrap();
        child.chain[0].not_after = SimTime::from_secs(99);
        assert_eq!(verify_proxy(&child.chain, SimTime(0), &ca().anchors()), Err(AuthError::BadSignature));
    }

    #[test]
    fn chain_bytes_roundtrip() {
        let root = ca().issue("/CN=a", SimTime::from_secs(100), 2);
        let p = delegate_proxy(&root, SimTime(0), 10_000).unwrap();
        assert_eq!(decode_chain(&p.chain_bytes()).unwrap(), p.chain);
    }

    #[test]
    fn identity_map() {
        let m = IdentityMap::from_pairs([("alice@CDF", "/DC=org/DC=cdf/CN=alice")]).unwrap();
        assert_eq!(m.map_identity("alice@CDF").unwrap(), "/DC=org/DC=cdf/CN=alice");
        assert_eq!(m.map_identity("eve@CDF"), Err(AuthError::UnmappedPrincipal("eve@CDF".into())));
        let dup = IdentityMap::from_pairs([("a@X", "/CN=s"), ("b@X", "/CN=s")]);
        assert_eq!(dup, Err(AuthError::NonInjectiveMap("/CN=s".into())));
        let json = r#"{"a@X":"/CN=s","b@X":"/CN=s"}"#;
        assert!(serde_json::from_str::<IdentityMap>(json).is_err());
    }
}
