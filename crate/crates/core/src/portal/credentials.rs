//! Grid-side credentials held by the portal: its own service credential,
//! one delegated proxy per site (renewed when within 20% of its lifetime),
//! and the end-entity credentials of mapped users.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::auth::{delegate_proxy, verify_proxy, AuthError, CertificateAuthority, GridProxy, IdentityMap, ProxyLink, TrustAnchors};
use crate::model::SiteId;
use crate::time::SimTime;

/// Delegation depth granted to the service and user credentials.
pub const CREDENTIAL_DEPTH: u32 = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SiteProxy {
    Current(Vec<ProxyLink>),
    Renewed { chain: Vec<ProxyLink>, not_after: SimTime },
}

impl SiteProxy {
    pub fn chain(&self) -> &[ProxyLink] {
        match self {
            SiteProxy::Current(c) | SiteProxy::Renewed { chain: c, .. } => c,
        }
    }
}

#[derive(Clone)]
pub struct GridCredentials {
    anchors: TrustAnchors,
    service: GridProxy,
    site_ttl_ms: u64,
    /// Delegated proxy and the time it was issued.
    sites: BTreeMap<SiteId, (GridProxy, SimTime)>,
    users: BTreeMap<String, GridProxy>,
}

impl core::fmt::Debug for GridCredentials {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("GridCredentials")
            .field("service", &self.service.leaf().subject)
            .field("sites", &self.sites.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl GridCredentials {
    pub fn new(anchors: TrustAnchors, service: GridProxy, site_ttl_ms: u64) -> Self {
        GridCredentials { anchors, service, site_ttl_ms, sites: BTreeMap::new(), users: BTreeMap::new() }
    }

    /// Simulation setup: one CA issues the portal credential and a
    /// credential for every mapped user subject, all valid until `not_after`.
    pub fn from_ca(ca: &CertificateAuthority, portal_name: &str, identity: &IdentityMap, not_after: SimTime, site_ttl_ms: u64) -> Self {
        let service = ca.issue(&format!("/DC=org/DC=cdf/CN=caf-portal/{portal_name}"), not_after, CREDENTIAL_DEPTH);
        let mut g = GridCredentials::new(ca.anchors(), service, site_ttl_ms);
        for (_, subject) in identity.principals() {
            g.users.insert(subject.into(), ca.issue(subject, not_after, CREDENTIAL_DEPTH));
        }
        g
    }

    pub fn anchors(&self) -> &TrustAnchors {
        &self.anchors
    }

    pub fn service(&self) -> &GridProxy {
        &self.service
    }

    pub fn set_service(&mut self, service: GridProxy) {
        self.service = service;
        self.sites.clear();
    }

    pub fn add_user(&mut self, subject: impl Into<String>, cred: GridProxy) {
        self.users.insert(subject.into(), cred);
    }

    /// The proxy to present at `site`, renewing it first when it is missing
    /// or within 20% of its lifetime. Fails when the result does not verify.
    pub fn site_proxy(&mut self, site: &SiteId, now: SimTime) -> Result<SiteProxy, AuthError> {
        let needs_renewal = match self.sites.get(site) {
            None => true,
            Some((p, issued)) => {
                let lifetime = p.not_after().millis_since(*issued);
                let remaining = p.not_after().millis_since(now);
                remaining.saturating_mul(5) < lifetime
            }
        };
        let mut renewed = false;
        if needs_renewal {
            match delegate_proxy(&self.service, now, self.site_ttl_ms) {
                Ok(p) => {
                    self.sites.insert(site.clone(), (p, now));
                    renewed = true;
                }
                // keep whatever we had; verification below reports it
                Err(e) if !self.sites.contains_key(site) => return Err(e),
                Err(_) => {}
            }
        }
        let (proxy, _) = &self.sites[site];
        verify_proxy(&proxy.chain, now, &self.anchors)?;
        Ok(if renewed {
            SiteProxy::Renewed { chain: proxy.chain.clone(), not_after: proxy.not_after() }
        } else {
            SiteProxy::Current(proxy.chain.clone())
        })
    }

    /// A verified per-dispatch proxy for the user `subject`.
    pub fn user_proxy(&self, subject: &str, now: SimTime) -> Result<Vec<ProxyLink>, AuthError> {
        let cred = self.users.get(subject).ok_or_else(|| AuthError::UnmappedPrincipal(subject.into()))?;
        let p = delegate_proxy(cred, now, self.site_ttl_ms)?;
        verify_proxy(&p.chain, now, &self.anchors)?;
        Ok(p.chain)
    }
}
