//! Static API-key authentication with three roles.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub name: String,
    pub role: Role,
}

impl Principal {
    pub fn is_admin(&self) -> bool {
        self.role == Role::Admin
    }

    /// Admins may act in every role.
    pub fn has(&self, role: Role) -> bool {
        self.role == role || self.role == Role::Admin
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyEntry {
    pub key: String,
    pub principal: String,
    pub role: Role,
}

/// Contents of the keys file: `{"keys": [{"key", "principal", "role"}, ...]}`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KeyFile {
    pub keys: Vec<KeyEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct ApiKeys {
    by_key: HashMap<String, Principal>,
}

impl ApiKeys {
    pub fn new(entries: impl IntoIterator<Item = KeyEntry>) -> Self {
        let by_key = entries
            .into_iter()
            .map(|e| (e.key, Principal { name: e.principal, role: e.role }))
            .collect();
        Self { by_key }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let file: KeyFile = serde_json::from_slice(&raw).map_err(|e| format!("invalid keys file {}: {e}", path.display()))?;
        if file.keys.is_empty() {
            return Err(format!("keys file {} defines no keys", path.display()));
        }
        Ok(Self::new(file.keys))
    }

    /// Fixed keys for local development: `dev-user`, `dev-agent`, `dev-admin`.
    pub fn development() -> Self {
        Self::new([
            KeyEntry { key: "dev-user".into(), principal: "dev-user".into(), role: Role::User },
            KeyEntry { key: "dev-agent".into(), principal: "dev-agent".into(), role: Role::Agent },
            KeyEntry { key: "dev-admin".into(), principal: "dev-admin".into(), role: Role::Admin },
        ])
    }

    /// Resolves an `Authorization` header value.
    pub fn authenticate(&self, header: Option<&str>) -> Option<Principal> {
        let token = header?.strip_prefix("Bearer ")?.trim();
        self.by_key.get(token).cloned()
    }
}
