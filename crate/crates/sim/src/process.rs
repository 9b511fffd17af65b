//! The OS process table: the only source of process identities.

use std::collections::BTreeMap;

use aura_core::platform::{Digest, ProcessIdentity};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessEntry {
    pub identity: ProcessIdentity,
    pub app: String,
    pub display_name: String,
    pub alive: bool,
}

#[derive(Debug)]
pub struct ProcessTable {
    inner: Mutex<(u32, BTreeMap<u32, ProcessEntry>)>,
}

impl Default for ProcessTable {
    fn default() -> Self {
        Self {
            inner: Mutex::new((1000, BTreeMap::new())),
        }
    }
}

impl ProcessTable {
    /// Launches an app. Each app gets its own Linux-style uid.
    pub fn spawn(&self, app: &str, display_name: &str, code_fingerprint: Digest) -> ProcessIdentity {
        let mut g = self.inner.lock();
        g.0 += 1;
        let pid = g.0;
        let uid = g
            .1
            .values()
            .find(|e| e.app == app)
            .map(|e| e.identity.uid)
            .unwrap_or(10_000 + g.1.len() as u32);
        let identity = ProcessIdentity::new(pid, uid, code_fingerprint);
        g.1.insert(
            pid,
            ProcessEntry {
                identity,
                app: app.into(),
                display_name: display_name.into(),
                alive: true,
            },
        );
        identity
    }

    pub fn kill(&self, pid: u32) -> bool {
        self.inner.lock().1.get_mut(&pid).map(|e| std::mem::replace(&mut e.alive, false)).unwrap_or(false)
    }

    pub fn get(&self, pid: u32) -> Option<ProcessEntry> {
        self.inner.lock().1.get(&pid).cloned()
    }

    /// Legacy launcher lookup by user-visible name: the most recently
    /// installed live match wins. This is what lets a look-alike app hijack
    /// an unauthenticated launch.
    pub fn resolve_display_name(&self, name: &str) -> Option<ProcessEntry> {
        self.inner
            .lock()
            .1
            .values()
            .rev()
            .find(|e| e.alive && e.display_name.eq_ignore_ascii_case(name))
            .cloned()
    }

    pub fn entries(&self) -> Vec<ProcessEntry> {
        self.inner.lock().1.values().cloned().collect()
    }
}
