//! Mock apps and the endpoints they talk to.
//!
//! App state only changes through [`World::apply`], which consumes the
//! kernel's [`ExecutionPermit`]; there is no other mutation path for agents.

use std::collections::BTreeMap;

use aura_core::cognition::CellId;
use aura_core::exec::CriticalNodeCategory;
use aura_core::kernel::ExecutionPermit;
use aura_core::platform::Digest;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    #[serde(default)]
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

/// Named collections: messages, memos, posts, comments, bookings, ...
pub type AppState = BTreeMap<String, Vec<Item>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockApp {
    pub name: String,
    pub display_name: String,
    pub bundle_fingerprint: Digest,
    /// Backend host the app's egress goes to unless a call names another.
    pub host: Option<String>,
    pub state: AppState,
}

/// How an API call changes app state. Calls not listed are reads.
struct Effect {
    api: &'static str,
    collection: &'static str,
    /// Parameter whose value becomes the item id.
    id_param: Option<&'static str>,
    /// Parameter whose value becomes the item text; all params otherwise.
    text_param: Option<&'static str>,
    /// Replace an existing item with the same id.
    upsert: bool,
}

const EFFECTS: &[Effect] = &[
    Effect { api: "send_message", collection: "messages", id_param: Some("to"), text_param: Some("body"), upsert: false },
    Effect { api: "send_mail", collection: "outbox", id_param: Some("to"), text_param: Some("body"), upsert: false },
    Effect { api: "post_comment", collection: "comments", id_param: Some("post"), text_param: Some("text"), upsert: false },
    Effect { api: "book_ticket", collection: "bookings", id_param: Some("train"), text_param: None, upsert: false },
    Effect { api: "pay", collection: "payments", id_param: Some("payee"), text_param: Some("amount"), upsert: false },
    Effect { api: "transfer_funds", collection: "payments", id_param: Some("payee"), text_param: Some("amount"), upsert: false },
    Effect { api: "purchase", collection: "payments", id_param: Some("item"), text_param: None, upsert: false },
    Effect { api: "set_alarm", collection: "alarms", id_param: Some("time"), text_param: Some("label"), upsert: false },
    Effect { api: "write_note", collection: "memos", id_param: Some("id"), text_param: Some("text"), upsert: true },
    Effect { api: "create_event", collection: "events", id_param: Some("when"), text_param: Some("title"), upsert: false },
    Effect { api: "save_file", collection: "files", id_param: Some("name"), text_param: Some("content"), upsert: true },
    Effect { api: "open_url", collection: "visits", id_param: None, text_param: Some("url"), upsert: false },
    Effect { api: "install_package", collection: "packages", id_param: Some("package"), text_param: None, upsert: true },
    Effect { api: "modify_settings", collection: "settings", id_param: Some("key"), text_param: Some("value"), upsert: true },
];

pub fn is_effect(api: &str) -> bool {
    EFFECTS.iter().any(|e| e.api == api)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorldError {
    #[error("unknown app {0}")]
    UnknownApp(String),
    #[error("{0} is not a state-changing api")]
    NotAnEffect(String),
    #[error("{api} on {app}: missing parameter {param}")]
    MissingParam { app: String, api: String, param: String },
    #[error("egress from {0} with no destination host")]
    NoHost(String),
}

/// One state change, with the kernel decision that authorized it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectRecord {
    pub seq: u64,
    pub app: String,
    pub api: String,
    pub record_id: u64,
    pub category: Option<CriticalNodeCategory>,
    pub param_cells: BTreeMap<String, CellId>,
    pub host: Option<String>,
}

/// Bytes delivered to a mock endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub host: String,
    pub from_app: String,
    pub payload: String,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub apps: BTreeMap<String, MockApp>,
    pub effects: Vec<EffectRecord>,
    pub deliveries: Vec<Delivery>,
    /// Data captured by adversary-controlled code outside any app.
    pub loot: Vec<String>,
}

#[derive(Debug, Default)]
pub struct World {
    inner: Mutex<WorldSnapshot>,
}

fn param_text(params: &BTreeMap<String, String>) -> String {
    params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("&")
}

impl World {
    pub fn new(apps: impl IntoIterator<Item = MockApp>) -> Self {
        Self {
            inner: Mutex::new(WorldSnapshot {
                apps: apps.into_iter().map(|a| (a.name.clone(), a)).collect(),
                ..WorldSnapshot::default()
            }),
        }
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        self.inner.lock().clone()
    }

    pub fn app(&self, name: &str) -> Option<MockApp> {
        self.inner.lock().apps.get(name).cloned()
    }

    /// Benign read of an app's own data. Needs a permit like any call.
    pub fn read(&self, app: &str, permit: &ExecutionPermit, collection: &str, id: Option<&str>) -> Result<String, WorldError> {
        let w = self.inner.lock();
        let a = w.apps.get(app).ok_or_else(|| WorldError::UnknownApp(app.into()))?;
        debug_assert!(permit.category().is_none() || !is_effect(permit.api()));
        let items = a.state.get(collection).map(Vec::as_slice).unwrap_or(&[]);
        Ok(items
            .iter()
            .filter(|i| id.is_none_or(|id| i.id == id))
            .map(|i| i.text.clone())
            .collect::<Vec<_>>()
            .join("\n"))
    }

    /// Performs the state change a permit authorizes. The permit is consumed.
    pub fn apply(&self, app: &str, permit: ExecutionPermit) -> Result<EffectRecord, WorldError> {
        let effect = EFFECTS
            .iter()
            .find(|e| e.api == permit.api())
            .ok_or_else(|| WorldError::NotAnEffect(permit.api().into()))?;
        let get = |p: &str| {
            permit.params().get(p).cloned().ok_or_else(|| WorldError::MissingParam {
                app: app.into(),
                api: permit.api().into(),
                param: p.into(),
            })
        };
        let id = effect.id_param.map(get).transpose()?.unwrap_or_default();
        let text = match effect.text_param {
            Some(p) => get(p)?,
            None => param_text(permit.params()),
        };
        let mut w = self.inner.lock();
        let seq = w.effects.len() as u64 + 1;
        let a = w.apps.get_mut(app).ok_or_else(|| WorldError::UnknownApp(app.into()))?;
        let host = permit.host().map(str::to_string).or_else(|| a.host.clone());
        let egress = permit.category() == Some(CriticalNodeCategory::NetworkEgress);
        if egress && host.is_none() {
            return Err(WorldError::NoHost(app.into()));
        }
        let coll = a.state.entry(effect.collection.to_string()).or_default();
        let item = Item { id, text, tags: Vec::new() };
        match coll.iter_mut().find(|i| effect.upsert && i.id == item.id) {
            Some(existing) => *existing = item,
            None => coll.push(item),
        }
        if egress {
            w.deliveries.push(Delivery {
                host: host.clone().unwrap_or_default(),
                from_app: app.into(),
                payload: param_text(permit.params()),
            });
        }
        let rec = EffectRecord {
            seq,
            app: app.into(),
            api: permit.api().into(),
            record_id: permit.record_id(),
            category: permit.category(),
            param_cells: permit.param_cells().clone(),
            host,
        };
        w.effects.push(rec.clone());
        Ok(rec)
    }

    /// Out-of-band adversary write (a malicious sender, a poisoned page).
    pub fn plant(&self, app: &str, collection: &str, item: Item) -> Result<(), WorldError> {
        let mut w = self.inner.lock();
        let a = w.apps.get_mut(app).ok_or_else(|| WorldError::UnknownApp(app.into()))?;
        a.state.entry(collection.to_string()).or_default().push(item);
        Ok(())
    }

    /// Item lookup for app-internal checks (e.g. guardrails reading post tags).
    pub fn item(&self, app: &str, collection: &str, id: &str) -> Option<Item> {
        self.inner
            .lock()
            .apps
            .get(app)?
            .state
            .get(collection)?
            .iter()
            .find(|i| i.id == id)
            .cloned()
    }

    pub fn capture(&self, data: &str) {
        self.inner.lock().loot.push(data.to_string());
    }
}
