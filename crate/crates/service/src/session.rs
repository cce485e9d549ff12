//! In-memory session store with idle eviction and optional JSON snapshots.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex as StdMutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use debias_core::engine::Analysis;
use debias_core::feedback::{FeedbackParse, OverlayResult};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

/// The feedback turn that produced a snapshot, echoed back to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedFeedback {
    pub text: String,
    pub mode: String,
    pub alpha: f64,
    pub parser: String,
    pub parse: FeedbackParse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub overlay: OverlayResult,
    pub feedback: Option<AppliedFeedback>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub analysis: Analysis,
    /// Mask policy spec used for every snapshot of this session.
    pub policy: String,
    /// Never empty; element 0 is the state before any feedback.
    stack: Vec<Snapshot>,
    pub revision: u64,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

impl Session {
    pub fn new(id: String, analysis: Analysis, policy: String) -> Self {
        let now = now_ms();
        let base = Snapshot {
            overlay: analysis.baseline.clone(),
            feedback: None,
        };
        Self {
            id,
            analysis,
            policy,
            stack: vec![base],
            revision: 0,
            created_at_ms: now,
            updated_at_ms: now,
        }
    }

    pub fn current(&self) -> &Snapshot {
        self.stack.last().expect("session stack is never empty")
    }

    /// Index of the current snapshot; 0 is the no-feedback state.
    pub fn depth(&self) -> usize {
        self.stack.len() - 1
    }

    pub fn push(&mut self, snapshot: Snapshot) {
        self.stack.push(snapshot);
        self.touch();
    }

    /// Pops the top snapshot. Returns false, leaving the session untouched,
    /// when only the initial state remains.
    pub fn undo(&mut self) -> bool {
        if self.stack.len() == 1 {
            return false;
        }
        self.stack.pop();
        self.touch();
        true
    }

    fn touch(&mut self) {
        self.revision += 1;
        self.updated_at_ms = now_ms();
    }
}

struct Entry {
    session: Arc<Mutex<Session>>,
    last_access: SystemTime,
}

pub struct SessionStore {
    entries: StdMutex<HashMap<String, Entry>>,
    ttl: Duration,
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        Self {
            entries: StdMutex::new(HashMap::new()),
            ttl,
        }
    }

    /// 128 random bits, hex encoded.
    pub fn fresh_id() -> String {
        let mut bytes = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut bytes);
        hex::encode(bytes)
    }

    pub fn insert(&self, session: Session) -> Arc<Mutex<Session>> {
        let id = session.id.clone();
        let shared = Arc::new(Mutex::new(session));
        let mut entries = self.entries.lock().expect("session map poisoned");
        self.evict_locked(&mut entries, SystemTime::now());
        entries.insert(
            id,
            Entry {
                session: Arc::clone(&shared),
                last_access: SystemTime::now(),
            },
        );
        shared
    }

    /// Looks up a live session and refreshes its idle timer.
    pub fn get(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        let now = SystemTime::now();
        let mut entries = self.entries.lock().expect("session map poisoned");
        self.evict_locked(&mut entries, now);
        entries.get_mut(id).map(|e| {
            e.last_access = now;
            Arc::clone(&e.session)
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("session map poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops sessions idle for longer than the TTL; returns how many.
    pub fn evict_expired(&self) -> usize {
        let mut entries = self.entries.lock().expect("session map poisoned");
        self.evict_locked(&mut entries, SystemTime::now())
    }

    fn evict_locked(&self, entries: &mut HashMap<String, Entry>, now: SystemTime) -> usize {
        let before = entries.len();
        entries.retain(|_, e| now.duration_since(e.last_access).unwrap_or_default() <= self.ttl);
        before - entries.len()
    }

    /// Writes every session to `path` as a JSON array, sorted by id.
    pub async fn save(&self, path: &Path) -> std::io::Result<usize> {
        let shared: Vec<_> = {
            let entries = self.entries.lock().expect("session map poisoned");
            entries.values().map(|e| Arc::clone(&e.session)).collect()
        };
        let mut sessions = Vec::with_capacity(shared.len());
        for s in shared {
            sessions.push(s.lock().await.clone());
        }
        sessions.sort_by(|a, b| a.id.cmp(&b.id));
        std::fs::write(path, serde_json::to_vec_pretty(&sessions)?)?;
        Ok(sessions.len())
    }

    /// Restores sessions written by [`SessionStore::save`]. Their idle
    /// timers restart now.
    pub fn load(&self, path: &Path) -> std::io::Result<usize> {
        let sessions: Vec<Session> = serde_json::from_slice(&std::fs::read(path)?)?;
        let n = sessions.len();
        for s in sessions {
            self.insert(s);
        }
        Ok(n)
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}
