//! Session registry: routes commands to sessions, persists their events and
//! restores them after a restart.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use dualrl::ppo::Policy;

use crate::error::{ServiceError, ServiceResult};
use crate::events::EventKind;
use crate::protocol::{Group, Order, Phase, ProtocolConfig};
use crate::session::{AnswerReceipt, NextOutcome, Session, SessionExport};
use crate::store::EventStore;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Clock advanced by hand, for tests and offline replays.
#[derive(Debug)]
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Mutex::new(start))
    }

    pub fn advance_ms(&self, ms: i64) {
        *self.0.lock().expect("clock lock") += chrono::Duration::milliseconds(ms);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock lock")
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub protocol: ProtocolConfig,
    /// Frozen regulation policy for the RL group.
    pub policy: Option<Arc<Policy>>,
    /// Base for per-session seeds when a request does not supply one.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub participant: String,
    pub group: Group,
    /// Defaults to alternating orders in creation sequence.
    #[serde(default)]
    pub order: Option<Order>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub participant: String,
    pub group: Group,
    pub order: Order,
    pub seed: u64,
    pub phase: Phase,
}

impl SessionInfo {
    fn of(s: &Session) -> Self {
        Self {
            session_id: s.id.clone(),
            participant: s.participant.clone(),
            group: s.group,
            order: s.order,
            seed: s.seed,
            phase: s.phase,
        }
    }
}

pub struct Service {
    cfg: ServiceConfig,
    store: Arc<dyn EventStore>,
    clock: Arc<dyn Clock>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    created: Mutex<u64>,
}

impl Service {
    /// Loads every stored session; unfinished ones are marked as resumed.
    pub fn open(cfg: ServiceConfig, store: Arc<dyn EventStore>, clock: Arc<dyn Clock>) -> ServiceResult<Self> {
        let mut sessions = BTreeMap::new();
        let mut created = 0;
        for (id, events) in store.load_all()? {
            let mut s = Session::replay(&id, &events, cfg.protocol, cfg.policy.clone())?;
            if s.phase != Phase::Done {
                let ev = s.mark_resumed(clock.now())?;
                store.append(&id, &ev)?;
            }
            if let Some(n) = id.strip_prefix("s-").and_then(|n| n.parse::<u64>().ok()) {
                created = created.max(n);
            }
            sessions.insert(id, Arc::new(Mutex::new(s)));
        }
        Ok(Self { cfg, store, clock, sessions: RwLock::new(sessions), created: Mutex::new(created) })
    }

    pub fn protocol(&self) -> ProtocolConfig {
        self.cfg.protocol
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().expect("registry lock").keys().cloned().collect()
    }

    pub fn create(&self, req: CreateSession) -> ServiceResult<SessionInfo> {
        let mut created = self.created.lock().expect("counter lock");
        let mut registry = self.sessions.write().expect("registry lock");
        for s in registry.values() {
            if s.lock().expect("session lock").participant == req.participant {
                return Err(ServiceError::Conflict(format!("participant {} already has a session", req.participant)));
            }
        }
        let n = *created + 1;
        let id = format!("s-{n:06}");
        let order = req.order.unwrap_or(if n % 2 == 1 { Order::ControlFirst } else { Order::FeedbackFirst });
        let seed = req.seed.unwrap_or_else(|| self.cfg.seed.wrapping_add(n));
        let (s, events) = Session::create(&id, &req.participant, req.group, order, seed, self.cfg.protocol, self.cfg.policy.clone(), self.clock.now())?;
        self.store.append(&id, &events)?;
        *created = n;
        let info = SessionInfo::of(&s);
        registry.insert(id, Arc::new(Mutex::new(s)));
        Ok(info)
    }

    fn session(&self, id: &str) -> ServiceResult<Arc<Mutex<Session>>> {
        self.sessions.read().expect("registry lock").get(id).cloned().ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    /// Runs a command and persists what it emitted; on a storage failure the
    /// session is rebuilt from what was durably stored before the command.
    fn command<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session, DateTime<Utc>) -> ServiceResult<(T, Vec<crate::events::Event>)>,
    ) -> ServiceResult<T> {
        let handle = self.session(id)?;
        let mut s = handle.lock().expect("session lock");
        let before = s.events().len();
        let (value, events) = f(&mut s, self.clock.now())?;
        if events.is_empty() {
            return Ok(value);
        }
        if let Err(e) = self.store.append(id, &events) {
            let kept = s.events()[..before].to_vec();
            *s = Session::replay(id, &kept, self.cfg.protocol, self.cfg.policy.clone())?;
            return Err(e);
        }
        Ok(value)
    }

    pub fn info(&self, id: &str) -> ServiceResult<SessionInfo> {
        let handle = self.session(id)?;
        let s = handle.lock().expect("session lock");
        Ok(SessionInfo::of(&s))
    }

    pub fn next(&self, id: &str) -> ServiceResult<NextOutcome> {
        self.command(id, |s, now| s.next_trial(now))
    }

    pub fn answer(&self, id: &str, answer: bool, rt_ms: u64) -> ServiceResult<AnswerReceipt> {
        self.command(id, |s, now| s.submit_answer(answer, rt_ms, now))
    }

    pub fn extend_practice(&self, id: &str, extra: Option<usize>) -> ServiceResult<usize> {
        self.command(id, |s, now| s.extend_practice(extra, now))
    }

    pub fn questionnaire(&self, id: &str, attention: u8, anxiety: u8) -> ServiceResult<Phase> {
        self.command(id, |s, now| s.submit_questionnaire(attention, anxiety, now))
    }

    pub fn export(&self, id: &str) -> ServiceResult<SessionExport> {
        let handle = self.session(id)?;
        let s = handle.lock().expect("session lock");
        Ok(s.export())
    }

    /// Whether a session's logged RL decisions match a fresh replay of its events.
    pub fn audit(&self, id: &str) -> ServiceResult<Vec<usize>> {
        let handle = self.session(id)?;
        let s = handle.lock().expect("session lock");
        Session::replay_mismatches(s.events(), self.cfg.protocol, self.cfg.policy.clone())
    }

    /// Number of trials served so far in each session.
    pub fn served_counts(&self) -> Vec<(String, usize)> {
        let registry = self.sessions.read().expect("registry lock");
        registry
            .iter()
            .map(|(id, s)| {
                let s = s.lock().expect("session lock");
                let n = s.events().iter().filter(|e| matches!(e.kind, EventKind::TrialServed { .. })).count();
                (id.clone(), n)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::MemoryStore;

    fn service() -> Service {
        let cfg = ServiceConfig { protocol: ProtocolConfig::default().without_rests(), policy: None, seed: 7 };
        let clock = Arc::new(ManualClock::new(DateTime::from_timestamp(1_700_000_000, 0).unwrap()));
        Service::open(cfg, Arc::new(MemoryStore::new()), clock).unwrap()
    }

    fn create(svc: &Service, who: &str) -> ServiceResult<SessionInfo> {
        svc.create(CreateSession { participant: who.into(), group: Group::Random, order: None, seed: None })
    }

    #[test]
    fn ids_are_sequential_and_orders_alternate() {
        let svc = service();
        let a = create(&svc, "p1").unwrap();
        let b = create(&svc, "p2").unwrap();
        assert_eq!((a.session_id.as_str(), b.session_id.as_str()), ("s-000001", "s-000002"));
        assert_eq!((a.order, b.order), (Order::ControlFirst, Order::FeedbackFirst));
    }

    #[test]
    fn duplicate_participant_conflicts() {
        let svc = service();
        create(&svc, "p1").unwrap();
        assert!(matches!(create(&svc, "p1"), Err(ServiceError::Conflict(_))));
    }

    #[test]
    fn rl_group_without_policy_is_rejected() {
        let svc = service();
        let r = svc.create(CreateSession { participant: "p".into(), group: Group::Rl, order: None, seed: None });
        assert!(matches!(r, Err(ServiceError::Validation(_))));
    }

    #[test]
    fn unknown_session_is_not_found() {
        assert!(matches!(service().next("s-999999"), Err(ServiceError::NotFound(_))));
    }
}
