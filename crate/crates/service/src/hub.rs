//! Publish-only feed from a trainer to spectators, with metric history for
//! late joiners.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use steer_core::render::Observation;
use steer_core::rl::{EpochMetrics, RlObserver, TickEvents};
use steer_core::safety::Control;
use tokio::sync::broadcast;

use crate::protocol::{frame_msg, ServerMsg};

struct Shared {
    history: Vec<ServerMsg>,
    limit: usize,
}

#[derive(Clone)]
pub struct Hub {
    tx: broadcast::Sender<ServerMsg>,
    shared: Arc<Mutex<Shared>>,
}

impl Hub {
    /// `capacity` bounds each spectator's backlog; slower spectators skip
    /// messages rather than stall the publisher.
    pub fn new(capacity: usize, history_limit: usize) -> Self {
        let (tx, _) = broadcast::channel(capacity.max(1));
        Hub {
            tx,
            shared: Arc::new(Mutex::new(Shared {
                history: Vec::new(),
                limit: history_limit,
            })),
        }
    }

    /// Metrics and takeover messages are kept for replay; frames are not.
    pub fn publish(&self, msg: ServerMsg) {
        let mut shared = self.shared.lock().expect("hub lock");
        if !matches!(msg, ServerMsg::Frame { .. }) && shared.history.len() < shared.limit {
            shared.history.push(msg.clone());
        }
        let _ = self.tx.send(msg);
    }

    /// History so far plus a receiver for everything published afterwards.
    pub fn attach(&self) -> (Vec<ServerMsg>, broadcast::Receiver<ServerMsg>) {
        let shared = self.shared.lock().expect("hub lock");
        (shared.history.clone(), self.tx.subscribe())
    }

    pub fn spectators(&self) -> usize {
        self.tx.receiver_count()
    }

    pub fn publisher(&self) -> Publisher {
        Publisher { hub: self.clone() }
    }

    /// Publishes each record appended to a metrics file, polling every
    /// `period`. Runs until the task is dropped.
    pub async fn follow_metrics(self, path: PathBuf, period: Duration) {
        let mut seen = 0usize;
        let mut interval = tokio::time::interval(period);
        loop {
            interval.tick().await;
            let Ok(text) = tokio::fs::read_to_string(&path).await else {
                continue;
            };
            let complete = match text.rfind('\n') {
                Some(i) => &text[..=i],
                None => continue,
            };
            let lines: Vec<&str> = complete.lines().filter(|l| !l.trim().is_empty()).collect();
            if lines.len() < seen {
                seen = 0;
            }
            for line in &lines[seen..] {
                if let Ok(m) = serde_json::from_str::<EpochMetrics>(line) {
                    self.publish(ServerMsg::Metrics(m));
                }
            }
            seen = lines.len();
        }
    }
}

/// Trainer-side handle. It only sends; spectators cannot reach trainer state.
pub struct Publisher {
    hub: Hub,
}

impl RlObserver for Publisher {
    fn on_tick(&mut self, tick: u64, obs: &Observation, _control: Control, _events: &TickEvents) {
        if self.hub.spectators() > 0 {
            self.hub.publish(frame_msg(tick, obs));
        }
    }

    fn on_takeover(&mut self, tick: u64, on: bool) {
        self.hub.publish(ServerMsg::Takeover { tick, on });
    }

    fn on_epoch(&mut self, metrics: &EpochMetrics) {
        self.hub.publish(ServerMsg::Metrics(metrics.clone()));
    }
}
