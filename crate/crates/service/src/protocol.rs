//! Messages exchanged over the session WebSocket, one JSON object per text
//! frame.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use steer_core::render::{Observation, FRAME_CHANNELS};
use steer_core::rl::EpochMetrics;
use steer_core::world::Action;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Frame {
        tick: u64,
        w: usize,
        h: usize,
        /// Base64 of row-major interleaved RGB bytes.
        px: String,
    },
    Metrics(EpochMetrics),
    Takeover {
        tick: u64,
        on: bool,
    },
    Event(Event),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tick: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Event {
    pub fn new(kind: &str) -> Self {
        Event {
            kind: kind.into(),
            ..Event::default()
        }
    }

    pub fn at(mut self, tick: u64) -> Self {
        self.tick = Some(tick);
        self
    }

    pub fn message(mut self, m: impl Into<String>) -> Self {
        self.message = Some(m.into());
        self
    }
}

impl From<Event> for ServerMsg {
    fn from(e: Event) -> Self {
        ServerMsg::Event(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Key {
    Left,
    Right,
    None,
}

impl From<Key> for Action {
    fn from(k: Key) -> Action {
        match k {
            Key::Left => Action::Left,
            Key::Right => Action::Right,
            Key::None => Action::NoAction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    Action { tick: u64, key: Key },
    Label { tick: u64, value: i64 },
    Close,
}

/// Row-major RGB bytes of the newest frame in an observation.
pub fn newest_rgb(obs: &Observation) -> Vec<u8> {
    let p = obs.height * obs.width;
    let mut out = Vec::with_capacity(FRAME_CHANNELS * p);
    for i in 0..p {
        for ch in FRAME_CHANNELS..2 * FRAME_CHANNELS {
            out.push(obs.data[ch * p + i]);
        }
    }
    out
}

pub fn frame_msg(tick: u64, obs: &Observation) -> ServerMsg {
    ServerMsg::Frame {
        tick,
        w: obs.width,
        h: obs.height,
        px: STANDARD.encode(newest_rgb(obs)),
    }
}

/// Decodes a frame's payload, checking its length against `w` and `h`.
pub fn decode_px(px: &str, w: usize, h: usize) -> Option<Vec<u8>> {
    let bytes = STANDARD.decode(px).ok()?;
    (bytes.len() == 3 * w * h).then_some(bytes)
}
