//! In-process stand-in for the E2 telemetry interface: an ordered queue of
//! KPM and I/Q messages with per-stream timestamp checks.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranlink::KpmRecord;
use crate::signals::IqBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TelemetryKind {
    Kpm,
    IqWindow,
}

#[derive(Debug, Clone)]
pub enum TelemetryPayload {
    Kpm(KpmRecord),
    IqWindow(Arc<IqBuffer>),
}

#[derive(Debug, Clone)]
pub struct TelemetryMessage {
    pub timestamp_s: f64,
    pub payload: TelemetryPayload,
}

impl TelemetryMessage {
    pub fn kpm(record: KpmRecord) -> Self {
        TelemetryMessage {
            timestamp_s: record.t_s,
            payload: TelemetryPayload::Kpm(record),
        }
    }

    pub fn iq(timestamp_s: f64, iq: Arc<IqBuffer>) -> Self {
        TelemetryMessage {
            timestamp_s,
            payload: TelemetryPayload::IqWindow(iq),
        }
    }

    pub fn kind(&self) -> TelemetryKind {
        match self.payload {
            TelemetryPayload::Kpm(_) => TelemetryKind::Kpm,
            TelemetryPayload::IqWindow(_) => TelemetryKind::IqWindow,
        }
    }
}

/// FIFO delivering messages in publish order. Timestamps must not decrease
/// within a stream.
#[derive(Debug, Default)]
pub struct TelemetryBus {
    queue: VecDeque<TelemetryMessage>,
    last_kpm: Option<f64>,
    last_iq: Option<f64>,
}

impl TelemetryBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&mut self, message: TelemetryMessage) -> Result<()> {
        let last = match message.kind() {
            TelemetryKind::Kpm => &mut self.last_kpm,
            TelemetryKind::IqWindow => &mut self.last_iq,
        };
        if !message.timestamp_s.is_finite() || last.is_some_and(|t| message.timestamp_s < t) {
            return Err(Error::ProtocolViolation(format!(
                "{:?} timestamp {} after {:?}",
                message.kind(),
                message.timestamp_s,
                last
            )));
        }
        *last = Some(message.timestamp_s);
        self.queue.push_back(message);
        Ok(())
    }

    pub fn poll(&mut self) -> Option<TelemetryMessage> {
        self.queue.pop_front()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}
