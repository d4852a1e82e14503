//! Depth-one handoff cell between the detector and corrector workers.
//!
//! The slot is a mailbox of capacity one: the producer blocks until the
//! previous payload has been consumed, the consumer blocks until a payload
//! is produced. That alternation is what gives the pipeline its
//! one-frame lag, and it means frames are never dropped or duplicated.

use std::sync::{Condvar, Mutex};

use serde::Serialize;

use crate::engine::{EngineError, Frame, PredictionObject};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotState {
    Empty,
    Produced,
    Consumed,
}

/// Transition counters recorded by the slot.
///
/// `overwrites` counts writes that landed on a still-unconsumed payload
/// and `double_consumes` counts takes that found no fresh payload; both
/// stay zero as long as the blocking protocol is honored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SlotAudit {
    pub produced: u64,
    pub consumed: u64,
    pub overwrites: u64,
    pub double_consumes: u64,
}

/// What travels through the slot: a detected frame, end of stream, or a
/// detector-stage failure.
pub(crate) enum SlotPayload {
    Item {
        frame: Frame,
        prediction: PredictionObject,
    },
    End,
    Failed {
        frame_index: usize,
        error: EngineError,
    },
}

/// Returned by `produce` when the consumer has cancelled the run.
pub(crate) struct Cancelled;

struct SlotInner {
    state: SlotState,
    payload: Option<SlotPayload>,
    cancelled: bool,
    audit: SlotAudit,
}

pub(crate) struct PipelineSlot {
    inner: Mutex<SlotInner>,
    cond: Condvar,
}

impl PipelineSlot {
    pub(crate) fn new() -> Self {
        Self {
            inner: Mutex::new(SlotInner {
                state: SlotState::Empty,
                payload: None,
                cancelled: false,
                audit: SlotAudit::default(),
            }),
            cond: Condvar::new(),
        }
    }

    /// Producer side: wait for the slot to be free, then publish.
    pub(crate) fn produce(&self, payload: SlotPayload) -> Result<(), Cancelled> {
        let mut inner = self.inner.lock().expect("slot lock");
        while inner.state == SlotState::Produced && !inner.cancelled {
            inner = self.cond.wait(inner).expect("slot lock");
        }
        if inner.cancelled {
            return Err(Cancelled);
        }
        if inner.state == SlotState::Produced {
            inner.audit.overwrites += 1;
        }
        inner.payload = Some(payload);
        inner.state = SlotState::Produced;
        inner.audit.produced += 1;
        self.cond.notify_all();
        Ok(())
    }

    /// Consumer side: wait for a payload and take it.
    pub(crate) fn consume(&self) -> SlotPayload {
        let mut inner = self.inner.lock().expect("slot lock");
        while inner.state != SlotState::Produced {
            inner = self.cond.wait(inner).expect("slot lock");
        }
        let payload = inner.payload.take();
        inner.state = SlotState::Consumed;
        inner.audit.consumed += 1;
        self.cond.notify_all();
        match payload {
            Some(payload) => payload,
            None => {
                // A produced state with no payload means the value was
                // already taken; record it and end the stream.
                let mut inner = self.inner.lock().expect("slot lock");
                inner.audit.double_consumes += 1;
                SlotPayload::End
            }
        }
    }

    /// Consumer side: abort the run; wakes a blocked producer.
    pub(crate) fn cancel(&self) {
        let mut inner = self.inner.lock().expect("slot lock");
        inner.cancelled = true;
        self.cond.notify_all();
    }

    pub(crate) fn audit(&self) -> SlotAudit {
        self.inner.lock().expect("slot lock").audit
    }
}
