//! Bounded, ordered command queue between connection readers and the
//! simulation loop.

use std::collections::VecDeque;

use crate::protocol::ClientMessage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Priority {
    /// Superseded by the next sample, safe to drop.
    Pose,
    Pressure,
    /// Toggles and scale changes; never dropped.
    Keep,
}

fn priority(msg: &ClientMessage) -> Priority {
    match msg {
        ClientMessage::PoseSample { .. } => Priority::Pose,
        ClientMessage::Fsr { .. } => Priority::Pressure,
        _ => Priority::Keep,
    }
}

#[derive(Debug, Clone)]
pub struct CommandQueue {
    items: VecDeque<ClientMessage>,
    capacity: usize,
    dropped: u64,
}

impl CommandQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            dropped: 0,
        }
    }

    /// Enqueues `msg`. When full, the oldest pose sample is evicted, else the
    /// oldest pressure sample; if only toggles remain the queue grows.
    /// Returns the evicted message, if any.
    pub fn push(&mut self, msg: ClientMessage) -> Option<ClientMessage> {
        let mut evicted = None;
        if self.items.len() >= self.capacity {
            for level in [Priority::Pose, Priority::Pressure] {
                if let Some(i) = self.items.iter().position(|m| priority(m) == level) {
                    evicted = self.items.remove(i);
                    break;
                }
            }
            if evicted.is_none() && priority(&msg) != Priority::Keep {
                // everything queued is a toggle: the incoming sample is the oldest droppable item
                self.dropped += 1;
                return Some(msg);
            }
        }
        if evicted.is_some() {
            self.dropped += 1;
        }
        self.items.push_back(msg);
        evicted
    }

    pub fn pop(&mut self) -> Option<ClientMessage> {
        self.items.pop_front()
    }

    pub fn drain(&mut self) -> impl Iterator<Item = ClientMessage> + '_ {
        self.items.drain(..)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}
