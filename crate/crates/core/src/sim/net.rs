use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::types::NodeId;

/// Link behaviour of the simulated network. Times are in microseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub base_delay_us: u64,
    /// Uniform extra delay in `[0, jitter_us]`.
    pub jitter_us: u64,
    /// Probability and size of an occasional long stall on a message.
    pub spike_prob: f64,
    pub spike_us: u64,
    pub drop_prob: f64,
    pub dup_prob: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_delay_us: 150,
            jitter_us: 100,
            spike_prob: 0.0,
            spike_us: 0,
            drop_prob: 0.0,
            dup_prob: 0.0,
        }
    }
}

impl NetConfig {
    /// Delays, stalls, losses and duplicates all switched on.
    pub fn faulty() -> NetConfig {
        NetConfig {
            base_delay_us: 150,
            jitter_us: 400,
            spike_prob: 0.02,
            spike_us: 5_000,
            drop_prob: 0.02,
            dup_prob: 0.02,
        }
    }
}

/// Per-link FIFO delivery schedule: messages on one link never overtake
/// each other, matching a stream connection.
#[derive(Debug)]
pub(crate) struct Network {
    pub config: NetConfig,
    last_delivery: BTreeMap<(NodeId, NodeId), u64>,
    pub sent: u64,
    pub dropped: u64,
    pub duplicated: u64,
}

impl Network {
    pub fn new(config: NetConfig) -> Network {
        Network {
            config,
            last_delivery: BTreeMap::new(),
            sent: 0,
            dropped: 0,
            duplicated: 0,
        }
    }

    /// Delivery times for one message (empty if lost, two if duplicated).
    pub fn schedule(&mut self, rng: &mut ChaCha8Rng, now: u64, from: NodeId, to: NodeId) -> Vec<u64> {
        self.sent += 1;
        if self.config.drop_prob > 0.0 && rng.gen_bool(self.config.drop_prob) {
            self.dropped += 1;
            return Vec::new();
        }
        let copies = if self.config.dup_prob > 0.0 && rng.gen_bool(self.config.dup_prob) {
            self.duplicated += 1;
            2
        } else {
            1
        };
        let mut times = Vec::with_capacity(copies);
        for _ in 0..copies {
            let mut delay = self.config.base_delay_us + rng.gen_range(0..=self.config.jitter_us);
            if self.config.spike_prob > 0.0 && rng.gen_bool(self.config.spike_prob) {
                delay += self.config.spike_us;
            }
            let last = self.last_delivery.entry((from, to)).or_insert(0);
            let at = (now + delay).max(*last);
            *last = at;
            times.push(at);
        }
        times
    }

    /// A restarted connection starts a fresh FIFO.
    pub fn reset_node(&mut self, node: NodeId) {
        self.last_delivery.retain(|(a, b), _| *a != node && *b != node);
    }
}
