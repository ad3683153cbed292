//! Index assignment and heartbeat bookkeeping.
//!
//! The coordinator never sees model state: it hands out sequential indices
//! at registration and keeps a last-seen table that heartbeats refresh.
//! Liveness is simulation-visible only and has no effect on training.

use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Coordinator {
    next_index: usize,
    last_seen: BTreeMap<usize, f64>,
    timeout: f64,
}

impl Coordinator {
    pub fn new(timeout: f64) -> Self {
        Coordinator { next_index: 0, last_seen: BTreeMap::new(), timeout }
    }

    /// Sequential index assignment, starting at 0.
    pub fn register(&mut self, now: f64) -> usize {
        let idx = self.next_index;
        self.next_index += 1;
        self.last_seen.insert(idx, now);
        idx
    }

    pub fn heartbeat(&mut self, device: usize, now: f64) {
        self.last_seen.insert(device, now);
    }

    /// `(device, stale)` per registered device; stale once the last
    /// heartbeat is older than the timeout.
    pub fn liveness(&self, now: f64) -> Vec<(usize, bool)> {
        self.last_seen
            .iter()
            .map(|(&d, &seen)| (d, now - seen > self.timeout))
            .collect()
    }

    /// FNV-1a over the registration/heartbeat state. Model parameters never
    /// enter the coordinator, so this hash is independent of training.
    pub fn state_hash(&self, now: f64) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        mix(&(self.next_index as u64).to_le_bytes());
        for (d, stale) in self.liveness(now) {
            mix(&(d as u64).to_le_bytes());
            mix(&[stale as u8]);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_registration() {
        let mut c = Coordinator::new(30.0);
        for expect in 0..5 {
            assert_eq!(c.register(0.0), expect);
        }
    }

    #[test]
    fn missed_heartbeats_flag_stale() {
        let mut c = Coordinator::new(10.0);
        c.register(0.0);
        c.register(0.0);
        c.heartbeat(0, 25.0);
        let live = c.liveness(30.0);
        assert_eq!(live, vec![(0, false), (1, true)]);
    }

    #[test]
    fn hash_ignores_everything_but_indices_and_liveness() {
        let mut a = Coordinator::new(10.0);
        let mut b = Coordinator::new(10.0);
        a.register(0.0);
        b.register(0.0);
        a.heartbeat(0, 5.0);
        b.heartbeat(0, 5.0);
        assert_eq!(a.state_hash(6.0), b.state_hash(6.0));
    }
}
