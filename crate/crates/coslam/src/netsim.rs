//! Simulated agent-server links with configurable latency, jitter, loss and
//! bandwidth. Everything runs on the shared virtual simulation clock and is
//! deterministic per link seed; reliability is deliberately not provided here
//! (the agent/server protocol resends dirty entities instead).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetSimError {
    #[error("link is closed")]
    LinkClosed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayloadKind {
    KeyFrame,
    MapPoint,
    NeighborhoodReply,
    Ack,
}

impl std::fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PayloadKind::KeyFrame => "KF",
            PayloadKind::MapPoint => "MP",
            PayloadKind::NeighborhoodReply => "NEIGHBORHOOD",
            PayloadKind::Ack => "ACK",
        };
        f.write_str(s)
    }
}

/// One message on a link. `size` is the serialized payload length and is what
/// the bandwidth model charges for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub sequence: u64,
    pub sender: u32,
    pub send_time: f64,
    pub kind: PayloadKind,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn size(&self) -> usize {
        self.payload.len()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinkConfig {
    /// Base one-way delay in seconds.
    pub delay: f64,
    /// Uniform jitter added on top of the base delay, in [0, jitter).
    pub jitter: f64,
    /// Probability that a message vanishes, in [0, 1).
    pub drop_probability: f64,
    /// Bandwidth cap in bytes per second. The link allows a burst of one
    /// second of bandwidth; beyond that, messages queue FIFO.
    pub bandwidth: f64,
    pub seed: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            delay: 0.1,
            jitter: 0.0,
            drop_probability: 0.01,
            bandwidth: 1_000_000.0,
            seed: 0,
        }
    }
}

/// Per-message log line for bandwidth accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub send_time: f64,
    /// None when the message was dropped.
    pub delivery_time: Option<f64>,
    pub kind: PayloadKind,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

/// A unidirectional lossy link. Bidirectional channels are just two of these.
#[derive(Debug, Clone)]
pub struct Link {
    config: LinkConfig,
    rng: ChaCha8Rng,
    open: bool,
    /// Messages scheduled for delivery, unsorted; sorted at poll time.
    pending: Vec<(f64, Envelope)>,
    /// Available transmission budget in bytes, valid at `tokens_time`.
    tokens: f64,
    /// Sim time at which `tokens` holds; lies in the future while a queued
    /// backlog is still draining.
    tokens_time: f64,
    log: Vec<TrafficRecord>,
    stats: LinkStats,
    last_sequence: Option<u64>,
}

impl Link {
    pub fn new(config: LinkConfig) -> Self {
        assert!(config.delay >= 0.0, "delay must be non-negative");
        assert!(config.jitter >= 0.0, "jitter must be non-negative");
        assert!(
            (0.0..1.0).contains(&config.drop_probability),
            "drop probability must be in [0, 1)"
        );
        assert!(config.bandwidth > 0.0, "bandwidth cap must be positive");
        Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            open: true,
            pending: Vec::new(),
            tokens: config.bandwidth,
            tokens_time: 0.0,
            log: Vec::new(),
            stats: LinkStats::default(),
            last_sequence: None,
            config,
        }
    }

    pub fn close(&mut self) {
        self.open = false;
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    pub fn traffic_log(&self) -> &[TrafficRecord] {
        &self.log
    }

    /// Transmission budget available at `now`, in bytes; zero while a queued
    /// backlog is still draining. Senders that want back-pressure instead of
    /// queuing check this before calling `send`.
    pub fn available_budget(&self, now: f64) -> f64 {
        if now >= self.tokens_time {
            (self.tokens + (now - self.tokens_time) * self.config.bandwidth)
                .min(self.config.bandwidth)
        } else {
            0.0
        }
    }

    /// Queues a message. Drop and jitter are decided immediately, so the full
    /// delivery schedule depends only on the send schedule and the seed,
    /// never on poll cadence.
    pub fn send(&mut self, envelope: Envelope, now: f64) -> Result<(), NetSimError> {
        if !self.open {
            return Err(NetSimError::LinkClosed);
        }
        assert!(envelope.size() > 0, "payload must be non-empty");
        if let Some(last) = self.last_sequence {
            assert!(envelope.sequence > last, "sequence numbers must increase");
        }
        self.last_sequence = Some(envelope.sequence);
        self.stats.sent += 1;

        if self.rng.gen::<f64>() < self.config.drop_probability {
            self.stats.dropped += 1;
            self.log.push(TrafficRecord {
                send_time: now,
                delivery_time: None,
                kind: envelope.kind,
                size: envelope.size(),
            });
            return Ok(());
        }

        // Token bucket: refill up to one second of burst while idle; while a
        // backlog is draining (tokens_time in the future) no refill applies.
        let size = envelope.size() as f64;
        if now > self.tokens_time {
            self.tokens = (self.tokens + (now - self.tokens_time) * self.config.bandwidth)
                .min(self.config.bandwidth);
            self.tokens_time = now;
        }
        let transmit_time = if self.tokens >= size {
            self.tokens -= size;
            self.tokens_time
        } else {
            let wait = (size - self.tokens) / self.config.bandwidth;
            self.tokens = 0.0;
            self.tokens_time += wait;
            self.tokens_time
        };
        let jitter = if self.config.jitter > 0.0 {
            self.rng.gen_range(0.0..self.config.jitter)
        } else {
            0.0
        };
        let delivery = transmit_time + self.config.delay + jitter;
        self.log.push(TrafficRecord {
            send_time: now,
            delivery_time: Some(delivery),
            kind: envelope.kind,
            size: envelope.size(),
        });
        self.pending.push((delivery, envelope));
        Ok(())
    }

    /// Returns every message whose delivery time has passed, in delivery-time
    /// order with ties broken by sequence number; each exactly once.
    pub fn poll(&mut self, now: f64) -> Vec<Envelope> {
        let mut due: Vec<(f64, Envelope)> = Vec::new();
        let mut i = 0;
        while i < self.pending.len() {
            if self.pending[i].0 <= now {
                due.push(self.pending.swap_remove(i));
            } else {
                i += 1;
            }
        }
        due.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.sequence.cmp(&b.1.sequence)));
        self.stats.delivered += due.len() as u64;
        due.into_iter().map(|(_, e)| e).collect()
    }

    /// Renders the traffic log as CSV (`send_time,delivery,kind,size`;
    /// dropped messages show DROPPED in the delivery column).
    pub fn traffic_log_csv(&self) -> String {
        let mut out = String::from("send_time,delivery_time,kind,size\n");
        for r in &self.log {
            let delivery = match r.delivery_time {
                Some(t) => format!("{t:.6}"),
                None => "DROPPED".to_string(),
            };
            out.push_str(&format!("{:.6},{},{},{}\n", r.send_time, delivery, r.kind, r.size));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn env(seq: u64, size: usize) -> Envelope {
        Envelope {
            sequence: seq,
            sender: 0,
            send_time: 0.0,
            kind: PayloadKind::KeyFrame,
            payload: vec![0u8; size],
        }
    }

    fn lossless(delay: f64) -> LinkConfig {
        LinkConfig {
            delay,
            jitter: 0.0,
            drop_probability: 0.0,
            bandwidth: 1e9,
            seed: 1,
        }
    }

    #[test]
    fn exact_delay_without_loss() {
        let mut link = Link::new(lossless(0.2));
        link.send(env(0, 100), 1.0).unwrap();
        assert!(link.poll(1.19).is_empty());
        let got = link.poll(1.2);
        assert_eq!(got.len(), 1);
        assert_eq!(link.traffic_log()[0].delivery_time, Some(1.2));
    }

    #[test]
    fn drop_rate_within_binomial_bounds() {
        // Oracle: 99% normal-approximation binomial interval around n*(1-p).
        let mut link = Link::new(LinkConfig {
            drop_probability: 0.9,
            ..lossless(0.0)
        });
        let n = 1000;
        for i in 0..n {
            link.send(env(i, 100), i as f64 * 0.01).unwrap();
        }
        let delivered = link.poll(f64::INFINITY).len() as f64;
        let expect = n as f64 * 0.1;
        let sigma = (n as f64 * 0.9 * 0.1).sqrt();
        assert!(
            (delivered - expect).abs() < 2.576 * sigma,
            "delivered {delivered}, expected {expect} +- {}",
            2.576 * sigma
        );
        let stats = link.stats();
        assert_eq!(stats.sent, stats.delivered + stats.dropped);
    }

    #[test]
    fn token_bucket_spaces_deliveries() {
        let mut link = Link::new(LinkConfig {
            bandwidth: 1000.0,
            ..lossless(0.0)
        });
        link.send(env(0, 1000), 0.0).unwrap();
        link.send(env(1, 1000), 0.0).unwrap();
        let times: Vec<f64> = link
            .traffic_log()
            .iter()
            .map(|r| r.delivery_time.unwrap())
            .collect();
        assert!(times[1] - times[0] >= 1.0, "deliveries {times:?}");
    }

    #[test]
    fn poll_orders_ties_by_sequence_and_never_duplicates() {
        let mut link = Link::new(lossless(0.5));
        // Same send time, same delivery time.
        link.send(env(3, 10), 0.0).unwrap();
        link.send(env(7, 10), 0.0).unwrap();
        link.send(env(9, 10), 0.0).unwrap();
        let got = link.poll(10.0);
        let seqs: Vec<u64> = got.iter().map(|e| e.sequence).collect();
        assert_eq!(seqs, vec![3, 7, 9]);
        assert!(link.poll(10.0).is_empty());
        assert!(link.poll(f64::INFINITY).is_empty());
    }

    #[test]
    fn fifo_without_jitter() {
        let mut link = Link::new(LinkConfig {
            delay: 0.3,
            bandwidth: 5000.0,
            ..lossless(0.3)
        });
        for i in 0..20 {
            link.send(env(i, 700), i as f64 * 0.05).unwrap();
        }
        let got = link.poll(f64::INFINITY);
        let seqs: Vec<u64> = got.iter().map(|e| e.sequence).collect();
        let mut sorted = seqs.clone();
        sorted.sort();
        assert_eq!(seqs, sorted);
    }

    #[test]
    fn deterministic_per_seed() {
        let config = LinkConfig {
            delay: 0.1,
            jitter: 0.05,
            drop_probability: 0.2,
            bandwidth: 10_000.0,
            seed: 42,
        };
        let run = |config: LinkConfig| {
            let mut link = Link::new(config);
            for i in 0..200 {
                link.send(env(i, 50 + (i as usize * 37) % 400), i as f64 * 0.02).unwrap();
            }
            (link.traffic_log().to_vec(), link.poll(f64::INFINITY))
        };
        let (log_a, got_a) = run(config);
        let (log_b, got_b) = run(config);
        assert_eq!(log_a, log_b);
        assert_eq!(got_a, got_b);
        let (log_c, _) = run(LinkConfig { seed: 43, ..config });
        assert_ne!(log_a, log_c);
    }

    #[test]
    fn closed_link_rejects_sends() {
        let mut link = Link::new(lossless(0.0));
        link.close();
        assert_eq!(link.send(env(0, 10), 0.0), Err(NetSimError::LinkClosed));
    }

    #[test]
    fn traffic_log_csv_shape() {
        let mut link = Link::new(LinkConfig {
            drop_probability: 0.9,
            seed: 3,
            ..lossless(0.25)
        });
        for i in 0..20 {
            link.send(env(i, 64), i as f64).unwrap();
        }
        let csv = link.traffic_log_csv();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines[0], "send_time,delivery_time,kind,size");
        assert_eq!(lines.len(), 21);
        assert!(lines.iter().skip(1).any(|l| l.contains("DROPPED")));
        assert!(lines.iter().skip(1).all(|l| l.ends_with(",KF,64")));
    }

    proptest! {
        #[test]
        fn conservation_at_drain(
            sizes in proptest::collection::vec(1usize..5000, 1..100),
            drop in 0.0f64..0.9,
            seed in 0u64..1000,
        ) {
            let mut link = Link::new(LinkConfig {
                delay: 0.1,
                jitter: 0.02,
                drop_probability: drop,
                bandwidth: 20_000.0,
                seed,
            });
            for (i, size) in sizes.iter().enumerate() {
                link.send(env(i as u64, *size), i as f64 * 0.01).unwrap();
            }
            let delivered = link.poll(f64::INFINITY).len() as u64;
            let stats = link.stats();
            prop_assert_eq!(stats.sent, sizes.len() as u64);
            prop_assert_eq!(stats.delivered, delivered);
            prop_assert_eq!(stats.delivered + stats.dropped, stats.sent);
        }
    }
}
