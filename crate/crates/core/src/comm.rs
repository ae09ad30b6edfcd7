//! Simulated bandwidth-limited broadcast network.
//!
//! Each step at most `slots` agents may broadcast their state. In priority
//! mode the agents first exchange priorities and the `slots` highest win;
//! if that exchange is lost the step falls back to round-robin. Broadcasts
//! are dropped atomically with probability `loss_prob` and arrive
//! `delay_steps` later. Receivers see a fixed, agent-ordered vector with
//! zeros for anything not received and for their own slot.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::PAYLOAD_LEN;
use crate::error::{Error, Result};

/// Bytes per serialized payload element (IEEE-754 single precision).
pub const WIRE_BYTES_PER_ELEMENT: usize = 4;
/// Bytes per serialized state message.
pub const MESSAGE_BYTES: usize = PAYLOAD_LEN * WIRE_BYTES_PER_ELEMENT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommMode {
    Priority,
    #[serde(alias = "round-robin", alias = "round_robin")]
    RoundRobin,
}

impl CommMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CommMode::Priority => "priority",
            CommMode::RoundRobin => "roundrobin",
        }
    }
}

impl std::str::FromStr for CommMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "priority" => Ok(CommMode::Priority),
            "roundrobin" | "round-robin" | "round_robin" | "rr" => Ok(CommMode::RoundRobin),
            other => Err(Error::Config(format!(
                "unknown communication mode '{other}' (expected priority or roundrobin)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub n_agents: usize,
    /// Observation broadcast slots per step.
    pub slots: usize,
    pub loss_prob: f64,
    pub delay_steps: u64,
    pub mode: CommMode,
    /// Probability that a whole priority exchange round is lost.
    pub priority_loss_prob: f64,
    /// Number of levels used when reporting the priority wire size.
    pub priority_levels: u32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_agents: 3,
            slots: 1,
            loss_prob: 0.2,
            delay_steps: 1,
            mode: CommMode::Priority,
            priority_loss_prob: 0.2,
            priority_levels: 8,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_agents < 2 {
            return fail(format!("network.n_agents must be at least 2, got {}", self.n_agents));
        }
        if self.slots == 0 || self.slots >= self.n_agents {
            return fail(format!(
                "network.slots must satisfy 0 < slots < n_agents ({}), got {}",
                self.n_agents, self.slots
            ));
        }
        for (name, p) in [
            ("loss_prob", self.loss_prob),
            ("priority_loss_prob", self.priority_loss_prob),
        ] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("network.{name} must lie in [0, 1), got {p}"));
            }
        }
        if self.priority_levels < 2 {
            return fail("network.priority_levels must be at least 2".into());
        }
        Ok(())
    }
}

/// A state broadcast. The payload holds the values as they arrive, i.e.
/// already rounded to single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: usize,
    pub payload: [f64; PAYLOAD_LEN],
    pub send_step: u64,
}

pub fn encode_payload(payload: &[f64; PAYLOAD_LEN]) -> [u8; MESSAGE_BYTES] {
    let mut out = [0u8; MESSAGE_BYTES];
    for (chunk, v) in out.chunks_exact_mut(WIRE_BYTES_PER_ELEMENT).zip(payload) {
        chunk.copy_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_payload(bytes: &[u8; MESSAGE_BYTES]) -> [f64; PAYLOAD_LEN] {
    let mut out = [0.0; PAYLOAD_LEN];
    for (v, chunk) in out.iter_mut().zip(bytes.chunks_exact(WIRE_BYTES_PER_ELEMENT)) {
        *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    out
}

/// How the slots of a step were assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationKind {
    /// Top-`L` priorities.
    Priority,
    /// Priority exchange lost; round-robin used instead.
    Fallback,
    RoundRobin,
}

impl AllocationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AllocationKind::Priority => "priority",
            AllocationKind::Fallback => "fallback",
            AllocationKind::RoundRobin => "roundrobin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    /// Selected agent ids in ascending order.
    pub selected: Vec<usize>,
    pub kind: AllocationKind,
}

/// The `slots` highest priorities; equal priorities go to the lower id.
pub fn top_priorities(priorities: &[f64], slots: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..priorities.len()).collect();
    order.sort_by(|&a, &b| priorities[b].total_cmp(&priorities[a]).then(a.cmp(&b)));
    order.truncate(slots);
    order.sort_unstable();
    order
}

#[derive(Debug, Clone)]
pub struct ChannelState {
    in_flight: Vec<(Message, u64)>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl ChannelState {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            in_flight: Vec::new(),
            cursor: 0,
            rng,
        }
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn in_flight(&self) -> impl Iterator<Item = (&Message, u64)> {
        self.in_flight.iter().map(|(m, d)| (m, *d))
    }

    /// Drop every undelivered message; the round-robin cursor is kept.
    pub fn clear_in_flight(&mut self) {
        self.in_flight.clear();
    }

    fn round_robin(&mut self, config: &NetworkConfig) -> Vec<usize> {
        let n = config.n_agents;
        let mut sel: Vec<usize> = (0..config.slots).map(|k| (self.cursor + k) % n).collect();
        sel.sort_unstable();
        self.cursor = (self.cursor + config.slots) % n;
        sel
    }

    /// Decide which agents broadcast this step.
    pub fn allocate_slots(&mut self, priorities: &[f64], config: &NetworkConfig) -> Result<Allocation> {
        match config.mode {
            CommMode::RoundRobin => Ok(Allocation {
                selected: self.round_robin(config),
                kind: AllocationKind::RoundRobin,
            }),
            CommMode::Priority => {
                if priorities.len() != config.n_agents {
                    return Err(Error::Input(format!(
                        "expected {} priorities, got {}",
                        config.n_agents,
                        priorities.len()
                    )));
                }
                if let Some(i) = priorities.iter().position(|&p| !(p > 0.0 && p < 1.0)) {
                    return Err(Error::Input(format!(
                        "priority of agent {i} is {}, must lie in (0, 1)",
                        priorities[i]
                    )));
                }
                if self.rng.gen::<f64>() < config.priority_loss_prob {
                    Ok(Allocation {
                        selected: self.round_robin(config),
                        kind: AllocationKind::Fallback,
                    })
                } else {
                    Ok(Allocation {
                        selected: top_priorities(priorities, config.slots),
                        kind: AllocationKind::Priority,
                    })
                }
            }
        }
    }

    /// Broadcast one payload per selected agent. Each broadcast is lost for
    /// every receiver with probability `loss_prob`; survivors are queued for
    /// delivery at `send_step + delay_steps`. Returns the dropped senders.
    pub fn transmit(
        &mut self,
        selected: &[usize],
        payloads: &[[f64; PAYLOAD_LEN]],
        send_step: u64,
        config: &NetworkConfig,
    ) -> Result<Vec<usize>> {
        if selected.len() != payloads.len() {
            return Err(Error::Input(format!(
                "{} senders but {} payloads",
                selected.len(),
                payloads.len()
            )));
        }
        let mut dropped = Vec::new();
        for (&sender, payload) in selected.iter().zip(payloads) {
            if sender >= config.n_agents {
                return Err(Error::Input(format!("sender {sender} out of range")));
            }
            if payload.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("payload of sender {sender} is not finite")));
            }
            if self.rng.gen::<f64>() < config.loss_prob {
                dropped.push(sender);
                continue;
            }
            let message = Message {
                sender,
                payload: decode_payload(&encode_payload(payload)),
                send_step,
            };
            self.in_flight.push((message, send_step + config.delay_steps));
        }
        Ok(dropped)
    }

    /// Remove and return the messages due at `now`, ordered by sender.
    /// Messages whose delivery step has already passed are discarded.
    pub fn deliver(&mut self, now: u64) -> Vec<Message> {
        let mut due = Vec::new();
        self.in_flight.retain(|(m, at)| {
            if *at == now {
                due.push(m.clone());
            }
            *at > now
        });
        due.sort_by_key(|m| m.sender);
        due
    }
}

/// Fixed-order communicated observation for `receiver`: slot `j` holds
/// sender `j`'s payload, zeros when nothing arrived or `j == receiver`.
pub fn assemble_comm_obs(delivered: &[Message], receiver: usize, n_agents: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n_agents * PAYLOAD_LEN];
    let mut seen = vec![false; n_agents];
    for m in delivered {
        if m.sender >= n_agents {
            return Err(Error::Protocol(format!("sender {} out of range", m.sender)));
        }
        if seen[m.sender] {
            return Err(Error::Protocol(format!("duplicate message from sender {}", m.sender)));
        }
        seen[m.sender] = true;
        if m.sender != receiver {
            out[m.sender * PAYLOAD_LEN..(m.sender + 1) * PAYLOAD_LEN].copy_from_slice(&m.payload);
        }
    }
    Ok(out)
}

/// Bits needed to send one of `n_levels` priority levels.
pub fn priority_wire_size(n_levels: u32) -> Result<u32> {
    if n_levels < 2 {
        return Err(Error::Input(format!("need at least 2 priority levels, got {n_levels}")));
    }
    Ok(u32::BITS - (n_levels - 1).leading_zeros())
}

/// Uniform bin of a priority in (0, 1); for reporting only.
pub fn quantize_priority(priority: f64, n_levels: u32) -> u32 {
    let bin = (priority * n_levels as f64).floor();
    (bin.max(0.0) as u32).min(n_levels - 1)
}

/// One row of the per-step communication log.
#[derive(Debug, Clone, PartialEq)]
pub struct CommRecord {
    pub step: u64,
    pub kind: AllocationKind,
    pub selected: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Raw priorities; empty in round-robin mode.
    pub priorities: Vec<f64>,
}

pub const COMM_LOG_HEADER: &str = "step,mode_used,selected,dropped,priorities_raw,priorities_quantized";

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

pub fn write_comm_log<W: Write>(mut out: W, records: &[CommRecord], n_levels: u32) -> std::io::Result<()> {
    writeln!(out, "# priocomm comm-log v1")?;
    writeln!(out, "{COMM_LOG_HEADER}")?;
    for r in records {
        let quantized: Vec<u32> = r.priorities.iter().map(|&p| quantize_priority(p, n_levels)).collect();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            r.kind.as_str(),
            join(&r.selected),
            join(&r.dropped),
            join(&r.priorities),
            join(&quantized)
        )?;
    }
    Ok(())
}

/// Running bandwidth totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BandwidthStats {
    pub steps: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub bytes_sent: u64,
    pub fallback_steps: u64,
    pub priority_bits_per_agent: u32,
    pub priority_bits_per_step: u64,
    pub priority_bits_total: u64,
}

impl BandwidthStats {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        let bits = match config.mode {
            CommMode::Priority => priority_wire_size(config.priority_levels)?,
            CommMode::RoundRobin => 0,
        };
        Ok(Self {
            priority_bits_per_agent: bits,
            priority_bits_per_step: bits as u64 * config.n_agents as u64,
            ..Self::default()
        })
    }

    pub fn record(&mut self, allocation: &Allocation, dropped: usize) {
        self.steps += 1;
        self.messages_sent += allocation.selected.len() as u64;
        self.messages_dropped += dropped as u64;
        self.bytes_sent += (allocation.selected.len() * MESSAGE_BYTES) as u64;
        if allocation.kind == AllocationKind::Fallback {
            self.fallback_steps += 1;
        }
        self.priority_bits_total += self.priority_bits_per_step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn config(n: usize, slots: usize, mode: CommMode) -> NetworkConfig {
        NetworkConfig {
            n_agents: n,
            slots,
            mode,
            loss_prob: 0.0,
            priority_loss_prob: 0.0,
            ..NetworkConfig::default()
        }
    }

    fn channel() -> ChannelState {
        ChannelState::new(ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn argmax_and_tie_rule() {
        let cfg = config(3, 1, CommMode::Priority);
        let mut ch = channel();
        assert_eq!(ch.allocate_slots(&[0.3, 0.9, 0.1], &cfg).unwrap().selected, vec![1]);
        assert_eq!(ch.allocate_slots(&[0.5, 0.5, 0.2], &cfg).unwrap().selected, vec![0]);
    }

    #[test]
    fn round_robin_cycles() {
        let cfg = config(6, 2, CommMode::RoundRobin);
        let mut ch = channel();
        let seq: Vec<_> = (0..4).map(|_| ch.allocate_slots(&[], &cfg).unwrap().selected).collect();
        assert_eq!(seq, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![0, 1]]);
    }

    #[test]
    fn out_of_range_priority_is_rejected() {
        let cfg = config(3, 1, CommMode::Priority);
        let mut ch = channel();
        assert!(matches!(
            ch.allocate_slots(&[0.0, 0.5, 0.5], &cfg),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            ch.allocate_slots(&[0.2, 1.0, 0.5], &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn lost_exchange_falls_back_to_round_robin() {
        let cfg = NetworkConfig {
            priority_loss_prob: 0.999_999,
            ..config(4, 1, CommMode::Priority)
        };
        let mut ch = channel();
        let a = ch.allocate_slots(&[0.1, 0.2, 0.3, 0.9], &cfg).unwrap();
        assert_eq!(a.kind, AllocationKind::Fallback);
        assert_eq!(a.selected, vec![0]);
        assert_eq!(ch.cursor(), 1);
    }

    #[test]
    fn loss_extremes() {
        let mut ch = channel();
        let cfg = config(3, 2, CommMode::Priority);
        let dropped = ch.transmit(&[0, 2], &[[1.0; 4], [2.0; 4]], 0, &cfg).unwrap();
        assert!(dropped.is_empty());
        assert_eq!(ch.in_flight().count(), 2);

        let mut ch = channel();
        let lossy = NetworkConfig {
            loss_prob: 0.999_999_999,
            ..cfg
        };
        let dropped = ch.transmit(&[0, 2], &[[1.0; 4], [2.0; 4]], 0, &lossy).unwrap();
        assert_eq!(dropped, vec![0, 2]);
        assert_eq!(ch.in_flight().count(), 0);
    }

    #[test]
    fn delivery_respects_delay_and_order() {
        let cfg = config(3, 2, CommMode::Priority);
        let mut ch = channel();
        assert!(ch.deliver(0).is_empty());
        ch.transmit(&[2, 0], &[[2.0; 4], [0.5; 4]], 4, &cfg).unwrap();
        assert!(ch.deliver(4).is_empty());
        let got = ch.deliver(5);
        assert_eq!(got.iter().map(|m| m.sender).collect::<Vec<_>>(), vec![0, 2]);
        assert!(ch.deliver(5).is_empty());
    }

    #[test]
    fn assembly_layout_and_self_padding() {
        assert_eq!(assemble_comm_obs(&[], 0, 3).unwrap(), vec![0.0; 12]);
        let m = Message {
            sender: 1,
            payload: [1.0, 2.0, 3.0, 4.0],
            send_step: 0,
        };
        assert_eq!(
            assemble_comm_obs(std::slice::from_ref(&m), 0, 3).unwrap(),
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            assemble_comm_obs(std::slice::from_ref(&m), 1, 3).unwrap(),
            vec![0.0; 12]
        );
        let dup = vec![m.clone(), m];
        assert!(matches!(assemble_comm_obs(&dup, 0, 3), Err(Error::Protocol(_))));
    }

    #[test]
    fn wire_sizes() {
        assert_eq!(priority_wire_size(8).unwrap(), 3);
        assert_eq!(priority_wire_size(2).unwrap(), 1);
        assert_eq!(priority_wire_size(256).unwrap(), 8);
        assert_eq!(priority_wire_size(9).unwrap(), 4);
        assert!(priority_wire_size(1).is_err());
        assert_eq!(MESSAGE_BYTES, 16);
    }

    #[test]
    fn quantization_bins() {
        assert_eq!(quantize_priority(0.01, 8), 0);
        assert_eq!(quantize_priority(0.5, 8), 4);
        assert_eq!(quantize_priority(0.999_999, 8), 7);
    }

    #[test]
    fn payload_serialization_is_single_precision() {
        let p = [0.1, -2.5, 1e-3, 3.0];
        let bytes = encode_payload(&p);
        assert_eq!(bytes.len(), 16);
        let back = decode_payload(&bytes);
        for (a, b) in p.iter().zip(back) {
            assert_eq!(b, *a as f32 as f64);
        }
    }

    #[test]
    fn config_validation() {
        assert!(config(3, 3, CommMode::Priority).validate().is_err());
        assert!(config(3, 0, CommMode::Priority).validate().is_err());
        let bad = NetworkConfig {
            loss_prob: 1.0,
            ..config(3, 1, CommMode::Priority)
        };
        assert!(bad.validate().is_err());
        assert!(config(3, 1, CommMode::Priority).validate().is_ok());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("roundrobin".parse::<CommMode>().unwrap(), CommMode::RoundRobin);
        assert_eq!("Priority".parse::<CommMode>().unwrap(), CommMode::Priority);
        assert!("tdma".parse::<CommMode>().is_err());
    }
}
