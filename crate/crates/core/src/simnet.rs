//! In-process transport with exact byte accounting and a virtual clock.
//!
//! Payload bytes drive both the ledger and the clock. A fixed header per
//! message is tallied separately so measured payload can be compared with
//! the closed-form cost model, which counts payload only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER_BYTES: u64 = 32;

/// Bytes on the wire per f64 element.
pub const BYTES_PER_ELEMENT: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Actor {
    Server,
    Client(usize),
}

/// `Up` is client → server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    /// One-time head distribution.
    HeadBroadcast,
    /// Tail and prompt sent to a selected client.
    ModelDown,
    /// Head output, client → server.
    Smashed,
    /// Body output, server → client.
    BodyOutput,
    /// Loss gradient at the body output, client → server.
    TailGrad,
    /// Gradient at the body input, server → client.
    BodyGrad,
    /// Tail and prompt returned for aggregation.
    Upload,
}

impl MessageKind {
    pub fn direction(self) -> Direction {
        match self {
            MessageKind::HeadBroadcast
            | MessageKind::ModelDown
            | MessageKind::BodyOutput
            | MessageKind::BodyGrad => Direction::Down,
            MessageKind::Smashed | MessageKind::TailGrad | MessageKind::Upload => Direction::Up,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    /// bytes / second
    pub uplink_rate: f64,
    /// bytes / second
    pub downlink_rate: f64,
    /// Divide the rate by the number of concurrently active clients.
    pub concurrent_share: bool,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            uplink_rate: 1.25e6,
            downlink_rate: 1.25e6,
            concurrent_share: true,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("link.uplink_rate", self.uplink_rate),
            ("link.downlink_rate", self.downlink_rate),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(field, "must be finite and > 0"));
            }
        }
        Ok(())
    }

    /// Seconds to move `bytes` in `direction` with `active_clients` sharing the link.
    pub fn transfer_time(&self, direction: Direction, bytes: u64, active_clients: usize) -> f64 {
        let rate = match direction {
            Direction::Up => self.uplink_rate,
            Direction::Down => self.downlink_rate,
        };
        let rate = if self.concurrent_share {
            rate / active_clients.max(1) as f64
        } else {
            rate
        };
        bytes as f64 / rate
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KindTotals {
    pub messages: u64,
    pub payload_bytes: u64,
    pub header_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficLedger {
    rounds: BTreeMap<u32, BTreeMap<MessageKind, KindTotals>>,
}

impl TrafficLedger {
    fn record(&mut self, round: u32, kind: MessageKind, payload: u64) {
        let t = self
            .rounds
            .entry(round)
            .or_default()
            .entry(kind)
            .or_default();
        t.messages += 1;
        t.payload_bytes += payload;
        t.header_bytes += HEADER_BYTES;
    }

    pub fn kind_totals(&self, round: u32, kind: MessageKind) -> KindTotals {
        self.rounds
            .get(&round)
            .and_then(|r| r.get(&kind))
            .copied()
            .unwrap_or_default()
    }

    /// Payload bytes for `round` in `direction`.
    pub fn payload(&self, round: u32, direction: Direction) -> u64 {
        self.rounds.get(&round).map_or(0, |r| {
            r.iter()
                .filter(|(k, _)| k.direction() == direction)
                .map(|(_, t)| t.payload_bytes)
                .sum()
        })
    }

    pub fn headers(&self, round: u32) -> u64 {
        self.rounds
            .get(&round)
            .map_or(0, |r| r.values().map(|t| t.header_bytes).sum())
    }

    pub fn total_payload(&self) -> u64 {
        self.rounds
            .values()
            .flat_map(|r| r.values())
            .map(|t| t.payload_bytes)
            .sum()
    }
}

/// Per-actor elapsed simulated seconds within the current round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimClock {
    actors: BTreeMap<Actor, f64>,
}

impl SimClock {
    pub fn elapsed(&self, actor: Actor) -> f64 {
        self.actors.get(&actor).copied().unwrap_or(0.0)
    }

    fn slot(&mut self, actor: Actor) -> &mut f64 {
        self.actors.entry(actor).or_insert(0.0)
    }

    /// Latest finishing actor.
    pub fn latency(&self) -> f64 {
        self.actors.values().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundSummary {
    pub round: u32,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub header_bytes: u64,
    pub latency_s: f64,
}

#[derive(Debug, Clone)]
pub struct Network {
    link: LinkConfig,
    ledger: TrafficLedger,
    clock: SimClock,
    open: Option<u32>,
    closed: BTreeMap<u32, RoundSummary>,
}

impl Network {
    pub fn new(link: LinkConfig) -> Result<Self> {
        link.validate()?;
        Ok(Self {
            link,
            ledger: TrafficLedger::default(),
            clock: SimClock::default(),
            open: None,
            closed: BTreeMap::new(),
        })
    }

    pub fn link(&self) -> &LinkConfig {
        &self.link
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn current_round(&self) -> Option<u32> {
        self.open
    }

    pub fn begin_round(&mut self, round: u32) -> Result<()> {
        if let Some(open) = self.open {
            return Err(Error::Protocol(format!(
                "round {open} still open, cannot begin round {round}"
            )));
        }
        if self
            .closed
            .keys()
            .next_back()
            .is_some_and(|&last| round <= last)
        {
            return Err(Error::ClosedRound(round));
        }
        self.open = Some(round);
        self.clock = SimClock::default();
        Ok(())
    }

    fn open_round(&self) -> Result<u32> {
        match self.open {
            Some(r) => Ok(r),
            None => Err(Error::ClosedRound(
                self.closed.keys().next_back().copied().unwrap_or(0),
            )),
        }
    }

    /// Records one message between `client` and the server and advances the
    /// clock. Returns the transfer time in seconds.
    pub fn record_transfer(
        &mut self,
        client: usize,
        kind: MessageKind,
        payload_bytes: u64,
        active_clients: usize,
    ) -> Result<f64> {
        let round = self.open_round()?;
        let direction = kind.direction();
        self.ledger.record(round, kind, payload_bytes);
        let dt = self
            .link
            .transfer_time(direction, payload_bytes, active_clients);
        let (c, s) = (Actor::Client(client), Actor::Server);
        match direction {
            Direction::Up => {
                let end = self.clock.elapsed(c) + dt;
                *self.clock.slot(c) = end;
                let server = self.clock.slot(s);
                *server = server.max(end);
            }
            Direction::Down => {
                let end = self.clock.elapsed(s) + dt;
                let client = self.clock.slot(c);
                *client = client.max(end);
            }
        }
        Ok(dt)
    }

    /// Advances `actor` by `work / power` seconds.
    pub fn record_compute(&mut self, actor: Actor, work: f64, power: f64) -> Result<f64> {
        self.open_round()?;
        if !(power > 0.0) {
            return Err(Error::invalid("power", "must be > 0"));
        }
        if !(work >= 0.0) {
            return Err(Error::invalid("work", "must be >= 0"));
        }
        let dt = work / power;
        *self.clock.slot(actor) += dt;
        Ok(dt)
    }

    pub fn close_round(&mut self) -> Result<RoundSummary> {
        let round = self.open_round()?;
        let summary = RoundSummary {
            round,
            bytes_up: self.ledger.payload(round, Direction::Up),
            bytes_down: self.ledger.payload(round, Direction::Down),
            header_bytes: self.ledger.headers(round),
            latency_s: self.clock.latency(),
        };
        self.closed.insert(round, summary);
        self.open = None;
        Ok(summary)
    }

    /// Snapshot of a closed round.
    pub fn round_summary(&self, round: u32) -> Result<RoundSummary> {
        self.closed
            .get(&round)
            .copied()
            .ok_or_else(|| Error::Protocol(format!("round {round} has not been closed")))
    }
}
