//! Discrete-event engine: virtual clock, ordered event queue and seeded
//! random streams.
//!
//! Events are ordered by `(fire_at, seq)`. `seq` is a per-engine insertion
//! counter, so two events scheduled for the same tick fire in the order they
//! were scheduled. An event's `seq` doubles as its [`EventId`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Simulated time in integer nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Rounds a non-negative real number of nanoseconds half-up to whole ticks.
pub fn round_half_up(ns: f64) -> SimTime {
    debug_assert!(ns >= 0.0 && ns.is_finite());
    SimTime((ns + 0.5).floor() as u64)
}

/// Stable handle for a scheduled event.
pub type EventId = u64;

/// Named random stream. Each stream is an independent counter-based sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamId(pub u64);

impl StreamId {
    pub const SNN_WEIGHTS: StreamId = StreamId(1);
    pub const WORKLOAD: StreamId = StreamId(2);
    pub const SCENARIO: StreamId = StreamId(3);
}

/// Payloads must be able to describe themselves for the event trace.
pub trait TracePayload {
    fn kind(&self) -> &'static str;
    /// Free-form detail. Must not contain commas or newlines.
    fn detail(&self) -> String;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("cannot schedule at {at} before current time {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
}

/// An event as handed to the run loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent<E> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub payload: E,
}

/// Deterministic single-threaded event engine.
pub struct Engine<E> {
    now: SimTime,
    next_seq: u64,
    queue: BTreeMap<(SimTime, u64), E>,
    index: HashMap<EventId, SimTime>,
    seed: u64,
    streams: BTreeMap<StreamId, ChaCha8Rng>,
    trace: Option<Vec<String>>,
    processed: u64,
}

impl<E: TracePayload> Engine<E> {
    pub fn new(seed: u64) -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BTreeMap::new(),
            index: HashMap::new(),
            seed,
            streams: BTreeMap::new(),
            trace: None,
            processed: 0,
        }
    }

    /// Enables the `tick,seq,kind,detail` trace for all subsequently
    /// processed events.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn schedule(&mut self, payload: E, at: SimTime) -> Result<EventId, SimError> {
        if at < self.now {
            return Err(SimError::SchedulingInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at, seq), payload);
        self.index.insert(seq, at);
        Ok(seq)
    }

    /// Schedules `payload` at `now + delay`. Never fails.
    pub fn schedule_in(&mut self, payload: E, delay: SimTime) -> EventId {
        let at = self.now + delay;
        self.schedule(payload, at).expect("future time")
    }

    /// Removes a pending event, returning its fire time and payload.
    pub fn cancel(&mut self, id: EventId) -> Option<(SimTime, E)> {
        let at = self.index.remove(&id)?;
        self.queue.remove(&(at, id)).map(|p| (at, p))
    }

    pub fn fire_time(&self, id: EventId) -> Option<SimTime> {
        self.index.get(&id).copied()
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.keys().next().map(|&(t, _)| t)
    }

    /// Pops the next event if it fires at or before `t_end`, advancing the
    /// clock to its fire time.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<SimEvent<E>> {
        let (&(at, seq), _) = self.queue.iter().next()?;
        if at > t_end {
            return None;
        }
        let payload = self.queue.remove(&(at, seq)).expect("present");
        self.index.remove(&seq);
        debug_assert!(at >= self.now);
        self.now = at;
        self.processed += 1;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(format!(
                "{},{},{},{}",
                at.0,
                seq,
                payload.kind(),
                payload.detail()
            ));
        }
        Some(SimEvent {
            fire_at: at,
            seq,
            payload,
        })
    }

    /// Advances the clock without processing anything. Never moves backwards.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Processes every event with `fire_at <= t_end`, handing each to
    /// `handler`, then advances the clock to `t_end`.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, SimEvent<E>),
    {
        let mut count = 0;
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev);
            count += 1;
        }
        self.advance_to(t_end);
        count
    }

    /// Uniform value in `[0, 1)` that depends only on the engine seed, the
    /// stream and how many values the stream has produced so far.
    pub fn rng_next(&mut self, stream: StreamId) -> f64 {
        let bits = self.stream(stream).next_u64() >> 11;
        bits as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn rng_below(&mut self, stream: StreamId, n: u64) -> u64 {
        assert!(n > 0);
        ((self.rng_next(stream) * n as f64) as u64).min(n - 1)
    }

    fn stream(&mut self, stream: StreamId) -> &mut ChaCha8Rng {
        let seed = self.seed;
        self.streams.entry(stream).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream.0);
            rng
        })
    }

    pub fn trace_lines(&self) -> &[String] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn take_trace(&mut self) -> Vec<String> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

/// Header row for trace dumps.
pub const TRACE_HEADER: &str = "tick,seq,kind,detail";
