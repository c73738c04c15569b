//! Duty-cycle encoded analog wire between two modules.
//!
//! A sender drives a 100 Hz PWM line whose duty cycle is `0.2 + 0.8 * value`.
//! The receiver polls the line in the background into a bounded FIFO of
//! binary samples and decodes the arithmetic mean of that queue. Because the
//! base duty is above the activation threshold, any attached sender is seen
//! as live, even when it transmits 0. An unplugged line reads as constant 0.
//!
//! Time is measured in integer microseconds.

use alloc::collections::{BTreeMap, VecDeque};
use core::fmt;

use rand::{Rng, RngCore};

use crate::vmc::clamp_unit;

pub const BASE_DUTY: f64 = 0.2;
pub const DUTY_SPAN: f64 = 0.8;
pub const PWM_FREQUENCY_HZ: f64 = 100.0;
pub const QUEUE_CAPACITY: usize = 5000;
pub const ACTIVATION_THRESHOLD: f64 = 0.1;
pub const DEFAULT_POLL_PERIOD_US: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelError {
    /// Only values in `[0, 1]` can be put on the wire.
    OutOfRange(f64),
    /// The receiver queue holds no samples yet.
    NotReady,
    AlreadyPlugged,
    NotPlugged,
    UnknownPort,
}

impl fmt::Display for ChannelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelError::OutOfRange(v) => write!(f, "value {v} is not encodable in [0, 1]"),
            ChannelError::NotReady => write!(f, "receiver queue is empty"),
            ChannelError::AlreadyPlugged => write!(f, "endpoint is already plugged"),
            ChannelError::NotPlugged => write!(f, "endpoint is not plugged"),
            ChannelError::UnknownPort => write!(f, "unknown port"),
        }
    }
}

impl core::error::Error for ChannelError {}

/// Instantaneous state of a PWM line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireSignal {
    pub duty_cycle: f64,
    pub frequency_hz: f64,
}

impl WireSignal {
    /// No sender attached.
    pub const IDLE: WireSignal = WireSignal { duty_cycle: 0.0, frequency_hz: PWM_FREQUENCY_HZ };
}

/// Maps a value in `[0, 1]` onto the duty range `[0.2, 1.0]`.
pub fn encode(value: f64) -> Result<WireSignal, ChannelError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(ChannelError::OutOfRange(value));
    }
    Ok(WireSignal { duty_cycle: BASE_DUTY + DUTY_SPAN * value, frequency_hz: PWM_FREQUENCY_HZ })
}

/// Inverse of [`encode`] on the duty statistic, clamped to `[0, 1]`.
pub fn duty_to_value(duty: f64) -> f64 {
    clamp_unit((duty - BASE_DUTY) / DUTY_SPAN)
}

/// Level of the line at a given phase, measured in PWM cycles since the
/// rising edge. The line is high during the first `duty_cycle` of a cycle.
pub fn sample(signal: WireSignal, phase_cycles: f64) -> bool {
    let frac = phase_cycles - libm::floor(phase_cycles);
    frac < signal.duty_cycle
}

/// A sample drawn at a uniformly random phase, i.e. Bernoulli(duty).
pub fn sample_bernoulli<R: Rng + ?Sized>(signal: WireSignal, rng: &mut R) -> bool {
    sample(signal, rng.gen::<f64>())
}

/// How polling instants relate to the PWM waveform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SamplingModel {
    /// Each poll lands uniformly inside its own poll period (a free-running,
    /// jittery polling clock). Marginally Bernoulli(duty), but consecutive
    /// samples cover the PWM cycle evenly.
    JitteredPhase,
    /// Every sample is an independent Bernoulli(duty) draw.
    IndependentBernoulli,
}

/// Bounded FIFO of binary samples with a running count of ones.
#[derive(Debug, Clone)]
pub struct SampleQueue {
    samples: VecDeque<bool>,
    ones: usize,
    capacity: usize,
}

impl SampleQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        SampleQueue { samples: VecDeque::with_capacity(capacity), ones: 0, capacity }
    }

    pub fn push(&mut self, bit: bool) {
        if self.samples.len() == self.capacity {
            if let Some(true) = self.samples.pop_front() {
                self.ones -= 1;
            }
        }
        self.samples.push_back(bit);
        if bit {
            self.ones += 1;
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mean(&self) -> Option<f64> {
        if self.samples.is_empty() {
            None
        } else {
            Some(self.ones as f64 / self.samples.len() as f64)
        }
    }

    pub fn clear(&mut self) {
        self.samples.clear();
        self.ones = 0;
    }
}

/// Result of reading a receiver pin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reading {
    /// Mean of the queued samples (the raw duty estimate).
    pub mean: f64,
    pub live: bool,
    /// Decoded value, present only when the line is live.
    pub value: Option<f64>,
}

/// Decodes the queue mean into liveness and value.
pub fn decode(queue: &SampleQueue, threshold: f64) -> Result<Reading, ChannelError> {
    let mean = queue.mean().ok_or(ChannelError::NotReady)?;
    Ok(reading_from_mean(mean, threshold))
}

fn reading_from_mean(mean: f64, threshold: f64) -> Reading {
    let live = mean > threshold;
    Reading { mean, live, value: live.then(|| duty_to_value(mean)) }
}

/// What a sender currently puts on a line.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LineLevel {
    Idle,
    Driven(f64),
}

impl LineLevel {
    pub fn signal(self) -> WireSignal {
        match self {
            LineLevel::Idle => WireSignal::IDLE,
            // values are validated when driven
            LineLevel::Driven(v) => encode(clamp_unit(v)).unwrap_or(WireSignal::IDLE),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceiverConfig {
    pub capacity: usize,
    pub threshold: f64,
    pub poll_period_us: u64,
    pub sampling: SamplingModel,
    /// Bypass sampling and report the driven value exactly.
    pub ideal: bool,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        ReceiverConfig {
            capacity: QUEUE_CAPACITY,
            threshold: ACTIVATION_THRESHOLD,
            poll_period_us: DEFAULT_POLL_PERIOD_US,
            sampling: SamplingModel::JitteredPhase,
            ideal: false,
        }
    }
}

impl ReceiverConfig {
    pub fn ideal() -> Self {
        ReceiverConfig { ideal: true, ..ReceiverConfig::default() }
    }
}

/// A receiver pin that polls its line into a sample queue.
///
/// Polling is evaluated lazily: level changes are recorded with their time
/// and the queue is brought up to date when the pin is read.
#[derive(Debug, Clone)]
pub struct ReceiverEndpoint<R> {
    config: ReceiverConfig,
    queue: SampleQueue,
    /// Level in effect before the first entry of `pending`.
    level: LineLevel,
    level_since_us: u64,
    pending: VecDeque<(u64, LineLevel)>,
    /// Index of the next poll tick to evaluate.
    next_tick: u64,
    rng: R,
}

impl<R: RngCore> ReceiverEndpoint<R> {
    pub fn new(config: ReceiverConfig, rng: R) -> Self {
        ReceiverEndpoint {
            queue: SampleQueue::new(config.capacity),
            config,
            level: LineLevel::Idle,
            level_since_us: 0,
            pending: VecDeque::new(),
            next_tick: 0,
            rng,
        }
    }

    /// Starts polling at `now_us`; earlier ticks are never sampled.
    pub fn start_at(mut self, now_us: u64) -> Self {
        self.next_tick = now_us.div_ceil(self.config.poll_period_us);
        self.level_since_us = now_us;
        self
    }

    pub fn config(&self) -> &ReceiverConfig {
        &self.config
    }

    pub fn queue(&self) -> &SampleQueue {
        &self.queue
    }

    /// Level most recently put on the line.
    pub fn line_level(&self) -> LineLevel {
        self.pending.back().map(|&(_, l)| l).unwrap_or(self.level)
    }

    /// Records a level change at `at_us`. Times earlier than the last
    /// recorded change are treated as simultaneous with it.
    pub fn drive(&mut self, at_us: u64, level: LineLevel) {
        let last = self.pending.back().map(|&(t, _)| t).unwrap_or(self.level_since_us);
        self.pending.push_back((at_us.max(last), level));
    }

    /// Evaluates all poll ticks up to and including `now_us`.
    pub fn poll_until(&mut self, now_us: u64) {
        let period = self.config.poll_period_us;
        let last_tick = now_us / period;
        if last_tick < self.next_tick {
            return;
        }
        // Only the newest `capacity` ticks can influence the queue.
        let span = last_tick - self.next_tick + 1;
        if span > self.config.capacity as u64 {
            let skip_to = last_tick + 1 - self.config.capacity as u64;
            self.advance_level_to(skip_to * period);
            self.next_tick = skip_to;
        }
        while self.next_tick <= last_tick {
            let t = self.next_tick * period;
            self.advance_level_to(t);
            // run of ticks that share the current level
            let run_end = match self.pending.front() {
                Some(&(change, _)) => (change.div_ceil(period)).min(last_tick + 1),
                None => last_tick + 1,
            }
            .max(self.next_tick + 1);
            let signal = self.level.signal();
            for tick in self.next_tick..run_end {
                let bit = self.draw(signal, tick);
                self.queue.push(bit);
            }
            self.next_tick = run_end;
        }
    }

    fn advance_level_to(&mut self, t_us: u64) {
        while let Some(&(change, level)) = self.pending.front() {
            if change <= t_us {
                self.level = level;
                self.level_since_us = change;
                self.pending.pop_front();
            } else {
                break;
            }
        }
    }

    fn draw(&mut self, signal: WireSignal, tick: u64) -> bool {
        if signal.duty_cycle <= 0.0 {
            return false;
        }
        if signal.duty_cycle >= 1.0 {
            return true;
        }
        match self.config.sampling {
            SamplingModel::IndependentBernoulli => sample_bernoulli(signal, &mut self.rng),
            SamplingModel::JitteredPhase => {
                let period_s = self.config.poll_period_us as f64 * 1e-6;
                let jitter: f64 = self.rng.gen();
                let phase = (tick as f64 + jitter) * period_s * signal.frequency_hz;
                sample(signal, phase)
            }
        }
    }

    /// Brings the queue up to `now_us` and decodes it.
    pub fn read(&mut self, now_us: u64) -> Result<Reading, ChannelError> {
        if self.config.ideal {
            self.advance_level_to(now_us);
            return Ok(match self.level {
                LineLevel::Idle => Reading { mean: 0.0, live: false, value: None },
                LineLevel::Driven(v) => {
                    Reading { mean: BASE_DUTY + DUTY_SPAN * v, live: true, value: Some(v) }
                }
            });
        }
        self.poll_until(now_us);
        decode(&self.queue, self.config.threshold)
    }
}

/// Named transmit and receive pins plus the cables between them.
///
/// `P` identifies a pin. Each cable joins one transmit pin to one receive
/// pin; either end can take part in at most one cable.
#[derive(Debug, Clone)]
pub struct Patchbay<P, R> {
    outputs: BTreeMap<P, LineLevel>,
    inputs: BTreeMap<P, ReceiverEndpoint<R>>,
    cables: BTreeMap<P, P>,
    cables_rev: BTreeMap<P, P>,
}

impl<P: Ord + Clone, R: RngCore> Default for Patchbay<P, R> {
    fn default() -> Self {
        Patchbay {
            outputs: BTreeMap::new(),
            inputs: BTreeMap::new(),
            cables: BTreeMap::new(),
            cables_rev: BTreeMap::new(),
        }
    }
}

impl<P: Ord + Clone, R: RngCore> Patchbay<P, R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_output(&mut self, pin: P) {
        self.outputs.entry(pin).or_insert(LineLevel::Idle);
    }

    pub fn add_input(&mut self, pin: P, endpoint: ReceiverEndpoint<R>) {
        self.inputs.insert(pin, endpoint);
    }

    pub fn has_input(&self, pin: &P) -> bool {
        self.inputs.contains_key(pin)
    }

    pub fn input(&self, pin: &P) -> Option<&ReceiverEndpoint<R>> {
        self.inputs.get(pin)
    }

    /// Receive pin currently cabled to `tx`.
    pub fn peer_of_output(&self, tx: &P) -> Option<&P> {
        self.cables.get(tx)
    }

    pub fn peer_of_input(&self, rx: &P) -> Option<&P> {
        self.cables_rev.get(rx)
    }

    pub fn is_plugged(&self, tx: &P, rx: &P) -> bool {
        self.cables.get(tx) == Some(rx)
    }

    pub fn cable_count(&self) -> usize {
        self.cables.len()
    }

    pub fn plug(&mut self, tx: &P, rx: &P, now_us: u64) -> Result<(), ChannelError> {
        let level = *self.outputs.get(tx).ok_or(ChannelError::UnknownPort)?;
        if !self.inputs.contains_key(rx) {
            return Err(ChannelError::UnknownPort);
        }
        if self.cables.contains_key(tx) || self.cables_rev.contains_key(rx) {
            return Err(ChannelError::AlreadyPlugged);
        }
        self.cables.insert(tx.clone(), rx.clone());
        self.cables_rev.insert(rx.clone(), tx.clone());
        if let Some(endpoint) = self.inputs.get_mut(rx) {
            endpoint.drive(now_us, level);
        }
        Ok(())
    }

    pub fn unplug(&mut self, tx: &P, rx: &P, now_us: u64) -> Result<(), ChannelError> {
        if !self.is_plugged(tx, rx) {
            return Err(ChannelError::NotPlugged);
        }
        self.cables.remove(tx);
        self.cables_rev.remove(rx);
        if let Some(endpoint) = self.inputs.get_mut(rx) {
            endpoint.drive(now_us, LineLevel::Idle);
        }
        Ok(())
    }

    /// Sets the value a transmit pin sends.
    pub fn transmit(&mut self, tx: &P, value: f64, now_us: u64) -> Result<(), ChannelError> {
        encode(value)?;
        self.set_level(tx, LineLevel::Driven(value), now_us)
    }

    /// Sets any finite non-negative value, skipping the analog range check.
    /// Ideal receivers report it as sent; sampling receivers see the line
    /// saturate at 1.
    pub fn transmit_exact(&mut self, tx: &P, value: f64, now_us: u64) -> Result<(), ChannelError> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(ChannelError::OutOfRange(value));
        }
        self.set_level(tx, LineLevel::Driven(value), now_us)
    }

    /// Stops driving a transmit pin, e.g. when its process halts.
    pub fn silence(&mut self, tx: &P, now_us: u64) -> Result<(), ChannelError> {
        self.set_level(tx, LineLevel::Idle, now_us)
    }

    fn set_level(&mut self, tx: &P, level: LineLevel, now_us: u64) -> Result<(), ChannelError> {
        let out = self.outputs.get_mut(tx).ok_or(ChannelError::UnknownPort)?;
        if *out == level {
            return Ok(());
        }
        *out = level;
        if let Some(rx) = self.cables.get(tx) {
            if let Some(endpoint) = self.inputs.get_mut(rx) {
                endpoint.drive(now_us, level);
            }
        }
        Ok(())
    }

    pub fn read(&mut self, rx: &P, now_us: u64) -> Result<Reading, ChannelError> {
        self.inputs.get_mut(rx).ok_or(ChannelError::UnknownPort)?.read(now_us)
    }
}
