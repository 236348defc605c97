//! Deterministic discrete-event model of the core device.
//!
//! The kernel CPU owns a wall clock (`wall_mu`, hardware "now") and a
//! timeline cursor (`cursor_mu`) at which new events are placed. Output
//! events wait in per-channel FIFOs until the wall clock passes their
//! timestamp; input windows wait in per-channel buffers until they are read.
//! Every CPU action advances the wall clock by a configurable cost, so the
//! execution time of a kernel is fully determined by its instruction stream.
//!
//! 1 mu = 1 ns.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Machine-time position on the timeline, in mu.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);
    pub const MAX: Timestamp = Timestamp(i64::MAX);
    pub const MIN: Timestamp = Timestamp(i64::MIN);

    #[inline]
    pub fn mu(self) -> i64 {
        self.0
    }

    /// `self + delta`, failing instead of wrapping.
    pub fn checked_offset(self, delta_mu: i64) -> Result<Timestamp, RtioError> {
        self.0
            .checked_add(delta_mu)
            .map(Timestamp)
            .ok_or(RtioError::ArithmeticOverflow {
                base_mu: self.0,
                delta_mu,
            })
    }

    /// Signed distance `self - earlier`, saturating at the i64 range.
    #[inline]
    pub fn since(self, earlier: Timestamp) -> i64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} mu", self.0)
    }
}

/// Instruction classes the CPU cost model charges for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionClass {
    EventPost,
    InputRead,
    Arithmetic,
    RpcSyncRoundtrip,
    RpcAsyncEnqueue,
}

/// Wall-clock cost (mu) of each instruction class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpuCost {
    pub event_post: i64,
    pub input_read: i64,
    pub arithmetic: i64,
    pub rpc_sync_roundtrip: i64,
    pub rpc_async_enqueue: i64,
}

impl Default for CpuCost {
    fn default() -> Self {
        Self {
            event_post: 8,
            input_read: 8,
            arithmetic: 1,
            rpc_sync_roundtrip: 2_000_000,
            rpc_async_enqueue: 1_000,
        }
    }
}

impl CpuCost {
    pub fn of(&self, class: InstructionClass) -> i64 {
        match class {
            InstructionClass::EventPost => self.event_post,
            InstructionClass::InputRead => self.input_read,
            InstructionClass::Arithmetic => self.arithmetic,
            InstructionClass::RpcSyncRoundtrip => self.rpc_sync_roundtrip,
            InstructionClass::RpcAsyncEnqueue => self.rpc_async_enqueue,
        }
    }
}

/// Static configuration of a simulated core device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoreConfig {
    /// mu per fine timestep; durations converted from seconds snap to this grid.
    pub ref_period_mu: i64,
    /// Maximum pending output events per channel.
    pub fifo_depth: usize,
    /// Maximum unread input windows per channel.
    pub input_buffer_capacity: usize,
    pub cpu_cost: CpuCost,
    /// Cursor lead over the wall clock when a kernel starts.
    pub initial_slack_mu: i64,
    /// Cursor lead re-established by [`CoreState::ensure_slack`].
    pub resync_slack_mu: i64,
    /// Keep consumed events in the execution record. Long benchmark runs
    /// turn this off to bound memory; event counters are kept either way.
    pub record_events: bool,
}

impl Default for CoreConfig {
    fn default() -> Self {
        Self {
            ref_period_mu: 1,
            fifo_depth: 64,
            input_buffer_capacity: 64,
            cpu_cost: CpuCost::default(),
            initial_slack_mu: 125_000,
            resync_slack_mu: 10_000,
            record_events: true,
        }
    }
}

impl CoreConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.cpu_cost;
        let costs = [
            ("event_post", c.event_post),
            ("input_read", c.input_read),
            ("arithmetic", c.arithmetic),
            ("rpc_sync_roundtrip", c.rpc_sync_roundtrip),
            ("rpc_async_enqueue", c.rpc_async_enqueue),
        ];
        if let Some((name, v)) = costs.iter().find(|(_, v)| *v < 0) {
            return Err(ConfigError::NegativeCost {
                class: (*name).to_string(),
                value: *v,
            });
        }
        if self.fifo_depth < 1 {
            return Err(ConfigError::Invalid("fifo_depth must be >= 1".into()));
        }
        if self.input_buffer_capacity < 1 {
            return Err(ConfigError::Invalid(
                "input_buffer_capacity must be >= 1".into(),
            ));
        }
        if self.ref_period_mu < 1 {
            return Err(ConfigError::Invalid("ref_period_mu must be >= 1".into()));
        }
        if self.initial_slack_mu < 0 || self.resync_slack_mu < 0 {
            return Err(ConfigError::Invalid("slack values must be >= 0".into()));
        }
        Ok(())
    }

    /// Converts seconds to mu on the fine-timestep grid.
    pub fn seconds_to_mu(&self, seconds: f64) -> i64 {
        let steps = (seconds * 1e9 / self.ref_period_mu as f64).round();
        steps as i64 * self.ref_period_mu
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("cpu cost for {class} is negative ({value})")]
    NegativeCost { class: String, value: i64 },
    #[error("{0}")]
    Invalid(String),
}

/// A timestamped output event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RtioEvent {
    pub channel: u32,
    #[serde(rename = "t_mu")]
    pub timestamp: Timestamp,
    pub payload: u32,
}

/// A registered input gate. `count` is fixed when the window is opened and
/// becomes observable once the wall clock reaches `end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputWindow {
    pub start: Timestamp,
    pub end: Timestamp,
    pub count: u64,
}

/// Returned by [`CoreState::open_input_window`]; identifies the window by
/// channel and end time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowHandle {
    pub channel: u32,
    pub start: Timestamp,
    pub end: Timestamp,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChannelState {
    pub last_posted: Option<Timestamp>,
    pub pending_outputs: VecDeque<RtioEvent>,
    pub input_windows: VecDeque<InputWindow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RtioError {
    #[error("RTIO underflow on channel {}: event at {} with slack {slack_mu} mu", event.channel, event.timestamp)]
    Underflow {
        event: RtioEvent,
        wall_mu: i64,
        slack_mu: i64,
    },
    #[error("RTIO sequence error on channel {}: event at {} precedes last event at {last_mu} mu", event.channel, event.timestamp)]
    Sequence { event: RtioEvent, last_mu: i64 },
    #[error("output FIFO of channel {} full ({depth} pending events)", event.channel)]
    FifoOverflow { event: RtioEvent, depth: usize },
    #[error("input buffer of channel {channel} full ({capacity} unread windows)")]
    InputBufferOverflow { channel: u32, capacity: usize },
    #[error("no input window pending on channel {channel}")]
    NoWindowPending { channel: u32 },
    #[error("timeline arithmetic overflow: {base_mu} + {delta_mu}")]
    ArithmeticOverflow { base_mu: i64, delta_mu: i64 },
    #[error("duration must be positive, got {duration_mu} mu")]
    InvalidDuration { duration_mu: i64 },
    #[error("channel {channel} does not exist")]
    InvalidChannel { channel: u32 },
}

/// Result of one kernel execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub t_exe_mu: i64,
    pub events: Vec<RtioEvent>,
    pub error: Option<RtioError>,
}

impl ExecutionRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("execution record serializes")
    }
}

/// A kernel's execution record paired with the kernel's own return value.
#[derive(Debug)]
pub struct KernelRun<T, E> {
    pub record: ExecutionRecord,
    pub outcome: Result<T, E>,
}

/// Full mutable state of a simulated core device.
#[derive(Debug, Clone)]
pub struct CoreState {
    config: CoreConfig,
    cursor: Timestamp,
    wall: Timestamp,
    channels: Vec<ChannelState>,
    event_log: Vec<RtioEvent>,
    events_consumed: u64,
    kernel_start: Timestamp,
    fault: Option<RtioError>,
}

impl CoreState {
    pub fn new(config: CoreConfig, num_channels: usize) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            cursor: Timestamp(config.initial_slack_mu),
            wall: Timestamp::ZERO,
            channels: vec![ChannelState::default(); num_channels],
            event_log: Vec::new(),
            events_consumed: 0,
            kernel_start: Timestamp::ZERO,
            fault: None,
            config,
        })
    }

    /// Turns event logging on or off for subsequent posts.
    pub fn set_record_events(&mut self, on: bool) {
        self.config.record_events = on;
    }

    pub fn config(&self) -> &CoreConfig {
        &self.config
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, channel: u32) -> Option<&ChannelState> {
        self.channels.get(channel as usize)
    }

    /// The timeline cursor.
    pub fn now_mu(&self) -> Timestamp {
        self.cursor
    }

    /// Hardware "now".
    pub fn wall_mu(&self) -> Timestamp {
        self.wall
    }

    pub fn slack_mu(&self) -> i64 {
        self.cursor.since(self.wall)
    }

    /// Events consumed so far in the current kernel.
    pub fn event_log(&self) -> &[RtioEvent] {
        &self.event_log
    }

    /// Total number of events consumed, including those not recorded.
    pub fn events_consumed(&self) -> u64 {
        self.events_consumed
    }

    pub fn delay_mu(&mut self, d: i64) -> Result<(), RtioError> {
        let next = self.cursor.checked_offset(d).map_err(|e| self.fail(e))?;
        self.cursor = next;
        Ok(())
    }

    pub fn at_mu(&mut self, t: Timestamp) {
        self.cursor = t;
    }

    /// Moves the cursor to `wall + resync_slack_mu` if the current slack is
    /// smaller than that. Returns the number of mu the cursor moved.
    pub fn ensure_slack(&mut self) -> i64 {
        let target = Timestamp(self.wall.0.saturating_add(self.config.resync_slack_mu));
        if self.cursor < target {
            let moved = target.since(self.cursor);
            self.cursor = target;
            moved
        } else {
            0
        }
    }

    /// Advances the wall clock by the cost of one instruction of `class`.
    pub fn charge(&mut self, class: InstructionClass) {
        let cost = self.config.cpu_cost.of(class);
        self.advance_wall(cost);
    }

    fn advance_wall(&mut self, mu: i64) {
        self.wall = Timestamp(self.wall.0.saturating_add(mu));
        self.drain(false);
    }

    fn advance_wall_to(&mut self, t: Timestamp) {
        if t > self.wall {
            self.wall = t;
            self.drain(false);
        }
    }

    /// Moves events out of the FIFOs into the log. Without `all`, only
    /// events strictly before the wall clock are consumed; anything later
    /// posted has a timestamp at or after the wall, so the log stays sorted
    /// by (timestamp, channel).
    fn drain(&mut self, all: bool) {
        let wall = self.wall;
        let mut batch = Vec::new();
        for ch in &mut self.channels {
            while let Some(ev) = ch.pending_outputs.front() {
                if all || ev.timestamp < wall {
                    batch.push(*ev);
                    ch.pending_outputs.pop_front();
                } else {
                    break;
                }
            }
        }
        if batch.is_empty() {
            return;
        }
        batch.sort_by_key(|e| (e.timestamp, e.channel));
        self.events_consumed += batch.len() as u64;
        if self.config.record_events {
            self.event_log.extend(batch);
        }
    }

    fn fail(&mut self, err: RtioError) -> RtioError {
        self.fault = Some(err.clone());
        err
    }

    fn channel_index(&mut self, channel: u32) -> Result<usize, RtioError> {
        if (channel as usize) < self.channels.len() {
            Ok(channel as usize)
        } else {
            Err(self.fail(RtioError::InvalidChannel { channel }))
        }
    }

    /// Places an output event at the cursor.
    pub fn post_output(&mut self, channel: u32, payload: u32) -> Result<(), RtioError> {
        let idx = self.channel_index(channel)?;
        let event = RtioEvent {
            channel,
            timestamp: self.cursor,
            payload,
        };
        if self.cursor < self.wall {
            let err = RtioError::Underflow {
                event,
                wall_mu: self.wall.0,
                slack_mu: self.slack_mu(),
            };
            return Err(self.fail(err));
        }
        let ch = &self.channels[idx];
        if let Some(last) = ch.last_posted {
            if self.cursor < last {
                let err = RtioError::Sequence {
                    event,
                    last_mu: last.0,
                };
                return Err(self.fail(err));
            }
        }
        if ch.pending_outputs.len() >= self.config.fifo_depth {
            let err = RtioError::FifoOverflow {
                event,
                depth: self.config.fifo_depth,
            };
            return Err(self.fail(err));
        }
        let ch = &mut self.channels[idx];
        ch.pending_outputs.push_back(event);
        ch.last_posted = Some(self.cursor);
        self.charge(InstructionClass::EventPost);
        Ok(())
    }

    /// Opens an input window of `duration` at the cursor and advances the
    /// cursor past it. The window records a count of zero.
    pub fn open_input_window(
        &mut self,
        channel: u32,
        duration: i64,
    ) -> Result<WindowHandle, RtioError> {
        self.open_input_window_with(channel, duration, |_, _| 0)
    }

    /// Like [`open_input_window`](Self::open_input_window), with `source`
    /// supplying the count that the hardware will report for the window.
    /// `source` is evaluated at the window start.
    pub fn open_input_window_with(
        &mut self,
        channel: u32,
        duration: i64,
        source: impl FnOnce(Timestamp, Timestamp) -> u64,
    ) -> Result<WindowHandle, RtioError> {
        let idx = self.channel_index(channel)?;
        if duration <= 0 {
            return Err(self.fail(RtioError::InvalidDuration {
                duration_mu: duration,
            }));
        }
        if self.channels[idx].input_windows.len() >= self.config.input_buffer_capacity {
            let err = RtioError::InputBufferOverflow {
                channel,
                capacity: self.config.input_buffer_capacity,
            };
            return Err(self.fail(err));
        }
        // The gate opening is itself a timeline event.
        if self.cursor < self.wall {
            let err = RtioError::Underflow {
                event: RtioEvent {
                    channel,
                    timestamp: self.cursor,
                    payload: 0,
                },
                wall_mu: self.wall.0,
                slack_mu: self.slack_mu(),
            };
            return Err(self.fail(err));
        }
        let start = self.cursor;
        let end = start.checked_offset(duration).map_err(|e| self.fail(e))?;
        let count = source(start, end);
        self.channels[idx].input_windows.push_back(InputWindow { start, end, count });
        self.cursor = end;
        self.charge(InstructionClass::EventPost);
        Ok(WindowHandle {
            channel,
            start,
            end,
        })
    }

    /// Blocking read of the oldest window on `channel`. Stalls the wall clock
    /// until the window has closed.
    pub fn read_input_count(&mut self, channel: u32) -> Result<u64, RtioError> {
        let idx = self.channel_index(channel)?;
        let Some(window) = self.channels[idx].input_windows.pop_front() else {
            return Err(self.fail(RtioError::NoWindowPending { channel }));
        };
        self.advance_wall_to(window.end);
        self.charge(InstructionClass::InputRead);
        Ok(window.count)
    }

    /// Number of unread windows on `channel`.
    pub fn pending_windows(&self, channel: u32) -> usize {
        self.channels
            .get(channel as usize)
            .map_or(0, |c| c.input_windows.len())
    }

    /// Advances the wall clock to the latest pending event and consumes
    /// everything left in the FIFOs.
    pub fn flush(&mut self) {
        let latest = self
            .channels
            .iter()
            .filter_map(|c| c.pending_outputs.back().map(|e| e.timestamp))
            .max();
        if let Some(latest) = latest {
            self.advance_wall_to(latest);
        }
        self.drain(true);
    }

    /// Starts a kernel: clears the log and fault, drops unread input
    /// windows, and gives the cursor the initial slack.
    pub fn begin_kernel(&mut self) {
        self.event_log.clear();
        self.events_consumed = 0;
        self.fault = None;
        for ch in &mut self.channels {
            ch.input_windows.clear();
        }
        self.kernel_start = self.wall;
        self.cursor = Timestamp(self.wall.0.saturating_add(self.config.initial_slack_mu));
    }

    /// Ends a kernel: flushes outputs and builds the execution record.
    /// `failed` attaches the most recent RTIO fault, if any.
    pub fn finish_kernel(&mut self, failed: bool) -> ExecutionRecord {
        self.flush();
        let error = if failed { self.fault.take() } else { None };
        self.fault = None;
        ExecutionRecord {
            t_exe_mu: self.wall.since(self.kernel_start),
            events: std::mem::take(&mut self.event_log),
            error,
        }
    }

    /// Executes `kernel` against this core and measures its execution time.
    pub fn run_kernel<T, E>(
        &mut self,
        kernel: impl FnOnce(&mut CoreState) -> Result<T, E>,
    ) -> KernelRun<T, E> {
        self.begin_kernel();
        let outcome = kernel(self);
        let record = self.finish_kernel(outcome.is_err());
        KernelRun { record, outcome }
    }
}
