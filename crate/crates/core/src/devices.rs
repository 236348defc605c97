//! Real-time device drivers on top of the RTIO model.
//!
//! Drivers turn calls into output events and input windows. Devices that
//! need programming time get a delay inserted on the timeline after the
//! programming event; how long that delay is depends on the [`DelayPolicy`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rtio::{CoreState, RtioError, Timestamp, WindowHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Dds,
    Ttl,
    Counter,
}

impl DeviceKind {
    pub fn label(self) -> &'static str {
        match self {
            DeviceKind::Dds => "dds",
            DeviceKind::Ttl => "ttl",
            DeviceKind::Counter => "counter",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMode {
    /// Every programming call waits the worst-case delay.
    WorstCase,
    /// Each (device kind, function) waits its own tuned delay.
    PerFunction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayPolicy {
    pub mode: DelayMode,
    pub worst_case_mu: i64,
    /// Keyed by `"<kind>.<function>"`, e.g. `"dds.set"`.
    pub per_function: BTreeMap<String, i64>,
}

impl Default for DelayPolicy {
    fn default() -> Self {
        Self {
            mode: DelayMode::PerFunction,
            worst_case_mu: 200_000,
            per_function: default_per_function(),
        }
    }
}

fn default_per_function() -> BTreeMap<String, i64> {
    [("dds.set", 1_500), ("ttl.pulse", 0), ("ttl.on", 0), ("ttl.off", 0)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

impl DelayPolicy {
    pub fn worst_case() -> Self {
        Self {
            mode: DelayMode::WorstCase,
            ..Self::default()
        }
    }

    pub fn per_function() -> Self {
        Self::default()
    }

    pub fn with_mode(&self, mode: DelayMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.worst_case_mu < 0 {
            return Err(DeviceError::InvalidParameter(
                "worst_case_mu must be >= 0".into(),
            ));
        }
        for (k, v) in &self.per_function {
            if *v < 0 || *v > self.worst_case_mu {
                return Err(DeviceError::InvalidParameter(format!(
                    "delay for {k} ({v} mu) outside [0, {}]",
                    self.worst_case_mu
                )));
            }
        }
        Ok(())
    }

    /// Timeline delay after `function` on a device of `kind`. Functions that
    /// do not program the device get no delay under the worst-case policy.
    pub fn delay_for(&self, kind: DeviceKind, function: &str, programs_device: bool) -> i64 {
        match self.mode {
            DelayMode::WorstCase => {
                if programs_device {
                    self.worst_case_mu
                } else {
                    0
                }
            }
            DelayMode::PerFunction => {
                let key = format!("{}.{}", kind.label(), function);
                match self.per_function.get(&key) {
                    Some(v) => *v,
                    None if programs_device => self.worst_case_mu,
                    None => 0,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeviceError {
    #[error(transparent)]
    Rtio(#[from] RtioError),
    #[error("invalid device parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdsDevice {
    pub key: String,
    pub channel: u32,
    pub freq_hz: f64,
    pub phase_turns: f64,
    pub amp_frac: f64,
}

impl DdsDevice {
    pub fn new(key: impl Into<String>, channel: u32, freq_hz: f64) -> Self {
        Self {
            key: key.into(),
            channel,
            freq_hz,
            phase_turns: 0.0,
            amp_frac: 1.0,
        }
    }

    /// Register word carried by a programming event: 16-bit phase offset
    /// word in the high half, 14-bit amplitude scale in the low half.
    pub fn payload(phase_turns: f64, amp_frac: f64) -> u32 {
        let pow = ((phase_turns * 65_536.0).round() as u32) & 0xffff;
        let asf = (amp_frac * 16_383.0).round() as u32 & 0x3fff;
        (pow << 16) | asf
    }

    pub fn set(
        &mut self,
        core: &mut CoreState,
        policy: &DelayPolicy,
        freq_hz: f64,
        phase_turns: f64,
        amp_frac: f64,
    ) -> Result<(), DeviceError> {
        if !(freq_hz > 0.0 && freq_hz.is_finite()) {
            return Err(DeviceError::InvalidParameter(format!(
                "{}: frequency must be positive, got {freq_hz}",
                self.key
            )));
        }
        if !(0.0..1.0).contains(&phase_turns) {
            return Err(DeviceError::InvalidParameter(format!(
                "{}: phase must be in [0, 1) turns, got {phase_turns}",
                self.key
            )));
        }
        if !(0.0..=1.0).contains(&amp_frac) {
            return Err(DeviceError::InvalidParameter(format!(
                "{}: amplitude must be in [0, 1], got {amp_frac}",
                self.key
            )));
        }
        core.post_output(self.channel, Self::payload(phase_turns, amp_frac))?;
        self.freq_hz = freq_hz;
        self.phase_turns = phase_turns;
        self.amp_frac = amp_frac;
        core.delay_mu(policy.delay_for(DeviceKind::Dds, "set", true))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtlDevice {
    pub key: String,
    pub channel: u32,
    pub state: bool,
}

impl TtlDevice {
    pub fn new(key: impl Into<String>, channel: u32) -> Self {
        Self {
            key: key.into(),
            channel,
            state: false,
        }
    }

    pub fn on(&mut self, core: &mut CoreState, policy: &DelayPolicy) -> Result<(), DeviceError> {
        core.post_output(self.channel, 1)?;
        self.state = true;
        core.delay_mu(policy.delay_for(DeviceKind::Ttl, "on", false))?;
        Ok(())
    }

    pub fn off(&mut self, core: &mut CoreState, policy: &DelayPolicy) -> Result<(), DeviceError> {
        core.post_output(self.channel, 0)?;
        self.state = false;
        core.delay_mu(policy.delay_for(DeviceKind::Ttl, "off", false))?;
        Ok(())
    }

    /// On at the cursor, off `duration` later; the cursor ends at the off event.
    pub fn pulse(
        &mut self,
        core: &mut CoreState,
        policy: &DelayPolicy,
        duration: i64,
    ) -> Result<(), DeviceError> {
        if duration <= 0 {
            return Err(DeviceError::InvalidParameter(format!(
                "{}: pulse duration must be positive, got {duration} mu",
                self.key
            )));
        }
        core.post_output(self.channel, 1)?;
        core.delay_mu(duration)?;
        core.post_output(self.channel, 0)?;
        self.state = false;
        core.delay_mu(policy.delay_for(DeviceKind::Ttl, "pulse", false))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterDevice {
    pub key: String,
    pub channel: u32,
}

/// A detection window whose count can be redeemed with [`CountHandle::read`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountHandle {
    pub window: WindowHandle,
}

impl CountHandle {
    pub fn end(&self) -> Timestamp {
        self.window.end
    }

    /// Blocking read; the wall clock stalls until the window has closed.
    /// Windows on one channel are read oldest first.
    pub fn read(self, core: &mut CoreState) -> Result<u64, DeviceError> {
        Ok(core.read_input_count(self.window.channel)?)
    }
}

impl CounterDevice {
    pub fn new(key: impl Into<String>, channel: u32) -> Self {
        Self {
            key: key.into(),
            channel,
        }
    }

    /// Opens a counting window at the cursor. `source` produces the photon
    /// count from the physics state at the window start.
    pub fn count_window(
        &self,
        core: &mut CoreState,
        duration: i64,
        source: impl FnOnce(Timestamp, Timestamp) -> u64,
    ) -> Result<CountHandle, DeviceError> {
        if duration <= 0 {
            return Err(DeviceError::InvalidParameter(format!(
                "{}: window duration must be positive, got {duration} mu",
                self.key
            )));
        }
        let window = core.open_input_window_with(self.channel, duration, source)?;
        Ok(CountHandle { window })
    }
}
