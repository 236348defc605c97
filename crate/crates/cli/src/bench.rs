//! Overhead benchmark scenarios.
//!
//! `short`: every sample reprograms the drive DDS, then runs a 10 µs pulse
//! and a 100 µs detection. `long`: the DDS is programmed once per point and
//! every sample waits 5 ms before the pulse and detection.

use qctl_core::experiment::{
    run_scan, t_min_of, ExecutionReport, ExperimentError, HostSink, SampleDurations, ScanAxis,
    ScanDefinition,
};
use qctl_core::system::ScanRig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Short,
    Long,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::Short, Scenario::Long];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::Short => "short",
            Scenario::Long => "long",
        }
    }

    fn wait_mu(self) -> i64 {
        match self {
            Scenario::Short => 0,
            Scenario::Long => 5_000_000,
        }
    }
}

pub const POINTS: usize = 20;
pub const SAMPLES: usize = 100;
pub const PULSE_MU: i64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub points: usize,
    pub samples_per_point: usize,
    pub buffer_size: usize,
    pub t_exe_mu: i64,
    pub t_min_mu: i64,
    pub overhead: f64,
}

/// Runs one scenario on `rig` and reports its overhead against the
/// declared physical durations.
pub fn run_scenario(
    rig: &mut ScanRig<'_>,
    scenario: Scenario,
    buffer_size: usize,
) -> Result<ScenarioReport, ExperimentError> {
    let scan = ScanDefinition::one_d(
        ScanAxis::linspace("phase_turns", 0.0, 0.95, POINTS),
        SAMPLES,
        buffer_size,
    );
    let timing = rig.hw.timing.clone();
    let wait = scenario.wait_mu();
    let sink = HostSink::new();
    let outcome = run_scan(
        rig,
        &scan,
        |rig, pt| {
            let phase = pt.coords[0];
            if scenario == Scenario::Short || pt.sample == 0 {
                rig.program(phase)?;
            }
            rig.prepare()?;
            rig.wait(wait)?;
            rig.hw
                .drive_pulse(rig.binding, &rig.cal, phase, PULSE_MU)?;
            Ok(rig.detect()?)
        },
        &sink,
    )?;
    let t_min = t_min_of(&scan, |_| SampleDurations {
        pulse_mu: timing.cool_mu + timing.pump_mu + PULSE_MU,
        detect_mu: timing.detect_mu,
        wait_mu: wait,
    });
    debug_assert_eq!(t_min, outcome.physical_mu);
    let report = ExecutionReport::new(outcome.record.t_exe_mu, t_min)?;
    Ok(ScenarioReport {
        scenario,
        points: POINTS,
        samples_per_point: SAMPLES,
        buffer_size,
        t_exe_mu: report.t_exe_mu,
        t_min_mu: report.t_min_mu,
        overhead: report.overhead,
    })
}

